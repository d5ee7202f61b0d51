use super::checkpoint::Checkpoint;
use super::*;
use crate::bytes_tok::tokenize;

fn small(embedding: EmbeddingMode, fusion: FusionKind) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        ffn_dim: 32,
        heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        dropout: 0.0,
        embedding,
        fusion,
        shallow_layers: 1,
        word_layers: 1,
        ..Default::default()
    }
}

fn one_hot_small() -> ModelConfig {
    ModelConfig {
        d_model: 264,
        ffn_dim: 64,
        heads: 4,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        word_layers: 1,
        ..Default::default()
    }
}

#[test]
fn one_hot_embedding_row() {
    let model = Seq2Seq::<f64>::new(one_hot_small(), 0).unwrap();
    let x = model.embed(&[97]).unwrap();
    let pe = sinusoidal_positions::<f64>(1, 264);
    for c in 0..264 {
        let expected = pe.data()[c] + if c == 97 { 1.0 } else { 0.0 };
        assert_eq!(x.data()[c], expected);
    }
}

#[test]
fn one_hot_mode_has_no_embedding_parameters() {
    let model = Seq2Seq::<f32>::new(one_hot_small(), 0).unwrap();
    assert!(model.params().iter().all(|(n, _)| !n.starts_with("embed")));
    let dense = Seq2Seq::<f32>::new(
        ModelConfig {
            embedding: EmbeddingMode::Dense,
            ..one_hot_small()
        },
        0,
    )
    .unwrap();
    assert_eq!(dense.num_parameters() - model.num_parameters(), 259 * 264);
}

#[test]
fn dense_lookup_is_deterministic() {
    let model = Seq2Seq::<f64>::new(small(EmbeddingMode::Dense, FusionKind::None), 3).unwrap();
    let x = model.embed(&[5, 5]).unwrap();
    let pe = sinusoidal_positions::<f64>(2, 16);
    for c in 0..16 {
        let a = x.data()[c] - pe.data()[c];
        let b = x.data()[16 + c] - pe.data()[16 + c];
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn embed_rejects_out_of_vocab() {
    let model = Seq2Seq::<f32>::new(small(EmbeddingMode::Dense, FusionKind::None), 0).unwrap();
    assert!(matches!(model.embed(&[259]), Err(ModelError::Input(_))));
}

#[test]
fn zero_layers_is_identity() {
    let model = Seq2Seq::<f64>::new(small(EmbeddingMode::Dense, FusionKind::None), 0).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, model.params());
    let x = ctx.g.constant(Tensor::from_f64(&[3, 16], &[0.5; 48]).unwrap());
    let y = model.encode(&mut ctx, x, 0..0, &AttnMask::full(1, 3, 3)).unwrap();
    assert_eq!(y, x);
    assert!(model.encode(&mut ctx, x, 0..3, &AttnMask::full(1, 3, 3)).is_err());
    assert!(model.encode(&mut ctx, x, 0..1, &AttnMask::full(1, 2, 2)).is_err());
}

#[test]
fn self_only_attention_equals_value_projection() {
    // Oracle: with a diagonal mask the softmax has a single allowed entry,
    // so the attention output is the value projection of the same row.
    let model = Seq2Seq::<f64>::new(small(EmbeddingMode::Dense, FusionKind::None), 1).unwrap();
    let layer = &model.encoder[0];
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, model.params());
    let data: Vec<f64> = (0..48).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
    let h = ctx.g.constant(Tensor::from_f64(&[3, 16], &data).unwrap());
    let mask = AttnMask::from_fn(1, 3, 3, |_, i, j| i == j);
    let (_, raw) = layer.attn.forward(&mut ctx, h, h, &mask).unwrap();
    let v = layer.attn.v.forward(&mut ctx, h).unwrap();
    assert!(ctx.g.value(raw).max_abs_diff(ctx.g.value(v)) < 1e-12);
}

#[test]
fn encoder_is_permutation_covariant() {
    let model = Seq2Seq::<f64>::new(small(EmbeddingMode::Dense, FusionKind::None), 2).unwrap();
    let n = 5;
    let perm = [3usize, 0, 4, 1, 2];
    let data: Vec<f64> = (0..n * 16).map(|i| ((i * 13) % 17) as f64 / 17.0 - 0.4).collect();
    let allowed = |i: usize, j: usize| (i + j) % 3 != 1 || i == j;
    let mut g = Graph::inference();
    let mut ctx = Ctx::new(&mut g, model.params());
    let x = ctx.g.constant(Tensor::from_f64(&[n, 16], &data).unwrap());
    let y = model
        .encode(&mut ctx, x, 0..1, &AttnMask::from_fn(1, n, n, |_, i, j| allowed(i, j)))
        .unwrap();
    let mut pdata = Vec::new();
    for &p in &perm {
        pdata.extend_from_slice(&data[p * 16..(p + 1) * 16]);
    }
    let px = ctx.g.constant(Tensor::from_f64(&[n, 16], &pdata).unwrap());
    let pmask = AttnMask::from_fn(1, n, n, |_, i, j| allowed(perm[i], perm[j]));
    let py = model.encode(&mut ctx, px, 0..1, &pmask).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        let a = ctx.g.value(py).row(i).to_vec();
        let b = ctx.g.value(y).row(p).to_vec();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_step_is_a_distribution_and_causal() {
    for embedding in [EmbeddingMode::Dense, EmbeddingMode::OneHot] {
        let cfg = match embedding {
            EmbeddingMode::Dense => small(embedding, FusionKind::None),
            EmbeddingMode::OneHot => one_hot_small(),
        };
        let model = Seq2Seq::<f64>::new(cfg, 4).unwrap();
        let src = SourceBatch::from_texts(&["hello"]);
        let memory = model.memory(&src).unwrap();
        let p = model.decode_step(&[BOS, 104], &memory, &src.ids).unwrap();
        assert_eq!(p.len(), 259);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        // Changing the last prefix token never changes earlier predictions.
        let a = model.next_log_probs(&memory, &src.ids, &[vec![BOS, 104, 101]]).unwrap();
        let b = model.next_log_probs(&memory, &src.ids, &[vec![BOS, 104, 7]]).unwrap();
        assert_ne!(a, b);
        let pa = model.next_log_probs(&memory, &src.ids, &[vec![BOS, 104]]).unwrap();
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, model.params());
        let mem = ctx.g.constant(memory.clone());
        let l1 = model
            .decode(&mut ctx, mem, &src.ids, src.len, &[BOS, 104, 101], 1, 3)
            .unwrap();
        let l2 = model
            .decode(&mut ctx, mem, &src.ids, src.len, &[BOS, 104, 7], 1, 3)
            .unwrap();
        for row in 0..2 {
            assert_eq!(ctx.g.value(l1).row(row), ctx.g.value(l2).row(row));
        }
        assert_eq!(pa.len(), 1);
    }
}

#[test]
fn decode_step_requires_bos_prefix() {
    let model = Seq2Seq::<f32>::new(small(EmbeddingMode::Dense, FusionKind::None), 4).unwrap();
    let src = SourceBatch::from_texts(&["x"]);
    let memory = model.memory(&src).unwrap();
    assert!(model.decode_step(&[], &memory, &src.ids).is_err());
    assert!(model.decode_step(&[104], &memory, &src.ids).is_err());
}

#[test]
fn source_and_target_batches_pad_consistently() {
    let src = SourceBatch::from_texts(&["ab", "abcd"]);
    assert_eq!(src.len, 6);
    assert_eq!(&src.ids[..6], &[BOS, 97, 98, EOS, PAD, PAD]);
    assert_eq!(src.spans[0].seq_len(), 4);
    let tgt = TargetBatch::from_texts(&["ab", "abcd"]);
    assert_eq!(tgt.len, 5);
    assert_eq!(&tgt.input[..5], &[BOS, 97, 98, PAD, PAD]);
    assert_eq!(&tgt.output[..5], &[97, 98, EOS, PAD, PAD]);
    let seqs = vec![tokenize("ab", true), tokenize("abcd", true)];
    assert_eq!(SourceBatch::from_sequences(&seqs).unwrap(), src);
}

#[test]
fn padding_does_not_change_sentence_loss_or_memory() {
    for fusion in [FusionKind::None, FusionKind::Ncf, FusionKind::Wsf] {
        let model = Seq2Seq::<f64>::new(small(EmbeddingMode::Dense, fusion), 5).unwrap();
        let alone = model.memory(&SourceBatch::from_texts(&["ab c"])).unwrap();
        let padded = model
            .memory(&SourceBatch::from_texts(&["ab c", "a much longer one"]))
            .unwrap();
        let rows = alone.rows();
        for r in 0..rows {
            for (a, b) in alone.row(r).iter().zip(padded.row(r)) {
                assert!((a - b).abs() < 1e-12, "{fusion:?} row {r}");
            }
        }
    }
}

#[test]
fn checkpoint_roundtrip_and_validation() {
    let model = Seq2Seq::<f32>::new(small(EmbeddingMode::Dense, FusionKind::Ncf), 9).unwrap();
    let ckpt = Checkpoint::from_model(&model, vec![("adam.step".into(), Tensor::scalar(3.0))], 42);
    let mut buf = Vec::new();
    ckpt.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back.step, 42);
    assert_eq!(back.config, *model.config());
    assert_eq!(back.optimizer_tensor("adam.step").unwrap().data(), &[3.0]);
    let restored = back.to_model().unwrap();
    for ((n1, t1), (n2, t2)) in model.params().iter().zip(restored.params().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1, t2);
    }

    let mut missing = ckpt.clone();
    missing.params.pop();
    assert!(missing.to_model().is_err());
    let mut dup = ckpt.clone();
    let first = dup.params[0].clone();
    dup.params.push(first);
    assert!(dup.to_model().is_err());
    let mut wrong = ckpt.clone();
    wrong.params[0].1 = Tensor::zeros(&[1]);
    assert!(wrong.to_model().is_err());
    assert!(Checkpoint::read_from(&mut &b"NOTACKPT"[..]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    assert!(!path.with_extension("tmp").exists());
    assert_eq!(Checkpoint::load(&path).unwrap().params.len(), ckpt.params.len());
}
