//! Central-difference checks of every differentiable operation in f64.

use bytefuse::bytes_tok::PAD;
use bytefuse::fusion::batch_block_mask;
use bytefuse::model::{Ctx, EmbeddingMode, FusionKind, ModelConfig, Seq2Seq, SourceBatch, TargetBatch};
use bytefuse::tensor::{grad_check, grad_check_many, AttnMask, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Weighted sum of all outputs, so every output element gets a distinct
/// upstream gradient.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect())?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn model_err(e: bytefuse::model::ModelError) -> TensorError {
    TensorError::Invalid {
        op: "model",
        msg: e.to_string(),
    }
}

#[test]
fn matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 5]);
    let c = random(&mut rng, &[2, 5]);
    let err = grad_check_many(
        |g, v| {
            let ab = g.matmul(v[0], v[1])?;
            let abc = g.matmul_bt(ab, v[2])?;
            let t = g.transpose(abc)?;
            project(g, t)
        },
        &[a, b, c],
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn elementwise_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[4, 3]);
    let b = random(&mut rng, &[4, 3]);
    let bias = random(&mut rng, &[3]);
    let err = grad_check_many(
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let m = g.mul(s, v[0])?;
            let m = g.add_bias(m, v[2])?;
            let m = g.scale(m, 0.7)?;
            let top = g.slice_rows(m, 0, 2)?;
            let bottom = g.slice_rows(m, 2, 4)?;
            let c = g.concat_rows(&[bottom, top])?;
            let c = g.slice_cols(c, 1, 3)?;
            let c = g.mask_rows(c, &[true, false, true, true])?;
            project(g, c)
        },
        &[a, b, bias],
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn relu_softmax_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Keep inputs away from the relu kink.
    let mut x = random(&mut rng, &[3, 5]);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.2;
        }
    }
    let err = grad_check(
        |g, x| {
            let r = g.relu(x)?;
            let s = g.softmax(r)?;
            let p = project(g, s)?;
            let m = g.mean(x)?;
            g.add(p, m)
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[4, 6]);
    let gain = random(&mut rng, &[6]);
    let bias = random(&mut rng, &[6]);
    let err = grad_check_many(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y)
        },
        &[x, gain, bias],
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn embedding_lookup() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = random(&mut rng, &[7, 3]);
    let err = grad_check(
        |g, t| {
            let e = g.embedding(t, &[1, 4, 1, 6])?;
            project(g, e)
        },
        &table,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn conv_repeat_and_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (len, n) in [(5, 4), (7, 3), (6, 2), (3, 1)] {
        let x = random(&mut rng, &[2 * len, 3]);
        let k = random(&mut rng, &[n, 3, 3]);
        let b = random(&mut rng, &[3]);
        let lambda = random(&mut rng, &[2]);
        let err = grad_check_many(
            |g, v| {
                let c = g.conv1d(v[0], v[1], Some(v[2]), n, true, 2)?;
                let r = g.repeat_rows(c, n, len, 2)?;
                let w = g.weighted_sum(&[r, v[0]], v[3])?;
                project(g, w)
            },
            &[x, k, b, lambda],
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "len {len} n {n}: {err}");
    }
}

#[test]
fn attention_with_block_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let src = SourceBatch::from_texts(&["ab c", "x yz w"]);
    let mask = batch_block_mask(&src).unwrap();
    let rows = src.batch * src.len;
    let q = random(&mut rng, &[rows, 4]);
    let k = random(&mut rng, &[rows, 4]);
    let v = random(&mut rng, &[rows, 4]);
    let err = grad_check_many(
        |g, x| {
            let a = g.attention(x[0], x[1], x[2], 2, &mask)?;
            project(g, a)
        },
        &[q, k, v],
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");

    let causal = AttnMask::from_fn(1, 4, 4, |_, i, j| j <= i);
    let q = random(&mut rng, &[4, 6]);
    let kv = random(&mut rng, &[4, 6]);
    let err = grad_check_many(
        |g, x| {
            let a = g.attention(x[0], x[1], x[1], 3, &causal)?;
            project(g, a)
        },
        &[q, kv],
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn smoothed_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&mut rng, &[5, 9]);
    for eps in [0.0, 0.1, 0.5] {
        let err = grad_check(
            |g, l| g.smoothed_cross_entropy(l, &[1, 8, 3, 8, 0], Some(8), eps),
            &logits,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "eps {eps}: {err}");
    }
}

fn tiny(fusion: FusionKind) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        ffn_dim: 12,
        heads: 2,
        enc_layers: 2,
        dec_layers: 1,
        dropout: 0.0,
        embedding: EmbeddingMode::Dense,
        fusion,
        shallow_layers: 1,
        word_layers: 1,
        ..Default::default()
    }
}

fn check_encoder(fusion: FusionKind) {
    let model = Seq2Seq::<f64>::new(tiny(fusion), 11).unwrap();
    let src = SourceBatch::from_texts(&["ab c", "d"]);
    let params: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let x0 = model.embed(&src.ids).unwrap();
    let err = grad_check_many(
        |g, v| {
            let mut ctx = Ctx::from_vars(g, v.to_vec());
            let x = ctx.g.constant(x0.clone());
            let h = match fusion {
                FusionKind::Ncf => model.ncf_encode(&mut ctx, x, &src),
                FusionKind::Wsf => model.wsf_encode(&mut ctx, x, &src),
                FusionKind::None => model.encode(&mut ctx, x, 0..2, &src.pad_mask()),
            }
            .map_err(model_err)?;
            let h = ctx.g.mask_rows(h, &src.keep_rows())?;
            ctx.g.sum(h)
        },
        &params,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{fusion:?}: {err}");
}

#[test]
fn ncf_encoder_end_to_end() {
    check_encoder(FusionKind::Ncf);
}

#[test]
fn wsf_encoder_end_to_end() {
    check_encoder(FusionKind::Wsf);
}

#[test]
fn full_model_loss() {
    let model = Seq2Seq::<f64>::new(tiny(FusionKind::Ncf), 12).unwrap();
    let src = SourceBatch::from_texts(&["ab", "c d"]);
    let tgt = TargetBatch::from_texts(&["ba", "d"]);
    assert!(tgt.output.contains(&PAD));
    let params: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let err = grad_check_many(
        |g, v| {
            let mut ctx = Ctx::from_vars(g, v.to_vec());
            model.loss(&mut ctx, &src, &tgt, 0.1).map_err(model_err)
        },
        &params,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}
