//! AdamW training with an inverse square-root schedule, checkpointing and
//! fine-tuning.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batches, Batch, DataError, ParallelCorpus};
use crate::model::checkpoint::{Checkpoint, NamedTensors};
use crate::model::{Ctx, Decay, ModelConfig, ModelError, ParamStore, Seq2Seq};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("checkpoint does not match the requested model: {0}")]
    Mismatch(String),
    #[error("optimizer state: {0}")]
    Optimizer(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    /// Non-PAD source plus target tokens per batch.
    pub token_budget: usize,
    pub max_steps: u64,
    /// Write a checkpoint every this many steps (0 disables periodic ones).
    pub checkpoint_every: u64,
    /// Stop early once the training loss of a step falls below this.
    pub stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-4,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            token_budget: 4096,
            max_steps: 100_000,
            checkpoint_every: 1000,
            stop_loss: None,
        }
    }
}

/// `peak · min(step / warmup, sqrt(warmup / step))`; step 0 maps to 0.
pub fn lr_at(step: u64, warmup: u64, peak: f64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    if warmup == 0 {
        return peak;
    }
    let (s, w) = (step as f64, warmup as f64);
    if step <= warmup {
        peak * s / w
    } else {
        peak * (w / s).sqrt()
    }
}

/// AdamW moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update with decoupled weight decay on parameters marked
    /// [`Decay::Apply`].
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let decay = match params.decay(id) {
                Decay::Apply => (lr * cfg.weight_decay) as f32,
                Decay::Exempt => 0.0,
            };
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] as f64 / c1;
                let vhat = v[j] as f64 / c2;
                p[j] -= decay * p[j];
                p[j] -= (lr * mhat / (vhat.sqrt() + cfg.adam_eps)) as f32;
            }
        }
    }

    fn to_named(&self, params: &ParamStore<f32>) -> NamedTensors {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.m[i].clone()));
            out.push((format!("adam.v.{name}"), self.v[i].clone()));
        }
        out
    }

    fn from_checkpoint(ckpt: &Checkpoint, params: &ParamStore<f32>) -> Result<Self, TrainError> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, value) in params.iter() {
            for (prefix, out) in [("adam.m", &mut m), ("adam.v", &mut v)] {
                let key = format!("{prefix}.{name}");
                let t = ckpt
                    .optimizer_tensor(&key)
                    .ok_or_else(|| TrainError::Optimizer(format!("missing {key}")))?;
                if t.shape() != value.shape() {
                    return Err(TrainError::Optimizer(format!(
                        "{key} has shape {:?}, expected {:?}",
                        t.shape(),
                        value.shape()
                    )));
                }
                out.push(t.clone());
            }
        }
        Ok(Self { m, v, step: ckpt.step })
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Deterministic trainer: the batch and dropout stream of every step are
/// functions of the seed and the step number only.
pub struct Trainer {
    model: Seq2Seq<f32>,
    opt: AdamW,
    cfg: TrainConfig,
    corpus: ParallelCorpus,
    seed: u64,
    epoch: Option<(u64, Vec<Batch>)>,
    batches_per_epoch: usize,
}

impl Trainer {
    pub fn new(model: Seq2Seq<f32>, corpus: ParallelCorpus, cfg: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        let opt = AdamW::new(model.params());
        Self::assemble(model, opt, corpus, cfg, seed)
    }

    fn assemble(
        model: Seq2Seq<f32>,
        opt: AdamW,
        corpus: ParallelCorpus,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let batches_per_epoch = make_batches(&corpus, cfg.token_budget, seed)?.len();
        Ok(Self {
            model,
            opt,
            cfg,
            corpus,
            seed,
            epoch: None,
            batches_per_epoch,
        })
    }

    /// Continue a run from a checkpoint, restoring the optimizer state and
    /// the step counter.
    pub fn resume(ckpt: &Checkpoint, corpus: ParallelCorpus, cfg: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        let model = ckpt.to_model()?;
        let opt = AdamW::from_checkpoint(ckpt, model.params())?;
        Self::assemble(model, opt, corpus, cfg, seed)
    }

    /// Start a new optimisation phase from trained weights: fresh moments
    /// and a fresh schedule. `expected`, when given, must describe the same
    /// architecture as the checkpoint.
    pub fn finetune(
        ckpt: &Checkpoint,
        expected: Option<&ModelConfig>,
        corpus: ParallelCorpus,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if let Some(expected) = expected {
            if !expected.same_architecture(&ckpt.config) {
                return Err(TrainError::Mismatch(format!(
                    "checkpoint has {:?}, requested {:?}",
                    ckpt.config, expected
                )));
            }
        }
        Self::new(ckpt.to_model()?, corpus, cfg, seed)
    }

    pub fn model(&self) -> &Seq2Seq<f32> {
        &self.model
    }

    pub fn into_model(self) -> Seq2Seq<f32> {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model, self.opt.to_named(self.model.params()), self.opt.step);
        ckpt.meta.insert("seed".into(), self.seed.to_string());
        ckpt
    }

    fn batch_for(&mut self, step: u64) -> Result<Batch, TrainError> {
        let k = self.batches_per_epoch as u64;
        let (epoch, index) = ((step - 1) / k, ((step - 1) % k) as usize);
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let batches = make_batches(&self.corpus, self.cfg.token_budget, self.seed.wrapping_add(epoch))?;
            self.epoch = Some((epoch, batches));
        }
        Ok(self.epoch.as_ref().expect("epoch loaded").1[index].clone())
    }

    /// One optimisation step.
    pub fn train_step(&mut self) -> Result<StepRecord, TrainError> {
        let step = self.opt.step + 1;
        let batch = self.batch_for(step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);

        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, self.model.params()).with_dropout(rng);
        let loss = self
            .model
            .loss(&mut ctx, &batch.source, &batch.target, self.cfg.label_smoothing)?;
        let vars = ctx.param_vars().to_vec();
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            log::error!("non-finite loss {value} at step {step}");
            return Err(TrainError::NonFinite { step, loss: value });
        }
        g.backward(loss).map_err(ModelError::from)?;
        let mut grads: Vec<Tensor<f32>> = vars
            .iter()
            .zip(self.model.params().iter())
            .map(|(&v, (_, p))| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        drop(g);
        clip_grad_norm(&mut grads, self.cfg.clip_norm);
        let lr = lr_at(step, self.cfg.warmup_steps, self.cfg.peak_lr);
        self.opt.update(self.model.params_mut(), &grads, lr, &self.cfg);
        Ok(StepRecord { step, loss: value, lr })
    }

    /// Train until `max_steps` (or the early-stop loss), appending to
    /// `run_dir/loss.log` and writing checkpoints when a directory is given.
    pub fn run(&mut self, run_dir: Option<&Path>) -> Result<Vec<StepRecord>, TrainError> {
        let mut log = match run_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
                let path = dir.join("loss.log");
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|source| TrainError::Io {
                        path: path.clone(),
                        source,
                    })?;
                Some((path, file))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.opt.step < self.cfg.max_steps {
            let rec = self.train_step()?;
            records.push(rec);
            if let Some((path, file)) = log.as_mut() {
                writeln!(file, "{}\t{:.6}\t{:.6e}", rec.step, rec.loss, rec.lr).map_err(|source| TrainError::Io {
                    path: path.clone(),
                    source,
                })?;
            }
            if rec.step % 100 == 0 {
                log::info!("step {} loss {:.4} lr {:.3e}", rec.step, rec.loss, rec.lr);
            }
            let every = self.cfg.checkpoint_every;
            if let Some(dir) = run_dir {
                if every > 0 && rec.step % every == 0 {
                    self.save(dir)?;
                }
            }
            if self.cfg.stop_loss.is_some_and(|l| rec.loss < l) {
                break;
            }
        }
        if let Some(dir) = run_dir {
            self.save(dir)?;
        }
        Ok(records)
    }

    /// Write `checkpoint-{step}.ckpt` and refresh `last.ckpt`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, TrainError> {
        let ckpt = self.checkpoint();
        let path = dir.join(format!("checkpoint-{}.ckpt", self.opt.step));
        ckpt.save(&path)?;
        ckpt.save(&dir.join("last.ckpt"))?;
        Ok(path)
    }
}

/// Mean loss of `model` over a corpus in evaluation mode.
pub fn evaluate_loss(
    model: &Seq2Seq<f32>,
    corpus: &ParallelCorpus,
    token_budget: usize,
    smoothing: f64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in make_batches(corpus, token_budget, 0)? {
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, model.params());
        let loss = model.loss(&mut ctx, &batch.source, &batch.target, smoothing)?;
        let n = batch
            .target
            .output
            .iter()
            .filter(|&&t| t != crate::bytes_tok::PAD)
            .count();
        total += g.value(loss).data()[0] as f64 * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::copy_task_corpus;
    use crate::model::{EmbeddingMode, FusionKind};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            ffn_dim: 32,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.1,
            embedding: EmbeddingMode::Dense,
            fusion: FusionKind::Ncf,
            shallow_layers: 1,
            word_layers: 1,
            ..Default::default()
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            peak_lr: 3e-3,
            warmup_steps: 5,
            token_budget: 80,
            max_steps: 6,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_anchors() {
        assert_eq!(lr_at(4000, 4000, 5e-4), 5e-4);
        assert_eq!(lr_at(2000, 4000, 5e-4), 2.5e-4);
        assert_eq!(lr_at(16000, 4000, 5e-4), 2.5e-4);
        let mut prev = lr_at(4000, 4000, 5e-4);
        for s in 4001..4100 {
            let lr = lr_at(s, 4000, 5e-4);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn adamw_exempts_marked_parameters_from_decay() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::full(&[2], 1.0), Decay::Apply);
        store.add("g", Tensor::full(&[2], 1.0), Decay::Exempt);
        let mut opt = AdamW::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        opt.update(&mut store, &[Tensor::zeros(&[2]), Tensor::zeros(&[2])], 0.1, &cfg);
        assert_eq!(store.get(store.id("w").unwrap()).data(), &[0.95, 0.95]);
        assert_eq!(store.get(store.id("g").unwrap()).data(), &[1.0, 1.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap(), Decay::Exempt);
        let mut opt = AdamW::new(&store);
        let g = Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap();
        opt.update(&mut store, &[g], 0.01, &TrainConfig::default());
        let w = store.get(store.id("w").unwrap()).data();
        assert!((w[0] + 0.01).abs() < 1e-6 && (w[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![
            Tensor::from_f64(&[2], &[3.0, 0.0]).unwrap(),
            Tensor::from_f64(&[1], &[4.0]).unwrap(),
        ];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-6);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let model = Seq2Seq::<f32>::new(tiny(), 0).unwrap();
        let before = model.params().clone();
        let mut t = Trainer::new(
            model,
            copy_task_corpus(8, 0),
            TrainConfig {
                max_steps: 0,
                ..quick()
            },
            0,
        )
        .unwrap();
        assert!(t.run(None).unwrap().is_empty());
        for ((_, a), (_, b)) in before.iter().zip(t.model().params().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let corpus = copy_task_corpus(8, 1);
        let full = {
            let mut t = Trainer::new(Seq2Seq::new(tiny(), 2).unwrap(), corpus.clone(), quick(), 7).unwrap();
            t.run(None).unwrap()
        };
        let mut first = Trainer::new(
            Seq2Seq::new(tiny(), 2).unwrap(),
            corpus.clone(),
            TrainConfig {
                max_steps: 3,
                ..quick()
            },
            7,
        )
        .unwrap();
        let mut trace = first.run(None).unwrap();
        let mut buf = Vec::new();
        first.checkpoint().write_to(&mut buf).unwrap();
        let ckpt = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        let mut second = Trainer::resume(&ckpt, corpus, quick(), 7).unwrap();
        trace.extend(second.run(None).unwrap());
        assert_eq!(trace, full);
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut model = Seq2Seq::<f32>::new(tiny(), 0).unwrap();
        model
            .params_mut()
            .set("decoder.norm.gain", Tensor::full(&[16], f32::NAN))
            .unwrap();
        let mut t = Trainer::new(model, copy_task_corpus(4, 0), quick(), 0).unwrap();
        assert!(matches!(t.train_step(), Err(TrainError::NonFinite { step: 1, .. })));
    }

    #[test]
    fn run_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 3,
            ..quick()
        };
        let mut t = Trainer::new(Seq2Seq::new(tiny(), 0).unwrap(), copy_task_corpus(8, 0), cfg, 0).unwrap();
        t.run(Some(dir.path())).unwrap();
        let log = fs::read_to_string(dir.path().join("loss.log")).unwrap();
        assert_eq!(log.lines().count(), 6);
        let first: Vec<&str> = log.lines().next().unwrap().split('\t').collect();
        assert_eq!(first.len(), 3);
        assert_eq!(first[0], "1");
        assert!(dir.path().join("checkpoint-3.ckpt").exists());
        assert_eq!(Checkpoint::load(&dir.path().join("last.ckpt")).unwrap().step, 6);
    }

    #[test]
    fn finetune_rejects_other_architectures_and_resets_schedule() {
        let mut t = Trainer::new(Seq2Seq::new(tiny(), 0).unwrap(), copy_task_corpus(8, 0), quick(), 0).unwrap();
        t.run(None).unwrap();
        let ckpt = t.checkpoint();
        let other = ModelConfig { d_model: 32, ..tiny() };
        assert!(matches!(
            Trainer::finetune(&ckpt, Some(&other), copy_task_corpus(4, 1), quick(), 0),
            Err(TrainError::Mismatch(_))
        ));
        let ft = Trainer::finetune(&ckpt, Some(&tiny()), copy_task_corpus(4, 1), quick(), 0).unwrap();
        assert_eq!(ft.step(), 0);
    }
}
