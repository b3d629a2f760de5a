//! Batch sampling, the optimisation loop, logging and checkpointing.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{checkpoint_name, read_latest, write_latest, Checkpoint, Moments};
use crate::dataset::{load_sequence, DatasetIndex};
use crate::error::{GaitError, Result};
use crate::geometry::{prepare_all, FramePolicy, GaitSequence, PointCloudFrame, PreprocessSpec, SensorIntrinsics};
use crate::hmrnet::{HmrConfig, HmrNet, NetBatch};
use crate::loss::{combined_loss, LossWeights};
use crate::optim::{step_lr, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::seed::mix_seed;

pub const LOG_FILE: &str = "train.log";
pub const MODEL_KIND: &str = "hmrnet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub batch_subjects: usize,
    pub seqs_per_subject: usize,
    pub frames: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub milestones: Vec<usize>,
    pub weight_decay: f64,
    pub total_iterations: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Restrict training to these sequence ids (all when absent).
    pub train_sequences: Option<Vec<u32>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            margin: 0.2,
            batch_subjects: 4,
            seqs_per_subject: 2,
            frames: 10,
            lr: 1e-3,
            lr_factor: 0.1,
            milestones: vec![1000, 3000],
            weight_decay: 5e-4,
            total_iterations: 5000,
            seed: 0,
            log_every: 10,
            train_sequences: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GaitError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be >= 0");
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be >= 0");
        }
        if self.batch_subjects < 2 || self.seqs_per_subject < 2 {
            return bad("batch_subjects and seqs_per_subject must be >= 2");
        }
        if self.frames == 0 || self.total_iterations == 0 || self.log_every == 0 {
            return bad("frames, total_iterations and log_every must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be finite and >= 0");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            margin: self.margin,
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        step_lr(self.lr, self.lr_factor, &self.milestones, iteration)
    }
}

/// Everything needed to rebuild a trained network for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub net: HmrConfig,
    pub intrinsics: SensorIntrinsics,
    /// Subject id of each classifier output.
    pub class_subjects: Vec<u32>,
}

impl ModelSpec {
    pub fn preprocess(&self) -> PreprocessSpec {
        PreprocessSpec {
            intrinsics: self.intrinsics,
            crop_size: self.net.crop_size,
            num_points: self.net.num_points,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model spec serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GaitError::Checkpoint(format!("model config: {e}")))
    }
}

pub fn cast_frame<F: Scalar>(frame: &PointCloudFrame<f64>) -> Result<PointCloudFrame<F>> {
    let pts = frame
        .points
        .iter()
        .map(|p| [F::from_f64_lossy(p[0]), F::from_f64_lossy(p[1]), F::from_f64_lossy(p[2])])
        .collect();
    PointCloudFrame::new(pts, frame.frame_index)
}

/// Preprocessed training sequences grouped by class.
#[derive(Clone, Debug)]
pub struct TrainingPool<F> {
    /// Subject id of each class, ascending.
    pub subjects: Vec<u32>,
    pub sequences: Vec<Vec<GaitSequence<F>>>,
}

impl<F: Scalar> TrainingPool<F> {
    pub fn load(
        index: &DatasetIndex,
        subjects: &[u32],
        sequence_filter: Option<&[u32]>,
        spec: &PreprocessSpec,
    ) -> Result<Self> {
        let mut ids = subjects.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut sequences = Vec::with_capacity(ids.len());
        for &sid in &ids {
            let entry = index
                .subject(sid)
                .ok_or_else(|| GaitError::InvalidArgument(format!("unknown subject {sid}")))?;
            let mut seqs = Vec::new();
            for q in &entry.sequences {
                if sequence_filter.is_some_and(|f| !f.contains(&q.sequence_id)) {
                    continue;
                }
                let rec = load_sequence(&index.root, sid, q)?;
                let raw = rec.frames.iter().map(cast_frame).collect::<Result<Vec<_>>>()?;
                match prepare_all(sid, q.sequence_id, &raw, spec) {
                    Ok(s) => seqs.push(s),
                    Err(GaitError::EmptySequence) => {
                        log::warn!("subject {sid} sequence {} has no usable frames", q.sequence_id)
                    }
                    Err(e) => return Err(e),
                }
            }
            if seqs.is_empty() {
                return Err(GaitError::InvalidArgument(format!(
                    "training subject {sid} has no usable sequences"
                )));
            }
            sequences.push(seqs);
        }
        Ok(Self {
            subjects: ids,
            sequences,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.subjects.len()
    }
}

/// Identity of one batch element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSlot {
    pub class: usize,
    /// Position within the class's sequence list.
    pub position: usize,
    pub window_seed: u64,
}

/// `P_b` distinct classes with `K_b` sequences each, keyed by `(seed, iteration)`.
pub fn sample_batch_slots(
    class_sizes: &[usize],
    p_b: usize,
    k_b: usize,
    seed: u64,
    iteration: usize,
) -> Result<Vec<BatchSlot>> {
    if class_sizes.len() < p_b {
        return Err(GaitError::InvalidArgument(format!(
            "{} training subjects, batch needs {p_b}",
            class_sizes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, iteration as u64));
    let mut classes = index::sample(&mut rng, class_sizes.len(), p_b).into_vec();
    classes.sort_unstable();
    let mut slots = Vec::with_capacity(p_b * k_b);
    for class in classes {
        let n = class_sizes[class];
        let positions: Vec<usize> = if n >= k_b {
            index::sample(&mut rng, n, k_b).into_vec()
        } else {
            (0..k_b).map(|_| rng.gen_range(0..n)).collect()
        };
        for position in positions {
            slots.push(BatchSlot {
                class,
                position,
                window_seed: rng.gen(),
            });
        }
    }
    Ok(slots)
}

#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub labels: Vec<usize>,
    pub sequences: Vec<GaitSequence<F>>,
}

impl<F: Scalar> Batch<F> {
    /// `subject/sequence` identifiers, for diagnostics.
    pub fn describe(&self) -> String {
        self.sequences
            .iter()
            .map(|s| format!("{}/{}", s.subject_id, s.sequence_id))
            .collect::<Vec<_>>()
            .join(",")
    }
}

pub fn sample_batch<F: Scalar>(pool: &TrainingPool<F>, cfg: &TrainConfig, iteration: usize) -> Result<Batch<F>> {
    let sizes: Vec<usize> = pool.sequences.iter().map(Vec::len).collect();
    let slots = sample_batch_slots(&sizes, cfg.batch_subjects, cfg.seqs_per_subject, cfg.seed, iteration)?;
    let mut labels = Vec::with_capacity(slots.len());
    let mut sequences = Vec::with_capacity(slots.len());
    for s in slots {
        labels.push(s.class);
        let policy = FramePolicy::Training { seed: s.window_seed };
        sequences.push(pool.sequences[s.class][s.position].window(cfg.frames, policy)?);
    }
    Ok(Batch { labels, sequences })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub triplet: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn log_line(&self) -> String {
        format!(
            "iteration={} lr={:.3e} triplet={:.6} ce={:.6} total={:.6}",
            self.iteration, self.lr, self.triplet, self.ce, self.total
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<F> {
    pub spec: ModelSpec,
    pub net: HmrNet<F>,
    pub opt: AdamW<F>,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
    /// Batches that contained no valid triplet.
    pub empty_triplet_batches: usize,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(spec: ModelSpec, cfg: &TrainConfig) -> Result<Self> {
        let net = HmrNet::new(spec.net.clone(), cfg.seed)?;
        let opt = AdamW::new(
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
            &net.params,
        );
        Ok(Self {
            spec,
            net,
            opt,
            iteration: 0,
            history: Vec::new(),
            empty_triplet_batches: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            kind: MODEL_KIND.into(),
            config_json: self.spec.to_json(),
            iteration: self.iteration as u64,
            params: self.net.params.clone(),
            moments: Some(Moments::from_optimizer(&self.opt)),
        }
    }

    /// Restore parameters, moments and the iteration counter.
    pub fn restore(&mut self, ck: &Checkpoint<F>) -> Result<()> {
        if ck.kind != MODEL_KIND {
            return Err(GaitError::Checkpoint(format!("expected a {MODEL_KIND} checkpoint, got {}", ck.kind)));
        }
        if ModelSpec::from_json(&ck.config_json)? != self.spec {
            return Err(GaitError::Checkpoint("checkpoint was trained with a different model config".into()));
        }
        self.net.params.load_from(&ck.params)?;
        if let Some(mo) = &ck.moments {
            if mo.m.len() != self.opt.m.len() {
                return Err(GaitError::Checkpoint("optimizer state size mismatch".into()));
            }
            self.opt.step = mo.step;
            self.opt.m = mo.m.clone();
            self.opt.v = mo.v.clone();
        }
        self.iteration = ck.iteration as usize;
        Ok(())
    }

    /// One optimisation step on the batch for iteration `self.iteration + 1`.
    pub fn step(&mut self, pool: &TrainingPool<F>, cfg: &TrainConfig) -> Result<LossRecord> {
        let iteration = self.iteration + 1;
        let lr = cfg.lr_at(iteration);
        let batch = sample_batch(pool, cfg, iteration)?;
        let refs: Vec<&GaitSequence<F>> = batch.sequences.iter().collect();
        let input = NetBatch::new(&self.net.config, &refs)?;
        let mut g = Graph::new();
        let out = self.net.forward(&mut g, &input, true)?;
        let logits = out.logits.expect("training forward has logits");
        let c = &self.net.config;
        let b = batch.labels.len();
        let loss = combined_loss(
            g.value(out.embeddings).data(),
            g.value(logits).data(),
            b,
            c.strips,
            c.embed_dim,
            c.num_classes,
            &batch.labels,
            &cfg.loss_weights(),
        )?;
        if loss.triplets == 0 {
            self.empty_triplet_batches += 1;
            log::warn!("iteration {iteration}: batch has no valid triplet");
        }
        let total = loss.total.to_f64().unwrap_or(f64::NAN);
        if !total.is_finite() {
            return Err(GaitError::NonFiniteLoss {
                iteration,
                batch: batch.describe(),
            });
        }
        let grads = g.backward(
            &[(out.embeddings, &loss.grad_embeddings), (logits, &loss.grad_logits)],
            self.net.params.len(),
        )?;
        self.opt.update(&mut self.net.params, &grads, lr)?;
        self.iteration = iteration;
        let rec = LossRecord {
            iteration,
            lr,
            triplet: loss.triplet.to_f64().unwrap(),
            ce: loss.ce.to_f64().unwrap(),
            total,
        };
        self.history.push(rec);
        Ok(rec)
    }
}

fn save_checkpoint<F: Scalar>(state: &TrainState<F>, out_dir: &Path) -> Result<()> {
    let name = checkpoint_name(state.iteration);
    state.checkpoint().save(&out_dir.join(&name))?;
    write_latest(out_dir, &name)
}

/// Run (or resume) training into `out_dir`.
///
/// When `out_dir/latest` exists the run continues from that checkpoint and
/// appends to the log. Checkpoints are written at every milestone and at
/// completion.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    spec: ModelSpec,
    pool: &TrainingPool<F>,
    out_dir: &Path,
) -> Result<TrainState<F>> {
    cfg.validate()?;
    if spec.net.num_classes != pool.num_classes() || spec.class_subjects != pool.subjects {
        return Err(GaitError::Config(format!(
            "model has {} classes, training pool has {}",
            spec.net.num_classes,
            pool.num_classes()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| GaitError::io(out_dir, e))?;
    let mut state = TrainState::new(spec, cfg)?;
    let resumed = match read_latest(out_dir)? {
        Some(path) => {
            state.restore(&Checkpoint::load(&path)?)?;
            log::info!("resuming from {} at iteration {}", path.display(), state.iteration);
            true
        }
        None => false,
    };
    if state.iteration > cfg.total_iterations {
        return Err(GaitError::Checkpoint(format!(
            "checkpoint iteration {} is past total_iterations {}",
            state.iteration, cfg.total_iterations
        )));
    }
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed)
        .truncate(!resumed)
        .open(&log_path)
        .map_err(|e| GaitError::io(&log_path, e))?;
    while state.iteration < cfg.total_iterations {
        let rec = match state.step(pool, cfg) {
            Ok(r) => r,
            Err(e @ GaitError::NonFiniteLoss { .. }) => {
                let dump = out_dir.join("nonfinite_batch.txt");
                let _ = fs::write(&dump, format!("{e}\n"));
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if rec.iteration % cfg.log_every == 0 {
            let line = rec.log_line();
            log::info!("{line}");
            writeln!(log_file, "{line}").map_err(|e| GaitError::io(&log_path, e))?;
        }
        if cfg.milestones.contains(&rec.iteration) || rec.iteration == cfg.total_iterations {
            save_checkpoint(&state, out_dir)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_composition() {
        let slots = sample_batch_slots(&[3, 3, 1, 4, 2], 4, 2, 9, 17).unwrap();
        assert_eq!(slots.len(), 8);
        let mut classes: Vec<usize> = slots.iter().map(|s| s.class).collect();
        classes.dedup();
        assert_eq!(classes.len(), 4);
        for c in &classes {
            assert_eq!(slots.iter().filter(|s| s.class == *c).count(), 2);
        }
        assert_eq!(slots, sample_batch_slots(&[3, 3, 1, 4, 2], 4, 2, 9, 17).unwrap());
        assert!(sample_batch_slots(&[3, 3], 4, 2, 9, 17).is_err());
    }

    #[test]
    fn hundred_iterations_cover_all_subjects() {
        let sizes = [4usize; 8];
        let mut seen = [false; 8];
        for it in 0..100 {
            for s in sample_batch_slots(&sizes, 4, 2, 0, it).unwrap() {
                seen[s.class] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { seqs_per_subject: 1, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { milestones: vec![5, 3], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(1001) - 1e-4).abs() < 1e-18);
    }
}
