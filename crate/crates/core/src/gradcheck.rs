//! End-to-end central finite-difference check of the training loss.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamGrads};
use crate::error::Result;
use crate::hmrnet::{HmrConfig, HmrNet, NetBatch};
use crate::loss::{combined_loss, LossWeights};
use crate::params::ParamId;
use crate::seed::mix_seed;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Comparisons whose larger magnitude is below this are not scored.
    pub denom_floor: f64,
    pub frames: usize,
    pub subjects: usize,
    pub seqs_per_subject: usize,
    /// Scale the analytic gradient of this group by `1 + corrupt_scale` (fault injection).
    pub corrupt_group: Option<String>,
    pub corrupt_scale: f64,
    pub net: HmrConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-8,
            frames: 2,
            subjects: 2,
            seqs_per_subject: 2,
            corrupt_group: None,
            corrupt_scale: 1e-2,
            net: HmrConfig::tiny(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub scalars: usize,
    pub compared: usize,
    /// Coordinates where a perturbation flipped a piecewise branch.
    pub kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    /// Every group was compared at least once and stayed within tolerance.
    pub fn passed(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.compared > 0 && g.max_rel_error <= self.tolerance)
    }

    pub fn lines(&self) -> Vec<String> {
        self.groups
            .iter()
            .map(|g| {
                format!(
                    "{:<16} scalars={:<5} compared={:<5} kinks={:<3} max_rel_error={:.3e}",
                    g.group, g.scalars, g.compared, g.kinks, g.max_rel_error
                )
            })
            .collect()
    }
}

struct Problem {
    net: HmrNet<f64>,
    batch: NetBatch<f64>,
    labels: Vec<usize>,
    weights: LossWeights,
}

impl Problem {
    fn new(cfg: &GradcheckConfig) -> Result<Self> {
        let mut net = HmrNet::<f64>::new(cfg.net.clone(), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x6772_6164));
        // nonzero biases and perturbed norms so every parameter matters
        let jitter = Normal::new(0.0, 0.1).unwrap();
        let ids: Vec<ParamId> = net.params.ids().collect();
        for id in ids {
            for v in net.params.get_mut(id).data_mut() {
                *v += jitter.sample(&mut rng);
            }
        }
        let c = &net.config;
        let seqs = cfg.subjects * cfg.seqs_per_subject;
        let total = seqs * cfg.frames;
        let crops = (0..total * c.crop_size * c.crop_size)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let points: Vec<[f64; 3]> = (0..total * c.num_points)
            .map(|_| {
                [
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.9..0.9),
                ]
            })
            .collect();
        let batch = NetBatch::from_raw(c, seqs, cfg.frames, crops, points)?;
        let labels = (0..seqs).map(|i| i / cfg.seqs_per_subject).collect();
        Ok(Self {
            net,
            batch,
            labels,
            weights: LossWeights::default(),
        })
    }

    /// Loss, branch signature and (optionally) analytic gradients.
    fn eval(&self, with_grad: bool) -> Result<(f64, u64, Option<ParamGrads<f64>>)> {
        let mut g = Graph::with_signature();
        let out = self.net.forward(&mut g, &self.batch, true)?;
        let logits = out.logits.expect("logits requested");
        let c = &self.net.config;
        let loss = combined_loss(
            g.value(out.embeddings).data(),
            g.value(logits).data(),
            self.labels.len(),
            c.strips,
            c.embed_dim,
            c.num_classes,
            &self.labels,
            &self.weights,
        )?;
        g.note_switch(&loss.switches);
        let sig = g.signature().expect("signature graph");
        let grads = if with_grad {
            Some(g.backward(
                &[(out.embeddings, &loss.grad_embeddings), (logits, &loss.grad_logits)],
                self.net.params.len(),
            )?)
        } else {
            None
        };
        Ok((loss.total, sig, grads))
    }
}

/// Compare analytic and central-difference gradients for every parameter scalar.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut prob = Problem::new(cfg)?;
    let (_, sig0, grads) = prob.eval(true)?;
    let grads = grads.expect("requested");
    let mut groups: BTreeMap<String, GroupResult> = BTreeMap::new();
    let ids: Vec<ParamId> = prob.net.params.ids().collect();
    for id in ids {
        let group = prob.net.params.group_of(id).to_string();
        let n = prob.net.params.get(id).numel();
        let scale = match &cfg.corrupt_group {
            Some(c) if *c == group => 1.0 + cfg.corrupt_scale,
            _ => 1.0,
        };
        let entry = groups.entry(group.clone()).or_insert(GroupResult {
            group,
            scalars: 0,
            compared: 0,
            kinks: 0,
            max_rel_error: 0.0,
        });
        entry.scalars += n;
        for i in 0..n {
            let analytic = grads.get(id).map_or(0.0, |g| g[i]) * scale;
            let orig = prob.net.params.get(id).data()[i];
            prob.net.params.get_mut(id).data_mut()[i] = orig + cfg.step;
            let (lp, sp, _) = prob.eval(false)?;
            prob.net.params.get_mut(id).data_mut()[i] = orig - cfg.step;
            let (lm, sm, _) = prob.eval(false)?;
            prob.net.params.get_mut(id).data_mut()[i] = orig;
            if sp != sig0 || sm != sig0 {
                entry.kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let denom = analytic.abs().max(numeric.abs());
            if denom <= cfg.denom_floor {
                continue;
            }
            entry.compared += 1;
            entry.max_rel_error = entry.max_rel_error.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(GradcheckReport {
        groups: groups.into_values().collect(),
        tolerance: cfg.tolerance,
    })
}
