//! Metric-learning and classification losses with analytic gradients.

use crate::error::{GaitError, Result};
use crate::scalar::Scalar;

/// Loss value, gradient with respect to its input, and the on/off state of
/// every hinge (used to detect kinks under perturbation).
#[derive(Clone, Debug)]
pub struct LossOutput<F> {
    pub value: F,
    pub grad: Vec<F>,
    pub switches: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TripletOutput<F> {
    pub loss: LossOutput<F>,
    /// Valid (anchor, positive, negative) triples per strip.
    pub triplets: usize,
    /// Triples with a positive hinge, summed over strips.
    pub active: usize,
}

fn check_dims(len: usize, b: usize, p: usize, d: usize, labels: usize, what: &str) -> Result<()> {
    if len != b * p * d || labels != b {
        return Err(GaitError::Shape(format!(
            "{what}: {len} values for {b}x{p}x{d} with {labels} labels"
        )));
    }
    Ok(())
}

/// Batch-all triplet loss averaged over positive hinge terms, per strip,
/// then averaged over strips. `emb` is `[b, p, d]`.
pub fn triplet_loss_ba<F: Scalar>(
    emb: &[F],
    b: usize,
    p: usize,
    d: usize,
    labels: &[u32],
    margin: F,
) -> Result<TripletOutput<F>> {
    check_dims(emb.len(), b, p, d, labels.len(), "triplet loss")?;
    let mut grad = vec![F::zero(); emb.len()];
    let mut switches = Vec::new();
    let mut total = F::zero();
    let mut triplets = 0;
    let mut active_total = 0;
    let row = |i: usize, s: usize| &emb[(i * p + s) * d..(i * p + s + 1) * d];
    let inv_p = F::one() / F::from_usize(p.max(1)).unwrap();
    for s in 0..p {
        let mut dist = vec![F::zero(); b * b];
        for i in 0..b {
            for j in i + 1..b {
                let dd = row(i, s)
                    .iter()
                    .zip(row(j, s))
                    .map(|(x, y)| (*x - *y) * (*x - *y))
                    .sum::<F>()
                    .sqrt();
                dist[i * b + j] = dd;
                dist[j * b + i] = dd;
            }
        }
        // coefficient of each pairwise distance in the strip loss numerator
        let mut coef = vec![F::zero(); b * b];
        let mut sum = F::zero();
        let mut active = 0usize;
        triplets = 0;
        for a in 0..b {
            for pos in 0..b {
                if pos == a || labels[pos] != labels[a] {
                    continue;
                }
                for neg in 0..b {
                    if labels[neg] == labels[a] {
                        continue;
                    }
                    triplets += 1;
                    let term = margin + dist[a * b + pos] - dist[a * b + neg];
                    let on = term > F::zero();
                    switches.push(on);
                    if on {
                        sum = sum + term;
                        active += 1;
                        coef[a * b + pos] = coef[a * b + pos] + F::one();
                        coef[a * b + neg] = coef[a * b + neg] - F::one();
                    }
                }
            }
        }
        active_total += active;
        if active == 0 {
            continue;
        }
        let inv = F::one() / F::from_usize(active).unwrap();
        total = total + sum * inv;
        for i in 0..b {
            for j in 0..b {
                let c = coef[i * b + j];
                let dij = dist[i * b + j];
                if c == F::zero() || dij == F::zero() {
                    continue;
                }
                let scale = c * inv * inv_p / dij;
                for k in 0..d {
                    let diff = row(i, s)[k] - row(j, s)[k];
                    let g = scale * diff;
                    grad[(i * p + s) * d + k] = grad[(i * p + s) * d + k] + g;
                    grad[(j * p + s) * d + k] = grad[(j * p + s) * d + k] - g;
                }
            }
        }
    }
    Ok(TripletOutput {
        loss: LossOutput {
            value: total * inv_p,
            grad,
            switches,
        },
        triplets,
        active: active_total,
    })
}

/// Softmax cross-entropy per strip, averaged over strips and batch.
/// `logits` is `[b, p, n]`.
pub fn ce_loss<F: Scalar>(logits: &[F], b: usize, p: usize, n: usize, labels: &[usize]) -> Result<LossOutput<F>> {
    check_dims(logits.len(), b, p, n, labels.len(), "cross-entropy")?;
    if let Some(bad) = labels.iter().find(|&&l| l >= n) {
        return Err(GaitError::InvalidArgument(format!("label {bad} >= {n} classes")));
    }
    let mut grad = vec![F::zero(); logits.len()];
    let mut total = F::zero();
    let inv = F::one() / F::from_usize(b * p).unwrap();
    for i in 0..b {
        for s in 0..p {
            let off = (i * p + s) * n;
            let row = &logits[off..off + n];
            let mx = row.iter().fold(F::neg_infinity(), |a, &x| a.max(x));
            let z: F = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            total = total + lse - row[labels[i]];
            for c in 0..n {
                let prob = (row[c] - lse).exp();
                let target = if c == labels[i] { F::one() } else { F::zero() };
                grad[off + c] = (prob - target) * inv;
            }
        }
    }
    Ok(LossOutput {
        value: total * inv,
        grad,
        switches: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            margin: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CombinedLoss<F> {
    pub triplet: F,
    pub ce: F,
    pub total: F,
    pub grad_embeddings: Vec<F>,
    pub grad_logits: Vec<F>,
    pub switches: Vec<bool>,
    pub triplets: usize,
}

/// `alpha * triplet + beta * ce`.
pub fn combine<F: Scalar>(triplet: F, ce: F, w: &LossWeights) -> F {
    F::from_f64_lossy(w.alpha) * triplet + F::from_f64_lossy(w.beta) * ce
}

#[allow(clippy::too_many_arguments)]
pub fn combined_loss<F: Scalar>(
    emb: &[F],
    logits: &[F],
    b: usize,
    p: usize,
    d: usize,
    n: usize,
    labels: &[usize],
    w: &LossWeights,
) -> Result<CombinedLoss<F>> {
    let ids: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let tri = triplet_loss_ba(emb, b, p, d, &ids, F::from_f64_lossy(w.margin))?;
    let ce = ce_loss(logits, b, p, n, labels)?;
    let a = F::from_f64_lossy(w.alpha);
    let bt = F::from_f64_lossy(w.beta);
    Ok(CombinedLoss {
        triplet: tri.loss.value,
        ce: ce.value,
        total: combine(tri.loss.value, ce.value, w),
        grad_embeddings: tri.loss.grad.into_iter().map(|g| g * a).collect(),
        grad_logits: ce.grad.into_iter().map(|g| g * bt).collect(),
        switches: tri.loss.switches,
        triplets: tri.triplets,
    })
}
