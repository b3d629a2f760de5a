//! Dual-representation gait network.
//!
//! Range crops go through a small residual CNN, sampled points through a
//! two-stage point encoder with motion-aware neighbour embedding. After each
//! stage the point features are mapped into the range stream by
//! cross-attention. The fused level-2 maps are pooled over time, split into
//! horizontal strips, recalibrated by a channel gate and projected to
//! per-strip embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::error::{GaitError, Result};
use crate::geometry::{farthest_point_sample, GaitSequence, Point3};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::seed::{fnv1a, mix_seed};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmrConfig {
    /// Side of the square range crop.
    pub crop_size: usize,
    /// Range CNN widths at level 1 and level 2.
    pub range_channels: [usize; 2],
    /// Sampled points per frame.
    pub num_points: usize,
    /// Point feature widths at level 1 and level 2.
    pub point_channels: [usize; 2],
    /// Neighbours per anchor.
    pub k: usize,
    /// Attention key width.
    pub d_k: usize,
    pub strips: usize,
    pub hpp_dim: usize,
    pub embed_dim: usize,
    pub gsfe_reduction: usize,
    pub num_classes: usize,
    pub use_acm: bool,
    pub use_mafe: bool,
    pub use_gsfe: bool,
}

impl Default for HmrConfig {
    fn default() -> Self {
        Self {
            crop_size: 64,
            range_channels: [32, 64],
            num_points: 256,
            point_channels: [32, 64],
            k: 16,
            d_k: 64,
            strips: 16,
            hpp_dim: 512,
            embed_dim: 256,
            gsfe_reduction: 16,
            num_classes: 8,
            use_acm: true,
            use_mafe: true,
            use_gsfe: true,
        }
    }
}

impl HmrConfig {
    /// Reduced widths that train in minutes on a single core.
    pub fn compact(num_classes: usize) -> Self {
        Self {
            crop_size: 32,
            range_channels: [8, 16],
            num_points: 128,
            point_channels: [16, 32],
            k: 8,
            d_k: 16,
            strips: 8,
            hpp_dim: 128,
            embed_dim: 64,
            gsfe_reduction: 16,
            num_classes,
            ..Self::default()
        }
    }

    /// Smallest sensible model, used for finite-difference checks.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            crop_size: 8,
            range_channels: [3, 4],
            num_points: 64,
            point_channels: [4, 5],
            k: 4,
            d_k: 3,
            strips: 2,
            hpp_dim: 6,
            embed_dim: 5,
            gsfe_reduction: 2,
            num_classes,
            ..Self::default()
        }
    }

    /// Spatial side of the level-1 and level-2 maps.
    pub fn level_sizes(&self) -> [usize; 2] {
        [self.crop_size / 2, self.crop_size / 4]
    }

    /// Anchors kept by the two point stages.
    pub fn anchors(&self) -> [usize; 2] {
        [self.num_points / 2, self.num_points / 4]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GaitError::Config(m));
        if self.crop_size < 4 || self.crop_size % 4 != 0 {
            return bad(format!("crop_size {} must be a positive multiple of 4", self.crop_size));
        }
        let l2 = self.crop_size / 4;
        if self.strips == 0 || l2 % self.strips != 0 {
            return bad(format!("{} strips do not divide the {l2}-row level-2 map", self.strips));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.num_points < 4 * self.k {
            return bad(format!(
                "num_points {} must be at least 4k = {}",
                self.num_points,
                4 * self.k
            ));
        }
        let widths = [
            self.range_channels[0],
            self.range_channels[1],
            self.point_channels[0],
            self.point_channels[1],
            self.d_k,
            self.hpp_dim,
            self.embed_dim,
            self.gsfe_reduction,
            self.num_classes,
        ];
        if widths.contains(&0) {
            return bad("all widths must be >= 1".into());
        }
        if self.hpp_dim / self.gsfe_reduction == 0 {
            return bad("gsfe_reduction exceeds hpp_dim".into());
        }
        Ok(())
    }

    /// Stable 64-bit digest of the configuration.
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serialises");
        fnv1a(text.as_bytes())
    }
}

/// Neighbourhood structure of one point stage. Depends only on coordinates.
#[derive(Clone, Debug)]
pub struct StagePlan<F> {
    /// Anchors per frame.
    pub anchors: usize,
    pub k: usize,
    /// Anchor coordinates, `anchors` per frame.
    pub coords: Vec<Point3<F>>,
    /// Rows of the stage input (frame-major) for each anchor's k neighbours in frame t.
    pub neighbors: Vec<usize>,
    /// `x_j^t - x_j^{t-1}` for each neighbour pair, `[frames * anchors * k, 3]`.
    pub displacements: Tensor<F>,
}

fn sq_dist<F: Scalar>(a: &Point3<F>, b: &Point3<F>) -> F {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Indices of the `k` points nearest to `q`, ascending by distance then index.
pub fn knn<F: Scalar>(pts: &[Point3<F>], q: &Point3<F>, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > pts.len() {
        return Err(GaitError::InvalidArgument(format!(
            "k = {k} neighbours requested from {} points",
            pts.len()
        )));
    }
    let mut d: Vec<(F, usize)> = pts.iter().enumerate().map(|(i, p)| (sq_dist(p, q), i)).collect();
    let cmp = |a: &(F, usize), b: &(F, usize)| {
        a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
    };
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    Ok(d.into_iter().map(|(_, i)| i).collect())
}

impl<F: Scalar> StagePlan<F> {
    /// Plan a stage over `sequences` runs of `frames` frames each; `points`
    /// holds `per_frame` coordinates for every frame, frame-major.
    pub fn build(
        points: &[Point3<F>],
        sequences: usize,
        frames: usize,
        per_frame: usize,
        anchors: usize,
        k: usize,
    ) -> Result<Self> {
        if points.len() != sequences * frames * per_frame {
            return Err(GaitError::Shape(format!(
                "{} points for {sequences}x{frames} frames of {per_frame}",
                points.len()
            )));
        }
        if k > per_frame {
            return Err(GaitError::InvalidArgument(format!(
                "k = {k} exceeds the {per_frame} points per frame"
            )));
        }
        let total = sequences * frames;
        let mut coords = Vec::with_capacity(total * anchors);
        let mut neighbors = Vec::with_capacity(total * anchors * k);
        let mut disp = Vec::with_capacity(total * anchors * k * 3);
        for s in 0..sequences {
            for t in 0..frames {
                let fi = s * frames + t;
                let cur = &points[fi * per_frame..(fi + 1) * per_frame];
                let prev = if t == 0 {
                    cur
                } else {
                    &points[(fi - 1) * per_frame..fi * per_frame]
                };
                for a in farthest_point_sample(cur, anchors)? {
                    let q = cur[a];
                    coords.push(q);
                    let here = knn(cur, &q, k)?;
                    let before = knn(prev, &q, k)?;
                    for (&j, &jp) in here.iter().zip(&before) {
                        neighbors.push(fi * per_frame + j);
                        for c in 0..3 {
                            disp.push(cur[j][c] - prev[jp][c]);
                        }
                    }
                }
            }
        }
        let n = neighbors.len();
        Ok(Self {
            anchors,
            k,
            coords,
            neighbors,
            displacements: Tensor::from_vec(&[n, 3], disp)?,
        })
    }
}

/// Network input for a batch of equally long sequences.
#[derive(Clone, Debug)]
pub struct NetBatch<F> {
    pub sequences: usize,
    pub frames: usize,
    /// `[sequences * frames, 1, crop, crop]`.
    pub crops: Tensor<F>,
    /// `[sequences * frames * num_points, 3]`.
    pub points: Tensor<F>,
    pub stages: Option<[StagePlan<F>; 2]>,
}

impl<F: Scalar> NetBatch<F> {
    pub fn new(cfg: &HmrConfig, seqs: &[&GaitSequence<F>]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| GaitError::InvalidArgument("empty batch".into()))?;
        let frames = first.len();
        if frames == 0 {
            return Err(GaitError::EmptySequence);
        }
        let sz = cfg.crop_size;
        let n = cfg.num_points;
        let mut crops = Vec::with_capacity(seqs.len() * frames * sz * sz);
        let mut pts = Vec::with_capacity(seqs.len() * frames * n);
        for seq in seqs {
            if seq.len() != frames {
                return Err(GaitError::Shape(format!(
                    "sequences of {} and {frames} frames in one batch",
                    seq.len()
                )));
            }
            for f in &seq.frames {
                if f.crop.size != sz {
                    return Err(GaitError::Shape(format!(
                        "crop of {} px, network expects {sz}",
                        f.crop.size
                    )));
                }
                if f.points.points.len() != n {
                    return Err(GaitError::Shape(format!(
                        "{} points, network expects {n}",
                        f.points.points.len()
                    )));
                }
                crops.extend_from_slice(&f.crop.pixels);
                pts.extend_from_slice(&f.points.points);
            }
        }
        Self::from_raw(cfg, seqs.len(), frames, crops, pts)
    }

    /// Batch from flat crop pixels and point coordinates.
    pub fn from_raw(
        cfg: &HmrConfig,
        sequences: usize,
        frames: usize,
        crops: Vec<F>,
        points: Vec<Point3<F>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let total = sequences * frames;
        let sz = cfg.crop_size;
        let crops = Tensor::from_vec(&[total, 1, sz, sz], crops)?;
        let stages = if cfg.use_acm {
            let [m1, m2] = cfg.anchors();
            let s1 = StagePlan::build(&points, sequences, frames, cfg.num_points, m1, cfg.k)?;
            let s2 = StagePlan::build(&s1.coords, sequences, frames, m1, m2, cfg.k)?;
            Some([s1, s2])
        } else {
            None
        };
        let flat: Vec<F> = points.iter().flat_map(|p| p.iter().copied()).collect();
        let n = points.len();
        Ok(Self {
            sequences,
            frames,
            crops,
            points: Tensor::from_vec(&[n, 3], flat)?,
            stages,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub down: LinearIds,
    pub conv1: LinearIds,
    pub conv2: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct ZetaIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct PointStageIds {
    pub lift: LinearIds,
    pub zeta: Option<ZetaIds>,
}

#[derive(Clone, Copy, Debug)]
pub struct AcmIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub ffn1: LinearIds,
    pub ffn2: LinearIds,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct GsfeIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct HmrIds {
    pub stem: LinearIds,
    pub levels: [BlockIds; 2],
    pub points: Option<[PointStageIds; 2]>,
    pub acm: Option<[AcmIds; 2]>,
    pub hpp: LinearIds,
    pub gsfe: Option<GsfeIds>,
    pub head: LinearIds,
    pub classifier: LinearIds,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct NetOutput {
    /// `[sequences, strips, embed_dim]`.
    pub embeddings: Var,
    /// `[sequences, strips, num_classes]`.
    pub logits: Option<Var>,
    /// Attention matrices `[frames, pixels, points]` of each fusion level.
    pub attention: Vec<Var>,
}

/// Per-strip identity vectors of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub strips: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embedding {
    pub fn strip(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct HmrNet<F> {
    pub config: HmrConfig,
    pub params: ParamStore<F>,
    pub ids: HmrIds,
}

/// Every tensor draws from its own stream keyed by name, so enabling or
/// disabling a module leaves the initial values of the others unchanged.
struct Init<'a, F> {
    store: &'a mut ParamStore<F>,
    seed: u64,
}

impl<F: Scalar> Init<'_, F> {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, fnv1a(name.as_bytes())))
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, gain: f64) -> Result<LinearIds> {
        let std = gain / (inp as f64).sqrt();
        Ok(LinearIds {
            w: self.store.insert_normal(&format!("{name}.w"), &[out, inp], std, &mut self.rng(name))?,
            b: self.store.insert_const(&format!("{name}.b"), &[out], 0.0)?,
        })
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize) -> Result<LinearIds> {
        let std = (2.0 / (inp * 9) as f64).sqrt();
        Ok(LinearIds {
            w: self.store.insert_normal(&format!("{name}.w"), &[out, inp, 3, 3], std, &mut self.rng(name))?,
            b: self.store.insert_const(&format!("{name}.b"), &[out], 0.0)?,
        })
    }

    fn strip_linear(&mut self, name: &str, p: usize, out: usize, inp: usize) -> Result<LinearIds> {
        let std = 1.0 / (inp as f64).sqrt();
        Ok(LinearIds {
            w: self.store.insert_normal(&format!("{name}.w"), &[p, out, inp], std, &mut self.rng(name))?,
            b: self.store.insert_const(&format!("{name}.b"), &[p, out], 0.0)?,
        })
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

const PAD1: Conv2dSpec = Conv2dSpec { stride: 1, pad: 1 };
const DOWN: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1 };

impl<F: Scalar> HmrNet<F> {
    pub fn new(config: HmrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let [r1, r2] = c.range_channels;
        let [p1, p2] = c.point_channels;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed,
        };
        let stem = init.conv("range.stem", r1, 1)?;
        let mut levels = Vec::with_capacity(2);
        for (l, (cin, cout)) in [(r1, r1), (r1, r2)].into_iter().enumerate() {
            let name = format!("range.l{}", l + 1);
            levels.push(BlockIds {
                down: init.conv(&format!("{name}.down"), cout, cin)?,
                conv1: init.conv(&format!("{name}.conv1"), cout, cout)?,
                conv2: init.conv(&format!("{name}.conv2"), cout, cout)?,
            });
        }
        let (points, acm) = if c.use_acm {
            let mut stages = Vec::with_capacity(2);
            for (l, (cin, cout)) in [(3, p1), (p1, p2)].into_iter().enumerate() {
                let name = format!("point.s{}", l + 1);
                let lift = init.linear(&format!("{name}.lift"), cout, cin, RELU_GAIN)?;
                let zeta = if c.use_mafe {
                    Some(ZetaIds {
                        fc1: init.linear(&format!("{name}.zeta1"), cout, 3, RELU_GAIN)?,
                        fc2: init.linear(&format!("{name}.zeta2"), cout, cout, 1.0)?,
                    })
                } else {
                    None
                };
                stages.push(PointStageIds { lift, zeta });
            }
            let mut blocks = Vec::with_capacity(2);
            for (l, (cr, cp)) in [(r1, p1), (r2, p2)].into_iter().enumerate() {
                let name = format!("acm{}", l + 1);
                blocks.push(AcmIds {
                    q: init.linear(&format!("{name}.q"), c.d_k, cr, 1.0)?,
                    k: init.linear(&format!("{name}.k"), c.d_k, cp, 1.0)?,
                    v: init.linear(&format!("{name}.v"), cr, cp, 1.0)?,
                    ffn1: init.linear(&format!("{name}.ffn1"), 2 * cr, cr, RELU_GAIN)?,
                    ffn2: init.linear(&format!("{name}.ffn2"), cr, 2 * cr, 1.0)?,
                    gamma: init.store.insert_const(&format!("{name}.ln.gamma"), &[cr], 1.0)?,
                    beta: init.store.insert_const(&format!("{name}.ln.beta"), &[cr], 0.0)?,
                });
            }
            (
                Some([stages[0], stages[1]]),
                Some([blocks[0], blocks[1]]),
            )
        } else {
            (None, None)
        };
        let hpp = init.linear("hpp.fc", c.hpp_dim, r2, 1.0)?;
        let gsfe = if c.use_gsfe {
            let hidden = c.hpp_dim / c.gsfe_reduction;
            Some(GsfeIds {
                fc1: init.linear("gsfe.fc1", hidden, c.hpp_dim, RELU_GAIN)?,
                fc2: init.linear("gsfe.fc2", c.hpp_dim, hidden, 1.0)?,
            })
        } else {
            None
        };
        let head = init.strip_linear("head.fc", c.strips, c.embed_dim, c.hpp_dim)?;
        let classifier = init.strip_linear("cls.fc", c.strips, c.num_classes, c.embed_dim)?;
        let ids = HmrIds {
            stem,
            levels: [levels[0], levels[1]],
            points,
            acm,
            hpp,
            gsfe,
            head,
            classifier,
        };
        Ok(Self {
            config,
            params: store,
            ids,
        })
    }

    fn lin(&self, g: &mut Graph<F>, x: Var, ids: LinearIds) -> Result<Var> {
        let w = g.param(&self.params, ids.w);
        let b = g.param(&self.params, ids.b);
        g.linear(x, w, Some(b))
    }

    fn conv(&self, g: &mut Graph<F>, x: Var, ids: LinearIds, spec: Conv2dSpec) -> Result<Var> {
        let w = g.param(&self.params, ids.w);
        let b = g.param(&self.params, ids.b);
        g.conv2d(x, w, Some(b), spec)
    }

    /// Stem convolution: `[S, 1, H, W] -> [S, C1, H, W]`.
    pub fn range_stem(&self, g: &mut Graph<F>, crops: Var) -> Result<Var> {
        let sz = self.config.crop_size;
        let s = g.shape(crops);
        if s.len() != 4 || s[1] != 1 || s[2] != sz || s[3] != sz {
            return Err(GaitError::Shape(format!(
                "range input {s:?}, expected [frames, 1, {sz}, {sz}]"
            )));
        }
        let y = self.conv(g, crops, self.ids.stem, PAD1)?;
        Ok(g.relu(y))
    }

    /// One stride-2 stage followed by a residual block.
    pub fn range_level(&self, g: &mut Graph<F>, x: Var, level: usize) -> Result<Var> {
        let ids = self.ids.levels[level];
        let d = self.conv(g, x, ids.down, DOWN)?;
        let d = g.relu(d);
        let y = self.conv(g, d, ids.conv1, PAD1)?;
        let y = g.relu(y);
        let y = self.conv(g, y, ids.conv2, PAD1)?;
        let y = g.add(d, y)?;
        Ok(g.relu(y))
    }

    /// Both range levels without fusion.
    pub fn range_branch(&self, g: &mut Graph<F>, crops: Var) -> Result<[Var; 2]> {
        let x = self.range_stem(g, crops)?;
        let l1 = self.range_level(g, x, 0)?;
        let l2 = self.range_level(g, l1, 1)?;
        Ok([l1, l2])
    }

    /// Lift stage inputs and aggregate them over each anchor's neighbourhood.
    pub fn point_stage(&self, g: &mut Graph<F>, input: Var, plan: &StagePlan<F>, stage: usize) -> Result<Var> {
        let ids = self.ids.points.ok_or_else(|| {
            GaitError::InvalidArgument("point branch is disabled".into())
        })?[stage];
        let f = self.lin(g, input, ids.lift)?;
        let f = g.relu(f);
        let zeta = match ids.zeta {
            Some(z) => Some([
                g.param(&self.params, z.fc1.w),
                g.param(&self.params, z.fc1.b),
                g.param(&self.params, z.fc2.w),
                g.param(&self.params, z.fc2.b),
            ]),
            None => None,
        };
        mafe(g, f, plan, zeta)
    }

    /// Both point stages: `[S*N, 3] -> ([S*N/2, C1], [S*N/4, C2])`.
    pub fn point_branch(&self, g: &mut Graph<F>, points: Var, plans: &[StagePlan<F>; 2]) -> Result<[Var; 2]> {
        let h1 = self.point_stage(g, points, &plans[0], 0)?;
        let h2 = self.point_stage(g, h1, &plans[1], 1)?;
        Ok([h1, h2])
    }

    /// Cross-attention of range pixels over point features. Returns the
    /// fused map (same shape as `range`) and the attention matrix.
    pub fn acm_fuse(&self, g: &mut Graph<F>, range: Var, points: Var, level: usize) -> Result<(Var, Var)> {
        let ids = self.ids.acm.ok_or_else(|| GaitError::InvalidArgument("fusion is disabled".into()))?[level];
        let rs = g.shape(range).to_vec();
        let (s, c, h, w) = (rs[0], rs[1], rs[2], rs[3]);
        if c != self.config.range_channels[level] {
            return Err(GaitError::Shape(format!("range map {rs:?} is not level {}", level + 1)));
        }
        let ps = g.shape(points).to_vec();
        let cp = self.config.point_channels[level];
        if ps.len() != 2 || ps[1] != cp || ps[0] % s != 0 {
            return Err(GaitError::Shape(format!("point features {ps:?} are not level {}", level + 1)));
        }
        let m = ps[0] / s;
        let tokens = g.reshape(range, &[s, c, h * w])?;
        let tokens = g.transpose12(tokens)?;
        let pts = g.reshape(points, &[s, m, cp])?;
        let q = self.lin(g, tokens, ids.q)?;
        let k = self.lin(g, pts, ids.k)?;
        let v = self.lin(g, pts, ids.v)?;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, F::one() / F::from_usize(self.config.d_k).unwrap().sqrt());
        let attn = g.softmax_rows(scores);
        let fa = g.bmm(attn, v, false, false)?;
        let ff = self.lin(g, fa, ids.ffn1)?;
        let ff = g.relu(ff);
        let ff = self.lin(g, ff, ids.ffn2)?;
        let sum = g.add(fa, ff)?;
        let gamma = g.param(&self.params, ids.gamma);
        let beta = g.param(&self.params, ids.beta);
        let fused = g.layer_norm(sum, gamma, beta)?;
        let fused = g.transpose12(fused)?;
        let fused = g.reshape(fused, &[s, c, h, w])?;
        Ok((fused, attn))
    }

    /// Per-frame level-2 maps after both fusion steps.
    pub fn hierarchical_forward(&self, g: &mut Graph<F>, batch: &NetBatch<F>) -> Result<(Var, Vec<Var>)> {
        let crops = g.input(batch.crops.clone());
        let x = self.range_stem(g, crops)?;
        let mut r = self.range_level(g, x, 0)?;
        let mut attention = Vec::new();
        let plans = match (&batch.stages, self.ids.acm) {
            (Some(p), Some(_)) => Some(p),
            (None, Some(_)) => {
                return Err(GaitError::InvalidArgument("batch has no point plan".into()))
            }
            _ => None,
        };
        if let Some(plans) = plans {
            let pts = g.input(batch.points.clone());
            let h1 = self.point_stage(g, pts, &plans[0], 0)?;
            let (f1, a1) = self.acm_fuse(g, r, h1, 0)?;
            attention.push(a1);
            r = g.add(r, f1)?;
            let mut r2 = self.range_level(g, r, 1)?;
            let h2 = self.point_stage(g, h1, &plans[1], 1)?;
            let (f2, a2) = self.acm_fuse(g, r2, h2, 1)?;
            attention.push(a2);
            r2 = g.add(r2, f2)?;
            Ok((r2, attention))
        } else {
            Ok((self.range_level(g, r, 1)?, attention))
        }
    }

    /// HPP projection `[B, C, H, W] -> [B, P, hpp_dim]`.
    pub fn hpp(&self, g: &mut Graph<F>, map: Var) -> Result<Var> {
        let pooled = g.strip_pool(map, self.config.strips)?;
        self.lin(g, pooled, self.ids.hpp)
    }

    /// Channel gate shared by all strips. Identity when disabled.
    pub fn gsfe(&self, g: &mut Graph<F>, strips: Var) -> Result<Var> {
        let Some(ids) = self.ids.gsfe else {
            return Ok(strips);
        };
        let gate = self.gsfe_gate(g, strips, ids)?;
        g.mul_bcast1(strips, gate)
    }

    fn gsfe_gate(&self, g: &mut Graph<F>, strips: Var, ids: GsfeIds) -> Result<Var> {
        let squeeze = g.mean_axis1(strips)?;
        let z = self.lin(g, squeeze, ids.fc1)?;
        let z = g.relu(z);
        let z = self.lin(g, z, ids.fc2)?;
        Ok(g.sigmoid(z))
    }

    /// Per-strip embeddings and (optionally) classifier logits.
    pub fn head(&self, g: &mut Graph<F>, strips: Var, with_logits: bool) -> Result<(Var, Option<Var>)> {
        let w = g.param(&self.params, self.ids.head.w);
        let b = g.param(&self.params, self.ids.head.b);
        let emb = g.strip_linear(strips, w, b)?;
        let logits = if with_logits {
            let w = g.param(&self.params, self.ids.classifier.w);
            let b = g.param(&self.params, self.ids.classifier.b);
            Some(g.strip_linear(emb, w, b)?)
        } else {
            None
        };
        Ok((emb, logits))
    }

    pub fn forward(&self, g: &mut Graph<F>, batch: &NetBatch<F>, with_logits: bool) -> Result<NetOutput> {
        let (maps, attention) = self.hierarchical_forward(g, batch)?;
        let pooled = temporal_pool(g, maps, batch.frames)?;
        let strips = self.hpp(g, pooled)?;
        let strips = self.gsfe(g, strips)?;
        let (embeddings, logits) = self.head(g, strips, with_logits)?;
        Ok(NetOutput {
            embeddings,
            logits,
            attention,
        })
    }

    /// Inference on prepared sequences of equal length.
    pub fn embed_batch(&self, seqs: &[&GaitSequence<F>]) -> Result<Vec<Embedding>> {
        let batch = NetBatch::new(&self.config, seqs)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &batch, false)?;
        let (p, d) = (self.config.strips, self.config.embed_dim);
        Ok(g.value(out.embeddings)
            .data()
            .chunks(p * d)
            .map(|c| Embedding {
                strips: p,
                dim: d,
                data: c.iter().map(|v| v.to_f64().unwrap()).collect(),
            })
            .collect())
    }

    pub fn embed(&self, seq: &GaitSequence<F>) -> Result<Embedding> {
        Ok(self.embed_batch(&[seq])?.remove(0))
    }
}

/// Motion-aware aggregation: `h_i = max_j (f_j^t + zeta(x_j^t - x_j^{t-1}))`.
///
/// `features` are the per-point features of the stage input (rows indexed by
/// `plan.neighbors`); `zeta` holds `[w1, b1, w2, b2]` or `None` to drop the
/// motion term.
pub fn mafe<F: Scalar>(g: &mut Graph<F>, features: Var, plan: &StagePlan<F>, zeta: Option<[Var; 4]>) -> Result<Var> {
    let f = g.gather_rows(features, plan.neighbors.clone())?;
    let f = match zeta {
        Some([w1, b1, w2, b2]) => {
            let d = g.input(plan.displacements.clone());
            let m = g.linear(d, w1, Some(b1))?;
            let m = g.relu(m);
            let m = g.linear(m, w2, Some(b2))?;
            g.add(f, m)?
        }
        None => f,
    };
    g.group_max(f, plan.k)
}

/// Elementwise max over consecutive groups of `frames` maps.
pub fn temporal_pool<F: Scalar>(g: &mut Graph<F>, maps: Var, frames: usize) -> Result<Var> {
    let s = g.shape(maps).to_vec();
    if s.is_empty() || frames == 0 || s[0] % frames != 0 {
        return Err(GaitError::Shape(format!("temporal pool of {frames} over {s:?}")));
    }
    let per: usize = s[1..].iter().product();
    let flat = g.reshape(maps, &[s[0], per])?;
    let pooled = g.group_max(flat, frames)?;
    let mut out = s;
    out[0] /= frames;
    g.reshape(pooled, &out)
}
