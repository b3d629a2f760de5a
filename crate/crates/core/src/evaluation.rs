//! Gallery/probe protocol, retrieval metrics and reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{load_sequence, DatasetIndex, SequenceRecord};
use crate::error::{GaitError, Result};
use crate::geometry::{prepare_all, FramePolicy, GaitSequence};
use crate::hmrnet::{Embedding, HmrNet};
use crate::scalar::Scalar;
use crate::seed::mix_seed;
use crate::training::{cast_frame, ModelSpec, MODEL_KIND};

pub const SWEEP_FRAMES: [usize; 6] = [5, 10, 15, 20, 25, 30];
pub const CROSS_VIEW_CENTER_DEG: f64 = 90.0;
pub const CROSS_VIEW_TOLERANCE_DEG: f64 = 15.0;

pub const ORACLE_KIND: &str = "oracle-stub";
pub const CONSTANT_KIND: &str = "constant-stub";

/// Anything that maps a raw sequence to per-strip embeddings.
pub trait SequenceEmbedder {
    /// `n_frames = None` uses every frame; `Some(n)` the first `n`, cycled if short.
    fn embed(&self, seq: &SequenceRecord, n_frames: Option<usize>) -> Result<Embedding>;
}

/// Trained network together with its preprocessing.
pub struct NetEmbedder<F> {
    pub spec: ModelSpec,
    pub net: HmrNet<F>,
}

impl<F: Scalar> NetEmbedder<F> {
    pub fn prepare(&self, seq: &SequenceRecord) -> Result<GaitSequence<F>> {
        let raw = seq.frames.iter().map(cast_frame).collect::<Result<Vec<_>>>()?;
        prepare_all(seq.meta.subject_id, seq.meta.sequence_id, &raw, &self.spec.preprocess())
    }
}

impl<F: Scalar> SequenceEmbedder for NetEmbedder<F> {
    fn embed(&self, seq: &SequenceRecord, n_frames: Option<usize>) -> Result<Embedding> {
        let prepared = self.prepare(seq)?;
        let window = match n_frames {
            Some(n) => prepared.window(n, FramePolicy::Evaluation)?,
            None => prepared,
        };
        self.net.embed(&window)
    }
}

/// Test double that returns the subject id one-hot, or a constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubSpec {
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct OracleStub(pub StubSpec);

impl SequenceEmbedder for OracleStub {
    fn embed(&self, seq: &SequenceRecord, _n_frames: Option<usize>) -> Result<Embedding> {
        let id = seq.meta.subject_id as usize;
        if id >= self.0.dim {
            return Err(GaitError::InvalidArgument(format!(
                "subject {id} does not fit a {}-dim one-hot",
                self.0.dim
            )));
        }
        let mut data = vec![0.0; self.0.dim];
        data[id] = 1.0;
        Ok(Embedding {
            strips: 1,
            dim: self.0.dim,
            data,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ConstantStub(pub StubSpec);

impl SequenceEmbedder for ConstantStub {
    fn embed(&self, _seq: &SequenceRecord, _n_frames: Option<usize>) -> Result<Embedding> {
        Ok(Embedding {
            strips: 1,
            dim: self.0.dim,
            data: vec![1.0; self.0.dim],
        })
    }
}

/// Stub checkpoint with no parameters.
pub fn stub_checkpoint(kind: &str, dim: usize) -> Checkpoint<f32> {
    Checkpoint {
        kind: kind.to_string(),
        config_json: serde_json::to_string(&StubSpec { dim }).unwrap(),
        iteration: 0,
        params: Default::default(),
        moments: None,
    }
}

/// Build the embedder stored in a checkpoint file.
pub fn load_embedder(path: &Path) -> Result<Box<dyn SequenceEmbedder>> {
    let ck = Checkpoint::<f32>::load(path)?;
    match ck.kind.as_str() {
        MODEL_KIND => {
            let spec = ModelSpec::from_json(&ck.config_json)?;
            let mut net = HmrNet::<f32>::new(spec.net.clone(), 0)?;
            net.params.load_from(&ck.params)?;
            Ok(Box::new(NetEmbedder { spec, net }))
        }
        ORACLE_KIND | CONSTANT_KIND => {
            let spec: StubSpec = serde_json::from_str(&ck.config_json)
                .map_err(|e| GaitError::Checkpoint(format!("stub config: {e}")))?;
            if ck.kind == ORACLE_KIND {
                Ok(Box::new(OracleStub(spec)))
            } else {
                Ok(Box::new(ConstantStub(spec)))
            }
        }
        other => Err(GaitError::Checkpoint(format!("unknown model kind {other}"))),
    }
}

/// Mean over strips of the Euclidean distance between corresponding strips.
pub fn distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.strips != b.strips || a.dim != b.dim || a.data.len() != b.data.len() {
        return Err(GaitError::Shape(format!(
            "embeddings {}x{} vs {}x{}",
            a.strips, a.dim, b.strips, b.dim
        )));
    }
    let total: f64 = (0..a.strips)
        .map(|s| {
            a.strip(s)
                .iter()
                .zip(b.strip(s))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / a.strips as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqRef {
    pub subject_id: u32,
    pub sequence_id: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GalleryProbeSplit {
    pub gallery: Vec<SeqRef>,
    pub probes: Vec<SeqRef>,
    pub seed: u64,
}

/// One gallery sequence per subject chosen uniformly by `(seed, subject_id)`;
/// the rest become probes. `sequence_filter` restricts the eligible sequences.
pub fn build_split(
    index: &DatasetIndex,
    subjects: &[u32],
    sequence_filter: Option<&[u32]>,
    seed: u64,
) -> Result<GalleryProbeSplit> {
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    for &sid in subjects {
        let entry = index
            .subject(sid)
            .ok_or_else(|| GaitError::InvalidArgument(format!("unknown subject {sid}")))?;
        let seqs: Vec<u32> = entry
            .sequences
            .iter()
            .map(|q| q.sequence_id)
            .filter(|q| sequence_filter.map_or(true, |f| f.contains(q)))
            .collect();
        if seqs.is_empty() {
            log::warn!("subject {sid} has no eligible sequences");
            continue;
        }
        if seqs.len() == 1 {
            log::warn!("subject {sid} has a single sequence; it is gallery-only");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, sid as u64));
        let pick = rng.gen_range(0..seqs.len());
        for (i, &q) in seqs.iter().enumerate() {
            let r = SeqRef {
                subject_id: sid,
                sequence_id: q,
            };
            if i == pick {
                gallery.push(r);
            } else {
                probes.push(r);
            }
        }
    }
    Ok(GalleryProbeSplit {
        gallery,
        probes,
        seed,
    })
}

/// Probe-by-gallery distances with aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub probe_labels: Vec<u32>,
    pub gallery_labels: Vec<u32>,
}

impl DistanceMatrix {
    pub fn new(values: Vec<f64>, probe_labels: Vec<u32>, gallery_labels: Vec<u32>) -> Result<Self> {
        let (rows, cols) = (probe_labels.len(), gallery_labels.len());
        if values.len() != rows * cols {
            return Err(GaitError::Shape(format!("{} distances for {rows}x{cols}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GaitError::InvalidArgument("distances must be finite and >= 0".into()));
        }
        Ok(Self {
            rows,
            cols,
            values,
            probe_labels,
            gallery_labels,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Gallery indices of probe `i` by ascending distance, ties by index.
    pub fn ranking(&self, i: usize) -> Vec<usize> {
        let row = self.row(i);
        let mut order: Vec<usize> = (0..self.cols).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        order
    }

    /// Keep only the given probe rows.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            rows: rows.len(),
            cols: self.cols,
            values: rows.iter().flat_map(|&r| self.row(r).to_vec()).collect(),
            probe_labels: rows.iter().map(|&r| self.probe_labels[r]).collect(),
            gallery_labels: self.gallery_labels.clone(),
        }
    }
}

/// Percentage of probes with a true match among the `k` nearest gallery entries.
pub fn rank_k(dm: &DistanceMatrix, k: usize) -> f64 {
    if dm.rows == 0 {
        return 0.0;
    }
    let hits = (0..dm.rows)
        .filter(|&i| {
            dm.ranking(i)
                .iter()
                .take(k)
                .any(|&j| dm.gallery_labels[j] == dm.probe_labels[i])
        })
        .count();
    100.0 * hits as f64 / dm.rows as f64
}

/// Mean average precision over probes, as a percentage. Probes without a
/// positive gallery entry contribute zero.
pub fn mean_average_precision(dm: &DistanceMatrix) -> f64 {
    if dm.rows == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..dm.rows {
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &j) in dm.ranking(i).iter().enumerate() {
            if dm.gallery_labels[j] == dm.probe_labels[i] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits > 0 {
            total += ap / hits as f64;
        }
    }
    100.0 * total / dm.rows as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub count: usize,
}

impl SubsetMetrics {
    pub fn of(dm: &DistanceMatrix) -> Self {
        Self {
            rank1: rank_k(dm, 1),
            rank5: rank_k(dm, 5),
            map: mean_average_precision(dm),
            count: dm.rows,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subsets {
    pub cross_view: Option<SubsetMetrics>,
    pub night: Option<SubsetMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub frames: usize,
    pub rank1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub gallery: usize,
    pub probes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub counts: Counts,
    pub subsets: Subsets,
    pub frames_sweep: Vec<SweepEntry>,
    pub split_seed: u64,
    pub checkpoint_id: String,
}

impl MetricsReport {
    pub fn summary_line(&self) -> String {
        format!("rank1={:.2} rank5={:.2} map={:.2}", self.rank1, self.rank5, self.map)
    }

    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("frames,rank1\n");
        for e in &self.frames_sweep {
            s.push_str(&format!("{},{:.4}\n", e.frames, e.rank1));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| GaitError::Config(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| GaitError::io(path, e))?;
        let csv = path.with_extension("csv");
        fs::write(&csv, self.sweep_csv()).map_err(|e| GaitError::io(csv, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SubsetFilter {
    #[default]
    All,
    CrossView,
    Night,
}

impl std::str::FromStr for SubsetFilter {
    type Err = GaitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "cross-view" | "cross_view" => Ok(Self::CrossView),
            "night" => Ok(Self::Night),
            _ => Err(GaitError::InvalidArgument(format!(
                "unknown subset {s} (expected all, cross-view or night)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub subjects: Vec<u32>,
    pub sequence_filter: Option<Vec<u32>>,
    pub seed: u64,
    /// Frames per sequence for the headline metrics; all when `None`.
    pub frames: Option<usize>,
    pub subset: SubsetFilter,
    pub sweep: bool,
    pub checkpoint_id: String,
}

impl EvalOptions {
    pub fn test_split(index: &DatasetIndex, seed: u64) -> Self {
        Self {
            subjects: index.test.clone(),
            sequence_filter: None,
            seed,
            frames: None,
            subset: SubsetFilter::All,
            sweep: true,
            checkpoint_id: String::new(),
        }
    }
}

/// Smallest angle between two headings, degrees.
pub fn angle_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

pub fn is_cross_view(probe_deg: f64, gallery_deg: f64) -> bool {
    (angle_diff_deg(probe_deg, gallery_deg) - CROSS_VIEW_CENTER_DEG).abs() <= CROSS_VIEW_TOLERANCE_DEG
}

fn embed_all(
    model: &dyn SequenceEmbedder,
    records: &BTreeMap<(u32, u32), SequenceRecord>,
    refs: &[SeqRef],
    frames: Option<usize>,
) -> Result<Vec<Embedding>> {
    refs.iter()
        .map(|r| {
            let rec = &records[&(r.subject_id, r.sequence_id)];
            let e = model.embed(rec, frames)?;
            if !e.is_finite() {
                return Err(GaitError::InvalidArgument(format!(
                    "non-finite embedding for {}/{}",
                    r.subject_id, r.sequence_id
                )));
            }
            Ok(e)
        })
        .collect()
}

pub fn distance_matrix(
    probes: &[Embedding],
    gallery: &[Embedding],
    probe_labels: Vec<u32>,
    gallery_labels: Vec<u32>,
) -> Result<DistanceMatrix> {
    let mut values = Vec::with_capacity(probes.len() * gallery.len());
    for p in probes {
        for g in gallery {
            values.push(distance(p, g)?);
        }
    }
    DistanceMatrix::new(values, probe_labels, gallery_labels)
}

/// Full protocol: split, embed, score, subsets and frame sweep.
pub fn evaluate(model: &dyn SequenceEmbedder, index: &DatasetIndex, opts: &EvalOptions) -> Result<MetricsReport> {
    let split = build_split(index, &opts.subjects, opts.sequence_filter.as_deref(), opts.seed)?;
    if split.gallery.is_empty() {
        return Err(GaitError::InvalidArgument("no gallery sequences to evaluate".into()));
    }
    let mut records = BTreeMap::new();
    let mut entries = BTreeMap::new();
    for r in split.gallery.iter().chain(&split.probes) {
        let entry = index
            .subject(r.subject_id)
            .and_then(|s| s.sequences.iter().find(|q| q.sequence_id == r.sequence_id))
            .expect("split refers to indexed sequences");
        records.insert((r.subject_id, r.sequence_id), load_sequence(&index.root, r.subject_id, entry)?);
        entries.insert((r.subject_id, r.sequence_id), entry.clone());
    }
    let probe_labels: Vec<u32> = split.probes.iter().map(|r| r.subject_id).collect();
    let gallery_labels: Vec<u32> = split.gallery.iter().map(|r| r.subject_id).collect();

    let score = |frames: Option<usize>| -> Result<DistanceMatrix> {
        let g = embed_all(model, &records, &split.gallery, frames)?;
        let p = embed_all(model, &records, &split.probes, frames)?;
        distance_matrix(&p, &g, probe_labels.clone(), gallery_labels.clone())
    };
    let dm = score(opts.frames)?;

    let gallery_view: BTreeMap<u32, f64> = split
        .gallery
        .iter()
        .map(|r| (r.subject_id, entries[&(r.subject_id, r.sequence_id)].view_angle_deg))
        .collect();
    let subset = |keep: &dyn Fn(&SeqRef) -> bool| -> Option<SubsetMetrics> {
        let rows: Vec<usize> = (0..split.probes.len()).filter(|&i| keep(&split.probes[i])).collect();
        (!rows.is_empty()).then(|| SubsetMetrics::of(&dm.select_rows(&rows)))
    };
    let want_cv = matches!(opts.subset, SubsetFilter::All | SubsetFilter::CrossView);
    let want_night = matches!(opts.subset, SubsetFilter::All | SubsetFilter::Night);
    let cross_view = if want_cv {
        subset(&|r: &SeqRef| {
            let view = entries[&(r.subject_id, r.sequence_id)].view_angle_deg;
            is_cross_view(view, gallery_view[&r.subject_id])
        })
    } else {
        None
    };
    let night = if want_night {
        subset(&|r: &SeqRef| entries[&(r.subject_id, r.sequence_id)].night)
    } else {
        None
    };

    let mut frames_sweep = Vec::new();
    if opts.sweep {
        for n in SWEEP_FRAMES {
            frames_sweep.push(SweepEntry {
                frames: n,
                rank1: rank_k(&score(Some(n))?, 1),
            });
        }
    }
    Ok(MetricsReport {
        rank1: rank_k(&dm, 1),
        rank5: rank_k(&dm, 5),
        map: mean_average_precision(&dm),
        counts: Counts {
            gallery: split.gallery.len(),
            probes: split.probes.len(),
        },
        subsets: Subsets { cross_view, night },
        frames_sweep,
        split_seed: opts.seed,
        checkpoint_id: opts.checkpoint_id.clone(),
    })
}
