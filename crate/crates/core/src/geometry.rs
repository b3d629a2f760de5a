//! Point-cloud preprocessing: spherical range projection, subject cropping,
//! farthest point sampling and centring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GaitError, Result};
use crate::scalar::{lit, Scalar};

pub type Point3<F> = [F; 3];

/// Crop normalisation constant: the capture range of the sensor, in metres.
pub const MAX_RANGE_M: f64 = 25.0;
pub const DEFAULT_CROP_SIZE: usize = 64;
pub const DEFAULT_NUM_POINTS: usize = 256;

/// Elevation slack so points lying exactly on the field-of-view boundary survive rounding.
const FOV_SLACK_RAD: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame<F> {
    pub points: Vec<Point3<F>>,
    /// 1-based frame number within its sequence.
    pub frame_index: usize,
}

impl<F: Scalar> PointCloudFrame<F> {
    pub fn new(points: Vec<Point3<F>>, frame_index: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(GaitError::RejectedInput("empty point frame".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GaitError::RejectedInput("non-finite coordinate".into()));
        }
        Ok(Self {
            points,
            frame_index,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorIntrinsics {
    /// Upward vertical field of view, degrees.
    pub f_up: f64,
    /// Downward vertical field of view, degrees.
    pub f_down: f64,
    /// Image rows.
    pub h: usize,
    /// Image columns.
    pub w: usize,
}

impl Default for SensorIntrinsics {
    /// 128-beam, 360° x 45° spinning sensor.
    fn default() -> Self {
        Self {
            f_up: 22.5,
            f_down: 22.5,
            h: 128,
            w: 1024,
        }
    }
}

impl SensorIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_up > 0.0 && self.f_down > 0.0) || self.h < 2 || self.w < 2 {
            return Err(GaitError::InvalidArgument(format!(
                "invalid intrinsics {self:?}"
            )));
        }
        Ok(())
    }
}

/// Where a single point lands in the range image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelHit<F> {
    pub row: usize,
    pub col: usize,
    pub range: F,
}

/// Spherical projection of one point. `Ok(None)` if the elevation is outside the field of view.
pub fn project_point<F: Scalar>(p: &Point3<F>, intr: &SensorIntrinsics) -> Result<Option<PixelHit<F>>> {
    let [x, y, z] = *p;
    let r = (x * x + y * y + z * z).sqrt();
    if !(r > F::zero()) {
        return Err(GaitError::RejectedInput(format!(
            "point at the sensor origin: {p:?}"
        )));
    }
    let up: F = lit(intr.f_up.to_radians());
    let down: F = lit(intr.f_down.to_radians());
    let fov = up + down;
    let elevation = (z / r).asin();
    let slack: F = lit(FOV_SLACK_RAD);
    if elevation > up + slack || elevation < -down - slack {
        return Ok(None);
    }
    let w: F = lit(intr.w as f64);
    let h: F = lit(intr.h as f64);
    let half: F = lit(0.5);
    let pi: F = lit(std::f64::consts::PI);
    let u = half * (F::one() - y.atan2(x) / pi) * w;
    let v = (F::one() - (elevation + up) / fov) * h;
    Ok(Some(PixelHit {
        row: clamp_index(v, intr.h),
        col: clamp_index(u, intr.w),
        range: r,
    }))
}

fn clamp_index<F: Scalar>(v: F, len: usize) -> usize {
    let f = v.floor();
    if f <= F::zero() {
        0
    } else {
        f.to_usize().unwrap_or(len - 1).min(len - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage<F> {
    /// Row-major `h x w`; zero marks an empty pixel.
    pub ranges: Vec<F>,
    pub intrinsics: SensorIntrinsics,
    /// Points discarded because their elevation fell outside the field of view.
    pub dropped: usize,
}

impl<F: Scalar> RangeImage<F> {
    pub fn empty(intrinsics: SensorIntrinsics) -> Self {
        Self {
            ranges: vec![F::zero(); intrinsics.h * intrinsics.w],
            intrinsics,
            dropped: 0,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> F {
        self.ranges[row * self.intrinsics.w + col]
    }

    pub fn nonzero_count(&self) -> usize {
        self.ranges.iter().filter(|v| **v > F::zero()).count()
    }
}

/// Project a frame; colliding points keep the nearest range.
pub fn project_to_range<F: Scalar>(
    frame: &PointCloudFrame<F>,
    intr: &SensorIntrinsics,
) -> Result<RangeImage<F>> {
    intr.validate()?;
    if frame.is_empty() {
        return Err(GaitError::RejectedInput("empty point frame".into()));
    }
    let mut img = RangeImage::empty(*intr);
    for p in &frame.points {
        match project_point(p, intr)? {
            Some(hit) => {
                let slot = &mut img.ranges[hit.row * intr.w + hit.col];
                if *slot == F::zero() || hit.range < *slot {
                    *slot = hit.range;
                }
            }
            None => img.dropped += 1,
        }
    }
    Ok(img)
}

/// Pixel rectangle in a range image. `col0 + width` may exceed the image
/// width, in which case the rectangle wraps around the azimuth seam.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeCrop<F> {
    pub size: usize,
    /// Row-major `size x size`, values in `[0, 1]`.
    pub pixels: Vec<F>,
    pub source_bbox: PixelRect,
}

/// Tight bounding box of nonzero pixels. Columns are treated as circular so a
/// subject straddling the azimuth seam yields one contiguous box.
pub fn subject_bbox<F: Scalar>(img: &RangeImage<F>) -> Option<PixelRect> {
    let (h, w) = (img.intrinsics.h, img.intrinsics.w);
    let mut row_any = vec![false; h];
    let mut col_any = vec![false; w];
    for r in 0..h {
        for c in 0..w {
            if img.ranges[r * w + c] > F::zero() {
                row_any[r] = true;
                col_any[c] = true;
            }
        }
    }
    let row0 = row_any.iter().position(|&b| b)?;
    let row1 = row_any.iter().rposition(|&b| b)?;
    // longest circular run of empty columns; the box is its complement
    let occupied = col_any.iter().filter(|&&b| b).count();
    let (col0, width) = if occupied == w {
        (0, w)
    } else {
        let start = col_any.iter().position(|&b| b).unwrap();
        let mut best_len = 0;
        let mut best_end = 0;
        let mut run = 0;
        for step in 1..=w {
            let c = (start + step) % w;
            if col_any[c] {
                if run > best_len {
                    best_len = run;
                    best_end = c;
                }
                run = 0;
            } else {
                run += 1;
            }
        }
        // the first occupied column after the longest gap opens the box
        (best_end, w - best_len)
    };
    Some(PixelRect {
        row0,
        col0,
        height: row1 - row0 + 1,
        width,
    })
}

/// Extract the subject, pad to a square, bilinearly resize to `size x size`
/// and normalise by `max_range`.
pub fn crop_subject<F: Scalar>(img: &RangeImage<F>, size: usize, max_range: f64) -> Result<RangeCrop<F>> {
    if size == 0 {
        return Err(GaitError::InvalidArgument("crop size must be positive".into()));
    }
    let bbox = subject_bbox(img).ok_or(GaitError::EmptySubject)?;
    let w = img.intrinsics.w;
    let side = bbox.height.max(bbox.width);
    let pad_top = (side - bbox.height) / 2;
    let pad_left = (side - bbox.width) / 2;
    let sample = |r: usize, c: usize| -> F {
        if r < pad_top || c < pad_left || r - pad_top >= bbox.height || c - pad_left >= bbox.width {
            return F::zero();
        }
        let row = bbox.row0 + r - pad_top;
        let col = (bbox.col0 + c - pad_left) % w;
        img.at(row, col)
    };
    let scale: F = lit(side as f64 / size as f64);
    let half: F = lit(0.5);
    let max_idx: F = lit((side - 1) as f64);
    let coord = |d: usize| -> (usize, usize, F) {
        let s = ((F::from_usize(d).unwrap() + half) * scale - half)
            .max(F::zero())
            .min(max_idx);
        let i0 = s.floor().to_usize().unwrap_or(0);
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, s - F::from_usize(i0).unwrap())
    };
    let inv_max: F = lit(1.0 / max_range);
    let mut pixels = vec![F::zero(); size * size];
    for dy in 0..size {
        let (y0, y1, fy) = coord(dy);
        for dx in 0..size {
            let (x0, x1, fx) = coord(dx);
            let top = sample(y0, x0) * (F::one() - fx) + sample(y0, x1) * fx;
            let bottom = sample(y1, x0) * (F::one() - fx) + sample(y1, x1) * fx;
            let v = (top * (F::one() - fy) + bottom * fy) * inv_max;
            pixels[dy * size + dx] = v.max(F::zero()).min(F::one());
        }
    }
    Ok(RangeCrop {
        size,
        pixels,
        source_bbox: bbox,
    })
}

fn sq_dist<F: Scalar>(a: &Point3<F>, b: &Point3<F>) -> F {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn centroid<F: Scalar>(pts: &[Point3<F>]) -> Point3<F> {
    let n = F::from_usize(pts.len().max(1)).unwrap();
    let mut c = [F::zero(); 3];
    for p in pts {
        for a in 0..3 {
            c[a] = c[a] + p[a];
        }
    }
    c.map(|v| v / n)
}

/// Greedy farthest point sampling.
///
/// Seeds with the lowest-index point farthest from the centroid, then
/// repeatedly takes the unselected point whose distance to the selection is
/// largest (lowest index on ties). When fewer than `n` points exist the
/// selection is repeated cyclically up to length `n`.
pub fn farthest_point_sample<F: Scalar>(pts: &[Point3<F>], n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(GaitError::InvalidArgument("sample count must be >= 1".into()));
    }
    if pts.is_empty() {
        return Err(GaitError::InvalidArgument("cannot sample an empty point set".into()));
    }
    let c = centroid(pts);
    let mut seed = 0;
    let mut best = F::neg_infinity();
    for (i, p) in pts.iter().enumerate() {
        let d = sq_dist(p, &c);
        if d > best {
            best = d;
            seed = i;
        }
    }
    let take = n.min(pts.len());
    let mut selected = Vec::with_capacity(n);
    let mut taken = vec![false; pts.len()];
    let mut min_d = vec![F::infinity(); pts.len()];
    let mut cur = seed;
    loop {
        selected.push(cur);
        taken[cur] = true;
        if selected.len() == take {
            break;
        }
        let mut next = usize::MAX;
        let mut next_d = F::neg_infinity();
        for (i, p) in pts.iter().enumerate() {
            let d = sq_dist(p, &pts[cur]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > next_d {
                next_d = min_d[i];
                next = i;
            }
        }
        cur = next;
    }
    for i in take..n {
        selected.push(selected[i % take]);
    }
    Ok(selected)
}

/// Subtract the centroid; no rotation or scaling.
pub fn normalize_frame<F: Scalar>(pts: &[Point3<F>]) -> Vec<Point3<F>> {
    let c = centroid(pts);
    pts.iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledPoints<F> {
    /// Centred coordinates, metres.
    pub points: Vec<Point3<F>>,
    pub source_indices: Vec<usize>,
}

pub fn sample_points<F: Scalar>(frame: &PointCloudFrame<F>, n: usize) -> Result<SampledPoints<F>> {
    let idx = farthest_point_sample(&frame.points, n)?;
    let raw: Vec<Point3<F>> = idx.iter().map(|&i| frame.points[i]).collect();
    Ok(SampledPoints {
        points: normalize_frame(&raw),
        source_indices: idx,
    })
}

/// One frame converted into both network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFrame<F> {
    pub frame_index: usize,
    pub crop: RangeCrop<F>,
    pub points: SampledPoints<F>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessSpec {
    pub intrinsics: SensorIntrinsics,
    pub crop_size: usize,
    pub num_points: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            intrinsics: SensorIntrinsics::default(),
            crop_size: DEFAULT_CROP_SIZE,
            num_points: DEFAULT_NUM_POINTS,
        }
    }
}

/// `Ok(None)` when the frame carries no subject after projection.
pub fn prepare_frame<F: Scalar>(
    frame: &PointCloudFrame<F>,
    spec: &PreprocessSpec,
) -> Result<Option<PreparedFrame<F>>> {
    if frame.is_empty() {
        return Ok(None);
    }
    let img = project_to_range(frame, &spec.intrinsics)?;
    let crop = match crop_subject(&img, spec.crop_size, MAX_RANGE_M) {
        Ok(c) => c,
        Err(GaitError::EmptySubject) => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(Some(PreparedFrame {
        frame_index: frame.frame_index,
        crop,
        points: sample_points(frame, spec.num_points)?,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FramePolicy {
    /// Seeded uniformly random contiguous window.
    Training { seed: u64 },
    /// Leading frames, cycled when the sequence is short.
    Evaluation,
}

/// Positions (into a list of `available` frames) of the `t` frames to use.
pub fn select_frames(available: usize, t: usize, policy: FramePolicy) -> Result<Vec<usize>> {
    if available == 0 {
        return Err(GaitError::EmptySequence);
    }
    if t == 0 {
        return Err(GaitError::InvalidArgument("frame count must be >= 1".into()));
    }
    let start = match policy {
        FramePolicy::Training { seed } if available > t => {
            ChaCha8Rng::seed_from_u64(seed).gen_range(0..=available - t)
        }
        _ => 0,
    };
    Ok((0..t).map(|i| (start + i) % available).collect())
}

/// Index-aligned range crops and sampled points for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitSequence<F> {
    pub subject_id: u32,
    pub sequence_id: u32,
    pub frames: Vec<PreparedFrame<F>>,
}

impl<F: Scalar> GaitSequence<F> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame indices in selection order.
    pub fn frame_indices(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.frame_index).collect()
    }

    /// Re-select `t` frames from an already prepared sequence.
    pub fn window(&self, t: usize, policy: FramePolicy) -> Result<GaitSequence<F>> {
        let pick = select_frames(self.frames.len(), t, policy)?;
        Ok(GaitSequence {
            subject_id: self.subject_id,
            sequence_id: self.sequence_id,
            frames: pick.into_iter().map(|i| self.frames[i].clone()).collect(),
        })
    }
}

/// Prepare every frame (dropping empty ones) without selecting a window.
pub fn prepare_all<F: Scalar>(
    subject_id: u32,
    sequence_id: u32,
    raw: &[PointCloudFrame<F>],
    spec: &PreprocessSpec,
) -> Result<GaitSequence<F>> {
    let mut frames = Vec::with_capacity(raw.len());
    for f in raw {
        if let Some(p) = prepare_frame(f, spec)? {
            frames.push(p);
        }
    }
    if frames.is_empty() {
        return Err(GaitError::EmptySequence);
    }
    Ok(GaitSequence {
        subject_id,
        sequence_id,
        frames,
    })
}

/// Full per-sequence preprocessing: prepare frames, then select `t` of them.
pub fn preprocess_sequence<F: Scalar>(
    subject_id: u32,
    sequence_id: u32,
    raw: &[PointCloudFrame<F>],
    spec: &PreprocessSpec,
    t: usize,
    policy: FramePolicy,
) -> Result<GaitSequence<F>> {
    if raw.is_empty() {
        return Err(GaitError::EmptySequence);
    }
    prepare_all(subject_id, sequence_id, raw, spec)?.window(t, policy)
}
