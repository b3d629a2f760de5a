//! Deterministic synthetic LiDAR walkers.
//!
//! Each subject is a set of capsule limbs articulated by a sinusoidal gait.
//! A frame is produced by surface-sampling the posed body with a density
//! that falls off with the squared distance to the sensor, discarding
//! back-facing samples and then applying noise, occlusion and clutter.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    frame_file_name, sequence_dir, write_frame, write_meta, DatasetIndex, SequenceEntry,
    SequenceMeta, SubjectEntry,
};
use crate::error::{GaitError, Result};
use crate::geometry::{Point3, PointCloudFrame, MAX_RANGE_M};
pub use crate::seed::mix_seed;

/// Samples drawn (before visibility culling) for a subject at 1 m.
pub const SAMPLE_DENSITY: f64 = 60_000.0;
pub const DEFAULT_FRAME_RATE: f64 = 10.0;
pub const DEFAULT_SENSOR_HEIGHT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectModel {
    pub subject_id: u32,
    /// torso, thigh, shin, upper arm, forearm, head radius (metres).
    pub limb_lengths: [f64; 6],
    /// Standing height, metres.
    pub height: f64,
    /// Length of one full gait cycle (two steps), metres.
    pub stride_length: f64,
    /// Steps per second.
    pub cadence: f64,
    /// Peak shoulder swing, radians.
    pub arm_swing_amplitude: f64,
    /// Limb radius multiplier.
    pub girth: f64,
}

const NECK: f64 = 0.04;

impl SubjectModel {
    pub fn torso(&self) -> f64 {
        self.limb_lengths[0]
    }
    pub fn thigh(&self) -> f64 {
        self.limb_lengths[1]
    }
    pub fn shin(&self) -> f64 {
        self.limb_lengths[2]
    }
    pub fn upper_arm(&self) -> f64 {
        self.limb_lengths[3]
    }
    pub fn forearm(&self) -> f64 {
        self.limb_lengths[4]
    }
    pub fn head_radius(&self) -> f64 {
        self.limb_lengths[5]
    }

    /// Walking speed in m/s.
    pub fn speed(&self) -> f64 {
        self.stride_length * self.cadence / 2.0
    }

    /// Gait phase advance per second (one cycle every two steps).
    pub fn phase_rate(&self) -> f64 {
        PI * self.cadence
    }
}

/// Per-subject fractions in [0,1) for height and cadence: additive recurrences
/// with irrational steps and seeded offsets, so consecutive ids spread evenly
/// over the ranges instead of clumping as independent draws do.
fn spread_fractions(subject_id: u32, seed: u64) -> [f64; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5B1E_C7FF));
    let steps = [0.618_033_988_749_894_9, 0.414_213_562_373_095_1];
    steps.map(|step| (rng.gen::<f64>() + step * subject_id as f64).fract())
}

/// Subject parameters drawn from fixed ranges, keyed by `(subject_id, seed)`.
pub fn generate_subject(subject_id: u32, seed: u64) -> SubjectModel {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5B1E_C700 ^ subject_id as u64));
    let weyl = spread_fractions(subject_id, seed);
    let height = 1.42 + 0.56 * weyl[0];
    let mut j = || rng.gen_range(0.8..1.2);
    let torso = 0.30 * j();
    let thigh = 0.245 * j();
    let shin = 0.245 * j();
    let head = 0.062 * j();
    let upper_arm = 0.186 * j();
    let forearm = 0.16 * j();
    // scale the vertical chain so that the standing height is exact
    let chain = torso + thigh + shin + 2.0 * head;
    let s = (height - NECK) / chain;
    let stride_length = height * rng.gen_range(0.72..0.92);
    let cadence = 1.25 + 1.1 * weyl[1];
    let arm_swing_amplitude = rng.gen_range(0.15..0.75);
    let girth = rng.gen_range(0.6..1.5);
    SubjectModel {
        subject_id,
        limb_lengths: [
            torso * s,
            thigh * s,
            shin * s,
            upper_arm * height,
            forearm * height,
            head * s,
        ],
        height,
        stride_length,
        cadence,
        arm_swing_amplitude,
        girth,
    }
}

/// A line segment swept by a sphere; a sphere when `a == b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Point3<f64>,
    pub b: Point3<f64>,
    pub radius: f64,
}

fn sub(a: Point3<f64>, b: Point3<f64>) -> Point3<f64> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn add(a: Point3<f64>, b: Point3<f64>) -> Point3<f64> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn scale(a: Point3<f64>, s: f64) -> Point3<f64> {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: Point3<f64>, b: Point3<f64>) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn norm(a: Point3<f64>) -> f64 {
    dot(a, a).sqrt()
}
fn cross(a: Point3<f64>, b: Point3<f64>) -> Point3<f64> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl Capsule {
    pub fn length(&self) -> f64 {
        norm(sub(self.b, self.a))
    }

    pub fn area(&self) -> f64 {
        TAU * self.radius * self.length() + 4.0 * PI * self.radius * self.radius
    }

    /// Signed distance from `p` to the capsule surface.
    pub fn surface_distance(&self, p: Point3<f64>) -> f64 {
        let d = sub(self.b, self.a);
        let len2 = dot(d, d);
        let t = if len2 > 0.0 {
            (dot(sub(p, self.a), d) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        norm(sub(p, add(self.a, scale(d, t)))) - self.radius
    }

    /// Uniform surface sample and its outward normal.
    fn sample<R: Rng>(&self, rng: &mut R) -> (Point3<f64>, Point3<f64>) {
        let d = sub(self.b, self.a);
        let len = norm(d);
        let side = TAU * self.radius * len;
        if len > 0.0 && rng.gen::<f64>() * self.area() < side {
            let axis = scale(d, 1.0 / len);
            let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let e1 = {
                let c = cross(axis, helper);
                scale(c, 1.0 / norm(c))
            };
            let e2 = cross(axis, e1);
            let t = rng.gen::<f64>();
            let th = rng.gen::<f64>() * TAU;
            let n = add(scale(e1, th.cos()), scale(e2, th.sin()));
            (add(add(self.a, scale(d, t)), scale(n, self.radius)), n)
        } else {
            // uniform direction; each hemisphere caps the nearer end
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi = rng.gen::<f64>() * TAU;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let n = [r * phi.cos(), r * phi.sin(), z];
            let end = if dot(n, d) >= 0.0 { self.b } else { self.a };
            (add(end, scale(n, self.radius)), n)
        }
    }
}

/// Ground position and walking direction of a subject (world frame).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub position: [f64; 2],
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Piecewise-linear ground path, metres (world frame).
    pub trajectory: Vec<[f64; 2]>,
    pub sensor_position: Point3<f64>,
    pub frame_rate: f64,
    pub noise_sigma: f64,
    pub occlusion_rate: f64,
    pub clutter_rate: f64,
    pub night_flag: bool,
    pub seed: u64,
}

impl SceneSpec {
    /// Noise-free scene with the sensor at its default height.
    pub fn clean(trajectory: Vec<[f64; 2]>, seed: u64) -> Self {
        Self {
            trajectory,
            sensor_position: [0.0, 0.0, DEFAULT_SENSOR_HEIGHT],
            frame_rate: DEFAULT_FRAME_RATE,
            noise_sigma: 0.0,
            occlusion_rate: 0.0,
            clutter_rate: 0.0,
            night_flag: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0) {
            return Err(GaitError::InvalidArgument("frame_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) || !(0.0..=1.0).contains(&self.clutter_rate) {
            return Err(GaitError::InvalidArgument("rates must lie in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(GaitError::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if self.trajectory.is_empty() {
            return Err(GaitError::InvalidArgument("empty trajectory".into()));
        }
        Ok(())
    }

    /// Placement after walking `distance` metres along the trajectory.
    pub fn placement_at(&self, distance: f64) -> Placement {
        let pts = &self.trajectory;
        if pts.len() == 1 {
            return Placement {
                position: pts[0],
                heading: 0.0,
            };
        }
        let mut left = distance.max(0.0);
        for i in 0..pts.len() - 1 {
            let (a, b) = (pts[i], pts[i + 1]);
            let seg = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
            if left <= seg || i == pts.len() - 2 {
                let t = if seg > 0.0 { left / seg } else { 0.0 };
                return Placement {
                    position: [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t],
                    heading,
                };
            }
            left -= seg;
        }
        unreachable!()
    }
}

/// Capsules of the posed walker in the sensor frame.
pub fn pose_capsules(
    subject: &SubjectModel,
    gait_phase: f64,
    placement: &Placement,
    sensor: Point3<f64>,
) -> Vec<Capsule> {
    let phase = gait_phase.rem_euclid(TAU);
    let h = subject.height;
    let g = subject.girth * h / 1.7;
    let leg = subject.thigh() + subject.shin();
    let hip_h = leg;
    let step = subject.stride_length / 2.0;
    let amp = (step / (2.0 * leg)).clamp(0.05, 0.9).asin();
    let hip_w = 0.09 * g;
    let shoulder_w = 0.19 * g;

    let mut local: Vec<Capsule> = Vec::with_capacity(10);
    let pelvis = [0.0, 0.0, hip_h];
    let lean: f64 = 0.05;
    let neck_base = [subject.torso() * lean.sin(), 0.0, hip_h + subject.torso() * lean.cos()];
    local.push(Capsule { a: pelvis, b: neck_base, radius: 0.13 * g });
    let head_c = add(neck_base, [0.0, 0.0, NECK + subject.head_radius()]);
    local.push(Capsule { a: head_c, b: head_c, radius: subject.head_radius() });

    for (sideways, offset) in [(1.0, 0.0), (-1.0, PI)] {
        let ph = phase + offset;
        let swing = amp * ph.sin();
        let knee_flex = 0.55 * (0.5 - 0.5 * (ph - 0.6).cos()).powi(2);
        let hip = [0.0, sideways * hip_w, hip_h];
        let knee = add(hip, scale([swing.sin(), 0.0, -swing.cos()], subject.thigh()));
        let shin_dir = swing - knee_flex;
        let ankle = add(knee, scale([shin_dir.sin(), 0.0, -shin_dir.cos()], subject.shin()));
        local.push(Capsule { a: hip, b: knee, radius: 0.07 * g });
        local.push(Capsule { a: knee, b: ankle, radius: 0.05 * g });

        // arms swing against the leg on the same side
        let arm = -subject.arm_swing_amplitude * ph.sin();
        let elbow_flex = 0.25 + 0.25 * arm.max(0.0);
        let shoulder = add(neck_base, [0.0, sideways * shoulder_w, -0.04]);
        let elbow = add(shoulder, scale([arm.sin(), 0.0, -arm.cos()], subject.upper_arm()));
        let fore = arm + elbow_flex;
        let wrist = add(elbow, scale([fore.sin(), 0.0, -fore.cos()], subject.forearm()));
        local.push(Capsule { a: shoulder, b: elbow, radius: 0.042 * g });
        local.push(Capsule { a: elbow, b: wrist, radius: 0.035 * g });
    }

    let (s, c) = placement.heading.sin_cos();
    let to_sensor = |p: Point3<f64>| -> Point3<f64> {
        [
            c * p[0] - s * p[1] + placement.position[0] - sensor[0],
            s * p[0] + c * p[1] + placement.position[1] - sensor[1],
            p[2] - sensor[2],
        ]
    };
    local
        .into_iter()
        .map(|cap| Capsule {
            a: to_sensor(cap.a),
            b: to_sensor(cap.b),
            radius: cap.radius,
        })
        .collect()
}

fn horizontal_distance(placement: &Placement, sensor: Point3<f64>) -> f64 {
    ((placement.position[0] - sensor[0]).powi(2) + (placement.position[1] - sensor[1]).powi(2)).sqrt()
}

/// Render one frame. Points are in the sensor frame.
pub fn render_frame(
    subject: &SubjectModel,
    gait_phase: f64,
    placement: &Placement,
    scene: &SceneSpec,
    frame_seed: u64,
) -> Result<PointCloudFrame<f64>> {
    scene.validate()?;
    let dist = horizontal_distance(placement, scene.sensor_position);
    if dist > MAX_RANGE_M {
        return Err(GaitError::OutOfRange {
            distance: dist,
            max: MAX_RANGE_M,
        });
    }
    let capsules = pose_capsules(subject, gait_phase, placement, scene.sensor_position);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, frame_seed));

    let pelvis_3d = {
        let p = add(capsules[0].a, capsules[0].b);
        scale(p, 0.5)
    };
    let range = norm(pelvis_3d).max(0.5);
    let draws = (SAMPLE_DENSITY / (range * range)).round() as usize;
    let areas: Vec<f64> = capsules.iter().map(Capsule::area).collect();
    let total: f64 = areas.iter().sum();

    let mut points = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut pick = rng.gen::<f64>() * total;
        let mut ci = 0;
        while ci + 1 < capsules.len() && pick >= areas[ci] {
            pick -= areas[ci];
            ci += 1;
        }
        let (p, n) = capsules[ci].sample(&mut rng);
        // visible when the normal faces the sensor at the origin
        if dot(n, p) < 0.0 {
            points.push(p);
        }
    }

    if scene.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, scene.noise_sigma)
            .map_err(|e| GaitError::InvalidArgument(e.to_string()))?;
        for p in &mut points {
            for v in p.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }

    if scene.occlusion_rate > 0.0 && rng.gen_bool(scene.occlusion_rate) && points.len() > 4 {
        let centre = pelvis_3d[1].atan2(pelvis_3d[0]);
        let rel: Vec<f64> = points
            .iter()
            .map(|p| (p[1].atan2(p[0]) - centre + PI).rem_euclid(TAU) - PI)
            .collect();
        let lo = rel.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) * rng.gen_range(0.25..0.5);
        let start = lo + rng.gen::<f64>() * (hi - lo - width);
        let kept: Vec<Point3<f64>> = points
            .iter()
            .zip(&rel)
            .filter(|(_, &a)| a < start || a > start + width)
            .map(|(p, _)| *p)
            .collect();
        if !kept.is_empty() {
            points = kept;
        }
    }

    if scene.clutter_rate > 0.0 && rng.gen_bool(scene.clutter_rate) {
        let dir = rng.gen::<f64>() * TAU;
        let off = rng.gen_range(0.45..0.8);
        let centre = [
            pelvis_3d[0] + off * dir.cos(),
            pelvis_3d[1] + off * dir.sin(),
            -scene.sensor_position[2] + rng.gen_range(0.3..1.3),
        ];
        let count = ((20.0 * (10.0 / range).powi(2)).round() as usize).max(3);
        let spread = Normal::new(0.0, 0.07).unwrap();
        for _ in 0..count {
            points.push([
                centre[0] + spread.sample(&mut rng),
                centre[1] + spread.sample(&mut rng),
                centre[2] + spread.sample(&mut rng),
            ]);
        }
    }

    if points.is_empty() {
        return Err(GaitError::RejectedInput("rendered frame has no visible points".into()));
    }
    PointCloudFrame::new(points, 1)
}

/// Direction of travel relative to the line of sight from the sensor, degrees in `[0, 360)`.
/// Zero means walking straight away from the sensor.
pub fn view_angle_deg(placement: &Placement, sensor: Point3<f64>) -> f64 {
    let bearing = (placement.position[1] - sensor[1]).atan2(placement.position[0] - sensor[0]);
    (placement.heading - bearing).to_degrees().rem_euclid(360.0)
}

/// A rendered sequence and the metadata describing it.
#[derive(Clone, Debug)]
pub struct RenderedSequence {
    pub meta: SequenceMeta,
    pub frames: Vec<PointCloudFrame<f64>>,
}

/// Walk `subject` along `scene.trajectory` for `num_frames` frames.
pub fn render_sequence(
    subject: &SubjectModel,
    scene: &SceneSpec,
    sequence_id: u32,
    num_frames: usize,
    phase0: f64,
) -> Result<RenderedSequence> {
    scene.validate()?;
    let dt = 1.0 / scene.frame_rate;
    let mut frames = Vec::with_capacity(num_frames);
    for f in 0..num_frames {
        let t = f as f64 * dt;
        let placement = scene.placement_at(subject.speed() * t);
        let phase = phase0 + subject.phase_rate() * t;
        let mut frame = render_frame(subject, phase, &placement, scene, f as u64)?;
        frame.frame_index = f + 1;
        frames.push(frame);
    }
    let mid = scene.placement_at(subject.speed() * (num_frames as f64 / 2.0) * dt);
    let view = (view_angle_deg(&mid, scene.sensor_position) * 1000.0).round() / 1000.0;
    Ok(RenderedSequence {
        meta: SequenceMeta {
            subject_id: subject.subject_id,
            sequence_id,
            view_angle_deg: view % 360.0,
            night: scene.night_flag,
            num_frames,
        },
        frames,
    })
}

/// Per-sequence scene: a two-segment path whose viewing direction is
/// stratified over the subject's sequences.
pub fn sequence_scene(
    subject: &SubjectModel,
    sequence_id: u32,
    seqs_per_subject: u32,
    num_frames: usize,
    seed: u64,
) -> Result<(SceneSpec, f64)> {
    let subject_seed = mix_seed(seed, subject.subject_id as u64);
    let seq_seed = mix_seed(subject_seed, 0xA5A5_0000 + sequence_id as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seq_seed);
    let view_offset = ChaCha8Rng::seed_from_u64(subject_seed).gen_range(0.0..TAU);

    let length = subject.speed() * num_frames as f64 / DEFAULT_FRAME_RATE + 0.5;
    let lo = 4.0 + length / 2.0;
    let hi = (MAX_RANGE_M - 1.0 - length / 2.0).min(16.0);
    if lo > hi {
        return Err(GaitError::InvalidArgument(format!(
            "{num_frames} frames do not fit inside the capture range"
        )));
    }
    let mid_dist = rng.gen_range(lo..hi);
    let bearing = rng.gen_range(-PI..PI);
    let mid = [mid_dist * bearing.cos(), mid_dist * bearing.sin()];
    let stratum = TAU * sequence_id as f64 / seqs_per_subject.max(1) as f64;
    let view = view_offset + stratum + rng.gen_range(-0.35..0.35);
    let heading = bearing + view;
    let turn = rng.gen_range(-0.3..0.3);
    let half = length / 2.0;
    let start = [mid[0] - half * heading.cos(), mid[1] - half * heading.sin()];
    let h2 = heading + turn;
    let end = [mid[0] + half * h2.cos(), mid[1] + half * h2.sin()];
    let night = rng.gen_bool(0.25);
    let scene = SceneSpec {
        trajectory: vec![start, mid, end],
        sensor_position: [0.0, 0.0, DEFAULT_SENSOR_HEIGHT],
        frame_rate: DEFAULT_FRAME_RATE,
        noise_sigma: if night { 0.015 } else { 0.01 },
        occlusion_rate: 0.15,
        clutter_rate: 0.15,
        night_flag: night,
        seed: seq_seed,
    };
    let phase0 = rng.gen_range(0.0..TAU);
    Ok((scene, phase0))
}

/// Render and write a full dataset with a parity train/test split.
pub fn generate_dataset(
    n_subjects: u32,
    seqs_per_subject: u32,
    frames_per_seq: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetIndex> {
    if n_subjects == 0 || seqs_per_subject == 0 || frames_per_seq == 0 {
        return Err(GaitError::InvalidArgument(
            "subjects, sequences and frames must all be >= 1".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| GaitError::io(out_dir, e))?;
    let mut subjects = Vec::with_capacity(n_subjects as usize);
    for sid in 0..n_subjects {
        let model = generate_subject(sid, seed);
        let mut entries = Vec::with_capacity(seqs_per_subject as usize);
        for q in 0..seqs_per_subject {
            let (scene, phase0) = sequence_scene(&model, q, seqs_per_subject, frames_per_seq, seed)?;
            let seq = render_sequence(&model, &scene, q, frames_per_seq, phase0)?;
            let dir = sequence_dir(out_dir, sid, q);
            fs::create_dir_all(&dir).map_err(|e| GaitError::io(&dir, e))?;
            for frame in &seq.frames {
                write_frame(&dir.join(frame_file_name(frame.frame_index)), &frame.points)?;
            }
            write_meta(&dir, &seq.meta)?;
            entries.push(SequenceEntry {
                sequence_id: q,
                num_frames: frames_per_seq,
                view_angle_deg: seq.meta.view_angle_deg,
                night: seq.meta.night,
            });
        }
        subjects.push(SubjectEntry {
            subject_id: sid,
            sequences: entries,
        });
    }
    let index = DatasetIndex::with_parity_split(out_dir, subjects);
    index.save()?;
    Ok(index)
}
