//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   index.toml
//!   subjects/<subject_id>/<sequence_id>/meta.toml
//!   subjects/<subject_id>/<sequence_id>/frame_0001.xyz
//! ```
//!
//! Frame files hold one point per line as `x y z` in metres.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GaitError, Result};
use crate::geometry::{Point3, PointCloudFrame};

pub const INDEX_FILE: &str = "index.toml";
pub const META_FILE: &str = "meta.toml";
pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub subject_id: u32,
    pub sequence_id: u32,
    pub view_angle_deg: f64,
    pub night: bool,
    pub num_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub sequence_id: u32,
    pub num_frames: usize,
    pub view_angle_deg: f64,
    pub night: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub subject_id: u32,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub version: u32,
    /// Training subject ids.
    pub train: Vec<u32>,
    /// Test subject ids, disjoint from `train`.
    pub test: Vec<u32>,
    pub subjects: Vec<SubjectEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub fn sequence_dir(root: &Path, subject_id: u32, sequence_id: u32) -> PathBuf {
    root.join("subjects")
        .join(subject_id.to_string())
        .join(sequence_id.to_string())
}

pub fn frame_file_name(frame_index: usize) -> String {
    format!("frame_{frame_index:04}.xyz")
}

impl DatasetIndex {
    /// Index over `subjects`, split by id parity: even ids train, odd ids test.
    pub fn with_parity_split(root: &Path, subjects: Vec<SubjectEntry>) -> Self {
        let train = subjects.iter().map(|s| s.subject_id).filter(|id| id % 2 == 0).collect();
        let test = subjects.iter().map(|s| s.subject_id).filter(|id| id % 2 == 1).collect();
        Self {
            version: INDEX_VERSION,
            train,
            test,
            subjects,
            root: root.to_path_buf(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| GaitError::Parse {
            path: self.root.join(INDEX_FILE),
            msg,
        };
        if self.version != INDEX_VERSION {
            return Err(bad(format!("unsupported index version {}", self.version)));
        }
        let mut ids = BTreeSet::new();
        for s in &self.subjects {
            if !ids.insert(s.subject_id) {
                return Err(bad(format!("duplicate subject {}", s.subject_id)));
            }
            let mut seqs = BTreeSet::new();
            for q in &s.sequences {
                if !seqs.insert(q.sequence_id) {
                    return Err(bad(format!(
                        "duplicate sequence {} for subject {}",
                        q.sequence_id, s.subject_id
                    )));
                }
            }
        }
        let train: BTreeSet<_> = self.train.iter().collect();
        for t in &self.test {
            if train.contains(t) {
                return Err(bad(format!("subject {t} is in both train and test")));
            }
        }
        for id in self.train.iter().chain(&self.test) {
            if !ids.contains(id) {
                return Err(bad(format!("split lists unknown subject {id}")));
            }
        }
        Ok(())
    }

    pub fn subject(&self, id: u32) -> Option<&SubjectEntry> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn save(&self) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| GaitError::Config(e.to_string()))?;
        let path = self.root.join(INDEX_FILE);
        fs::write(&path, text).map_err(|e| GaitError::io(path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| GaitError::io(&path, e))?;
        let mut idx: DatasetIndex = toml::from_str(&text).map_err(|e| GaitError::Parse {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        idx.root = root.to_path_buf();
        idx.validate()?;
        for s in &idx.subjects {
            for q in &s.sequences {
                let dir = sequence_dir(root, s.subject_id, q.sequence_id);
                for f in 1..=q.num_frames {
                    let file = dir.join(frame_file_name(f));
                    if !file.is_file() {
                        return Err(GaitError::Parse {
                            path: path.clone(),
                            msg: format!("indexed frame {} is missing", file.display()),
                        });
                    }
                }
            }
        }
        Ok(idx)
    }

    /// Every sequence of the given subjects, flattened with its subject id.
    pub fn sequences_of<'a>(&'a self, subjects: &'a [u32]) -> impl Iterator<Item = (u32, &'a SequenceEntry)> + 'a {
        subjects.iter().filter_map(move |&id| self.subject(id)).flat_map(|s| {
            s.sequences.iter().map(move |q| (s.subject_id, q))
        })
    }
}

pub fn write_frame(path: &Path, points: &[Point3<f64>]) -> Result<()> {
    let mut text = String::with_capacity(points.len() * 30);
    for p in points {
        let _ = writeln!(text, "{:.6} {:.6} {:.6}", p[0], p[1], p[2]);
    }
    fs::write(path, text).map_err(|e| GaitError::io(path, e))
}

pub fn read_frame(path: &Path, frame_index: usize) -> Result<PointCloudFrame<f64>> {
    let text = fs::read_to_string(path).map_err(|e| GaitError::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| GaitError::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", lineno + 1),
            })?;
        if vals.len() != 3 {
            return Err(GaitError::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: expected 3 values, got {}", lineno + 1, vals.len()),
            });
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    PointCloudFrame::new(points, frame_index).map_err(|e| GaitError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_meta(dir: &Path, meta: &SequenceMeta) -> Result<()> {
    let text = toml::to_string(meta).map_err(|e| GaitError::Config(e.to_string()))?;
    let path = dir.join(META_FILE);
    fs::write(&path, text).map_err(|e| GaitError::io(path, e))
}

pub fn read_meta(dir: &Path) -> Result<SequenceMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| GaitError::io(&path, e))?;
    toml::from_str(&text).map_err(|e| GaitError::Parse {
        path,
        msg: e.to_string(),
    })
}

/// Raw frames of one sequence together with its metadata.
#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub meta: SequenceMeta,
    pub frames: Vec<PointCloudFrame<f64>>,
}

pub fn load_sequence(root: &Path, subject_id: u32, entry: &SequenceEntry) -> Result<SequenceRecord> {
    let dir = sequence_dir(root, subject_id, entry.sequence_id);
    let frames = (1..=entry.num_frames)
        .map(|f| read_frame(&dir.join(frame_file_name(f)), f))
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceRecord {
        meta: SequenceMeta {
            subject_id,
            sequence_id: entry.sequence_id,
            view_angle_deg: entry.view_angle_deg,
            night: entry.night,
            num_frames: entry.num_frames,
        },
        frames,
    })
}

pub fn load_subjects(index: &DatasetIndex, subjects: &[u32]) -> Result<Vec<SequenceRecord>> {
    index
        .sequences_of(subjects)
        .map(|(sid, q)| load_sequence(&index.root, sid, q))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(frame_file_name(3));
        write_frame(&path, &[[1.0, -2.5, 0.125], [3.0, 4.0, 5.0]]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "1.000000 -2.500000 0.125000\n3.000000 4.000000 5.000000\n");
        let f = read_frame(&path, 3).unwrap();
        assert_eq!(f.points, vec![[1.0, -2.5, 0.125], [3.0, 4.0, 5.0]]);
        assert_eq!(frame_file_name(3), "frame_0003.xyz");
    }

    #[test]
    fn malformed_frame_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        fs::write(&path, "1 2\n").unwrap();
        assert!(matches!(read_frame(&path, 1), Err(GaitError::Parse { .. })));
        fs::write(&path, "").unwrap();
        assert!(read_frame(&path, 1).is_err());
    }

    #[test]
    fn overlapping_split_is_invalid() {
        let subjects = vec![
            SubjectEntry { subject_id: 0, sequences: vec![] },
            SubjectEntry { subject_id: 1, sequences: vec![] },
        ];
        let mut idx = DatasetIndex::with_parity_split(Path::new("."), subjects);
        assert_eq!((idx.train.clone(), idx.test.clone()), (vec![0], vec![1]));
        idx.validate().unwrap();
        idx.test.push(0);
        assert!(idx.validate().is_err());
    }
}
