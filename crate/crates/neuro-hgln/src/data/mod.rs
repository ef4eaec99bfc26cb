//! Dataset container, differential-entropy features, and the synthetic
//! generator with plantable class-dependent graph structure.
//!
//! # Container format
//!
//! ```text
//! "NHGD1\n"
//! "S N d C\n"                     (decimal manifest)
//! "lo hi lo hi ... lo hi\n"       (d band-edge pairs in Hz)
//! labels        S  x i32  little-endian
//! subject tags  S  x i32  little-endian
//! session tags  S  x i32  little-endian
//! features      S*N*d x f64 little-endian,
//!               sample-major, channel-major within sample, band-major within channel
//! ```

pub mod de;
pub mod synth;

use crate::model::FeatureBatch;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    BadMagic { offset: usize },
    Truncated { offset: usize, needed: usize },
    Format { offset: usize, message: String },
    Invalid { message: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "i/o error: {e}"),
            DataError::BadMagic { offset } => {
                write!(f, "bad magic at byte offset {offset} (expected NHGD1)")
            }
            DataError::Truncated { offset, needed } => {
                write!(f, "truncated at byte offset {offset}: {needed} more bytes needed")
            }
            DataError::Format { offset, message } => {
                write!(f, "format error at byte offset {offset}: {message}")
            }
            DataError::Invalid { message } => write!(f, "invalid dataset: {message}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// S samples of per-electrode, per-band features with labels and
/// subject/session tags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub n_samples: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub band_edges: Vec<(f64, f64)>,
    pub labels: Vec<u32>,
    pub subjects: Vec<u32>,
    pub sessions: Vec<u32>,
    /// Row-major `[S, N, d]`.
    pub features: Vec<f64>,
}

impl FeatureDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        feature_dim: usize,
        classes: usize,
        band_edges: Vec<(f64, f64)>,
        labels: Vec<u32>,
        subjects: Vec<u32>,
        sessions: Vec<u32>,
        features: Vec<f64>,
    ) -> Result<Self, DataError> {
        let s = labels.len();
        if subjects.len() != s || sessions.len() != s {
            return Err(DataError::Invalid {
                message: format!(
                    "tag lengths {}/{} disagree with label count {s}",
                    subjects.len(),
                    sessions.len()
                ),
            });
        }
        if features.len() != s * channels * feature_dim {
            return Err(DataError::Invalid {
                message: format!(
                    "feature length {} does not match S*N*d = {}",
                    features.len(),
                    s * channels * feature_dim
                ),
            });
        }
        if band_edges.len() != feature_dim {
            return Err(DataError::Invalid {
                message: format!(
                    "{} band edges for feature dim {feature_dim}",
                    band_edges.len()
                ),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(DataError::Invalid {
                message: format!("label {l} outside [0, {classes})"),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid {
                message: format!("non-finite feature at flat index {i}"),
            });
        }
        Ok(FeatureDataset {
            n_samples: s,
            channels,
            feature_dim,
            classes,
            band_edges,
            labels,
            subjects,
            sessions,
            features,
        })
    }

    pub fn sample_features(&self, s: usize) -> &[f64] {
        let w = self.channels * self.feature_dim;
        &self.features[s * w..(s + 1) * w]
    }

    /// Assemble a batch from sample indices.
    pub fn batch(&self, indices: &[usize]) -> FeatureBatch {
        let w = self.channels * self.feature_dim;
        let mut features = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample_features(i));
            labels.push(self.labels[i] as usize);
        }
        FeatureBatch {
            features,
            batch: indices.len(),
            channels: self.channels,
            feature_dim: self.feature_dim,
            labels,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"NHGD1\n");
        out.extend_from_slice(
            format!(
                "{} {} {} {}\n",
                self.n_samples, self.channels, self.feature_dim, self.classes
            )
            .as_bytes(),
        );
        let edges: Vec<String> = self
            .band_edges
            .iter()
            .flat_map(|(lo, hi)| [lo.to_string(), hi.to_string()])
            .collect();
        out.extend_from_slice(format!("{}\n", edges.join(" ")).as_bytes());
        for arr in [&self.labels, &self.subjects, &self.sessions] {
            for v in arr.iter() {
                out.extend_from_slice(&(*v as i32).to_le_bytes());
            }
        }
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let magic = b"NHGD1\n";
        if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
            return Err(DataError::BadMagic { offset: 0 });
        }
        let mut off = magic.len();
        let mut read_line = |off: &mut usize| -> Result<String, DataError> {
            let start = *off;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|p| start + p)
                .ok_or(DataError::Truncated {
                    offset: bytes.len(),
                    needed: 1,
                })?;
            let s = std::str::from_utf8(&bytes[start..end])
                .map_err(|_| DataError::Format {
                    offset: start,
                    message: "manifest is not utf-8".into(),
                })?
                .to_string();
            *off = end + 1;
            Ok(s)
        };
        let manifest = read_line(&mut off)?;
        let manifest_off = magic.len();
        let nums: Vec<usize> = manifest
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| DataError::Format {
                    offset: manifest_off,
                    message: format!("bad manifest token {t:?}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if nums.len() != 4 {
            return Err(DataError::Format {
                offset: manifest_off,
                message: format!("manifest needs `S N d C`, got {manifest:?}"),
            });
        }
        let (s, n, d, c) = (nums[0], nums[1], nums[2], nums[3]);
        let edges_off = off;
        let edges_line = read_line(&mut off)?;
        let edge_vals: Vec<f64> = edges_line
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| DataError::Format {
                    offset: edges_off,
                    message: format!("bad band edge {t:?}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if edge_vals.len() != 2 * d {
            return Err(DataError::Format {
                offset: edges_off,
                message: format!("expected {} band-edge values, got {}", 2 * d, edge_vals.len()),
            });
        }
        let band_edges: Vec<(f64, f64)> =
            edge_vals.chunks(2).map(|p| (p[0], p[1])).collect();

        let mut take = |off: &mut usize, count: usize| -> Result<&[u8], DataError> {
            if bytes.len() < *off + count {
                return Err(DataError::Truncated {
                    offset: bytes.len(),
                    needed: *off + count - bytes.len(),
                });
            }
            let sl = &bytes[*off..*off + count];
            *off += count;
            Ok(sl)
        };
        let mut read_i32s = |off: &mut usize| -> Result<Vec<u32>, DataError> {
            let raw = take(off, 4 * s)?;
            Ok(raw
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as u32)
                .collect())
        };
        let labels = read_i32s(&mut off)?;
        let subjects = read_i32s(&mut off)?;
        let sessions = read_i32s(&mut off)?;
        let feat_off = off;
        let raw = take(&mut off, 8 * s * n * d)?;
        let features: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect();
        if off != bytes.len() {
            return Err(DataError::Format {
                offset: off,
                message: format!("{} trailing bytes after payload", bytes.len() - off),
            });
        }
        Self::new(n, d, c, band_edges, labels, subjects, sessions, features).map_err(|e| {
            match e {
                DataError::Invalid { message } => DataError::Format {
                    offset: feat_off,
                    message,
                },
                other => other,
            }
        })
    }

    pub fn distinct_sessions(&self) -> Vec<u32> {
        let mut v = self.sessions.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn distinct_subjects(&self) -> Vec<u32> {
        let mut v = self.subjects.clone();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> FeatureDataset {
        FeatureDataset::new(
            2,
            3,
            2,
            vec![(1.0, 4.0), (4.0, 8.0), (8.0, 14.0)],
            vec![0, 1, 1],
            vec![0, 0, 1],
            vec![0, 1, 0],
            (0..18).map(|i| i as f64 * 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.nhgd");
        let p2 = dir.path().join("b.nhgd");
        let ds = toy();
        ds.save(&p1).unwrap();
        let loaded = FeatureDataset::load(&p1).unwrap();
        assert_eq!(ds, loaded);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nhgd");
        toy().save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            FeatureDataset::from_bytes(&bytes),
            Err(DataError::BadMagic { offset: 0 })
        ));
    }

    #[test]
    fn manifest_disagreement_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nhgd");
        toy().save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // Claim one more sample than the payload holds.
        let text = String::from_utf8_lossy(&bytes[..32]).to_string();
        assert!(text.starts_with("NHGD1\n3 2 3 2\n"));
        let mut grown = b"NHGD1\n4 2 3 2\n".to_vec();
        grown.extend_from_slice(&bytes[14..]);
        match FeatureDataset::from_bytes(&grown) {
            Err(DataError::Truncated { offset, needed }) => {
                assert!(offset > 0 && needed > 0);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_class_range_rejected() {
        let err = FeatureDataset::new(
            1,
            1,
            2,
            vec![(1.0, 4.0)],
            vec![5],
            vec![0],
            vec![0],
            vec![0.0],
        );
        assert!(matches!(err, Err(DataError::Invalid { .. })));
    }

    #[test]
    fn batch_assembles_in_index_order() {
        let ds = toy();
        let b = ds.batch(&[2, 0]);
        assert_eq!(b.batch, 2);
        assert_eq!(b.labels, vec![1, 0]);
        assert_eq!(&b.features[..6], ds.sample_features(2));
        assert_eq!(&b.features[6..], ds.sample_features(0));
    }
}
