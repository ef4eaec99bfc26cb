//! Synthetic feature datasets with plantable class structure: each class owns
//! a band-power profile (mean shift) and a latent coupling graph that mixes
//! per-band channel factors, so both the feature means and the cross-channel
//! covariance carry class information.
//!
//! Generation is deterministic per seed, with per-sample derived seeds so
//! samples could be produced independently in any order.

use super::{de::DEFAULT_BANDS, DataError, FeatureDataset};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub bands: usize,
    pub subjects: usize,
    pub sessions: usize,
    /// Samples per (class, subject, session) cell.
    pub samples_per_combo: usize,
    /// Inter-class separation of the band-power profiles.
    pub profile_gap: f64,
    /// Scale of all stochastic parts; 0 makes the data exactly the profiles.
    pub sigma_noise: f64,
    /// Per-subject profile perturbation.
    pub sigma_subject: f64,
    /// Weight of the graph-structured component inside the noise.
    pub coupling: f64,
    /// Edge density of each class's latent coupling graph.
    pub graph_density: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            channels: 62,
            bands: 5,
            subjects: 5,
            sessions: 2,
            samples_per_combo: 30,
            profile_gap: 1.0,
            sigma_noise: 0.5,
            sigma_subject: 0.05,
            coupling: 1.0,
            graph_density: 0.2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, v) in [
            ("classes", self.classes),
            ("channels", self.channels),
            ("bands", self.bands),
            ("subjects", self.subjects),
            ("sessions", self.sessions),
            ("samples_per_combo", self.samples_per_combo),
        ] {
            if v == 0 {
                return Err(DataError::Invalid {
                    message: format!("synthetic spec: {name} must be positive"),
                });
            }
        }
        if self.channels < 2 {
            return Err(DataError::Invalid {
                message: "synthetic spec: channels must be at least 2".into(),
            });
        }
        for (name, v) in [
            ("profile_gap", self.profile_gap),
            ("sigma_noise", self.sigma_noise),
            ("sigma_subject", self.sigma_subject),
            ("coupling", self.coupling),
            ("graph_density", self.graph_density),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DataError::Invalid {
                    message: format!("synthetic spec: {name} must be finite and non-negative"),
                });
            }
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.classes * self.subjects * self.sessions * self.samples_per_combo
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 on seed ^ rotated salt.
    let mut z = seed ^ salt.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Symmetric non-negative coupling graph for one class, rows scaled so the
/// mixed latent variance stays bounded.
fn class_graph(spec: &SyntheticSpec, seed: u64, class: usize) -> Vec<f64> {
    let n = spec.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xC0DE + class as u64));
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen::<f64>() < spec.graph_density {
                let w = rng.gen_range(0.5..1.0);
                g[i * n + j] = w;
                g[j * n + i] = w;
            }
        }
    }
    let max_row: f64 = (0..n)
        .map(|i| g[i * n..(i + 1) * n].iter().sum::<f64>())
        .fold(0.0, f64::max);
    if max_row > 0.0 {
        for v in g.iter_mut() {
            *v /= max_row;
        }
    }
    g
}

/// Generate a dataset. Band edges come from the standard table when `bands`
/// is 5, otherwise they are synthesized as unit-width placeholders.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<FeatureDataset, DataError> {
    spec.validate()?;
    let (n, d) = (spec.channels, spec.bands);
    let total = spec.total_samples();

    // Class profiles and per-subject offsets from dedicated streams.
    let mut prof_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xA11CE));
    let profiles: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..n * d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut prof_rng);
                    spec.profile_gap * z
                })
                .collect()
        })
        .collect();
    let mut subj_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5EED));
    let subject_offsets: Vec<Vec<f64>> = (0..spec.subjects)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut subj_rng);
                    spec.sigma_subject * z
                })
                .collect()
        })
        .collect();
    let graphs: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| class_graph(spec, seed, c))
        .collect();

    let mut features = vec![0.0; total * n * d];
    let mut labels = Vec::with_capacity(total);
    let mut subjects = Vec::with_capacity(total);
    let mut sessions = Vec::with_capacity(total);

    let mut idx = 0usize;
    for c in 0..spec.classes {
        for s in 0..spec.subjects {
            for sess in 0..spec.sessions {
                for _ in 0..spec.samples_per_combo {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xF00D + idx as u64));
                    let out = &mut features[idx * n * d..(idx + 1) * n * d];
                    // Per-band latent channel factors mixed through the
                    // class graph give class-dependent spatial covariance.
                    for b in 0..d {
                        let z: Vec<f64> =
                            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                        for ch in 0..n {
                            let mixed: f64 = (0..n)
                                .map(|j| graphs[c][ch * n + j] * z[j])
                                .sum();
                            let w: f64 = StandardNormal.sample(&mut rng);
                            out[ch * d + b] = 1.0
                                + profiles[c][ch * d + b]
                                + subject_offsets[s][b]
                                + spec.sigma_noise * (spec.coupling * mixed + w);
                        }
                    }
                    labels.push(c as u32);
                    subjects.push(s as u32);
                    sessions.push(sess as u32);
                    idx += 1;
                }
            }
        }
    }

    let band_edges: Vec<(f64, f64)> = if d == DEFAULT_BANDS.len() {
        DEFAULT_BANDS.to_vec()
    } else {
        (0..d).map(|b| (b as f64, b as f64 + 1.0)).collect()
    };
    FeatureDataset::new(
        n,
        d,
        spec.classes,
        band_edges,
        labels,
        subjects,
        sessions,
        features,
    )
}
