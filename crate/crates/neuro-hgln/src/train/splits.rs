//! Evaluation protocols: ordered cross-session pairs and
//! leave-one-subject-out folds, plus the seed-deterministic validation split.

use super::TrainError;
use crate::data::FeatureDataset;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    CrossSession,
    Loso,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_splits(ds: &FeatureDataset, protocol: Protocol) -> Result<Vec<Fold>, TrainError> {
    match protocol {
        Protocol::CrossSession => {
            let sessions = ds.distinct_sessions();
            if sessions.len() < 2 {
                return Err(TrainError::Metadata {
                    message: format!(
                        "cross_session needs at least 2 distinct session tags, found {}",
                        sessions.len()
                    ),
                });
            }
            let mut folds = Vec::new();
            for &a in &sessions {
                for &b in &sessions {
                    if a == b {
                        continue;
                    }
                    let train: Vec<usize> = (0..ds.n_samples)
                        .filter(|&i| ds.sessions[i] == a)
                        .collect();
                    let test: Vec<usize> = (0..ds.n_samples)
                        .filter(|&i| ds.sessions[i] == b)
                        .collect();
                    folds.push(Fold {
                        name: format!("session{a}_to_session{b}"),
                        train,
                        test,
                    });
                }
            }
            Ok(folds)
        }
        Protocol::Loso => {
            let subjects = ds.distinct_subjects();
            if subjects.len() < 2 {
                return Err(TrainError::Metadata {
                    message: format!(
                        "loso needs at least 2 distinct subject tags, found {}",
                        subjects.len()
                    ),
                });
            }
            Ok(subjects
                .iter()
                .map(|&s| Fold {
                    name: format!("subject{s}_out"),
                    train: (0..ds.n_samples).filter(|&i| ds.subjects[i] != s).collect(),
                    test: (0..ds.n_samples).filter(|&i| ds.subjects[i] == s).collect(),
                })
                .collect())
        }
    }
}

/// Split a fold's training indices into (train, validation): seeded shuffle,
/// last 10% (at least one sample when there are two or more) becomes the
/// validation set.
pub fn validation_split(train: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    if shuffled.len() < 2 {
        return (shuffled, Vec::new());
    }
    let val_len = (shuffled.len() / 10).max(1);
    let cut = shuffled.len() - val_len;
    let val = shuffled.split_off(cut);
    (shuffled, val)
}
