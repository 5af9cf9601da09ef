//! N-way K-shot episode sampling.
//!
//! Episode `i` of a stream is drawn from its own generator stream keyed by
//! `(seed, i)`, so any episode can be regenerated in isolation and the
//! order in which episodes are requested never matters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{EmbeddingDataset, EmbeddingRecord};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpisodeError {
    #[error("way, shot and queries must all be positive (got N={way}, K={shot}, M={queries})")]
    Degenerate {
        way: usize,
        shot: usize,
        queries: usize,
    },
    #[error("{way}-way episodes need {way} classes but the split has {available}")]
    TooFewClasses { way: usize, available: usize },
    #[error("class {label} has {available} records, episodes need {needed} (K + M)")]
    TooFewRecords {
        label: u32,
        available: usize,
        needed: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn validate(&self, dataset: &EmbeddingDataset) -> Result<(), EpisodeError> {
        if self.way == 0 || self.shot == 0 || self.queries == 0 {
            return Err(EpisodeError::Degenerate {
                way: self.way,
                shot: self.shot,
                queries: self.queries,
            });
        }
        if self.way > dataset.num_classes() {
            return Err(EpisodeError::TooFewClasses {
                way: self.way,
                available: dataset.num_classes(),
            });
        }
        let needed = self.shot + self.queries;
        for (&label, idx) in dataset.class_index() {
            if idx.len() < needed {
                return Err(EpisodeError::TooFewRecords {
                    label,
                    available: idx.len(),
                    needed,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub record: EmbeddingRecord,
    /// Episode class index in `0..way`.
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// Dataset label behind each episode class index.
    pub labels: Vec<u32>,
    /// `way` groups of `shot` records.
    pub support: Vec<Vec<EmbeddingRecord>>,
    /// Class-major: all queries of class 0, then class 1, ...
    pub query: Vec<Query>,
}

impl Episode {
    /// Support embeddings stacked class-major, `(way * shot) x D`.
    pub fn support_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self
            .support
            .iter()
            .flatten()
            .map(|r| r.vector.as_slice())
            .collect();
        Matrix::from_rows(&rows).expect("episode records share a dimension")
    }

    pub fn query_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.query.iter().map(|q| q.record.vector.as_slice()).collect();
        Matrix::from_rows(&rows).expect("episode records share a dimension")
    }

    pub fn targets(&self) -> Vec<usize> {
        self.query.iter().map(|q| q.target).collect()
    }
}

/// Draws episode `index` of the stream described by `config`.
pub fn sample_episode(
    dataset: &EmbeddingDataset,
    config: &EpisodeConfig,
    index: u64,
) -> Result<Episode, EpisodeError> {
    config.validate(dataset)?;
    Ok(draw(dataset, config, index))
}

/// All `config.episodes` episodes, validated once.
pub fn sample_episodes(
    dataset: &EmbeddingDataset,
    config: &EpisodeConfig,
) -> Result<Vec<Episode>, EpisodeError> {
    config.validate(dataset)?;
    Ok((0..config.episodes as u64)
        .map(|i| draw(dataset, config, i))
        .collect())
}

pub(crate) fn draw(dataset: &EmbeddingDataset, config: &EpisodeConfig, index: u64) -> Episode {
    let mut rng = Rng::substream(config.seed, index);
    let all_labels = dataset.labels();
    let labels: Vec<u32> = rng
        .sample_indices(all_labels.len(), config.way)
        .into_iter()
        .map(|i| all_labels[i])
        .collect();
    let records = dataset.records();
    let mut support = Vec::with_capacity(config.way);
    let mut query = Vec::with_capacity(config.way * config.queries);
    for (target, &label) in labels.iter().enumerate() {
        let pool = dataset.class_records(label);
        let picked = rng.sample_indices(pool.len(), config.shot + config.queries);
        let (s, q) = picked.split_at(config.shot);
        support.push(s.iter().map(|&i| records[pool[i]].clone()).collect());
        query.extend(q.iter().map(|&i| Query {
            record: records[pool[i]].clone(),
            target,
        }));
    }
    Episode {
        way: config.way,
        shot: config.shot,
        queries_per_class: config.queries,
        labels,
        support,
        query,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{Split, SynthSpec};
    use std::collections::HashSet;

    fn dataset(classes: usize, per_class: usize) -> EmbeddingDataset {
        SynthSpec {
            num_classes: classes,
            dim: 4,
            samples_per_class: per_class,
            mean_scale: 1.0,
            noise_lo: 0.1,
            noise_hi: 0.2,
            seed: 11,
        }
        .generate()
        .unwrap()
    }

    fn config(way: usize, shot: usize, queries: usize) -> EpisodeConfig {
        EpisodeConfig {
            way,
            shot,
            queries,
            episodes: 1,
            seed: 5,
        }
    }

    #[test]
    fn forced_single_class_episode() {
        let ds = dataset(1, 2);
        let ep = sample_episode(&ds, &config(1, 1, 1), 0).unwrap();
        let s = &ep.support[0][0].id;
        let q = &ep.query[0].record.id;
        assert_ne!(s, q);
        let ids: HashSet<_> = [s.as_str(), q.as_str()].into();
        assert_eq!(ids, ["c0s0", "c0s1"].into());
        assert_eq!(ep.query[0].target, 0);
    }

    #[test]
    fn same_index_same_episode() {
        let ds = dataset(10, 20);
        let c = config(5, 2, 3);
        assert_eq!(
            sample_episode(&ds, &c, 17).unwrap(),
            sample_episode(&ds, &c, 17).unwrap()
        );
        assert_ne!(
            sample_episode(&ds, &c, 17).unwrap(),
            sample_episode(&ds, &c, 18).unwrap()
        );
    }

    #[test]
    fn request_order_does_not_matter() {
        let ds = dataset(10, 20);
        let c = EpisodeConfig {
            episodes: 8,
            ..config(5, 1, 4)
        };
        let forward = sample_episodes(&ds, &c).unwrap();
        for i in (0..8).rev() {
            assert_eq!(sample_episode(&ds, &c, i).unwrap(), forward[i as usize]);
        }
    }

    #[test]
    fn class_frequency_is_uniform() {
        let ds = dataset(20, 2);
        let c = EpisodeConfig {
            episodes: 10_000,
            ..config(5, 1, 1)
        };
        let mut counts = [0usize; 20];
        for ep in sample_episodes(&ds, &c).unwrap() {
            for &l in &ep.labels {
                counts[l as usize] += 1;
            }
        }
        for (l, &n) in counts.iter().enumerate() {
            let f = n as f64 / 10_000.0;
            assert!((f - 0.25).abs() < 0.015, "class {l} frequency {f}");
        }
    }

    #[test]
    fn insufficient_records_name_the_class() {
        let mut records = dataset(3, 5).records().to_vec();
        records.retain(|r| !(r.label == 2 && r.id != "c2s0"));
        let ds = EmbeddingDataset::new(4, Split::Base, records).unwrap();
        assert_eq!(
            sample_episode(&ds, &config(2, 1, 1), 0).unwrap_err(),
            EpisodeError::TooFewRecords {
                label: 2,
                available: 1,
                needed: 2
            }
        );
        assert!(matches!(
            sample_episode(&ds, &config(4, 1, 1), 0),
            Err(EpisodeError::TooFewClasses { .. })
        ));
        assert!(matches!(
            sample_episode(&ds, &config(2, 0, 1), 0),
            Err(EpisodeError::Degenerate { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn support_and_query_are_disjoint(
                seed in any::<u64>(),
                index in any::<u64>(),
                way in 1usize..6,
                shot in 1usize..4,
                queries in 1usize..4,
            ) {
                let ds = dataset(6, 8);
                let c = EpisodeConfig { way, shot, queries, episodes: 1, seed };
                let ep = sample_episode(&ds, &c, index).unwrap();
                let support: HashSet<_> = ep.support.iter().flatten().map(|r| r.id.clone()).collect();
                prop_assert_eq!(support.len(), way * shot);
                let query: HashSet<_> = ep.query.iter().map(|q| q.record.id.clone()).collect();
                prop_assert_eq!(query.len(), way * queries);
                prop_assert!(support.is_disjoint(&query));
                let labels: HashSet<_> = ep.labels.iter().collect();
                prop_assert_eq!(labels.len(), way);
                for q in &ep.query {
                    prop_assert_eq!(ep.labels[q.target], q.record.label);
                }
                for (j, group) in ep.support.iter().enumerate() {
                    prop_assert!(group.iter().all(|r| r.label == ep.labels[j]));
                }
            }
        }
    }
}
