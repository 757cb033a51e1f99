//! Synthetic corpus generation from the epoch-coupled seating process, with
//! a hand-crafted fixed-layout scenario used throughout the test suite.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::kernel::DecayKernel;
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicTemplate {
    /// Inclusive epoch range `[birth, death]`.
    pub lifespan: (usize, usize),
    /// Base word distribution on the vocabulary simplex.
    pub base: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub num_epochs: usize,
    pub vocab_size: usize,
    pub topics: Vec<TopicTemplate>,
    /// Fraction of each per-epoch distribution replaced by random noise.
    pub noise: f64,
    pub docs_per_epoch: usize,
    pub words_per_doc: usize,
    pub alpha: f64,
    /// 0 disables topic births (fixed layouts).
    pub gamma: f64,
    /// Decay window used for the prior-popularity coupling.
    pub delta: usize,
    pub lambda: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_epochs == 0 || self.vocab_size < 2 {
            return Err(Error::Config("scenario needs >= 1 epoch and >= 2 words".into()));
        }
        if self.topics.is_empty() {
            return Err(Error::Config("scenario needs at least one topic".into()));
        }
        for (j, topic) in self.topics.iter().enumerate() {
            let (birth, death) = topic.lifespan;
            if birth > death || death >= self.num_epochs {
                return Err(Error::Config(format!("topic {j} lifespan out of range")));
            }
            if topic.base.len() != self.vocab_size {
                return Err(Error::Config(format!("topic {j} distribution length mismatch")));
            }
            let total: f64 = topic.base.iter().sum();
            if topic.base.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("topic {j} distribution is not on the simplex")));
            }
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config("noise must be in [0, 1)".into()));
        }
        if !(self.alpha > 0.0) || self.gamma < 0.0 {
            return Err(Error::Config("alpha must be positive, gamma non-negative".into()));
        }
        Ok(())
    }
}

/// The fixed 8-topic layout: 20 epochs, 16 words, each topic concentrated on
/// a 4-word block, staggered births and deaths.
pub fn build_s51_scenario() -> ScenarioSpec {
    let lifespans = [(0, 19), (0, 11), (2, 19), (4, 15), (6, 19), (8, 17), (10, 19), (13, 19)];
    let topics = (0..8)
        .map(|j| {
            let mut base = vec![0.0; 16];
            for o in 0..4 {
                base[(2 * j + o) % 16] = 0.25;
            }
            TopicTemplate { lifespan: lifespans[j], base }
        })
        .collect();
    ScenarioSpec {
        num_epochs: 20,
        vocab_size: 16,
        topics,
        noise: 0.05,
        docs_per_epoch: 100,
        words_per_doc: 50,
        alpha: 1.5,
        gamma: 0.0,
        delta: 4,
        lambda: 0.5,
    }
}

/// Ground truth emitted alongside a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub lifespans: Vec<(usize, usize)>,
    /// `dists[k][t - birth]` is topic `k`'s word distribution at epoch `t`.
    pub dists: Vec<Vec<Vec<f64>>>,
    /// Topic index per word, per document (corpus document order).
    pub labels: Vec<Vec<usize>>,
    pub doc_epochs: Vec<usize>,
}

/// Simulate the seating process over the fixed topic layout. Documents draw
/// tables by a CRP, tables pick topics by current-epoch usage plus prior
/// popularity, newly alive topics enter at the average prior popularity of
/// the epoch's alive topics.
pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<(Corpus, GroundTruth)> {
    spec.validate()?;
    let mut rng = substream(seed, Stream::Generator);
    let kernel = DecayKernel::new(spec.delta, spec.lambda)?;
    let n_topics = spec.topics.len();
    let w = spec.vocab_size;

    // Realized table usage per topic per epoch, for the decayed coupling.
    let mut usage = vec![vec![0u32; spec.num_epochs]; n_topics];
    let mut dists: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_topics];
    let mut documents = Vec::new();
    let mut labels = Vec::new();
    let mut doc_epochs = Vec::new();

    for t in 0..spec.num_epochs {
        let alive: Vec<usize> = (0..n_topics)
            .filter(|&j| spec.topics[j].lifespan.0 <= t && t <= spec.topics[j].lifespan.1)
            .collect();
        if alive.is_empty() && spec.docs_per_epoch > 0 {
            return Err(Error::Config(format!("no topic alive at epoch {t} but documents requested")));
        }

        // Per-epoch noisy distributions for alive topics.
        for &j in &alive {
            let noise: Vec<f64> = {
                // Flat Dirichlet via normalized exponentials.
                let draws: Vec<f64> = (0..w).map(|_| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln()).collect();
                let total: f64 = draws.iter().sum();
                draws.into_iter().map(|d| d / total).collect()
            };
            let dist: Vec<f64> = spec.topics[j]
                .base
                .iter()
                .zip(&noise)
                .map(|(&p, &n)| (1.0 - spec.noise) * p + spec.noise * n)
                .collect();
            dists[j].push(dist);
        }

        // Prior popularity: decayed counts for continuing topics; newly
        // alive topics enter at the alive-topic average (uniform when the
        // epoch has no history at all).
        let mut prior = vec![0.0; n_topics];
        for &j in &alive {
            prior[j] = kernel.prior_weight_direct(t, |s| usage[j][s]);
        }
        let continuing: Vec<f64> = alive.iter().map(|&j| prior[j]).filter(|&p| p > 0.0).collect();
        let newcomer_mass = if continuing.is_empty() {
            1.0
        } else {
            continuing.iter().sum::<f64>() / alive.len() as f64
        };
        for &j in &alive {
            if prior[j] == 0.0 {
                prior[j] = newcomer_mass;
            }
        }

        // Epoch-level table counts accumulate across documents.
        let mut m_t = vec![0u32; n_topics];
        for _ in 0..spec.docs_per_epoch {
            let mut table_topic: Vec<usize> = Vec::new();
            let mut table_n: Vec<u32> = Vec::new();
            let mut words = Vec::with_capacity(spec.words_per_doc);
            let mut word_labels = Vec::with_capacity(spec.words_per_doc);
            for i in 0..spec.words_per_doc {
                // CRP over tables.
                let total = i as f64 + spec.alpha;
                let mut u = rng.random::<f64>() * total;
                let mut table = None;
                for (b, &n) in table_n.iter().enumerate() {
                    u -= n as f64;
                    if u <= 0.0 {
                        table = Some(b);
                        break;
                    }
                }
                let b = match table {
                    Some(b) => {
                        table_n[b] += 1;
                        b
                    }
                    None => {
                        // New table: topic by usage + prior popularity.
                        let weights: Vec<f64> =
                            alive.iter().map(|&j| m_t[j] as f64 + prior[j]).collect();
                        let total_w: f64 = weights.iter().sum();
                        let mut v = rng.random::<f64>() * total_w;
                        let mut pick = alive[alive.len() - 1];
                        for (&j, &wt) in alive.iter().zip(&weights) {
                            v -= wt;
                            if v <= 0.0 {
                                pick = j;
                                break;
                            }
                        }
                        m_t[pick] += 1;
                        table_topic.push(pick);
                        table_n.push(1);
                        table_topic.len() - 1
                    }
                };
                let j = table_topic[b];
                let dist = &dists[j][t - spec.topics[j].lifespan.0];
                let mut u = rng.random::<f64>();
                let mut word = w - 1;
                for (x, &p) in dist.iter().enumerate() {
                    u -= p;
                    if u <= 0.0 {
                        word = x;
                        break;
                    }
                }
                words.push(word as u32);
                word_labels.push(j);
            }
            documents.push(Document { epoch: t, words });
            labels.push(word_labels);
            doc_epochs.push(t);
        }
        for j in 0..n_topics {
            usage[j][t] = m_t[j];
        }
    }

    let vocab = Vocabulary::anonymous(w);
    let (corpus, _report) = Corpus::new(vocab, documents)?;
    let truth = GroundTruth {
        lifespans: spec.topics.iter().map(|t| t.lifespan).collect(),
        dists,
        labels,
        doc_epochs,
    };
    Ok((corpus, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s51_layout_parameters() {
        let spec = build_s51_scenario();
        spec.validate().unwrap();
        assert_eq!(spec.vocab_size, 16);
        assert_eq!(spec.num_epochs, 20);
        assert_eq!(spec.topics.len(), 8);
        assert!((spec.alpha - 1.5).abs() < 1e-12);
        assert_eq!(spec.gamma, 0.0);
        // Each topic concentrates (1 - noise) mass on exactly 4 words.
        for topic in &spec.topics {
            let heavy = topic.base.iter().filter(|&&p| p >= (1.0 - spec.noise) / 4.0).count();
            assert_eq!(heavy, 4);
        }
        // Some topic is alive at every epoch.
        for t in 0..20 {
            assert!(spec.topics.iter().any(|x| x.lifespan.0 <= t && t <= x.lifespan.1));
        }
    }

    #[test]
    fn s51_token_counts() {
        let spec = ScenarioSpec { docs_per_epoch: 5, num_epochs: 3, ..build_s51_scenario() };
        let spec = ScenarioSpec {
            topics: spec
                .topics
                .into_iter()
                .map(|t| TopicTemplate {
                    lifespan: (t.lifespan.0.min(2), t.lifespan.1.min(2)),
                    ..t
                })
                .filter(|t| t.lifespan.0 <= t.lifespan.1)
                .collect(),
            ..spec
        };
        let (corpus, _) = generate(&spec, 3).unwrap();
        for t in 0..3 {
            let tokens: usize = corpus.docs_at(t).iter().map(|d| d.words.len()).sum();
            assert_eq!(tokens, 5 * 50);
        }
    }

    #[test]
    fn full_s51_epoch_tokens() {
        let (corpus, truth) = generate(&build_s51_scenario(), 1).unwrap();
        assert_eq!(corpus.num_epochs(), 20);
        for t in 0..20 {
            let tokens: usize = corpus.docs_at(t).iter().map(|d| d.words.len()).sum();
            assert_eq!(tokens, 100 * 50);
        }
        assert_eq!(truth.lifespans.len(), 8);
        for (k, life) in truth.lifespans.iter().enumerate() {
            assert_eq!(truth.dists[k].len(), life.1 - life.0 + 1);
        }
    }

    #[test]
    fn single_topic_labels_everything() {
        let spec = ScenarioSpec {
            num_epochs: 2,
            vocab_size: 4,
            topics: vec![TopicTemplate { lifespan: (0, 1), base: vec![0.25; 4] }],
            noise: 0.0,
            docs_per_epoch: 3,
            words_per_doc: 10,
            alpha: 1.0,
            gamma: 0.0,
            delta: 2,
            lambda: 0.5,
        };
        let (_, truth) = generate(&spec, 9).unwrap();
        assert!(truth.labels.iter().flatten().all(|&j| j == 0));
    }

    #[test]
    fn dead_epoch_with_documents_errors() {
        let spec = ScenarioSpec {
            num_epochs: 3,
            vocab_size: 4,
            topics: vec![TopicTemplate { lifespan: (0, 1), base: vec![0.25; 4] }],
            noise: 0.0,
            docs_per_epoch: 2,
            words_per_doc: 5,
            alpha: 1.0,
            gamma: 0.0,
            delta: 2,
            lambda: 0.5,
        };
        assert!(generate(&spec, 0).is_err());
    }

    #[test]
    fn empirical_frequencies_converge_to_spec_distributions() {
        let spec = ScenarioSpec {
            num_epochs: 2,
            vocab_size: 8,
            topics: vec![
                TopicTemplate { lifespan: (0, 1), base: vec![0.5, 0.3, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0] },
                TopicTemplate { lifespan: (0, 1), base: vec![0.0, 0.0, 0.0, 0.0, 0.4, 0.4, 0.1, 0.1] },
            ],
            noise: 0.02,
            docs_per_epoch: 1000,
            words_per_doc: 50,
            alpha: 2.0,
            gamma: 0.0,
            delta: 2,
            lambda: 0.5,
        };
        let (corpus, truth) = generate(&spec, 42).unwrap();
        for t in 0..2 {
            let mut counts = vec![vec![0u64; 8]; 2];
            for (d, doc) in corpus.iter_docs().enumerate() {
                if doc.epoch != t {
                    continue;
                }
                for (i, &word) in doc.words.iter().enumerate() {
                    counts[truth.labels[d][i]][word as usize] += 1;
                }
            }
            for k in 0..2 {
                let total: u64 = counts[k].iter().sum();
                assert!(total > 1000, "topic {k} undersampled at epoch {t}");
                let l1: f64 = counts[k]
                    .iter()
                    .zip(&truth.dists[k][t])
                    .map(|(&c, &p)| (c as f64 / total as f64 - p).abs())
                    .sum();
                assert!(l1 <= 0.05, "epoch {t} topic {k}: L1 {l1}");
            }
        }
    }

    #[test]
    fn epoch_statistics_invariant_to_document_order() {
        let spec = ScenarioSpec { docs_per_epoch: 20, ..build_s51_scenario() };
        let (corpus, _) = generate(&spec, 17).unwrap();
        for t in 0..corpus.num_epochs() {
            let mut hist_fwd = vec![0u64; 16];
            let mut hist_rev = vec![0u64; 16];
            for doc in corpus.docs_at(t) {
                for &w in &doc.words {
                    hist_fwd[w as usize] += 1;
                }
            }
            for doc in corpus.docs_at(t).iter().rev() {
                for &w in &doc.words {
                    hist_rev[w as usize] += 1;
                }
            }
            assert_eq!(hist_fwd, hist_rev);
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = ScenarioSpec { docs_per_epoch: 5, ..build_s51_scenario() };
        let (c1, t1) = generate(&spec, 4).unwrap();
        let (c2, t2) = generate(&spec, 4).unwrap();
        let (c3, _) = generate(&spec, 5).unwrap();
        let j1 = serde_json::to_string(&t1.labels).unwrap();
        let j2 = serde_json::to_string(&t2.labels).unwrap();
        assert_eq!(j1, j2);
        let d1: Vec<_> = c1.iter_docs().map(|d| d.words.clone()).collect();
        let d2: Vec<_> = c2.iter_docs().map(|d| d.words.clone()).collect();
        let d3: Vec<_> = c3.iter_docs().map(|d| d.words.clone()).collect();
        assert_eq!(d1, d2);
        assert_ne!(d1, d3);
    }
}
