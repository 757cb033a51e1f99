//! Scoring and diagnostics: recovered-vs-true topic matching, held-out
//! likelihood by document completion, and timeline export.

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{epoch_unigram, symmetrized_kl, Corpus};
use crate::error::{Error, Result};
use crate::generator::GroundTruth;
use crate::kernel::DecayKernel;
use crate::rng::{substream, Stream};
use crate::sampler::{log_sum_exp, sample_from_log_weights, PosteriorSample, SamplerConfig};
use crate::state::SeatingState;
use crate::topicdyn::TopicChain;

/// Sentinel cost for topic pairs with no overlapping epoch.
const NO_OVERLAP: f64 = 1e12;

/// A topic as read off a posterior sample: its used lifespan and per-epoch
/// word distributions.
#[derive(Debug, Clone)]
pub struct RecoveredTopic {
    pub id: usize,
    pub lifespan: (usize, usize),
    /// `dists[t - lifespan.0]`, rows on the simplex.
    pub dists: Vec<Vec<f64>>,
}

/// Read the recovered topics out of a rebuilt state and its chains.
///
/// Lifespan endpoints are estimated with a usage floor: an epoch counts
/// toward a topic's lifespan only while the topic holds at least 1% of the
/// epoch's tokens (minimum one word). A finite posterior sample always
/// carries transient near-empty tables, and their handful of words would
/// otherwise smear the endpoints by several epochs. Topics that never clear
/// the floor keep their raw used range.
pub fn recovered_topics(state: &SeatingState, chains: &[TopicChain]) -> Vec<RecoveredTopic> {
    let num_epochs = state.num_epochs();
    let mut epoch_tokens = vec![0u64; num_epochs];
    for &k in state.live_topics() {
        for (t, tot) in epoch_tokens.iter_mut().enumerate() {
            *tot += state.topic_word_counts(k, t).iter().map(|&c| c as u64).sum::<u64>();
        }
    }
    let mut out = Vec::new();
    for chain in chains {
        let Some((raw_first, raw_last)) = state.used_epoch_range(chain.id) else { continue };
        let clears = |t: usize| {
            let used: u64 = state.topic_word_counts(chain.id, t).iter().map(|&c| c as u64).sum();
            used >= (epoch_tokens[t] / 100).max(1)
        };
        let first = (raw_first..=raw_last).find(|&t| clears(t)).unwrap_or(raw_first);
        let last = (raw_first..=raw_last).rev().find(|&t| clears(t)).unwrap_or(raw_last);
        let dists = (first..=last)
            .map(|t| chain.log_probs(t).iter().map(|&l| l.exp()).collect())
            .collect();
        out.push(RecoveredTopic { id: chain.id, lifespan: (first, last), dists });
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchedPair {
    pub recovered: usize,
    pub truth: usize,
    /// L1 distance averaged over the overlapping epochs.
    pub mean_l1: f64,
    /// Recovered minus true epoch, per lifespan endpoint.
    pub birth_error: i64,
    pub death_error: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_recovered: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
}

impl RecoveryReport {
    pub fn mean_l1(&self) -> f64 {
        if self.pairs.is_empty() {
            return f64::NAN;
        }
        self.pairs.iter().map(|p| p.mean_l1).sum::<f64>() / self.pairs.len() as f64
    }
}

/// Minimum-cost assignment on a square matrix (potentials method, O(n^3)).
/// Returns `assign[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn pair_cost(r: &RecoveredTopic, truth: &GroundTruth, k: usize) -> f64 {
    let (tb, td) = truth.lifespans[k];
    let lo = r.lifespan.0.max(tb);
    let hi = r.lifespan.1.min(td);
    if lo > hi {
        return NO_OVERLAP;
    }
    let mut total = 0.0;
    for t in lo..=hi {
        let rd = &r.dists[t - r.lifespan.0];
        let td_row = &truth.dists[k][t - tb];
        total += rd.iter().zip(td_row).map(|(&a, &b)| (a - b).abs()).sum::<f64>();
    }
    total / (hi - lo + 1) as f64
}

/// Optimal one-to-one matching between recovered and true topics by mean L1
/// over overlapping epochs; non-overlapping pairs stay unmatched.
pub fn match_topics(recovered: &[RecoveredTopic], truth: &GroundTruth) -> Result<RecoveryReport> {
    if recovered.is_empty() || truth.lifespans.is_empty() {
        return Err(Error::Eval("matching requires topics on both sides".into()));
    }
    let n = recovered.len().max(truth.lifespans.len());
    // Square matrix padded with zero-cost dummies.
    let mut cost = vec![vec![0.0; n]; n];
    for (i, r) in recovered.iter().enumerate() {
        for k in 0..truth.lifespans.len() {
            cost[i][k] = pair_cost(r, truth, k);
        }
        for k in truth.lifespans.len()..n {
            cost[i][k] = NO_OVERLAP;
        }
    }
    for row in recovered.len()..n {
        for k in 0..n {
            cost[row][k] = NO_OVERLAP;
        }
    }
    let assign = hungarian(&cost);
    let mut report = RecoveryReport { pairs: Vec::new(), unmatched_recovered: Vec::new(), unmatched_truth: Vec::new() };
    let mut truth_matched = vec![false; truth.lifespans.len()];
    for (i, &k) in assign.iter().enumerate() {
        if i >= recovered.len() {
            continue;
        }
        if k < truth.lifespans.len() && cost[i][k] < NO_OVERLAP {
            truth_matched[k] = true;
            report.pairs.push(MatchedPair {
                recovered: recovered[i].id,
                truth: k,
                mean_l1: cost[i][k],
                birth_error: recovered[i].lifespan.0 as i64 - truth.lifespans[k].0 as i64,
                death_error: recovered[i].lifespan.1 as i64 - truth.lifespans[k].1 as i64,
            });
        } else {
            report.unmatched_recovered.push(recovered[i].id);
        }
    }
    for (k, &m) in truth_matched.iter().enumerate() {
        if !m {
            report.unmatched_truth.push(k);
        }
    }
    Ok(report)
}

/// Frozen per-epoch menu used by the document-completion estimator.
struct EpochMenu {
    /// Per option: log prior weight and the topic's log word distribution.
    log_u: Vec<f64>,
    logp: Vec<Vec<f64>>,
    alpha: f64,
}

fn build_menu(
    state: &SeatingState,
    chains: &[TopicChain],
    alpha: &[f64],
    gamma: &[f64],
    t: usize,
) -> EpochMenu {
    let mut log_u = Vec::new();
    let mut logp = Vec::new();
    let w = state.vocab_size();
    for chain in chains {
        let k = chain.id;
        if !state.is_live(k) {
            continue;
        }
        let prior = state.m(k, t) as f64 + state.m_prime(k, t);
        if prior > 0.0 {
            log_u.push(prior.ln());
            // A chain stopping short of `t` contributes its last known
            // distribution (mode of the transition kernel).
            let s = t.min(chain.end()).max(chain.birth);
            logp.push(chain.log_probs(s).to_vec());
        }
    }
    if gamma[t] > 0.0 {
        // Base-measure predictive is uniform by symmetry.
        log_u.push(gamma[t].ln());
        logp.push(vec![-(w as f64).ln(); w]);
    }
    EpochMenu { log_u, logp, alpha: alpha[t] }
}

/// Mean per-word held-out log-likelihood by document completion:
/// Rao-Blackwellized predictive probabilities averaged over the last half of
/// `G` Gibbs passes per document and over posterior samples.
pub fn heldout_loglik(
    samples: &[PosteriorSample],
    train: &Corpus,
    test: &Corpus,
    config: &SamplerConfig,
) -> Result<f64> {
    const G: usize = 50;
    if samples.is_empty() {
        return Err(Error::Eval("no posterior samples".into()));
    }
    if test.vocab_size() > train.vocab_size() {
        return Err(Error::Eval("test vocabulary exceeds training vocabulary".into()));
    }
    if test.num_epochs() > train.num_epochs() {
        return Err(Error::Eval("test epochs exceed training epochs".into()));
    }
    let kernel = DecayKernel::new(config.delta, config.lambda)?;
    let n_words = test.num_tokens();
    if n_words == 0 {
        return Err(Error::Eval("empty test corpus".into()));
    }
    // Mean predictive probability per test token, pooled over samples.
    let mut prob_sum: Vec<f64> = vec![0.0; n_words];
    let mut prob_n = 0usize;
    let mut rng = substream(config.seed, Stream::Heldout);

    for sample in samples {
        let mut sample = sample.clone();
        sample.restore_caches();
        let state = SeatingState::from_checkpoint(train, kernel, &sample.state)?;
        let menus: Vec<EpochMenu> = (0..train.num_epochs())
            .map(|t| build_menu(&state, &sample.chains, &sample.alpha, &sample.gamma, t))
            .collect();
        prob_n += G / 2;

        let mut token = 0usize;
        for doc in test.iter_docs() {
            let menu = &menus[doc.epoch];
            if menu.log_u.is_empty() {
                return Err(Error::Eval(format!("no topic alive at test epoch {}", doc.epoch)));
            }
            let n = doc.words.len();
            let log_z = log_sum_exp(&menu.log_u);
            // Local seating: table -> (menu option, occupancy).
            let mut table_opt: Vec<usize> = Vec::new();
            let mut table_n: Vec<u32> = Vec::new();
            let mut assign: Vec<usize> = vec![usize::MAX; n];
            for pass in 0..=G {
                for i in 0..n {
                    let w = doc.words[i] as usize;
                    if pass > 0 {
                        let b = assign[i];
                        table_n[b] -= 1;
                        if table_n[b] == 0 {
                            // Swap-remove; fix the moved table's references.
                            let last = table_n.len() - 1;
                            table_n.swap_remove(b);
                            table_opt.swap_remove(b);
                            if b != last {
                                for a in assign.iter_mut() {
                                    if *a == last {
                                        *a = b;
                                    }
                                }
                            }
                        }
                    }
                    // New-table mass: alpha times the menu-averaged word
                    // probability.
                    let joint: Vec<f64> = menu
                        .log_u
                        .iter()
                        .zip(&menu.logp)
                        .map(|(&u, lp)| u + lp[w])
                        .collect();
                    let log_new = menu.alpha.ln() + log_sum_exp(&joint) - log_z;
                    let mut scores: Vec<f64> = table_opt
                        .iter()
                        .zip(&table_n)
                        .map(|(&o, &c)| (c as f64).ln() + menu.logp[o][w])
                        .collect();
                    scores.push(log_new);
                    if pass > G / 2 {
                        // Rao-Blackwellized predictive for this word.
                        let denom = (n - 1) as f64 + menu.alpha;
                        let prob = scores.iter().map(|&s| s.exp()).sum::<f64>() / denom;
                        prob_sum[token + i] += prob;
                    }
                    let choice = sample_from_log_weights(&scores, &mut rng);
                    if choice < table_opt.len() {
                        table_n[choice] += 1;
                        assign[i] = choice;
                    } else {
                        let opt = sample_from_log_weights(&joint, &mut rng);
                        table_opt.push(opt);
                        table_n.push(1);
                        assign[i] = table_opt.len() - 1;
                    }
                }
            }
            token += n;
        }
    }
    let ll = prob_sum.iter().map(|&p| (p / prob_n as f64).ln()).sum::<f64>() / n_words as f64;
    Ok(ll)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimelineTopic {
    pub id: usize,
    pub birth: usize,
    pub death: usize,
    /// `m + m'` per epoch of the whole corpus range.
    pub trend: Vec<f64>,
    /// Top words per covered epoch, ties broken by word id.
    pub top_words: Vec<Vec<String>>,
    /// Documents with the most words on this topic: top 2, plus ties with
    /// the boundary.
    pub top_docs: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub num_alive: usize,
    /// Symmetrized KL between this epoch's and the previous epoch's unigram
    /// distributions (0 at epoch 0).
    pub unigram_shift: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timeline {
    pub format: u32,
    pub num_epochs: usize,
    pub topics: Vec<TimelineTopic>,
    pub epochs: Vec<EpochStats>,
}

pub const TIMELINE_FORMAT: u32 = 1;

pub fn build_timeline(
    sample: &PosteriorSample,
    corpus: &Corpus,
    config: &SamplerConfig,
    n_top: usize,
) -> Result<Timeline> {
    let kernel = DecayKernel::new(config.delta, config.lambda)?;
    let mut sample = sample.clone();
    sample.restore_caches();
    let state = SeatingState::from_checkpoint(corpus, kernel, &sample.state)?;
    let t_total = corpus.num_epochs();
    let vocab = corpus.vocab().symbols();
    let n_top = n_top.min(vocab.len());

    let mut topics = Vec::new();
    for chain in &sample.chains {
        let k = chain.id;
        let Some((birth, death)) = state.used_epoch_range(k) else { continue };
        let trend: Vec<f64> = (0..t_total).map(|t| state.m(k, t) as f64 + state.m_prime(k, t)).collect();
        let mut top_words = Vec::new();
        for t in birth..=death.min(chain.end()) {
            let probs = chain.log_probs(t);
            let mut idx: Vec<usize> = (0..probs.len()).collect();
            idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            top_words.push(idx[..n_top].iter().map(|&w| vocab[w].clone()).collect());
        }
        // Words assigned to this topic per document.
        let mut doc_counts: Vec<(usize, u32)> = Vec::new();
        for (d, doc) in state.docs.iter().enumerate() {
            let mut c = 0u32;
            for slot in doc.table_slots() {
                let table = doc.table(slot);
                if table.topic == k {
                    c += table.occupancy;
                }
            }
            if c > 0 {
                doc_counts.push((d, c));
            }
        }
        doc_counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let cutoff = doc_counts.get(1).map(|&(_, c)| c).unwrap_or(0);
        let top_docs: Vec<usize> = doc_counts
            .iter()
            .take_while(|&&(_, c)| c >= cutoff)
            .map(|&(d, _)| d)
            .collect();
        topics.push(TimelineTopic { id: k, birth, death, trend, top_words, top_docs });
    }

    let mut epochs = Vec::new();
    let mut prev_unigram: Option<Vec<f64>> = None;
    for t in 0..t_total {
        let num_alive = topics.iter().filter(|x| x.trend[t] > 0.0).count();
        let unigram = epoch_unigram(corpus, t)?;
        let shift = match &prev_unigram {
            Some(p) => symmetrized_kl(p, &unigram),
            None => 0.0,
        };
        prev_unigram = Some(unigram);
        epochs.push(EpochStats { epoch: t, num_alive, unigram_shift: shift });
    }
    Ok(Timeline { format: TIMELINE_FORMAT, num_epochs: t_total, topics, epochs })
}

/// Write the timeline as JSON plus a plot-friendly CSV of
/// `epoch,topic,trend` rows.
pub fn write_timeline(timeline: &Timeline, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
    let json = File::create(json_path)?;
    serde_json::to_writer_pretty(BufWriter::new(json), timeline)?;
    let mut csv = BufWriter::new(File::create(csv_path)?);
    writeln!(csv, "epoch,topic,trend")?;
    for topic in &timeline.topics {
        for (t, &v) in topic.trend.iter().enumerate() {
            if v > 0.0 {
                writeln!(csv, "{t},{},{v}", topic.id)?;
            }
        }
    }
    Ok(())
}
