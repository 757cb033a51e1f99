//! Franchise seating state: tables, assignments, count statistics, and the
//! cached transition ratios that make the forward-conditioning factor cheap.
//!
//! Topic ids are global across epochs and never reused within a run; a
//! topic's per-epoch aliveness is derived from its raw usage `m` and its
//! decayed prior weight `m'`.

use libm::lgamma;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::kernel::DecayKernel;

pub type TopicId = usize;

pub const UNSEATED: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct Table {
    pub topic: TopicId,
    pub occupancy: u32,
    /// Word-frequency vector of the tokens at this table (length W).
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct DocState {
    pub epoch: usize,
    pub words: Vec<u32>,
    /// Table slot per token; `UNSEATED` before initialization.
    pub assign: Vec<u32>,
    tables: Vec<Option<Table>>,
    free_slots: Vec<u32>,
    n_tables: usize,
}

impl DocState {
    fn new(epoch: usize, words: Vec<u32>) -> Self {
        let n = words.len();
        DocState {
            epoch,
            words,
            assign: vec![UNSEATED; n],
            tables: Vec::new(),
            free_slots: Vec::new(),
            n_tables: 0,
        }
    }

    pub fn num_tables(&self) -> usize {
        self.n_tables
    }

    pub fn table(&self, slot: u32) -> &Table {
        self.tables[slot as usize].as_ref().expect("live table slot")
    }

    pub fn table_slots(&self) -> impl Iterator<Item = u32> + '_ {
        self.tables
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_some())
            .map(|(i, _)| i as u32)
    }

    pub fn seated_words(&self) -> usize {
        self.assign.iter().filter(|&&a| a != UNSEATED).count()
    }
}

#[derive(Debug, Clone)]
struct TopicCounts {
    birth: usize,
    /// Tables serving this topic, per epoch.
    m: Vec<u32>,
    usage_total: u64,
    /// Tokens generated by this topic per epoch (length W each).
    v: Vec<Vec<u32>>,
}

/// Outcome of a table-topic move.
#[derive(Debug, Clone, Copy)]
pub struct MoveOutcome {
    pub old_topic: TopicId,
    pub new_topic: TopicId,
    /// Set when the old topic lost its last table anywhere.
    pub topic_died: Option<TopicId>,
}

/// Outcome of unseating a word.
#[derive(Debug, Clone, Copy)]
pub struct UnseatOutcome {
    pub topic: TopicId,
    /// Set when the word's table emptied and was removed.
    pub removed_table_of: Option<TopicId>,
    pub topic_died: Option<TopicId>,
}

#[derive(Debug, Clone)]
pub struct SeatingState {
    num_epochs: usize,
    vocab_size: usize,
    kernel: DecayKernel,
    pub docs: Vec<DocState>,
    epoch_docs: Vec<Vec<usize>>,
    topics: Vec<TopicCounts>,
    live: Vec<TopicId>,
}

impl SeatingState {
    pub fn from_corpus(corpus: &Corpus, kernel: DecayKernel) -> Self {
        let mut docs = Vec::new();
        let mut epoch_docs = vec![Vec::new(); corpus.num_epochs()];
        for t in 0..corpus.num_epochs() {
            for doc in corpus.docs_at(t) {
                epoch_docs[t].push(docs.len());
                docs.push(DocState::new(t, doc.words.clone()));
            }
        }
        SeatingState {
            num_epochs: corpus.num_epochs(),
            vocab_size: corpus.vocab_size(),
            kernel,
            docs,
            epoch_docs,
            topics: Vec::new(),
            live: Vec::new(),
        }
    }

    pub fn num_epochs(&self) -> usize {
        self.num_epochs
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn kernel(&self) -> &DecayKernel {
        &self.kernel
    }

    pub fn docs_at(&self, t: usize) -> &[usize] {
        &self.epoch_docs[t]
    }

    /// Live topic ids in ascending order.
    pub fn live_topics(&self) -> &[TopicId] {
        &self.live
    }

    pub fn num_topic_ids(&self) -> usize {
        self.topics.len()
    }

    pub fn is_live(&self, k: TopicId) -> bool {
        self.topics[k].usage_total > 0
    }

    pub fn birth_epoch(&self, k: TopicId) -> usize {
        self.topics[k].birth
    }

    /// Tables serving topic `k` at epoch `t`.
    pub fn m(&self, k: TopicId, t: usize) -> u32 {
        let tc = &self.topics[k];
        if tc.m.is_empty() {
            0
        } else {
            tc.m[t]
        }
    }

    /// Decayed historic prior weight of topic `k` at epoch `t` (exact
    /// windowed sum over the current usage history).
    pub fn m_prime(&self, k: TopicId, t: usize) -> f64 {
        let tc = &self.topics[k];
        if tc.m.is_empty() {
            return 0.0;
        }
        self.kernel.prior_weight_direct(t, |s| tc.m[s])
    }

    /// `m'` with the usage at `(adj_topic, adj_epoch)` shifted by `adj`.
    pub fn m_prime_adjusted(&self, k: TopicId, t: usize, adj_epoch: usize, adj: i64) -> f64 {
        let tc = &self.topics[k];
        if tc.m.is_empty() && adj <= 0 {
            return 0.0;
        }
        self.kernel.prior_weight_direct(t, |s| {
            let base = if tc.m.is_empty() { 0 } else { tc.m[s] };
            if s == adj_epoch {
                (base as i64 + adj).max(0) as u32
            } else {
                base
            }
        })
    }

    /// Word counts generated by topic `k` at epoch `t`.
    pub fn topic_word_counts(&self, k: TopicId, t: usize) -> &[u32] {
        &self.topics[k].v[t]
    }

    /// Earliest/latest epoch where topic `k` has tables.
    pub fn used_epoch_range(&self, k: TopicId) -> Option<(usize, usize)> {
        let tc = &self.topics[k];
        let first = tc.m.iter().position(|&m| m > 0)?;
        let last = tc.m.iter().rposition(|&m| m > 0)?;
        Some((first, last))
    }

    pub fn alive_at(&self, k: TopicId, t: usize) -> bool {
        self.m(k, t) > 0 || self.m_prime(k, t) > 0.0
    }

    /// Number of topics alive at epoch `t`.
    pub fn num_alive_at(&self, t: usize) -> usize {
        self.live.iter().filter(|&&k| self.alive_at(k, t)).count()
    }

    /// Total tables at epoch `t`.
    pub fn total_tables_at(&self, t: usize) -> u32 {
        self.live.iter().map(|&k| self.m(k, t)).sum()
    }

    /// Total decayed prior mass at epoch `t`.
    pub fn total_m_prime_at(&self, t: usize) -> f64 {
        self.live.iter().map(|&k| self.m_prime(k, t)).sum()
    }

    /// Register a new topic born at `birth`; ids are never reused.
    pub fn new_topic(&mut self, birth: usize) -> TopicId {
        let id = self.topics.len();
        self.topics.push(TopicCounts {
            birth,
            m: vec![0; self.num_epochs],
            usage_total: 0,
            v: vec![vec![0; self.vocab_size]; self.num_epochs],
        });
        self.live.push(id);
        id
    }

    fn note_topic_unused(&mut self, k: TopicId) -> Option<TopicId> {
        if self.topics[k].usage_total == 0 {
            // Dead: free the per-epoch storage, drop from the live set.
            self.topics[k].m = Vec::new();
            self.topics[k].v = Vec::new();
            if let Ok(pos) = self.live.binary_search(&k) {
                self.live.remove(pos);
            }
            Some(k)
        } else {
            None
        }
    }

    /// Reassign the table at `(doc, slot)` to `k_new`, maintaining all count
    /// statistics. The caller is responsible for cache invalidation and
    /// chain bookkeeping.
    pub fn set_table_topic(&mut self, doc: usize, slot: u32, k_new: TopicId) -> MoveOutcome {
        let t = self.docs[doc].epoch;
        let (k_old, counts) = {
            let table = self.docs[doc].tables[slot as usize].as_ref().expect("live table");
            (table.topic, table.counts.clone())
        };
        if k_old == k_new {
            return MoveOutcome { old_topic: k_old, new_topic: k_new, topic_died: None };
        }
        {
            let tc = &mut self.topics[k_old];
            tc.m[t] -= 1;
            tc.usage_total -= 1;
            for (w, &c) in counts.iter().enumerate() {
                if c > 0 {
                    tc.v[t][w] -= c;
                }
            }
        }
        {
            let tc = &mut self.topics[k_new];
            tc.m[t] += 1;
            tc.usage_total += 1;
            for (w, &c) in counts.iter().enumerate() {
                if c > 0 {
                    tc.v[t][w] += c;
                }
            }
        }
        self.docs[doc].tables[slot as usize].as_mut().unwrap().topic = k_new;
        let topic_died = self.note_topic_unused(k_old);
        MoveOutcome { old_topic: k_old, new_topic: k_new, topic_died }
    }

    /// Remove word `i` of `doc` from its table; empties are removed
    /// immediately.
    pub fn unseat_word(&mut self, doc: usize, i: usize) -> UnseatOutcome {
        let slot = self.docs[doc].assign[i];
        assert_ne!(slot, UNSEATED, "word already unseated");
        let t = self.docs[doc].epoch;
        let w = self.docs[doc].words[i] as usize;
        self.docs[doc].assign[i] = UNSEATED;
        let (topic, emptied) = {
            let table = self.docs[doc].tables[slot as usize].as_mut().expect("live table");
            table.occupancy -= 1;
            table.counts[w] -= 1;
            (table.topic, table.occupancy == 0)
        };
        {
            let tc = &mut self.topics[topic];
            tc.v[t][w] -= 1;
        }
        let mut removed_table_of = None;
        let mut topic_died = None;
        if emptied {
            self.docs[doc].tables[slot as usize] = None;
            self.docs[doc].free_slots.push(slot);
            self.docs[doc].n_tables -= 1;
            let tc = &mut self.topics[topic];
            tc.m[t] -= 1;
            tc.usage_total -= 1;
            removed_table_of = Some(topic);
            topic_died = self.note_topic_unused(topic);
        }
        UnseatOutcome { topic, removed_table_of, topic_died }
    }

    /// Seat word `i` of `doc` at an existing table.
    pub fn seat_word_existing(&mut self, doc: usize, i: usize, slot: u32) {
        let t = self.docs[doc].epoch;
        let w = self.docs[doc].words[i] as usize;
        self.docs[doc].assign[i] = slot;
        let topic = {
            let table = self.docs[doc].tables[slot as usize].as_mut().expect("live table");
            table.occupancy += 1;
            table.counts[w] += 1;
            table.topic
        };
        self.topics[topic].v[t][w] += 1;
    }

    /// Seat word `i` of `doc` at a brand-new table serving `topic`.
    pub fn seat_word_new_table(&mut self, doc: usize, i: usize, topic: TopicId) -> u32 {
        let t = self.docs[doc].epoch;
        let w = self.docs[doc].words[i] as usize;
        let mut counts = vec![0u32; self.vocab_size];
        counts[w] = 1;
        let table = Table { topic, occupancy: 1, counts };
        let slot = match self.docs[doc].free_slots.pop() {
            Some(s) => {
                self.docs[doc].tables[s as usize] = Some(table);
                s
            }
            None => {
                self.docs[doc].tables.push(Some(table));
                (self.docs[doc].tables.len() - 1) as u32
            }
        };
        self.docs[doc].n_tables += 1;
        self.docs[doc].assign[i] = slot;
        let tc = &mut self.topics[topic];
        tc.m[t] += 1;
        tc.usage_total += 1;
        tc.v[t][w] += 1;
        slot
    }

    /// Log of the exact epoch-level seating partition probability at `t`.
    ///
    /// Matches the sequential franchise process: a topic whose prior weight
    /// is zero at `t` is born there, its founding table carries the
    /// concentration mass and its followers the ascending factorial.
    pub fn partition_log_likelihood(&self, t: usize, gamma: f64) -> Result<f64> {
        let mut entries = Vec::with_capacity(self.live.len());
        let mut m_prime_unused = 0.0;
        for &k in &self.live {
            let m = self.m(k, t);
            let mp = self.m_prime(k, t);
            if m > 0 {
                if mp == 0.0 {
                    // Born here; cross-check against the usage history.
                    if let Some((first, _)) = self.used_epoch_range(k) {
                        if first < t {
                            return Err(Error::State(format!(
                                "topic {k} used at {t} with zero prior weight but prior usage at {first}"
                            )));
                        }
                    }
                }
                entries.push((m, mp));
            } else {
                m_prime_unused += mp;
            }
        }
        Ok(partition_log_likelihood_from_counts(&entries, m_prime_unused, gamma))
    }

    /// Full-recount oracle: recompute every count from raw assignments and
    /// compare with the incrementally maintained statistics.
    pub fn check_invariants(&self) -> Result<()> {
        let mut m = vec![vec![0u32; self.num_epochs]; self.topics.len()];
        let mut v = vec![vec![vec![0u32; self.vocab_size]; self.num_epochs]; self.topics.len()];
        let mut usage = vec![0u64; self.topics.len()];
        for (d, doc) in self.docs.iter().enumerate() {
            let mut per_table = vec![0u32; doc.tables.len()];
            for (i, &slot) in doc.assign.iter().enumerate() {
                if slot == UNSEATED {
                    continue;
                }
                per_table[slot as usize] += 1;
                let table = doc.tables[slot as usize]
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("doc {d} word {i} points at a dead table")))?;
                v[table.topic][doc.epoch][doc.words[i] as usize] += 1;
            }
            for (slot, table) in doc.tables.iter().enumerate() {
                let Some(table) = table else { continue };
                if table.occupancy == 0 {
                    return Err(Error::State(format!("doc {d} slot {slot} has zero occupancy")));
                }
                if per_table[slot] != table.occupancy {
                    return Err(Error::State(format!(
                        "doc {d} slot {slot}: occupancy {} but {} assigned words",
                        table.occupancy, per_table[slot]
                    )));
                }
                let total: u32 = table.counts.iter().sum();
                if total != table.occupancy {
                    return Err(Error::State(format!("doc {d} slot {slot}: count vector sum mismatch")));
                }
                m[table.topic][doc.epoch] += 1;
                usage[table.topic] += 1;
            }
        }
        for (k, tc) in self.topics.iter().enumerate() {
            if tc.usage_total != usage[k] {
                return Err(Error::State(format!(
                    "topic {k}: usage_total {} vs recount {}",
                    tc.usage_total, usage[k]
                )));
            }
            if tc.usage_total == 0 {
                continue;
            }
            for t in 0..self.num_epochs {
                if tc.m[t] != m[k][t] {
                    return Err(Error::State(format!("topic {k} epoch {t}: m {} vs recount {}", tc.m[t], m[k][t])));
                }
                if tc.v[t] != v[k][t] {
                    return Err(Error::State(format!("topic {k} epoch {t}: v mismatch")));
                }
            }
            let is_live = self.live.binary_search(&k).is_ok();
            if !is_live {
                return Err(Error::State(format!("topic {k} used but not in live set")));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> StateCheckpoint {
        let docs = self
            .docs
            .iter()
            .map(|doc| {
                // Dense re-numbering of live slots.
                let mut slot_map = vec![u32::MAX; doc.tables.len()];
                let mut tables = Vec::new();
                for (slot, table) in doc.tables.iter().enumerate() {
                    if let Some(table) = table {
                        slot_map[slot] = tables.len() as u32;
                        tables.push(table.topic);
                    }
                }
                DocCheckpoint {
                    epoch: doc.epoch,
                    tables,
                    assign: doc.assign.iter().map(|&a| slot_map[a as usize]).collect(),
                }
            })
            .collect();
        StateCheckpoint {
            format: CHECKPOINT_FORMAT,
            topic_births: self.topics.iter().map(|tc| tc.birth).collect(),
            docs,
        }
    }

    /// Rebuild a state from a checkpoint; all counts are recomputed from the
    /// raw assignments.
    pub fn from_checkpoint(corpus: &Corpus, kernel: DecayKernel, ckpt: &StateCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "state checkpoint format {} != supported {CHECKPOINT_FORMAT}",
                ckpt.format
            )));
        }
        let mut state = SeatingState::from_corpus(corpus, kernel);
        if ckpt.docs.len() != state.docs.len() {
            return Err(Error::Config("checkpoint document count mismatch".into()));
        }
        for _ in 0..ckpt.topic_births.len() {
            state.new_topic(0);
        }
        for (k, &b) in ckpt.topic_births.iter().enumerate() {
            state.topics[k].birth = b;
        }
        for (d, dc) in ckpt.docs.iter().enumerate() {
            if dc.assign.len() != state.docs[d].words.len() {
                return Err(Error::Config(format!("checkpoint doc {d} word count mismatch")));
            }
            let mut slot_of: Vec<Option<u32>> = vec![None; dc.tables.len()];
            for (i, &b) in dc.assign.iter().enumerate() {
                let topic = *dc
                    .tables
                    .get(b as usize)
                    .ok_or_else(|| Error::Config(format!("checkpoint doc {d} table index {b} out of range")))?;
                match slot_of[b as usize] {
                    Some(slot) => state.seat_word_existing(d, i, slot),
                    None => slot_of[b as usize] = Some(state.seat_word_new_table(d, i, topic)),
                }
            }
        }
        // Dead ids keep their slot but free their storage.
        let dead: Vec<TopicId> = (0..state.topics.len()).filter(|&k| state.topics[k].usage_total == 0).collect();
        for k in dead {
            state.note_topic_unused(k);
        }
        Ok(state)
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateCheckpoint {
    pub format: u32,
    pub topic_births: Vec<usize>,
    pub docs: Vec<DocCheckpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocCheckpoint {
    pub epoch: usize,
    /// Topic per table, densely numbered.
    pub tables: Vec<TopicId>,
    /// Table index per word.
    pub assign: Vec<u32>,
}

/// `log [a]^c` with `[a]^c = a(a+1)...(a+c-1)` and `[a]^0 = 1`.
pub fn ascending_factorial_ln(a: f64, c: u32) -> f64 {
    if c == 0 {
        0.0
    } else {
        lgamma(a + c as f64) - lgamma(a)
    }
}

/// One topic's numerator contribution to the epoch partition likelihood.
///
/// A used topic with zero prior weight is born at this epoch: its founding
/// table carries the `gamma` mass and the remaining `m - 1` tables the
/// ascending factorial `[1]^{m-1} = (m-1)!`.
pub fn partition_topic_term_ln(m: u32, m_prime: f64, gamma: f64) -> f64 {
    if m == 0 {
        0.0
    } else if m_prime > 0.0 {
        ascending_factorial_ln(m_prime, m)
    } else {
        gamma.ln() + lgamma(m as f64)
    }
}

/// Log of the exact epoch partition probability given per-topic `(m, m')`
/// for used topics and the total prior weight of alive-but-unused topics.
pub fn partition_log_likelihood_from_counts(used: &[(u32, f64)], m_prime_unused: f64, gamma: f64) -> f64 {
    let total_m: u32 = used.iter().map(|&(m, _)| m).sum();
    if total_m == 0 {
        return 0.0;
    }
    let total_m_prime: f64 = used.iter().map(|&(_, mp)| mp).sum::<f64>() + m_prime_unused;
    let mut acc = 0.0;
    for &(m, mp) in used {
        acc += partition_topic_term_ln(m, mp, gamma);
    }
    acc - ascending_factorial_ln(total_m_prime + gamma, total_m)
}

/// Cached forward-factor ratios for the epoch currently being swept.
///
/// Moving a table at the base epoch from `k_old` to `k_new` perturbs only
/// `m'_{k_old}` and `m'_{k_new}` at each window epoch (the epoch totals are
/// unchanged), so the Eq-ratio decomposes into a per-topic "loss" (one table
/// of prior weight removed) plus "gain" (one added). Rows are invalidated
/// per topic when a move lands.
#[derive(Debug, Clone)]
pub struct TransitionCache {
    base_epoch: usize,
    window: Vec<WindowEpoch>,
}

#[derive(Debug, Clone)]
struct WindowEpoch {
    epoch: usize,
    gamma: f64,
    loss: Vec<f64>,
    gain: Vec<f64>,
    valid: Vec<bool>,
}

impl TransitionCache {
    /// Cache for a sweep of `base_epoch`. The window covers epochs
    /// `base+1 ..= min(base+width, T-1)`; `gammas[t]` is the per-epoch
    /// concentration used in the born-topic factor.
    pub fn build(state: &SeatingState, base_epoch: usize, gammas: &[f64]) -> Self {
        let top = (base_epoch + state.kernel().width).min(state.num_epochs().saturating_sub(1));
        let window = (base_epoch + 1..=top)
            .map(|s| WindowEpoch {
                epoch: s,
                gamma: gammas[s],
                loss: Vec::new(),
                gain: Vec::new(),
                valid: Vec::new(),
            })
            .collect();
        TransitionCache { base_epoch, window }
    }

    pub fn base_epoch(&self) -> usize {
        self.base_epoch
    }

    pub fn window_epochs(&self) -> impl Iterator<Item = usize> + '_ {
        self.window.iter().map(|w| w.epoch)
    }

    /// Invalidate the rows of topic `k` at every window epoch.
    pub fn invalidate(&mut self, k: TopicId) {
        for w in &mut self.window {
            if k < w.valid.len() {
                w.valid[k] = false;
            }
        }
    }

    /// Make sure loss/gain entries for topic `k` are current. Must be called
    /// while the configuration still holds the table under its old topic.
    pub fn ensure(&mut self, state: &SeatingState, k: TopicId) {
        let base = self.base_epoch;
        for w in &mut self.window {
            if k >= w.valid.len() {
                w.valid.resize(k + 1, false);
                w.loss.resize(k + 1, 0.0);
                w.gain.resize(k + 1, 0.0);
            }
            if w.valid[k] {
                continue;
            }
            let m = state.m(k, w.epoch);
            if m == 0 {
                w.loss[k] = 0.0;
                w.gain[k] = 0.0;
            } else {
                let mp = state.m_prime(k, w.epoch);
                // A used topic whose prior weight vanishes is only consistent
                // when no earlier usage remains (its founding epoch shifts
                // here); otherwise the configuration has probability zero.
                let used_before = |adj: i64| -> bool {
                    (0..w.epoch).any(|e| {
                        let c = state.m(k, e) as i64 + if e == base { adj } else { 0 };
                        c > 0
                    })
                };
                let term = |mp_val: f64, adj: i64| -> f64 {
                    if mp_val == 0.0 && used_before(adj) {
                        f64::NEG_INFINITY
                    } else {
                        partition_topic_term_ln(m, mp_val, w.gamma)
                    }
                };
                let cur = term(mp, 0);
                if cur == f64::NEG_INFINITY {
                    // Transient mid-update inconsistency (a removal emptied
                    // this topic's window while it stays used here): putting
                    // a base-epoch table back is mandatory.
                    w.loss[k] = 0.0;
                    w.gain[k] = f64::INFINITY;
                } else {
                    w.loss[k] = term(state.m_prime_adjusted(k, w.epoch, base, -1), -1) - cur;
                    w.gain[k] = term(state.m_prime_adjusted(k, w.epoch, base, 1), 1) - cur;
                }
            }
            w.valid[k] = true;
        }
    }

    fn window_index(&self, s: usize) -> usize {
        s - self.base_epoch - 1
    }

    /// `log C^s(k_old -> k_new)`; exactly 0 for the identity move.
    pub fn log_ratio(&mut self, state: &SeatingState, s: usize, k_old: TopicId, k_new: TopicId) -> f64 {
        if k_old == k_new {
            return 0.0;
        }
        self.ensure(state, k_old);
        self.ensure(state, k_new);
        let idx = self.window_index(s);
        let w = &self.window[idx];
        w.loss[k_old] + w.gain[k_new]
    }

    /// `C^s(k_old -> k_new)` as a plain ratio.
    pub fn transition_ratio(&mut self, state: &SeatingState, s: usize, k_old: TopicId, k_new: TopicId) -> f64 {
        self.log_ratio(state, s, k_old, k_new).exp()
    }

    /// Sum of `log C^s(k_old -> k_new)` over the whole window.
    pub fn forward_log_factor(&mut self, state: &SeatingState, k_old: TopicId, k_new: TopicId) -> f64 {
        if k_old == k_new {
            return 0.0;
        }
        self.ensure(state, k_old);
        self.ensure(state, k_new);
        self.window.iter().map(|w| w.loss[k_old] + w.gain[k_new]).sum()
    }

    /// Windowed loss of removing one base-epoch table of `k_old` (the
    /// `k_new` side for a topic with no future usage, e.g. a fresh topic,
    /// contributes nothing).
    pub fn loss_log_factor(&mut self, state: &SeatingState, k_old: TopicId) -> f64 {
        self.ensure(state, k_old);
        self.window.iter().map(|w| w.loss[k_old]).sum()
    }

    /// Windowed gain of adding one base-epoch table of `k` (used for the
    /// new-table topic menu, where no compensating removal occurs; the
    /// common denominator shift cancels in the menu normalization).
    pub fn gain_log_factor(&mut self, state: &SeatingState, k: TopicId) -> f64 {
        self.ensure(state, k);
        self.window.iter().map(|w| w.gain[k]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Document, Vocabulary};
    use crate::rng::{substream, Stream};
    use rand::Rng;

    fn toy_corpus(t: usize, docs_per_epoch: usize, words_per_doc: usize, w: usize) -> Corpus {
        let mut docs = Vec::new();
        for epoch in 0..t {
            for d in 0..docs_per_epoch {
                let words = (0..words_per_doc).map(|i| ((epoch + d + i) % w) as u32).collect();
                docs.push(Document { epoch, words });
            }
        }
        Corpus::new(Vocabulary::anonymous(w), docs).unwrap().0
    }

    /// Random full seating: every word gets a table, every table a topic.
    fn random_seating(state: &mut SeatingState, n_topics: usize, rng: &mut impl Rng) -> Vec<TopicId> {
        let topics: Vec<TopicId> = (0..n_topics).map(|i| state.new_topic(i % state.num_epochs())).collect();
        for d in 0..state.docs.len() {
            let t = state.docs[d].epoch;
            for i in 0..state.docs[d].words.len() {
                let n_tables = state.docs[d].num_tables();
                if n_tables > 0 && rng.random_bool(0.6) {
                    let slots: Vec<u32> = state.docs[d].table_slots().collect();
                    let slot = slots[rng.random_range(0..slots.len())];
                    state.seat_word_existing(d, i, slot);
                } else {
                    // Keep the history consistent: an already-used topic may
                    // only spread to `t` while its decay window covers it.
                    let allowed: Vec<TopicId> = topics
                        .iter()
                        .copied()
                        .filter(|&k| {
                            state.m(k, t) > 0
                                || state.m_prime(k, t) > 0.0
                                || state.used_epoch_range(k).is_none()
                        })
                        .collect();
                    let k = allowed[rng.random_range(0..allowed.len())];
                    state.seat_word_new_table(d, i, k);
                }
            }
        }
        topics
    }

    /// True when no topic is used at an epoch where its prior weight is zero
    /// despite earlier usage.
    fn history_consistent(state: &SeatingState) -> bool {
        (0..state.num_epochs()).all(|t| state.partition_log_likelihood(t, 1.0).is_ok())
    }

    #[test]
    fn ascending_factorial_examples() {
        // [2]^3 = 2*3*4 = 24, [a]^0 = 1.
        assert!((ascending_factorial_ln(2.0, 3).exp() - 24.0).abs() < 1e-9);
        assert_eq!(ascending_factorial_ln(7.3, 0), 0.0);
    }

    #[test]
    fn empty_epoch_partition_is_log_one() {
        assert_eq!(partition_log_likelihood_from_counts(&[], 0.0, 1.0), 0.0);
        assert_eq!(partition_log_likelihood_from_counts(&[], 2.5, 1.0), 0.0);
    }

    /// Sequential seating oracle: probability of a labeled table->topic
    /// assignment under the one-table-at-a-time franchise process.
    fn sequential_seating_log_prob(assignment: &[TopicId], m_prime: &[f64], gamma: f64) -> f64 {
        let n_topics = m_prime.len();
        let total_m_prime: f64 = m_prime.iter().sum();
        let mut used = vec![0u32; n_topics];
        let mut acc = 0.0;
        for (j, &k) in assignment.iter().enumerate() {
            let weight = if m_prime[k] > 0.0 || used[k] > 0 {
                m_prime[k] + used[k] as f64
            } else {
                gamma
            };
            acc += weight.ln() - (total_m_prime + gamma + j as f64).ln();
            used[k] += 1;
        }
        acc
    }

    #[test]
    fn partition_matches_sequential_oracle_on_small_states() {
        // All assignments of up to 4 tables to up to 3 topics, with a mix of
        // zero and positive prior weights. Exchangeability: every ordering of
        // the same multiset gives the same sequential product.
        let gamma = 1.3;
        let weight_sets: &[&[f64]] = &[&[0.0, 0.0, 0.0], &[0.7, 0.0, 2.2], &[1.1, 0.4, 0.0]];
        for &m_prime in weight_sets {
            for n_tables in 0..=4usize {
                let mut assignment = vec![0usize; n_tables];
                loop {
                    // Evaluate this assignment.
                    let mut m = vec![0u32; 3];
                    for &k in &assignment {
                        m[k] += 1;
                    }
                    let used: Vec<(u32, f64)> = (0..3).filter(|&k| m[k] > 0).map(|k| (m[k], m_prime[k])).collect();
                    let unused: f64 = (0..3).filter(|&k| m[k] == 0).map(|k| m_prime[k]).sum();
                    let ours = partition_log_likelihood_from_counts(&used, unused, gamma);
                    let oracle = sequential_seating_log_prob(&assignment, m_prime, gamma);
                    assert!(
                        (ours.exp() - oracle.exp()).abs() <= 1e-12,
                        "assignment {assignment:?} m' {m_prime:?}: {} vs {}",
                        ours.exp(),
                        oracle.exp()
                    );
                    // Exchangeability: a swapped ordering gives the same product.
                    if n_tables >= 2 {
                        let mut swapped = assignment.clone();
                        swapped.swap(0, n_tables - 1);
                        let alt = sequential_seating_log_prob(&swapped, m_prime, gamma);
                        assert!((alt - oracle).abs() < 1e-12);
                    }
                    // Next assignment in base-3 counting order.
                    let mut pos = 0;
                    loop {
                        if pos == n_tables {
                            break;
                        }
                        assignment[pos] += 1;
                        if assignment[pos] < 3 {
                            break;
                        }
                        assignment[pos] = 0;
                        pos += 1;
                    }
                    if pos == n_tables {
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn born_topic_partition_single_epoch() {
        // One epoch, gamma = 1, one born topic with 2 tables:
        // sequential product = [gamma/(gamma+0)] * [1/(gamma+1)] = 1/2.
        let got = partition_log_likelihood_from_counts(&[(2, 0.0)], 0.0, 1.0).exp();
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn move_and_move_back_restores_counts() {
        let corpus = toy_corpus(3, 2, 5, 4);
        let kernel = DecayKernel::new(2, 1.0).unwrap();
        let mut state = SeatingState::from_corpus(&corpus, kernel);
        let mut rng = substream(1, Stream::Seating);
        random_seating(&mut state, 3, &mut rng);
        state.check_invariants().unwrap();

        let doc = 0;
        let slot = state.docs[doc].table_slots().next().unwrap();
        let k_old = state.docs[doc].table(slot).topic;
        let k_new = (0..3).find(|&k| k != k_old && state.is_live(k)).unwrap();
        let before: Vec<u32> = (0..3).map(|t| state.m(k_old, t)).collect();
        state.set_table_topic(doc, slot, k_new);
        state.check_invariants().unwrap();
        state.set_table_topic(doc, slot, k_old);
        state.check_invariants().unwrap();
        let after: Vec<u32> = (0..3).map(|t| state.m(k_old, t)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn moving_last_table_kills_topic() {
        let corpus = toy_corpus(1, 1, 3, 4);
        let kernel = DecayKernel::new(0, 1.0).unwrap();
        let mut state = SeatingState::from_corpus(&corpus, kernel);
        let a = state.new_topic(0);
        let b = state.new_topic(0);
        state.seat_word_new_table(0, 0, a);
        state.seat_word_new_table(0, 1, b);
        state.seat_word_existing(0, 2, 0);
        let outcome = state.set_table_topic(0, 1, a);
        assert_eq!(outcome.topic_died, Some(b));
        assert!(!state.is_live(b));
        assert_eq!(state.live_topics(), &[a]);
        state.check_invariants().unwrap();
    }

    #[test]
    fn random_moves_preserve_invariants() {
        let corpus = toy_corpus(4, 3, 6, 5);
        let kernel = DecayKernel::new(2, 0.8).unwrap();
        let mut state = SeatingState::from_corpus(&corpus, kernel);
        let mut rng = substream(2, Stream::Seating);
        random_seating(&mut state, 4, &mut rng);
        for _ in 0..300 {
            let d = rng.random_range(0..state.docs.len());
            if rng.random_bool(0.5) {
                let slots: Vec<u32> = state.docs[d].table_slots().collect();
                if slots.is_empty() {
                    continue;
                }
                let slot = slots[rng.random_range(0..slots.len())];
                let live = state.live_topics().to_vec();
                let k_new = live[rng.random_range(0..live.len())];
                state.set_table_topic(d, slot, k_new);
            } else {
                let i = rng.random_range(0..state.docs[d].words.len());
                if state.docs[d].assign[i] == UNSEATED {
                    continue;
                }
                state.unseat_word(d, i);
                let slots: Vec<u32> = state.docs[d].table_slots().collect();
                if !slots.is_empty() && rng.random_bool(0.7) {
                    let slot = slots[rng.random_range(0..slots.len())];
                    state.seat_word_existing(d, i, slot);
                } else {
                    let live = state.live_topics().to_vec();
                    let k = live[rng.random_range(0..live.len())];
                    state.seat_word_new_table(d, i, k);
                }
            }
            state.check_invariants().unwrap();
        }
    }

    /// Oracle ratio: two full partition evaluations with the base-epoch move
    /// applied by hand.
    fn full_recompute_log_ratio(
        state: &SeatingState,
        s: usize,
        base: usize,
        k_old: TopicId,
        k_new: TopicId,
        gamma: f64,
    ) -> f64 {
        if k_old == k_new {
            return 0.0;
        }
        let eval = |adj: bool| {
            let mut used = Vec::new();
            let mut unused = 0.0;
            for &k in state.live_topics() {
                let m = state.m(k, s);
                let mp = if adj && k == k_old {
                    state.m_prime_adjusted(k, s, base, -1)
                } else if adj && k == k_new {
                    state.m_prime_adjusted(k, s, base, 1)
                } else {
                    state.m_prime(k, s)
                };
                if m > 0 {
                    if mp == 0.0 {
                        // Zero probability when earlier usage survives the
                        // adjusted move.
                        let earlier = (0..s).any(|e| {
                            let delta: i64 = if adj && e == base {
                                if k == k_old {
                                    -1
                                } else if k == k_new {
                                    1
                                } else {
                                    0
                                }
                            } else {
                                0
                            };
                            state.m(k, e) as i64 + delta > 0
                        });
                        if earlier {
                            return f64::NEG_INFINITY;
                        }
                    }
                    used.push((m, mp));
                } else {
                    unused += mp;
                }
            }
            partition_log_likelihood_from_counts(&used, unused, gamma)
        };
        eval(true) - eval(false)
    }

    #[test]
    fn transition_ratio_identity_is_one() {
        let corpus = toy_corpus(3, 2, 5, 4);
        let kernel = DecayKernel::new(2, 1.0).unwrap();
        let mut state = SeatingState::from_corpus(&corpus, kernel);
        let mut rng = substream(3, Stream::Seating);
        random_seating(&mut state, 3, &mut rng);
        let gammas = vec![1.0; 3];
        let mut cache = TransitionCache::build(&state, 0, &gammas);
        assert_eq!(cache.transition_ratio(&state, 1, 0, 0), 1.0);
    }

    #[test]
    fn transition_ratio_matches_full_recompute() {
        let corpus = toy_corpus(5, 3, 6, 4);
        let kernel = DecayKernel::new(3, 0.9).unwrap();
        let mut rng = substream(4, Stream::Seating);
        for trial in 0..50 {
            let mut state = SeatingState::from_corpus(&corpus, kernel);
            random_seating(&mut state, 3, &mut rng);
            let gammas = vec![0.7; 5];
            let base = rng.random_range(0..4);
            let mut cache = TransitionCache::build(&state, base, &gammas);
            let live = state.live_topics().to_vec();
            // A move needs a table of k_old at the base epoch.
            let movable: Vec<TopicId> = live.iter().copied().filter(|&k| state.m(k, base) > 0).collect();
            if movable.is_empty() {
                continue;
            }
            let k_old = movable[rng.random_range(0..movable.len())];
            let k_new = live[rng.random_range(0..live.len())];
            for s in (base + 1)..=(base + 3).min(4) {
                let got = cache.log_ratio(&state, s, k_old, k_new);
                let want = full_recompute_log_ratio(&state, s, base, k_old, k_new, 0.7);
                if want.is_infinite() {
                    assert_eq!(got, want, "trial {trial} s={s}");
                } else {
                    let tol = 1e-10 * want.abs().max(1.0);
                    assert!((got - want).abs() <= tol, "trial {trial} s={s}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn transition_ratio_reflects_birth_status_flip() {
        // Three topics; k_new unused in the window at s so that gaining base
        // usage flips its born status there.
        let corpus = toy_corpus(3, 2, 4, 4);
        let kernel = DecayKernel::new(2, 1.0).unwrap();
        let mut state = SeatingState::from_corpus(&corpus, kernel);
        let a = state.new_topic(0);
        let b = state.new_topic(0);
        let c = state.new_topic(2);
        // Epoch 0: topics a, b used. Epoch 1: a used. Epoch 2: c used (born
        // there: no prior-window usage).
        let d0 = state.docs_at(0)[0];
        let d1 = state.docs_at(1)[0];
        let d2 = state.docs_at(2)[0];
        for i in 0..state.docs[d0].words.len() {
            state.seat_word_new_table(d0, i, if i % 2 == 0 { a } else { b });
        }
        for i in 0..state.docs[d1].words.len() {
            state.seat_word_new_table(d1, i, a);
        }
        for i in 0..state.docs[d2].words.len() {
            state.seat_word_new_table(d2, i, c);
        }
        state.check_invariants().unwrap();
        assert_eq!(state.m_prime(c, 2), 0.0);
        let gammas = vec![0.9; 3];
        // Sweeping epoch 0: moving a table from a to c changes c's prior
        // weight at s=2 from 0 to positive, flipping its born factor.
        let mut cache = TransitionCache::build(&state, 0, &gammas);
        let got = cache.log_ratio(&state, 2, a, c);
        let want = full_recompute_log_ratio(&state, 2, 0, a, c, 0.9);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!(got != 0.0);
    }

    #[test]
    fn cache_rows_stay_coherent_across_moves() {
        let corpus = toy_corpus(4, 3, 5, 4);
        let kernel = DecayKernel::new(3, 1.2).unwrap();
        let mut state = SeatingState::from_corpus(&corpus, kernel);
        let mut rng = substream(5, Stream::Seating);
        random_seating(&mut state, 3, &mut rng);
        let gammas = vec![1.1; 4];
        let mut cache = TransitionCache::build(&state, 0, &gammas);
        for _ in 0..60 {
            let d = *state
                .docs_at(0)
                .iter()
                .nth(rng.random_range(0..state.docs_at(0).len()))
                .unwrap();
            let slots: Vec<u32> = state.docs[d].table_slots().collect();
            let slot = slots[rng.random_range(0..slots.len())];
            let live = state.live_topics().to_vec();
            let k_new = live[rng.random_range(0..live.len())];
            let outcome = state.set_table_topic(d, slot, k_new);
            cache.invalidate(outcome.old_topic);
            cache.invalidate(outcome.new_topic);
            // Revert moves that strand downstream usage; the cache oracle
            // comparison is only meaningful on consistent states.
            if outcome.topic_died.is_none() && !history_consistent(&state) {
                let back = state.set_table_topic(d, slot, outcome.old_topic);
                cache.invalidate(back.old_topic);
                cache.invalidate(back.new_topic);
                continue;
            }
            // Every pair must match the full recompute after the move.
            let live = state.live_topics().to_vec();
            let movable: Vec<TopicId> = live.iter().copied().filter(|&k| state.m(k, 0) > 0).collect();
            if movable.is_empty() {
                continue;
            }
            let k_a = movable[rng.random_range(0..movable.len())];
            let k_b = live[rng.random_range(0..live.len())];
            for s in cache.window_epochs().collect::<Vec<_>>() {
                let got = cache.log_ratio(&state, s, k_a, k_b);
                let want = if k_a == k_b {
                    0.0
                } else {
                    full_recompute_log_ratio(&state, s, 0, k_a, k_b, 1.1)
                };
                if want.is_infinite() {
                    assert_eq!(got, want, "s={s}");
                } else {
                    assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "s={s}: {got} vs {want}");
                }
            }
        }
        state.check_invariants().unwrap();
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_counts() {
        let corpus = toy_corpus(3, 2, 5, 4);
        let kernel = DecayKernel::new(2, 1.0).unwrap();
        let mut state = SeatingState::from_corpus(&corpus, kernel);
        let mut rng = substream(6, Stream::Seating);
        random_seating(&mut state, 3, &mut rng);
        let ckpt = state.to_checkpoint();
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: StateCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = SeatingState::from_checkpoint(&corpus, kernel, &back).unwrap();
        restored.check_invariants().unwrap();
        for &k in state.live_topics() {
            for t in 0..3 {
                assert_eq!(state.m(k, t), restored.m(k, t));
                assert_eq!(state.topic_word_counts(k, t), restored.topic_word_counts(k, t));
            }
        }
    }
}
