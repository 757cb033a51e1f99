//! Collapsed Gibbs orchestration: table-topic and word-table conditionals,
//! auxiliary-parameter handling for the non-conjugate base measure,
//! concentration resampling, and the overall run schedule.

use libm::lgamma;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::kernel::DecayKernel;
use crate::rng::{chain_stream, substream, Stream};
use crate::state::{SeatingState, StateCheckpoint, TopicId, TransitionCache, UNSEATED};
use crate::topicdyn::{
    chain_log_joint, emission_loglik_logp, instantiate_inherited, log_softmax, mh_update_chain,
    DynamicsParams, TopicChain,
};

/// Run configuration, loadable from JSON. Missing keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub sample_every: usize,
    pub n_samples: usize,
    pub alpha_init: f64,
    pub gamma_init: f64,
    pub sigma: f64,
    pub rho: f64,
    pub delta: usize,
    pub lambda: f64,
    pub q_base: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 2000,
            sample_every: 200,
            n_samples: 10,
            alpha_init: 4.0,
            gamma_init: 10.0,
            sigma: 10.0,
            rho: 0.01,
            delta: 4,
            lambda: 0.5,
            q_base: 5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.sample_every < 1 || self.n_samples < 1 {
            return Err(Error::Config("sample schedule must be >= 1".into()));
        }
        if !(self.alpha_init > 0.0) {
            return Err(Error::Config("alpha_init must be positive".into()));
        }
        if !(self.gamma_init >= 0.0) {
            return Err(Error::Config("gamma_init must be non-negative".into()));
        }
        if !(self.sigma > 0.0) || !(self.rho > 0.0) || !(self.lambda > 0.0) {
            return Err(Error::Config("sigma, rho and lambda must be positive".into()));
        }
        if self.q_base < 1 {
            return Err(Error::Config("q_base must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch concentrations plus the fixed structural hyperparameters.
#[derive(Debug, Clone)]
pub struct Hyperparams {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub dynamics: DynamicsParams,
    pub kernel: DecayKernel,
    pub q_base: usize,
}

/// A serializable snapshot of the sampler state at one iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub state: StateCheckpoint,
    pub chains: Vec<TopicChain>,
}

impl PosteriorSample {
    /// Rebuild derived caches after deserialization.
    pub fn restore_caches(&mut self) {
        for chain in &mut self.chains {
            chain.rebuild_cache();
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub samples: Vec<PosteriorSample>,
    /// Index of the highest-joint-likelihood sample.
    pub map_index: usize,
    pub loglik_trace: Vec<f64>,
    pub chain_accept_rate: f64,
}

impl FitResult {
    pub fn map_sample(&self) -> &PosteriorSample {
        &self.samples[self.map_index]
    }
}

/// `log sum_i exp(x_i)`, tolerant of `-inf` entries.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Draw an index proportional to `exp(logw_i)`.
pub fn sample_from_log_weights(logw: &[f64], rng: &mut impl Rng) -> usize {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(max > f64::NEG_INFINITY, "all candidate weights are zero");
    let weights: Vec<f64> = logw.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// A sampled parameter with its cached log word distribution.
#[derive(Debug, Clone)]
struct CachedPhi {
    phi: Vec<f64>,
    logp: Vec<f64>,
}

fn draw_phi(mean: &[f64], var: f64, rng: &mut impl Rng) -> CachedPhi {
    let sd = var.sqrt();
    let phi: Vec<f64> = mean
        .iter()
        .map(|&m| m + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let logp = log_softmax(&phi);
    CachedPhi { phi, logp }
}

/// Auxiliary parameter draws, reset per document. Inherited draws stand in
/// for alive-but-unused topics whose chain stops before the current epoch;
/// fresh draws are the base-measure candidates.
struct AuxDraws {
    inherited: Vec<Option<CachedPhi>>,
    fresh: Vec<Option<CachedPhi>>,
}

impl AuxDraws {
    fn new(q_base: usize) -> Self {
        AuxDraws { inherited: Vec::new(), fresh: (0..q_base).map(|_| None).collect() }
    }

    fn reset(&mut self) {
        for e in &mut self.inherited {
            *e = None;
        }
        for e in &mut self.fresh {
            *e = None;
        }
    }

    fn inherited(&mut self, k: TopicId, chain: &TopicChain, t: usize, rho: f64, rng: &mut impl Rng) -> &CachedPhi {
        if self.inherited.len() <= k {
            self.inherited.resize_with(k + 1, || None);
        }
        if self.inherited[k].is_none() {
            // One jump across the unused gap: variance scales with its length.
            let gap = t - chain.end();
            self.inherited[k] = Some(draw_phi(chain.phi(chain.end()), gap as f64 * rho, rng));
        }
        self.inherited[k].as_ref().unwrap()
    }

    fn fresh(&mut self, j: usize, w: usize, sigma: f64, rng: &mut impl Rng) -> &CachedPhi {
        if self.fresh[j].is_none() {
            self.fresh[j] = Some(draw_phi(&vec![0.0; w], sigma, rng));
        }
        self.fresh[j].as_ref().unwrap()
    }

    fn take_inherited(&mut self, k: TopicId) -> Option<CachedPhi> {
        self.inherited.get_mut(k).and_then(|e| e.take())
    }

    fn take_fresh(&mut self, j: usize) -> CachedPhi {
        self.fresh[j].take().expect("fresh draw was scored before adoption")
    }

    fn invalidate_inherited(&mut self, k: TopicId) {
        if let Some(e) = self.inherited.get_mut(k) {
            *e = None;
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum TableCand {
    /// Topic with menu mass at this epoch.
    Existing(TopicId),
    /// The table's own topic when it has no menu mass left (born here);
    /// kept as the first auxiliary candidate.
    Keep,
    /// Fresh base-measure draw (auxiliary index).
    Fresh(usize),
}

#[derive(Debug, Clone, Copy)]
enum NewTopicCand {
    Existing(TopicId),
    /// Parameter retained from a topic that died when the word's table
    /// emptied.
    Retained,
    Fresh(usize),
}

pub struct GibbsSampler {
    config: SamplerConfig,
    state: SeatingState,
    chains: Vec<Option<TopicChain>>,
    hyper: Hyperparams,
    seed: u64,
    sweep: u64,
    rng_seat: ChaCha8Rng,
    rng_conc: ChaCha8Rng,
    chain_proposals: u64,
    chain_accepts: u64,
    workers: usize,
}

impl GibbsSampler {
    pub fn new(corpus: &Corpus, config: &SamplerConfig) -> Result<Self> {
        config.validate()?;
        let kernel = DecayKernel::new(config.delta, config.lambda)?;
        let dynamics = DynamicsParams::new(config.sigma, config.rho)?;
        let t = corpus.num_epochs();
        Ok(GibbsSampler {
            config: config.clone(),
            state: SeatingState::from_corpus(corpus, kernel),
            chains: Vec::new(),
            hyper: Hyperparams {
                alpha: vec![config.alpha_init; t],
                gamma: vec![config.gamma_init; t],
                dynamics,
                kernel,
                q_base: config.q_base,
            },
            seed: config.seed,
            sweep: 0,
            rng_seat: substream(config.seed, Stream::Seating),
            rng_conc: substream(config.seed, Stream::Concentrations),
            chain_proposals: 0,
            chain_accepts: 0,
            workers: 1,
        })
    }

    /// Worker count for chain updates; seating stays sequential.
    pub fn set_workers(&mut self, workers: usize) {
        self.workers = workers.max(1);
    }

    pub fn state(&self) -> &SeatingState {
        &self.state
    }

    /// Mutable state access for evaluation and test plumbing.
    pub fn state_mut(&mut self) -> &mut SeatingState {
        &mut self.state
    }

    pub fn chains(&self) -> &[Option<TopicChain>] {
        &self.chains
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn hyper_mut(&mut self) -> &mut Hyperparams {
        &mut self.hyper
    }

    /// Reset the seating/concentration RNG substreams from a new seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.rng_seat = substream(seed, Stream::Seating);
        self.rng_conc = substream(seed, Stream::Concentrations);
    }

    pub fn chain_accept_rate(&self) -> f64 {
        if self.chain_proposals == 0 {
            0.0
        } else {
            self.chain_accepts as f64 / self.chain_proposals as f64
        }
    }

    /// Register a topic with a fixed parameter chain (test/eval plumbing).
    pub fn install_topic(&mut self, birth: usize, params: Vec<Vec<f64>>) -> TopicId {
        let k = self.state.new_topic(birth);
        if self.chains.len() <= k {
            self.chains.resize_with(k + 1, || None);
        }
        let mut iter = params.into_iter();
        let mut chain = TopicChain::new(k, birth, iter.next().expect("non-empty chain"));
        for phi in iter {
            chain.push_epoch(phi);
        }
        self.chains[k] = Some(chain);
        k
    }

    /// Resample the topic of one table (wrapper building a one-off cache).
    pub fn resample_table(&mut self, doc: usize, slot: u32) -> Result<()> {
        let t = self.state.docs[doc].epoch;
        let mut cache = TransitionCache::build(&self.state, t, &self.hyper.gamma);
        let mut aux = AuxDraws::new(self.hyper.q_base);
        self.sample_table_topic(&mut cache, &mut aux, doc, slot)
    }

    /// Resample the table of one word (wrapper building a one-off cache).
    pub fn resample_word(&mut self, doc: usize, i: usize) -> Result<()> {
        let t = self.state.docs[doc].epoch;
        let mut cache = TransitionCache::build(&self.state, t, &self.hyper.gamma);
        let mut aux = AuxDraws::new(self.hyper.q_base);
        self.sample_word_table(&mut cache, &mut aux, doc, i)
    }

    /// Drop a chain when its topic died, or trim it when its last used
    /// epoch retreated.
    fn sync_chain_after_loss(&mut self, k: TopicId, died: bool) {
        if died {
            self.chains[k] = None;
            return;
        }
        if let Some(chain) = self.chains[k].as_mut() {
            if let Some((_, last)) = self.state.used_epoch_range(k) {
                if chain.end() > last {
                    chain.trim_end(last);
                }
            }
        }
    }

    /// Extend a chain up to epoch `t`, filling any unused gap with
    /// transition draws and installing `phi_t` at `t`.
    fn extend_chain_to(&mut self, k: TopicId, t: usize, phi_t: Vec<f64>) {
        let rho = self.hyper.dynamics.rho;
        let chain = self.chains[k].as_mut().expect("live chain");
        let mut prev = chain.phi(chain.end()).to_vec();
        for _ in chain.end() + 1..t {
            prev = instantiate_inherited(&prev, rho, &mut self.rng_seat);
            chain.push_epoch(prev.clone());
        }
        chain.push_epoch(phi_t);
    }

    /// One table-topic update: score every menu candidate with its emission
    /// likelihood and forward-conditioning factor, then apply the move.
    fn sample_table_topic(
        &mut self,
        cache: &mut TransitionCache,
        aux: &mut AuxDraws,
        doc: usize,
        slot: u32,
    ) -> Result<()> {
        let t = self.state.docs[doc].epoch;
        let (k_old, counts) = {
            let table = self.state.docs[doc].table(slot);
            (table.topic, table.counts.clone())
        };
        let gamma_t = self.hyper.gamma[t];
        let q_base = self.hyper.q_base;
        let rho = self.hyper.dynamics.rho;
        let sigma = self.hyper.dynamics.sigma;
        let w_size = self.state.vocab_size();

        let mut cands: Vec<TableCand> = Vec::new();
        let mut scores: Vec<f64> = Vec::new();
        let mut keep_born = false;

        let live = self.state.live_topics().to_vec();
        for &k in &live {
            let m_minus = self.state.m(k, t) - u32::from(k == k_old);
            let mp = self.state.m_prime(k, t);
            let prior = m_minus as f64 + mp;
            if prior > 0.0 {
                let fwd = cache.forward_log_factor(&self.state, k_old, k);
                let chain = self.chains[k].as_ref().expect("live topic has a chain");
                let emit = if chain.covers(t) {
                    emission_loglik_logp(&counts, chain.log_probs(t))
                } else {
                    let drawn = aux.inherited(k, chain, t, rho, &mut self.rng_seat);
                    emission_loglik_logp(&counts, &drawn.logp)
                };
                cands.push(TableCand::Existing(k));
                scores.push(prior.ln() + emit + fwd);
            } else if k == k_old {
                // Born here with this table as its only mass at `t`: retain
                // its parameter as the first auxiliary candidate.
                keep_born = true;
                if gamma_t > 0.0 {
                    let chain = self.chains[k].as_ref().expect("live topic has a chain");
                    let emit = emission_loglik_logp(&counts, chain.log_probs(t));
                    cands.push(TableCand::Keep);
                    scores.push((gamma_t / q_base as f64).ln() + emit);
                }
            }
        }
        if gamma_t > 0.0 {
            let n_fresh = q_base - usize::from(keep_born);
            let fwd = cache.loss_log_factor(&self.state, k_old);
            let lw = (gamma_t / q_base as f64).ln();
            for j in 0..n_fresh {
                let drawn = aux.fresh(j, w_size, sigma, &mut self.rng_seat);
                cands.push(TableCand::Fresh(j));
                scores.push(lw + emission_loglik_logp(&counts, &drawn.logp) + fwd);
            }
        }
        if cands.is_empty() {
            // Only possible for a born topic with gamma = 0: keep it.
            return Ok(());
        }

        let choice = cands[sample_from_log_weights(&scores, &mut self.rng_seat)];
        match choice {
            TableCand::Keep => {}
            TableCand::Existing(k) => {
                if k != k_old {
                    let needs_extend = !self.chains[k].as_ref().expect("chain").covers(t);
                    if needs_extend {
                        let drawn = aux.take_inherited(k).expect("scored via inherited draw");
                        self.extend_chain_to(k, t, drawn.phi);
                    }
                    let out = self.state.set_table_topic(doc, slot, k);
                    cache.invalidate(k_old);
                    cache.invalidate(k);
                    aux.invalidate_inherited(k);
                    self.sync_chain_after_loss(k_old, out.topic_died.is_some());
                }
            }
            TableCand::Fresh(j) => {
                let drawn = aux.take_fresh(j);
                let k_new = self.state.new_topic(t);
                if self.chains.len() <= k_new {
                    self.chains.resize_with(k_new + 1, || None);
                }
                self.chains[k_new] = Some(TopicChain::new(k_new, t, drawn.phi));
                let out = self.state.set_table_topic(doc, slot, k_new);
                cache.invalidate(k_old);
                self.sync_chain_after_loss(k_old, out.topic_died.is_some());
            }
        }
        Ok(())
    }

    /// One word-table update: existing tables vs a new table whose topic is
    /// drawn from the epoch menu.
    fn sample_word_table(
        &mut self,
        cache: &mut TransitionCache,
        aux: &mut AuxDraws,
        doc: usize,
        i: usize,
    ) -> Result<()> {
        let t = self.state.docs[doc].epoch;
        let word = self.state.docs[doc].words[i] as usize;
        let gamma_t = self.hyper.gamma[t];
        let alpha_t = self.hyper.alpha[t];
        let q_base = self.hyper.q_base;
        let rho = self.hyper.dynamics.rho;
        let sigma = self.hyper.dynamics.sigma;
        let w_size = self.state.vocab_size();

        // Remove the word; a dying topic's parameter is retained as an
        // auxiliary candidate for this update.
        let mut retained: Option<CachedPhi> = None;
        if self.state.docs[doc].assign[i] != UNSEATED {
            let out = self.state.unseat_word(doc, i);
            if out.removed_table_of.is_some() {
                cache.invalidate(out.topic);
                if let Some(k_dead) = out.topic_died {
                    let chain = self.chains[k_dead].take().expect("dying topic had a chain");
                    if gamma_t > 0.0 {
                        retained = Some(CachedPhi {
                            phi: chain.phi(t).to_vec(),
                            logp: chain.log_probs(t).to_vec(),
                        });
                    }
                } else {
                    // If the removed table was the last window support of a
                    // topic still used at a later epoch, every option except
                    // restoring one of its tables here has zero probability.
                    if cache.gain_log_factor(&self.state, out.topic) == f64::INFINITY {
                        self.state.seat_word_new_table(doc, i, out.topic);
                        cache.invalidate(out.topic);
                        return Ok(());
                    }
                    self.sync_chain_after_loss(out.topic, false);
                    aux.invalidate_inherited(out.topic);
                }
            }
        }

        // Existing tables.
        let slots: Vec<u32> = self.state.docs[doc].table_slots().collect();
        let mut scores: Vec<f64> = Vec::with_capacity(slots.len() + 1);
        for &slot in &slots {
            let table = self.state.docs[doc].table(slot);
            let chain = self.chains[table.topic].as_ref().expect("live topic has a chain");
            scores.push((table.occupancy as f64).ln() + chain.log_probs(t)[word]);
        }

        // New-table branch: total mass alpha, word likelihood averaged over
        // the topic menu.
        let mut menu: Vec<NewTopicCand> = Vec::new();
        let mut menu_log_u: Vec<f64> = Vec::new();
        let mut menu_log_f: Vec<f64> = Vec::new();
        if alpha_t > 0.0 {
            let live = self.state.live_topics().to_vec();
            for &k in &live {
                let prior = self.state.m(k, t) as f64 + self.state.m_prime(k, t);
                if prior > 0.0 {
                    let fwd = cache.gain_log_factor(&self.state, k);
                    let chain = self.chains[k].as_ref().expect("live topic has a chain");
                    let logp_w = if chain.covers(t) {
                        chain.log_probs(t)[word]
                    } else {
                        aux.inherited(k, chain, t, rho, &mut self.rng_seat).logp[word]
                    };
                    menu.push(NewTopicCand::Existing(k));
                    menu_log_u.push(prior.ln() + fwd);
                    menu_log_f.push(logp_w);
                }
            }
            if gamma_t > 0.0 {
                let lw = (gamma_t / q_base as f64).ln();
                let n_fresh = q_base - usize::from(retained.is_some());
                if let Some(r) = &retained {
                    menu.push(NewTopicCand::Retained);
                    menu_log_u.push(lw);
                    menu_log_f.push(r.logp[word]);
                }
                for j in 0..n_fresh {
                    let drawn = aux.fresh(j, w_size, sigma, &mut self.rng_seat);
                    menu.push(NewTopicCand::Fresh(j));
                    menu_log_u.push(lw);
                    menu_log_f.push(drawn.logp[word]);
                }
            }
            if !menu.is_empty() {
                let joint: Vec<f64> = menu_log_u.iter().zip(&menu_log_f).map(|(&u, &f)| u + f).collect();
                scores.push(alpha_t.ln() + log_sum_exp(&joint) - log_sum_exp(&menu_log_u));
            }
        }
        if scores.is_empty() {
            return Err(Error::State(format!(
                "word {i} of document {doc} has no seating option (alpha or menu empty)"
            )));
        }

        let choice = sample_from_log_weights(&scores, &mut self.rng_seat);
        if choice < slots.len() {
            self.state.seat_word_existing(doc, i, slots[choice]);
            return Ok(());
        }
        // New table: draw its topic from the menu.
        let joint: Vec<f64> = menu_log_u.iter().zip(&menu_log_f).map(|(&u, &f)| u + f).collect();
        let pick = menu[sample_from_log_weights(&joint, &mut self.rng_seat)];
        match pick {
            NewTopicCand::Existing(k) => {
                let needs_extend = !self.chains[k].as_ref().expect("chain").covers(t);
                if needs_extend {
                    let drawn = aux.take_inherited(k).expect("scored via inherited draw");
                    self.extend_chain_to(k, t, drawn.phi);
                }
                self.state.seat_word_new_table(doc, i, k);
                cache.invalidate(k);
                aux.invalidate_inherited(k);
            }
            NewTopicCand::Retained => {
                let r = retained.take().expect("retained candidate present");
                let k_new = self.state.new_topic(t);
                if self.chains.len() <= k_new {
                    self.chains.resize_with(k_new + 1, || None);
                }
                self.chains[k_new] = Some(TopicChain::new(k_new, t, r.phi));
                self.state.seat_word_new_table(doc, i, k_new);
            }
            NewTopicCand::Fresh(j) => {
                let drawn = aux.take_fresh(j);
                let k_new = self.state.new_topic(t);
                if self.chains.len() <= k_new {
                    self.chains.resize_with(k_new + 1, || None);
                }
                self.chains[k_new] = Some(TopicChain::new(k_new, t, drawn.phi));
                self.state.seat_word_new_table(doc, i, k_new);
            }
        }
        Ok(())
    }

    /// One seating pass over epoch `t`: table-topic updates (optional), then
    /// word-table updates, per document.
    pub fn seating_sweep_epoch(&mut self, t: usize, with_tables: bool) -> Result<()> {
        let mut cache = TransitionCache::build(&self.state, t, &self.hyper.gamma);
        let mut aux = AuxDraws::new(self.hyper.q_base);
        let docs = self.state.docs_at(t).to_vec();
        for d in docs {
            aux.reset();
            if with_tables {
                let slots: Vec<u32> = self.state.docs[d].table_slots().collect();
                for slot in slots {
                    self.sample_table_topic(&mut cache, &mut aux, d, slot)?;
                }
            }
            for i in 0..self.state.docs[d].words.len() {
                self.sample_word_table(&mut cache, &mut aux, d, i)?;
            }
        }
        Ok(())
    }

    fn chain_counts(&self, k: TopicId) -> Vec<Vec<u32>> {
        let chain = self.chains[k].as_ref().expect("live chain");
        (chain.birth..=chain.end())
            .map(|s| self.state.topic_word_counts(k, s).to_vec())
            .collect()
    }

    /// Block MH update of every live topic chain.
    pub fn chain_sweep(&mut self) -> Result<()> {
        self.sweep += 1;
        let live = self.state.live_topics().to_vec();
        if self.workers > 1 {
            let seed = self.seed;
            let sweep = self.sweep;
            let dynamics = self.hyper.dynamics;
            let updates: Vec<(TopicId, TopicChain, bool)> = live
                .par_iter()
                .map(|&k| {
                    let mut chain = self.chains[k].clone().expect("live chain");
                    let counts = self.chain_counts(k);
                    let mut rng = chain_stream(seed, sweep, k);
                    let accepted = mh_update_chain(&mut chain, &counts, &dynamics, &mut rng)?;
                    Ok((k, chain, accepted))
                })
                .collect::<Result<Vec<_>>>()?;
            for (k, chain, accepted) in updates {
                self.chains[k] = Some(chain);
                self.chain_proposals += 1;
                self.chain_accepts += u64::from(accepted);
            }
        } else {
            for k in live {
                let counts = self.chain_counts(k);
                let mut rng = chain_stream(self.seed, self.sweep, k);
                let chain = self.chains[k].as_mut().expect("live chain");
                let accepted = mh_update_chain(chain, &counts, &self.hyper.dynamics, &mut rng)?;
                self.chain_proposals += 1;
                self.chain_accepts += u64::from(accepted);
            }
        }
        Ok(())
    }

    /// Auxiliary-variable resampling of the per-epoch concentrations under a
    /// Gamma(1,1) prior.
    pub fn resample_concentrations(&mut self) {
        let t_total = self.state.num_epochs();
        for t in 0..t_total {
            // alpha_t: shared across this epoch's documents.
            let docs = self.state.docs_at(t).to_vec();
            let a = self.hyper.alpha[t];
            let mut shape = 1.0;
            let mut rate = 1.0;
            for &d in &docs {
                let n = self.state.docs[d].seated_words();
                if n == 0 {
                    continue;
                }
                let b_d = self.state.docs[d].num_tables() as f64;
                let w_d: f64 = Beta::new(a + 1.0, n as f64).unwrap().sample(&mut self.rng_conc);
                let s_d = self.rng_conc.random::<f64>() < n as f64 / (n as f64 + a);
                shape += b_d - f64::from(s_d);
                rate -= w_d.ln();
            }
            self.hyper.alpha[t] = Gamma::new(shape, 1.0 / rate).unwrap().sample(&mut self.rng_conc);

            // gamma_t: single epoch-level restaurant over tables and topics.
            let m_tot = self.state.total_tables_at(t);
            if m_tot == 0 {
                self.hyper.gamma[t] = Gamma::new(1.0, 1.0).unwrap().sample(&mut self.rng_conc);
                continue;
            }
            let k_t = self
                .state
                .live_topics()
                .iter()
                .filter(|&&k| self.state.m(k, t) > 0)
                .count() as f64;
            let g = self.hyper.gamma[t];
            let w: f64 = Beta::new(g + 1.0, m_tot as f64).unwrap().sample(&mut self.rng_conc);
            let s = self.rng_conc.random::<f64>() < m_tot as f64 / (m_tot as f64 + g);
            let shape = 1.0 + k_t - f64::from(s);
            let rate = 1.0 - w.ln();
            self.hyper.gamma[t] = Gamma::new(shape, 1.0 / rate).unwrap().sample(&mut self.rng_conc);
        }
    }

    /// Joint log-likelihood: epoch partition terms, per-document table CRPs,
    /// and each chain's prior + transitions + emissions.
    pub fn joint_log_likelihood(&self) -> Result<f64> {
        let mut ll = 0.0;
        for t in 0..self.state.num_epochs() {
            ll += self.state.partition_log_likelihood(t, self.hyper.gamma[t])?;
        }
        for doc in &self.state.docs {
            let n = doc.seated_words();
            if n == 0 {
                continue;
            }
            let a = self.hyper.alpha[doc.epoch];
            ll += doc.num_tables() as f64 * a.ln();
            for slot in doc.table_slots() {
                ll += lgamma(doc.table(slot).occupancy as f64);
            }
            ll -= lgamma(a + n as f64) - lgamma(a);
        }
        for &k in self.state.live_topics() {
            let chain = self.chains[k].as_ref().expect("live chain");
            let counts = self.chain_counts(k);
            ll += chain_log_joint(chain.params(), &counts, &self.hyper.dynamics);
        }
        Ok(ll)
    }

    fn snapshot(&self, iteration: usize, log_likelihood: f64) -> PosteriorSample {
        debug_assert!(self.state.check_invariants().is_ok());
        PosteriorSample {
            iteration,
            log_likelihood,
            alpha: self.hyper.alpha.clone(),
            gamma: self.hyper.gamma.clone(),
            state: self.state.to_checkpoint(),
            chains: self
                .state
                .live_topics()
                .iter()
                .map(|&k| self.chains[k].clone().expect("live chain"))
                .collect(),
        }
    }

    /// Full run: one filtering pass to initialize, then standard sweeps with
    /// chain updates and concentration resampling, collecting snapshots on
    /// the configured schedule.
    pub fn run(&mut self) -> Result<FitResult> {
        let t_total = self.state.num_epochs();
        let mut trace = Vec::with_capacity(self.config.iterations);
        let mut samples: Vec<PosteriorSample> = Vec::new();

        // Iteration 1: filtering mode. Epochs are seated in order; later
        // epochs are empty, so forward factors vanish on their own.
        for t in 0..t_total {
            self.seating_sweep_epoch(t, false)?;
            self.chain_sweep()?;
        }
        let ll = self.joint_log_likelihood()?;
        trace.push(ll);
        if self.config.iterations >= 1 && 1 % self.config.sample_every == 0 {
            samples.push(self.snapshot(1, ll));
        }

        for iter in 2..=self.config.iterations {
            for t in 0..t_total {
                self.seating_sweep_epoch(t, true)?;
            }
            self.chain_sweep()?;
            self.resample_concentrations();
            let ll = self.joint_log_likelihood()?;
            if !ll.is_finite() {
                return Err(Error::Numerical(format!("non-finite joint log-likelihood at iteration {iter}")));
            }
            trace.push(ll);
            if iter % self.config.sample_every == 0 && samples.len() < self.config.n_samples {
                samples.push(self.snapshot(iter, ll));
            }
        }
        if samples.is_empty() {
            let ll = *trace.last().expect("at least one iteration");
            samples.push(self.snapshot(self.config.iterations, ll));
        }
        let map_index = samples
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.log_likelihood.total_cmp(&b.1.log_likelihood))
            .map(|(i, _)| i)
            .expect("non-empty samples");
        Ok(FitResult {
            samples,
            map_index,
            loglik_trace: trace,
            chain_accept_rate: self.chain_accept_rate(),
        })
    }
}

/// Convenience wrapper: build a sampler and run it.
pub fn fit(corpus: &Corpus, config: &SamplerConfig) -> Result<FitResult> {
    GibbsSampler::new(corpus, config)?.run()
}
