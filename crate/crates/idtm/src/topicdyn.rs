//! Topic chains: logistic-normal emissions over a Gaussian random walk.
//!
//! A topic's word distribution at epoch `t` is `L(phi_t)` (softmax of its
//! natural parameters). The chain prior is `phi_birth ~ N(0, sigma I)` and
//! `phi_t | phi_{t-1} ~ N(phi_{t-1}, rho I)`. The non-conjugate posterior over
//! a chain is sampled with an independence Metropolis-Hastings move whose
//! proposal is a Laplace-approximated forward filter followed by the exact
//! Gaussian backward smoothing pass.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    /// Base-measure variance: `H = N(0, sigma I)`.
    pub sigma: f64,
    /// Random-walk variance per epoch.
    pub rho: f64,
}

impl DynamicsParams {
    pub fn new(sigma: f64, rho: f64) -> Result<Self> {
        if !(sigma > 0.0) || !(rho > 0.0) {
            return Err(Error::Config("sigma and rho must be positive".into()));
        }
        Ok(DynamicsParams { sigma, rho })
    }
}

/// Diagonal Gaussian belief over a length-W natural-parameter vector.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Numerically stable log-softmax.
pub fn log_softmax(phi: &[f64]) -> Vec<f64> {
    let max = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = phi.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    phi.iter().map(|&x| x - log_z).collect()
}

/// Softmax transform onto the simplex.
pub fn logistic(phi: &[f64]) -> Vec<f64> {
    log_softmax(phi).iter().map(|&lp| lp.exp()).collect()
}

/// Multinomial log-likelihood of counts `v` under `L(phi)`, coefficient
/// omitted (constant in `phi` in every ratio where this is used).
pub fn emission_loglik(v: &[u32], phi: &[f64]) -> f64 {
    emission_loglik_logp(v, &log_softmax(phi))
}

/// Same as [`emission_loglik`] with the log-probabilities precomputed.
pub fn emission_loglik_logp(v: &[u32], logp: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&c, &lp) in v.iter().zip(logp) {
        if c > 0 {
            acc += c as f64 * lp;
        }
    }
    acc
}

/// Gradient of [`emission_loglik`] w.r.t. `phi`: `v - (sum v) L(phi)`.
pub fn emission_grad(v: &[u32], phi: &[f64]) -> Vec<f64> {
    let n: u64 = v.iter().map(|&c| c as u64).sum();
    let p = logistic(phi);
    v.iter().zip(&p).map(|(&c, &pw)| c as f64 - n as f64 * pw).collect()
}

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITERS: usize = 100;

/// Laplace fit of `LN(v | phi) * N(phi | prev.mean, prev.var + trans_var)`.
///
/// The mean is the posterior mode found by damped Newton iteration on the
/// diagonal model; the variance is the negated inverse diagonal Hessian at
/// the mode.
pub fn laplace_forward(prev: &GaussianBelief, trans_var: f64, v: &[u32]) -> Result<GaussianBelief> {
    let w = prev.mean.len();
    assert_eq!(v.len(), w);
    let s: Vec<f64> = prev.var.iter().map(|&x| x + trans_var).collect();
    let n: u64 = v.iter().map(|&c| c as u64).sum();

    let objective = |phi: &[f64]| -> f64 {
        let mut obj = emission_loglik(v, phi);
        for ((&x, &u), &sv) in phi.iter().zip(&prev.mean).zip(&s) {
            obj -= (x - u) * (x - u) / (2.0 * sv);
        }
        obj
    };

    let mut phi = prev.mean.clone();
    let mut obj = objective(&phi);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITERS {
        let p = logistic(&phi);
        let mut grad = vec![0.0; w];
        let mut sup = 0.0f64;
        for i in 0..w {
            grad[i] = v[i] as f64 - n as f64 * p[i] - (phi[i] - prev.mean[i]) / s[i];
            sup = sup.max(grad[i].abs());
        }
        if sup <= NEWTON_TOL {
            converged = true;
            break;
        }
        let mut step = vec![0.0; w];
        for i in 0..w {
            let h = n as f64 * p[i] * (1.0 - p[i]) + 1.0 / s[i];
            step[i] = grad[i] / h;
        }
        // Step-halving until the objective improves.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = phi.iter().zip(&step).map(|(&x, &d)| x + scale * d).collect();
            let cand_obj = objective(&cand);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-15 {
                phi = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        // Accept a loosely converged mode; the MH accept/reject step corrects
        // for proposal imperfection. Hard-fail only on numerical breakdown.
        let p = logistic(&phi);
        let sup = (0..w)
            .map(|i| (v[i] as f64 - n as f64 * p[i] - (phi[i] - prev.mean[i]) / s[i]).abs())
            .fold(0.0f64, f64::max);
        if !sup.is_finite() || sup > 1e-2 * (1.0 + n as f64) {
            return Err(Error::Numerical(format!(
                "Newton mode search diverged (gradient sup-norm {sup:.3e})"
            )));
        }
    }
    let p = logistic(&phi);
    let var: Vec<f64> = (0..w)
        .map(|i| 1.0 / (n as f64 * p[i] * (1.0 - p[i]) + 1.0 / s[i]))
        .collect();
    Ok(GaussianBelief { mean: phi, var })
}

/// Exact Gaussian backward smoothing for identity dynamics with transition
/// variance `rho` (diagonal throughout).
pub fn smooth_backward(forward: &[GaussianBelief], rho: f64) -> Vec<GaussianBelief> {
    let n = forward.len();
    let mut smoothed: Vec<GaussianBelief> = Vec::with_capacity(n);
    smoothed.push(forward[n - 1].clone());
    for t in (0..n - 1).rev() {
        let next = &smoothed[smoothed.len() - 1];
        let f = &forward[t];
        let w = f.mean.len();
        let mut mean = vec![0.0; w];
        let mut var = vec![0.0; w];
        for i in 0..w {
            let pred = f.var[i] + rho;
            let gain = f.var[i] / pred;
            mean[i] = f.mean[i] + gain * (next.mean[i] - f.mean[i]);
            var[i] = f.var[i] + gain * gain * (next.var[i] - pred);
        }
        smoothed.push(GaussianBelief { mean, var });
    }
    smoothed.reverse();
    smoothed
}

/// Forward Laplace filter over a chain's per-epoch emission counts
/// (`counts[0]` is the birth epoch).
pub fn forward_filter(counts: &[Vec<u32>], dynamics: &DynamicsParams) -> Result<Vec<GaussianBelief>> {
    let w = counts[0].len();
    let prior = GaussianBelief { mean: vec![0.0; w], var: vec![dynamics.sigma; w] };
    let mut forward = Vec::with_capacity(counts.len());
    for (t, v) in counts.iter().enumerate() {
        let belief = if t == 0 {
            laplace_forward(&prior, 0.0, v)?
        } else {
            laplace_forward(&forward[t - 1], dynamics.rho, v)?
        };
        forward.push(belief);
    }
    Ok(forward)
}

/// Smoothed per-epoch proposal marginals for a chain with the given
/// per-epoch emission counts (`counts[0]` is the birth epoch).
pub fn proposal_marginals(counts: &[Vec<u32>], dynamics: &DynamicsParams) -> Result<Vec<GaussianBelief>> {
    Ok(smooth_backward(&forward_filter(counts, dynamics)?, dynamics.rho))
}

/// Backward conditional sampling from the filtered chain: draws the whole
/// block jointly, preserving cross-epoch correlation. Returns the draw and
/// its log density under the proposal.
pub fn sample_chain_backward(
    forward: &[GaussianBelief],
    rho: f64,
    rng: &mut impl Rng,
) -> (Vec<Vec<f64>>, f64) {
    let n = forward.len();
    let w = forward[0].mean.len();
    let mut draws: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut log_q = 0.0;
    for t in (0..n).rev() {
        let f = &forward[t];
        let mut mean = vec![0.0; w];
        let mut var = vec![0.0; w];
        for i in 0..w {
            if t == n - 1 {
                mean[i] = f.mean[i];
                var[i] = f.var[i];
            } else {
                let pred = f.var[i] + rho;
                let gain = f.var[i] / pred;
                mean[i] = f.mean[i] + gain * (draws[t + 1][i] - f.mean[i]);
                var[i] = f.var[i] * rho / pred;
            }
        }
        let phi: Vec<f64> = mean
            .iter()
            .zip(&var)
            .map(|(&m, &v)| m + v.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        log_q += diag_normal_logpdf(&phi, &mean, &var);
        draws[t] = phi;
    }
    (draws, log_q)
}

/// Log density of an arbitrary chain under the backward-sampling proposal.
pub fn chain_backward_logpdf(forward: &[GaussianBelief], rho: f64, params: &[Vec<f64>]) -> f64 {
    let n = forward.len();
    let w = forward[0].mean.len();
    let mut log_q = 0.0;
    for t in (0..n).rev() {
        let f = &forward[t];
        let mut mean = vec![0.0; w];
        let mut var = vec![0.0; w];
        for i in 0..w {
            if t == n - 1 {
                mean[i] = f.mean[i];
                var[i] = f.var[i];
            } else {
                let pred = f.var[i] + rho;
                let gain = f.var[i] / pred;
                mean[i] = f.mean[i] + gain * (params[t + 1][i] - f.mean[i]);
                var[i] = f.var[i] * rho / pred;
            }
        }
        log_q += diag_normal_logpdf(&params[t], &mean, &var);
    }
    log_q
}

fn diag_normal_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&xi, &mi), &vi) in x.iter().zip(mean).zip(var) {
        let d = xi - mi;
        acc -= 0.5 * (d * d / vi + vi.ln() + core::f64::consts::TAU.ln());
    }
    acc
}

fn iso_normal_logpdf(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let mut acc = 0.0;
    let lv = var.ln() + core::f64::consts::TAU.ln();
    for (&xi, &mi) in x.iter().zip(mean) {
        let d = xi - mi;
        acc -= 0.5 * (d * d / var + lv);
    }
    acc
}

/// Sample a whole-chain proposal from the smoothed marginals; returns the
/// sample and its log-density under the factorized proposal.
pub fn propose_chain(
    counts: &[Vec<u32>],
    dynamics: &DynamicsParams,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let forward = proposal_beliefs(counts, dynamics)?;
    sample_chain_full(&forward, dynamics.rho, rng)
}

// ---- full-covariance proposal machinery (block MH) ----
//
// The diagonal filter above is a cheap belief summary; the MH proposal uses
// the full multinomial Hessian `n (diag p - p p^T)` so that the Gaussian
// approximation captures the simplex coupling between words. W stays small
// in this model, so dense W x W algebra is cheap.

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

/// Cholesky with escalating diagonal jitter on failure.
fn cholesky_jittered(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if let Some(l) = cholesky(a) {
        return Ok(l);
    }
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0f64, f64::max).max(1e-300);
    for &eps in &[1e-12, 1e-9, 1e-6] {
        let mut b = a.to_vec();
        for i in 0..n {
            b[i][i] += eps * scale;
        }
        if let Some(l) = cholesky(&b) {
            return Ok(l);
        }
    }
    Err(Error::Numerical("covariance lost positive definiteness".into()))
}

/// Solve `A x = b` from the Cholesky factor of `A`.
fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

/// `A^{-1}` from the Cholesky factor of `A` (symmetric result).
fn chol_inverse(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = l.len();
    let mut inv = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = chol_solve(l, &e);
        for i in 0..n {
            inv[i][j] = col[i];
        }
    }
    // Symmetrize against round-off.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[i][j] + inv[j][i]);
            inv[i][j] = v;
            inv[j][i] = v;
        }
    }
    inv
}

fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(&r, &v)| r * v).sum()).collect()
}

fn mvn_sample(mean: &[f64], l: &[Vec<f64>], rng: &mut impl Rng) -> Vec<f64> {
    let n = mean.len();
    let z: Vec<f64> = (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    (0..n)
        .map(|i| mean[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>())
        .collect()
}

fn mvn_logpdf(x: &[f64], mean: &[f64], l: &[Vec<f64>]) -> f64 {
    let n = mean.len();
    let d: Vec<f64> = x.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    // Forward substitution: z = L^{-1} d.
    let mut z = vec![0.0; n];
    let mut quad = 0.0;
    let mut logdet_half = 0.0;
    for i in 0..n {
        let mut sum = d[i];
        for k in 0..i {
            sum -= l[i][k] * z[k];
        }
        z[i] = sum / l[i][i];
        quad += z[i] * z[i];
        logdet_half += l[i][i].ln();
    }
    -0.5 * quad - logdet_half - 0.5 * n as f64 * core::f64::consts::TAU.ln()
}

#[derive(Debug, Clone)]
struct FullBelief {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

/// Laplace fit of `LN(v | phi) * N(phi | prior_mean, prior_cov)` with the
/// full multinomial Hessian.
fn laplace_forward_full(prior_mean: &[f64], prior_cov: &[Vec<f64>], v: &[u32]) -> Result<FullBelief> {
    let w = prior_mean.len();
    let n: u64 = v.iter().map(|&c| c as u64).sum();
    let l_prior = cholesky_jittered(prior_cov)?;
    let prec = chol_inverse(&l_prior);

    let objective = |phi: &[f64]| -> f64 {
        let d: Vec<f64> = phi.iter().zip(prior_mean).map(|(&a, &b)| a - b).collect();
        let pd = mat_vec(&prec, &d);
        emission_loglik(v, phi) - 0.5 * d.iter().zip(&pd).map(|(&a, &b)| a * b).sum::<f64>()
    };

    let grad_at = |phi: &[f64]| -> Vec<f64> {
        let p = logistic(phi);
        let d: Vec<f64> = phi.iter().zip(prior_mean).map(|(&a, &b)| a - b).collect();
        let pd = mat_vec(&prec, &d);
        (0..w).map(|i| v[i] as f64 - n as f64 * p[i] - pd[i]).collect()
    };

    let mut phi = prior_mean.to_vec();
    let mut obj = objective(&phi);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITERS {
        let grad = grad_at(&phi);
        let sup = grad.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
        if sup <= NEWTON_TOL {
            converged = true;
            break;
        }
        let p = logistic(&phi);
        let mut h = prec.clone();
        for i in 0..w {
            for j in 0..w {
                h[i][j] -= n as f64 * p[i] * p[j];
            }
            h[i][i] += n as f64 * p[i];
        }
        let l_h = cholesky_jittered(&h)?;
        let step = chol_solve(&l_h, &grad);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = phi.iter().zip(&step).map(|(&x, &s)| x + scale * s).collect();
            let cand_obj = objective(&cand);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-15 {
                phi = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        let sup = grad_at(&phi).iter().fold(0.0f64, |m, &g| m.max(g.abs()));
        if !sup.is_finite() || sup > 1e-2 * (1.0 + n as f64) {
            return Err(Error::Numerical(format!(
                "full Newton mode search diverged (gradient sup-norm {sup:.3e})"
            )));
        }
    }
    let p = logistic(&phi);
    let mut h = prec.clone();
    for i in 0..w {
        for j in 0..w {
            h[i][j] -= n as f64 * p[i] * p[j];
        }
        h[i][i] += n as f64 * p[i];
    }
    let l_h = cholesky_jittered(&h)?;
    let mut belief = FullBelief { mean: phi, cov: chol_inverse(&l_h) };
    marginal_moment_correct(&mut belief.mean, &mut belief.cov, prior_mean, prior_cov, v);
    Ok(belief)
}

/// Marginal-moment correction of a filtered Gaussian belief.
///
/// The epoch posterior `N(phi; prior) * exp(sum_i v_i phi_i - n LSE(phi))`
/// factorizes over coordinates once the softmax normalizer is linearized by
/// the auxiliary identity `exp(-n LSE(phi)) = c * int u^{n-1}
/// exp(-u sum_i e^{phi_i}) du`: given `u` each coordinate has the 1-D density
/// `N(phi_i; prior_i) exp(v_i phi_i - u e^{phi_i})`. Integrating a small
/// `u`-grid against per-coordinate grids gives near-exact marginal means and
/// variances. This requires a coordinate-wise prior, so the correction is
/// applied only where the prior covariance is diagonal (the wide birth-epoch
/// prior), which is exactly where it matters. The quadratic
/// mode/curvature fit places sparse-count coordinates up to two standard
/// deviations away from their true marginal mean - the posterior is strongly
/// skewed when counts are small and the prior wide - which makes the
/// independence proposal built from these beliefs sticky. The belief mean is
/// therefore replaced with the quadrature means and the covariance rescaled
/// to the quadrature standard deviations; dense-count epochs, where the
/// quadratic fit is already accurate, are left untouched.
fn marginal_moment_correct(
    mean: &mut [f64],
    cov: &mut [Vec<f64>],
    prior_mean: &[f64],
    prior_cov: &[Vec<f64>],
    v: &[u32],
) {
    let w = mean.len();
    let n: f64 = v.iter().map(|&c| c as f64).sum();
    // Dense counts: skewness decays like 1/sqrt(count); nothing to fix.
    if n == 0.0 || n > 4096.0 {
        return;
    }
    // The auxiliary decomposition factorizes the posterior per coordinate only
    // when the prior does; with a correlated prior (any chain epoch after the
    // first) the per-coordinate quadrature would target the wrong marginals,
    // and the tight propagated prior keeps the quadratic fit accurate anyway.
    for i in 0..w {
        for j in 0..w {
            if i != j && prior_cov[i][j].abs() > 1e-12 * prior_cov[i][i].max(prior_cov[j][j]) {
                return;
            }
        }
    }
    let prior_var: Vec<f64> = (0..w).map(|i| prior_cov[i][i]).collect();
    const U_NODES: usize = 32;
    const GRID: usize = 96;
    // u concentrates around n / sum_i e^{phi_i}; its log-spread combines the
    // 1/sqrt(n) gamma width with the belief's uncertainty about log Z
    // (delta method: gradient of log Z is the softmax vector p).
    let mx = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = mean.iter().map(|&m| (m - mx).exp()).sum::<f64>().ln() + mx;
    let tau_center = n.ln() - log_z;
    let p = logistic(mean);
    let mut psp = 0.0;
    for i in 0..w {
        for j in 0..w {
            psp += p[i] * cov[i][j] * p[j];
        }
    }
    let tau_span = 6.0 * (1.0 / n + psp.max(0.0)).sqrt();
    // Per-coordinate grids and emission-free log-weights.
    let mut grids = vec![[0.0f64; GRID]; w];
    let mut base = vec![[0.0f64; GRID]; w];
    for i in 0..w {
        let sd = prior_var[i].max(cov[i][i]).sqrt();
        let lo = mean[i].min(prior_mean[i]) - 7.0 * sd;
        let hi = mean[i].max(prior_mean[i]) + 7.0 * sd;
        let step = (hi - lo) / (GRID - 1) as f64;
        for g in 0..GRID {
            let x = lo + g as f64 * step;
            let d = x - prior_mean[i];
            grids[i][g] = x;
            base[i][g] = v[i] as f64 * x - 0.5 * d * d / prior_var[i];
        }
    }
    // Accumulate mixture moments over the u-grid.
    let mut acc_w = vec![f64::NEG_INFINITY; U_NODES]; // log mixture weights
    let mut m_u = vec![vec![0.0f64; w]; U_NODES];
    let mut v_u = vec![vec![0.0f64; w]; U_NODES];
    for k in 0..U_NODES {
        let tau = tau_center - tau_span + 2.0 * tau_span * k as f64 / (U_NODES - 1) as f64;
        // log weight = n * tau + sum_i log Z_i(u), up to constants shared
        // across the grid.
        let mut logw = n * tau;
        let mut degenerate = false;
        for i in 0..w {
            let mut lmax = f64::NEG_INFINITY;
            let mut lps = [0.0f64; GRID];
            for g in 0..GRID {
                let e = grids[i][g] + tau;
                let pen = if e > 690.0 { f64::INFINITY } else { e.exp() };
                lps[g] = base[i][g] - pen;
                lmax = lmax.max(lps[g]);
            }
            if !lmax.is_finite() {
                degenerate = true;
                break;
            }
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for g in 0..GRID {
                let wt = (lps[g] - lmax).exp();
                s0 += wt;
                s1 += wt * grids[i][g];
                s2 += wt * grids[i][g] * grids[i][g];
            }
            let mu = s1 / s0;
            m_u[k][i] = mu;
            v_u[k][i] = (s2 / s0 - mu * mu).max(0.0);
            logw += lmax + s0.ln();
        }
        if !degenerate {
            acc_w[k] = logw;
        }
    }
    let wmax = acc_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !wmax.is_finite() {
        return;
    }
    let mut total = 0.0;
    let mut mean_new = vec![0.0f64; w];
    let mut second = vec![0.0f64; w];
    for k in 0..U_NODES {
        let wt = (acc_w[k] - wmax).exp();
        total += wt;
        for i in 0..w {
            mean_new[i] += wt * m_u[k][i];
            second[i] += wt * (v_u[k][i] + m_u[k][i] * m_u[k][i]);
        }
    }
    let mut scale = vec![1.0f64; w];
    for i in 0..w {
        mean_new[i] /= total;
        let var = second[i] / total - mean_new[i] * mean_new[i];
        if !(mean_new[i].is_finite() && var.is_finite() && var > 0.0) {
            return;
        }
        scale[i] = (var / cov[i][i]).sqrt().clamp(0.5, 2.0);
    }
    mean.copy_from_slice(&mean_new);
    for i in 0..w {
        for j in 0..w {
            cov[i][j] *= scale[i] * scale[j];
        }
    }
}

fn forward_filter_full(counts: &[Vec<u32>], dynamics: &DynamicsParams) -> Result<Vec<FullBelief>> {
    let w = counts[0].len();
    let mut forward: Vec<FullBelief> = Vec::with_capacity(counts.len());
    for (t, v) in counts.iter().enumerate() {
        let belief = if t == 0 {
            let mut cov = vec![vec![0.0; w]; w];
            for i in 0..w {
                cov[i][i] = dynamics.sigma;
            }
            laplace_forward_full(&vec![0.0; w], &cov, v)?
        } else {
            let prev = &forward[t - 1];
            let mut cov = prev.cov.clone();
            for i in 0..w {
                cov[i][i] += dynamics.rho;
            }
            laplace_forward_full(&prev.mean, &cov, v)?
        };
        forward.push(belief);
    }
    Ok(forward)
}

/// Backward conditional `phi_t | phi_{t+1}` of the filtered chain: mean and
/// the Cholesky factor of its covariance (marginal when `x_next` is None).
/// The proposal covariance is used as-is: with W-dimensional epochs even
/// slight overdispersion moves proposals into low-posterior regions faster
/// than it cures sticky tail states.
fn backward_conditional(
    f: &FullBelief,
    rho: f64,
    x_next: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let w = f.mean.len();
    match x_next {
        None => Ok((f.mean.clone(), cholesky_jittered(&f.cov)?)),
        Some(x) => {
            let mut pred = f.cov.clone();
            for i in 0..w {
                pred[i][i] += rho;
            }
            let l_pred = cholesky_jittered(&pred)?;
            // X = pred^{-1} cov, so the gain is X^T = cov pred^{-1}.
            let mut xmat = vec![vec![0.0; w]; w];
            for j in 0..w {
                let col: Vec<f64> = (0..w).map(|i| f.cov[i][j]).collect();
                let sol = chol_solve(&l_pred, &col);
                for i in 0..w {
                    xmat[i][j] = sol[i];
                }
            }
            let d: Vec<f64> = x.iter().zip(&f.mean).map(|(&a, &b)| a - b).collect();
            let mean: Vec<f64> = (0..w)
                .map(|i| f.mean[i] + (0..w).map(|k| xmat[k][i] * d[k]).sum::<f64>())
                .collect();
            let mut cov = vec![vec![0.0; w]; w];
            for i in 0..w {
                for j in 0..w {
                    // cov - cov pred^{-1} cov, symmetrized.
                    let a: f64 = (0..w).map(|k| xmat[k][i] * f.cov[k][j]).sum();
                    cov[i][j] = f.cov[i][j] - a;
                }
            }
            for i in 0..w {
                for j in 0..i {
                    let v = 0.5 * (cov[i][j] + cov[j][i]);
                    cov[i][j] = v;
                    cov[j][i] = v;
                }
            }
            Ok((mean, cholesky_jittered(&cov)?))
        }
    }
}

fn sample_chain_full(
    forward: &[FullBelief],
    rho: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let n = forward.len();
    let mut draws: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut log_q = 0.0;
    for t in (0..n).rev() {
        let next = if t == n - 1 { None } else { Some(draws[t + 1].as_slice()) };
        let (mean, l) = backward_conditional(&forward[t], rho, next)?;
        let phi = mvn_sample(&mean, &l, rng);
        log_q += mvn_logpdf(&phi, &mean, &l);
        draws[t] = phi;
    }
    Ok((draws, log_q))
}

fn chain_logpdf_full(forward: &[FullBelief], rho: f64, params: &[Vec<f64>]) -> Result<f64> {
    let n = forward.len();
    let mut log_q = 0.0;
    for t in (0..n).rev() {
        let next = if t == n - 1 { None } else { Some(params[t + 1].as_slice()) };
        let (mean, l) = backward_conditional(&forward[t], rho, next)?;
        log_q += mvn_logpdf(&params[t], &mean, &l);
    }
    Ok(log_q)
}

/// Smoothed means of the filtered Gaussian chain (backward recursion with
/// gain `cov (cov + rho I)^{-1}`); covariances are not needed.
fn rts_means(forward: &[FullBelief], rho: f64) -> Result<Vec<Vec<f64>>> {
    let n = forward.len();
    let mut means: Vec<Vec<f64>> = vec![Vec::new(); n];
    means[n - 1] = forward[n - 1].mean.clone();
    for t in (0..n.saturating_sub(1)).rev() {
        let (mean, _) = backward_conditional(&forward[t], rho, Some(means[t + 1].as_slice()))?;
        means[t] = mean;
    }
    Ok(means)
}

/// Exact Gaussian forward filter with each emission replaced by its quadratic
/// expansion around a fixed point: pseudo-observation precision
/// `H = n (diag p - p p^T)` and score `g = v - n p` at the expansion point.
fn filter_linearized(
    counts: &[Vec<u32>],
    dynamics: &DynamicsParams,
    expansion: &[Vec<f64>],
) -> Result<Vec<FullBelief>> {
    let w = counts[0].len();
    let mut forward: Vec<FullBelief> = Vec::with_capacity(counts.len());
    for (t, v) in counts.iter().enumerate() {
        let (prior_mean, prior_cov) = if t == 0 {
            let mut cov = vec![vec![0.0; w]; w];
            for i in 0..w {
                cov[i][i] = dynamics.sigma;
            }
            (vec![0.0; w], cov)
        } else {
            let prev = &forward[t - 1];
            let mut cov = prev.cov.clone();
            for i in 0..w {
                cov[i][i] += dynamics.rho;
            }
            (prev.mean.clone(), cov)
        };
        let l0 = cholesky_jittered(&prior_cov)?;
        let prec0 = chol_inverse(&l0);
        let x = &expansion[t];
        let n: u64 = v.iter().map(|&c| c as u64).sum();
        let p = logistic(x);
        // prec = prec0 + H, rhs = prec0 m0 + H x + g.
        let mut prec = prec0.clone();
        for i in 0..w {
            for j in 0..w {
                prec[i][j] -= n as f64 * p[i] * p[j];
            }
            prec[i][i] += n as f64 * p[i];
        }
        let hx: Vec<f64> = {
            let px: f64 = p.iter().zip(x).map(|(&a, &b)| a * b).sum();
            (0..w).map(|i| n as f64 * p[i] * (x[i] - px)).collect()
        };
        let p0m = mat_vec(&prec0, &prior_mean);
        let rhs: Vec<f64> =
            (0..w).map(|i| p0m[i] + hx[i] + v[i] as f64 - n as f64 * p[i]).collect();
        let l = cholesky_jittered(&prec)?;
        let mean = chol_solve(&l, &rhs);
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numerical("linearized filter mean diverged".into()));
        }
        let mut belief = FullBelief { mean, cov: chol_inverse(&l) };
        marginal_moment_correct(&mut belief.mean, &mut belief.cov, &prior_mean, &prior_cov, v);
        forward.push(belief);
    }
    Ok(forward)
}

/// Proposal beliefs for the block update: a Laplace forward filter refined by
/// one pass that re-linearizes the emissions around the smoothed means. The
/// refinement removes the compounding linearization error that makes a
/// filter-only proposal degrade on long chains (further passes measured no
/// better); on failure the plain filter is kept. Deterministic in `counts`,
/// so proposal densities stay exact.
fn proposal_beliefs(counts: &[Vec<u32>], dynamics: &DynamicsParams) -> Result<Vec<FullBelief>> {
    let beliefs = forward_filter_full(counts, dynamics)?;
    rts_means(&beliefs, dynamics.rho)
        .and_then(|means| filter_linearized(counts, dynamics, &means))
        .or(Ok(beliefs))
}

/// Unnormalized log joint of a chain: base-measure prior at birth, random
/// walk transitions, and all emissions.
pub fn chain_log_joint(params: &[Vec<f64>], counts: &[Vec<u32>], dynamics: &DynamicsParams) -> f64 {
    let mut acc = iso_normal_logpdf(&params[0], &vec![0.0; params[0].len()], dynamics.sigma);
    for (t, phi) in params.iter().enumerate() {
        acc += emission_loglik(&counts[t], phi);
        if t > 0 {
            acc += iso_normal_logpdf(phi, &params[t - 1], dynamics.rho);
        }
    }
    acc
}

/// One draw from the transition kernel `N(phi_prev, rho I)`.
pub fn instantiate_inherited(phi_prev: &[f64], rho: f64, rng: &mut impl Rng) -> Vec<f64> {
    let sd = rho.sqrt();
    phi_prev
        .iter()
        .map(|&m| m + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// One topic's natural-parameter chain over its contiguous lifespan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicChain {
    pub id: usize,
    pub birth: usize,
    params: Vec<Vec<f64>>,
    #[serde(skip)]
    log_probs: Vec<Vec<f64>>,
}

impl TopicChain {
    pub fn new(id: usize, birth: usize, phi: Vec<f64>) -> Self {
        let log_probs = vec![log_softmax(&phi)];
        TopicChain { id, birth, params: vec![phi], log_probs }
    }

    /// Last covered epoch (inclusive).
    pub fn end(&self) -> usize {
        self.birth + self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a chain always covers at least its birth epoch
    }

    pub fn covers(&self, t: usize) -> bool {
        t >= self.birth && t <= self.end()
    }

    pub fn phi(&self, t: usize) -> &[f64] {
        &self.params[t - self.birth]
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    /// Cached `log L(phi_t)`.
    pub fn log_probs(&self, t: usize) -> &[f64] {
        &self.log_probs[t - self.birth]
    }

    /// Extend the chain by one epoch.
    pub fn push_epoch(&mut self, phi: Vec<f64>) {
        self.log_probs.push(log_softmax(&phi));
        self.params.push(phi);
    }

    /// Drop parameters after `new_end` (tail trim when usage retreats).
    pub fn trim_end(&mut self, new_end: usize) {
        let keep = new_end.saturating_sub(self.birth) + 1;
        self.params.truncate(keep.max(1));
        self.log_probs.truncate(keep.max(1));
    }

    /// Replace the whole chain's parameters (same lifespan).
    pub fn set_params(&mut self, params: Vec<Vec<f64>>) {
        assert_eq!(params.len(), self.params.len());
        self.log_probs = params.iter().map(|p| log_softmax(p)).collect();
        self.params = params;
    }

    /// Rebuild log-prob caches (after deserialization).
    pub fn rebuild_cache(&mut self) {
        self.log_probs = self.params.iter().map(|p| log_softmax(p)).collect();
    }
}

/// Block MH update of a chain given per-epoch emission counts
/// (`counts[t - birth]`). Returns whether the proposal was accepted.
pub fn mh_update_chain(
    chain: &mut TopicChain,
    counts: &[Vec<u32>],
    dynamics: &DynamicsParams,
    rng: &mut impl Rng,
) -> Result<bool> {
    assert_eq!(counts.len(), chain.len());
    let forward = proposal_beliefs(counts, dynamics)?;
    let (proposal, log_q_prop) = sample_chain_full(&forward, dynamics.rho, rng)?;
    let log_q_cur = chain_logpdf_full(&forward, dynamics.rho, chain.params())?;
    let log_u = chain_log_joint(&proposal, counts, dynamics) - chain_log_joint(chain.params(), counts, dynamics)
        + log_q_cur
        - log_q_prop;
    let accept = log_u >= 0.0 || rng.random::<f64>().ln() < log_u;
    if accept {
        chain.set_params(proposal);
    }
    Ok(accept)
}
