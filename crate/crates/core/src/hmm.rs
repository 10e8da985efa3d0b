//! Discrete-observation hidden Markov models.
//!
//! Parameter estimation uses scaled forward-backward (per-step normalisation constants)
//! so that sequences of any length stay in floating-point range. Decoding runs in log
//! space. Every routine has a masked variant: a mask restricts, per time step, which
//! hidden states may emit the observation at that step. The bi-layer consumer model uses
//! this to pin the observed producer component of its composite states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for stochastic vectors.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub n_states: usize,
    pub n_obs: usize,
    pub pi: Vec<f64>,
    /// `a[i][j] = p(state j | state i)`
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    /// `b[j][m] = p(obs m | state j)`
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
}

impl HmmParams {
    pub fn new(pi: Vec<f64>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = pi.len();
        let n_obs = b.first().map_or(0, Vec::len);
        let p = Self {
            n_states,
            n_obs,
            pi,
            a,
            b,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(n_states: usize, n_obs: usize) -> Self {
        let s = 1.0 / n_states as f64;
        let o = 1.0 / n_obs as f64;
        Self {
            n_states,
            n_obs,
            pi: vec![s; n_states],
            a: vec![vec![s; n_states]; n_states],
            b: vec![vec![o; n_obs]; n_states],
        }
    }

    /// Seeded random parameters: every row is a symmetric Dirichlet(1) draw.
    pub fn random(n_states: usize, n_obs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> {
            let mut row: Vec<f64> = (0..len).map(|_| Exp1.sample(&mut rng)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            row
        };
        let pi = draw(n_states);
        let a = (0..n_states).map(|_| draw(n_states)).collect();
        let b = (0..n_states).map(|_| draw(n_obs)).collect();
        Self {
            n_states,
            n_obs,
            pi,
            a,
            b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_obs == 0 {
            return Err(Error::invalid("an HMM needs at least one state and one symbol"));
        }
        let check = |row: &[f64], len: usize, what: &str| -> Result<()> {
            if row.len() != len {
                return Err(Error::invalid(format!("{what}: expected length {len}, got {}", row.len())));
            }
            if row.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::invalid(format!("{what}: negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!("{what}: sums to {s}")));
            }
            Ok(())
        };
        check(&self.pi, self.n_states, "pi")?;
        if self.a.len() != self.n_states || self.b.len() != self.n_states {
            return Err(Error::invalid("A and B need one row per state"));
        }
        for (i, row) in self.a.iter().enumerate() {
            check(row, self.n_states, &format!("A[{i}]"))?;
        }
        for (i, row) in self.b.iter().enumerate() {
            check(row, self.n_obs, &format!("B[{i}]"))?;
        }
        Ok(())
    }

    /// Relabels hidden states: new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            n_states: self.n_states,
            n_obs: self.n_obs,
            pi: perm.iter().map(|&i| self.pi[i]).collect(),
            a: perm
                .iter()
                .map(|&i| perm.iter().map(|&j| self.a[i][j]).collect())
                .collect(),
            b: perm.iter().map(|&i| self.b[i].clone()).collect(),
        }
    }

    /// Clamps every entry to at least `floor` and renormalises rows.
    pub fn apply_floor(&mut self, floor: f64) {
        floor_row(&mut self.pi, floor);
        self.a.iter_mut().for_each(|r| floor_row(r, floor));
        self.b.iter_mut().for_each(|r| floor_row(r, floor));
    }

    fn check_symbols(&self, seq: &[usize]) -> Result<()> {
        match seq.iter().find(|&&o| o >= self.n_obs) {
            Some(o) => Err(Error::invalid(format!(
                "symbol {o} out of range for {} observations",
                self.n_obs
            ))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

fn floor_row(row: &mut [f64], floor: f64) {
    for x in row.iter_mut() {
        if !(*x >= floor) {
            *x = floor;
        }
    }
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iterations: usize,
    /// Stop once the log-likelihood gain of an iteration drops below this.
    pub tolerance: f64,
    pub seed: u64,
    /// Probability floor applied after every M-step.
    pub floor: f64,
    /// Independent random initialisations; the most likely result is kept (earliest on
    /// ties). The first one uses `seed` itself.
    pub restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
            seed: 0,
            floor: 1e-10,
            restarts: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::config("training tolerance must be positive"));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::config("probability floor must lie in (0, 1)"));
        }
        if self.restarts == 0 {
            return Err(Error::config("training needs at least one restart"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: HmmParams,
    pub log_likelihood: f64,
    /// Training log-likelihood of every parameter set evaluated, in order. The first
    /// entry belongs to the initial parameters. If the last step lost likelihood its
    /// parameters were discarded, but its value is still recorded here.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// `mask(seq, t, state)`: may `state` emit the observation at step `t` of sequence `seq`?
pub type SeqMask<'a> = &'a (dyn Fn(usize, usize, usize) -> bool + Sync);

fn no_mask(_: usize, _: usize, _: usize) -> bool {
    true
}

pub fn baum_welch(
    sequences: &[Vec<usize>],
    n_states: usize,
    n_obs: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    baum_welch_masked(sequences, n_states, n_obs, config, &no_mask)
}

/// Baum-Welch where state `s` only takes responsibility for step `t` of sequence `q`
/// when `mask(q, t, s)` holds.
pub fn baum_welch_masked(
    sequences: &[Vec<usize>],
    n_states: usize,
    n_obs: usize,
    config: &TrainConfig,
    mask: SeqMask<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if n_states == 0 || n_obs == 0 {
        return Err(Error::invalid("an HMM needs at least one state and one symbol"));
    }
    if sequences.iter().all(Vec::is_empty) {
        return Err(Error::invalid("Baum-Welch needs at least one non-empty sequence"));
    }
    if let Some(o) = sequences.iter().flatten().find(|&&o| o >= n_obs) {
        return Err(Error::invalid(format!("symbol {o} out of range for {n_obs} observations")));
    }
    let mut best = train_once(sequences, n_states, n_obs, config, mask, config.seed);
    for r in 1..config.restarts {
        let seed = config.seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let run = train_once(sequences, n_states, n_obs, config, mask, seed);
        if run.log_likelihood > best.log_likelihood {
            best = run;
        }
    }
    Ok(best)
}

fn train_once(
    sequences: &[Vec<usize>],
    n_states: usize,
    n_obs: usize,
    config: &TrainConfig,
    mask: SeqMask<'_>,
    seed: u64,
) -> TrainOutcome {
    let mut params = HmmParams::random(n_states, n_obs, seed);
    params.apply_floor(config.floor);

    let mut stats = expected_counts(&params, sequences, mask);
    let mut trace = vec![stats.log_likelihood];
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let candidate = stats.maximize(&params, config.floor);
        let cand_stats = expected_counts(&candidate, sequences, mask);
        trace.push(cand_stats.log_likelihood);
        let gain = cand_stats.log_likelihood - stats.log_likelihood;
        if !(gain >= 0.0) {
            // keep the better parameters; rounding or the floor can cost a hair
            break;
        }
        params = candidate;
        stats = cand_stats;
        if gain < config.tolerance {
            break;
        }
    }
    TrainOutcome {
        log_likelihood: stats.log_likelihood,
        params,
        trace,
        iterations,
    }
}

struct ExpectedCounts {
    pi: Vec<f64>,
    trans: Vec<Vec<f64>>,
    emit: Vec<Vec<f64>>,
    log_likelihood: f64,
}

impl ExpectedCounts {
    fn maximize(&self, prev: &HmmParams, floor: f64) -> HmmParams {
        let normalize = |row: &[f64], fallback: &[f64]| -> Vec<f64> {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter().map(|x| x / s).collect()
            } else {
                fallback.to_vec()
            }
        };
        let mut next = HmmParams {
            n_states: prev.n_states,
            n_obs: prev.n_obs,
            pi: normalize(&self.pi, &prev.pi),
            a: self
                .trans
                .iter()
                .zip(&prev.a)
                .map(|(r, f)| normalize(r, f))
                .collect(),
            b: self
                .emit
                .iter()
                .zip(&prev.b)
                .map(|(r, f)| normalize(r, f))
                .collect(),
        };
        next.apply_floor(floor);
        next
    }
}

/// Scaled forward pass. Returns the scaled alphas and the scaling constants; a zero
/// constant means the sequence is impossible under the model (and the mask).
fn forward_scaled(
    params: &HmmParams,
    seq: &[usize],
    allowed: &dyn Fn(usize, usize) -> bool,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = params.n_states;
    let mut alpha = Vec::with_capacity(seq.len());
    let mut scale = Vec::with_capacity(seq.len());
    for (t, &o) in seq.iter().enumerate() {
        let mut row = vec![0.0; n];
        for j in 0..n {
            if !allowed(t, j) {
                continue;
            }
            let prior = if t == 0 {
                params.pi[j]
            } else {
                let prev: &Vec<f64> = &alpha[t - 1];
                (0..n).map(|i| prev[i] * params.a[i][j]).sum()
            };
            row[j] = prior * params.b[j][o];
        }
        let c: f64 = row.iter().sum();
        if c > 0.0 {
            row.iter_mut().for_each(|x| *x /= c);
        }
        alpha.push(row);
        scale.push(c);
        if c <= 0.0 {
            break;
        }
    }
    (alpha, scale)
}

fn expected_counts(params: &HmmParams, sequences: &[Vec<usize>], mask: SeqMask<'_>) -> ExpectedCounts {
    let n = params.n_states;
    let mut acc = ExpectedCounts {
        pi: vec![0.0; n],
        trans: vec![vec![0.0; n]; n],
        emit: vec![vec![0.0; params.n_obs]; n],
        log_likelihood: 0.0,
    };
    for (q, seq) in sequences.iter().enumerate() {
        if seq.is_empty() {
            continue;
        }
        let allowed = |t: usize, s: usize| mask(q, t, s);
        let (alpha, scale) = forward_scaled(params, seq, &allowed);
        if scale.len() < seq.len() || scale.iter().any(|&c| c <= 0.0) {
            acc.log_likelihood = f64::NEG_INFINITY;
            continue;
        }
        acc.log_likelihood += scale.iter().map(|c| c.ln()).sum::<f64>();

        let len = seq.len();
        let mut beta = vec![vec![0.0; n]; len];
        beta[len - 1].iter_mut().for_each(|x| *x = 1.0);
        for t in (0..len - 1).rev() {
            let o = seq[t + 1];
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    if allowed(t + 1, j) {
                        s += params.a[i][j] * params.b[j][o] * beta[t + 1][j];
                    }
                }
                beta[t][i] = s / scale[t + 1];
            }
        }
        for t in 0..len {
            let o = seq[t];
            for i in 0..n {
                let g = alpha[t][i] * beta[t][i];
                if t == 0 {
                    acc.pi[i] += g;
                }
                acc.emit[i][o] += g;
            }
            if t + 1 < len {
                let o1 = seq[t + 1];
                for i in 0..n {
                    if alpha[t][i] == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        if allowed(t + 1, j) {
                            acc.trans[i][j] += alpha[t][i] * params.a[i][j] * params.b[j][o1]
                                * beta[t + 1][j]
                                / scale[t + 1];
                        }
                    }
                }
            }
        }
    }
    acc
}

/// `log p(seq | params)`; the empty sequence has log-likelihood 0.
pub fn forward_log_likelihood(params: &HmmParams, seq: &[usize]) -> Result<f64> {
    forward_log_likelihood_masked(params, seq, &|_, _| true)
}

pub fn forward_log_likelihood_masked(
    params: &HmmParams,
    seq: &[usize],
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Result<f64> {
    params.check_symbols(seq)?;
    let (_, scale) = forward_scaled(params, seq, allowed);
    if scale.len() < seq.len() || scale.iter().any(|&c| c <= 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(scale.iter().map(|c| c.ln()).sum())
}

/// Most probable state path and its joint log-probability. Ties resolve to the lowest
/// state index.
pub fn viterbi(params: &HmmParams, seq: &[usize]) -> Result<(Vec<usize>, f64)> {
    viterbi_masked(params, seq, &|_, _| true)
}

pub fn viterbi_masked(
    params: &HmmParams,
    seq: &[usize],
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Result<(Vec<usize>, f64)> {
    if seq.is_empty() {
        return Err(Error::invalid("Viterbi needs a non-empty sequence"));
    }
    params.check_symbols(seq)?;
    let n = params.n_states;
    let ln = |x: f64| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
    let log_a: Vec<Vec<f64>> = params.a.iter().map(|r| r.iter().map(|&x| ln(x)).collect()).collect();

    let mut delta: Vec<f64> = (0..n)
        .map(|j| {
            if allowed(0, j) {
                ln(params.pi[j]) + ln(params.b[j][seq[0]])
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(seq.len());
    for (t, &o) in seq.iter().enumerate().skip(1) {
        let mut next = vec![f64::NEG_INFINITY; n];
        let mut ptr = vec![0usize; n];
        for j in 0..n {
            if !allowed(t, j) {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..n {
                let v = delta[i] + log_a[i][j];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + ln(params.b[j][o]);
            ptr[j] = arg;
        }
        back.push(ptr);
        delta = next;
    }
    let (mut state, best) = delta
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(a, av), (i, &v)| if v > av { (i, v) } else { (a, av) });
    let mut path = vec![0; seq.len()];
    path[seq.len() - 1] = state;
    for t in (1..seq.len()).rev() {
        state = back[t - 1][state];
        path[t - 1] = state;
    }
    Ok((path, best))
}

/// Next-symbol distribution: decode the history with Viterbi, then propagate the final
/// state one step through `A` and `B`. An empty history uses the prior `pi`.
pub fn predict_next_obs(params: &HmmParams, seq: &[usize]) -> Result<Vec<f64>> {
    predict_next_obs_masked(params, seq, &|_, _| true)
}

pub fn predict_next_obs_masked(
    params: &HmmParams,
    seq: &[usize],
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Result<Vec<f64>> {
    let state_dist: Vec<f64> = if seq.is_empty() {
        params.pi.clone()
    } else {
        let (path, _) = viterbi_masked(params, seq, allowed)?;
        params.a[*path.last().expect("non-empty path")].clone()
    };
    Ok(propagate(params, &state_dist))
}

/// Viterbi recursion run forward one observation at a time. The best final state after
/// each step equals the last state of the full Viterbi path over the same prefix, so
/// rolling next-symbol prediction costs `O(N^2)` per step instead of a full decode.
#[derive(Debug, Clone)]
pub struct OnlineDecoder<'p> {
    params: &'p HmmParams,
    log_a: Vec<Vec<f64>>,
    delta: Option<Vec<f64>>,
}

impl<'p> OnlineDecoder<'p> {
    pub fn new(params: &'p HmmParams) -> Self {
        let log_a = params
            .a
            .iter()
            .map(|r| r.iter().map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }).collect())
            .collect();
        Self {
            params,
            log_a,
            delta: None,
        }
    }

    /// Consumes one symbol; `allowed(state)` masks the states that may emit it.
    pub fn step(&mut self, obs: usize, allowed: impl Fn(usize) -> bool) {
        let p = self.params;
        let ln = |x: f64| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
        let next = (0..p.n_states)
            .map(|j| {
                if !allowed(j) {
                    return f64::NEG_INFINITY;
                }
                let prior = match &self.delta {
                    None => ln(p.pi[j]),
                    Some(d) => (0..p.n_states)
                        .map(|i| d[i] + self.log_a[i][j])
                        .fold(f64::NEG_INFINITY, f64::max),
                };
                prior + ln(p.b[j][obs])
            })
            .collect();
        self.delta = Some(next);
    }

    /// Final state of the best path so far (lowest index on ties); `None` before any step.
    pub fn best_state(&self) -> Option<usize> {
        self.delta.as_ref().map(|d| {
            d.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(a, av), (i, &v)| if v > av { (i, v) } else { (a, av) })
                .0
        })
    }

    /// Next-symbol distribution given the symbols consumed so far.
    pub fn predict(&self) -> Vec<f64> {
        match self.best_state() {
            None => propagate(self.params, &self.params.pi),
            Some(s) => propagate(self.params, &self.params.a[s]),
        }
    }
}

/// `sum_j dist[j] * B[j][m]` for every symbol `m`.
pub fn propagate(params: &HmmParams, dist: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; params.n_obs];
    for (j, &w) in dist.iter().enumerate() {
        for (m, o) in out.iter_mut().enumerate() {
            *o += w * params.b[j][m];
        }
    }
    out
}

/// Draws a state path and observation sequence of length `len`.
pub fn sample(params: &HmmParams, len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |row: &[f64]| -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        row.len() - 1
    };
    let mut states: Vec<usize> = Vec::with_capacity(len);
    let mut obs = Vec::with_capacity(len);
    for t in 0..len {
        let s = if t == 0 { pick(&params.pi) } else { pick(params.a[states[t - 1]].as_slice()) };
        states.push(s);
        obs.push(pick(params.b[s].as_slice()));
    }
    (states, obs)
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_seq(n_obs: usize, len: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(0..n_obs)).collect()
    }

    fn assert_stochastic(p: &HmmParams, floor: f64) {
        p.validate().unwrap();
        for row in p.a.iter().chain(&p.b).chain(std::iter::once(&p.pi)) {
            assert!(row.iter().all(|&x| x >= floor * 0.5), "{row:?}");
        }
    }

    fn assert_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood fell from {} to {}", w[0], w[1]);
        }
    }

    #[test]
    fn one_state_closed_form() {
        let out = baum_welch(&[vec![0, 0, 1]], 1, 2, &TrainConfig::default()).unwrap();
        assert_eq!(out.params.pi, vec![1.0]);
        assert_eq!(out.params.a, vec![vec![1.0]]);
        assert_abs_diff_eq!(out.params.b[0][0], 2.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.params.b[0][1], 1.0 / 3.0, epsilon = 1e-9);
        assert_monotone(&out.trace);
    }

    #[test]
    fn constant_sequence_concentrates_emissions() {
        for n in 1..=4 {
            let cfg = TrainConfig::default().with_seed(n as u64);
            let out = baum_welch(&[vec![2, 2, 2, 2]], n, 3, &cfg).unwrap();
            assert_monotone(&out.trace);
            assert_stochastic(&out.params, cfg.floor);
            // states that can be occupied emit symbol 2 with mass 1 up to the floor
            let occupied = |j: usize| out.params.pi[j] > 1e-6;
            for j in (0..n).filter(|&j| occupied(j)) {
                assert!(out.params.b[j][2] > 1.0 - 1e-6, "{:?}", out.params.b[j]);
            }
        }
    }

    #[test]
    fn learned_model_beats_uniform_on_sampled_data() {
        let truth = HmmParams::new(
            vec![0.5, 0.5],
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]],
        )
        .unwrap();
        let (_, obs) = sample(&truth, 2000, 42);
        let out = baum_welch(&[obs.clone()], 2, 3, &TrainConfig::default().with_seed(7)).unwrap();
        assert_monotone(&out.trace);
        let learned = forward_log_likelihood(&out.params, &obs).unwrap();
        let uniform = forward_log_likelihood(&HmmParams::uniform(2, 3), &obs).unwrap();
        assert!(learned >= uniform, "{learned} < {uniform}");
        assert_abs_diff_eq!(learned, out.log_likelihood, epsilon = 1e-6);
    }

    #[test]
    fn multi_sequence_training_pools_counts() {
        let seqs = vec![vec![0, 1, 0, 1], vec![1, 1], vec![], vec![0]];
        let out = baum_welch(&seqs, 2, 2, &TrainConfig::default()).unwrap();
        assert_monotone(&out.trace);
        let total: f64 = seqs.iter().map(|s| forward_log_likelihood(&out.params, s).unwrap()).sum();
        assert_abs_diff_eq!(total, out.log_likelihood, epsilon = 1e-6);
    }

    #[test]
    fn training_errors() {
        let cfg = TrainConfig::default();
        assert!(baum_welch(&[], 2, 2, &cfg).is_err());
        assert!(baum_welch(&[vec![]], 2, 2, &cfg).is_err());
        assert!(baum_welch(&[vec![0, 5]], 2, 2, &cfg).is_err());
        let bad = TrainConfig { tolerance: 0.0, ..cfg };
        assert!(matches!(baum_welch(&[vec![0]], 1, 1, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn restarts_keep_the_most_likely_run() {
        for seed in 0..10u64 {
            let seqs: Vec<Vec<usize>> = (0..3).map(|i| random_seq(4, 30, seed * 7 + i)).collect();
            let one = TrainConfig::default().with_seed(seed);
            let single = baum_welch(&seqs, 3, 4, &one).unwrap();
            let again = baum_welch(&seqs, 3, 4, &TrainConfig { restarts: 1, ..one.clone() }).unwrap();
            assert_eq!(single.params, again.params);
            let many = baum_welch(&seqs, 3, 4, &TrainConfig { restarts: 5, ..one.clone() }).unwrap();
            assert!(many.log_likelihood >= single.log_likelihood);
        }
        let zero = TrainConfig { restarts: 0, ..TrainConfig::default() };
        assert!(matches!(baum_welch(&[vec![0]], 1, 1, &zero), Err(Error::Config(_))));
    }

    #[test]
    fn em_monotone_on_random_runs() {
        for seed in 0..40u64 {
            let n = 1 + (seed % 4) as usize;
            let m = 2 + (seed % 5) as usize;
            let seqs: Vec<Vec<usize>> =
                (0..3).map(|i| random_seq(m, 10 + 20 * i, seed * 31 + i as u64)).collect();
            let cfg = TrainConfig::default().with_seed(seed);
            let out = baum_welch(&seqs, n, m, &cfg).unwrap();
            assert_monotone(&out.trace);
            assert_stochastic(&out.params, cfg.floor);
        }
    }

    #[test]
    fn single_state_likelihood() {
        let p = HmmParams::new(vec![1.0], vec![vec![1.0]], vec![vec![0.3, 0.7]]).unwrap();
        assert_abs_diff_eq!(
            forward_log_likelihood(&p, &[0, 1]).unwrap(),
            (0.3f64 * 0.7).ln(),
            epsilon = 1e-12
        );
        assert_eq!(forward_log_likelihood(&p, &[]).unwrap(), 0.0);
        assert!(forward_log_likelihood(&p, &[2]).is_err());
    }

    #[test]
    fn forward_and_viterbi_match_enumeration() {
        for seed in 0..200u64 {
            let n = 1 + (seed % 4) as usize;
            let m = 2 + (seed % 3) as usize;
            let t = 1 + (seed % 8) as usize;
            let p = HmmParams::random(n, m, seed);
            let seq = random_seq(m, t, seed + 1000);
            let ll = forward_log_likelihood(&p, &seq).unwrap();
            assert_abs_diff_eq!(ll, oracle::likelihood(&p, &seq).ln(), epsilon = 1e-9);
            let (path, lp) = viterbi(&p, &seq).unwrap();
            let best = oracle::best_path_prob(&p, &seq).ln();
            assert_abs_diff_eq!(lp, best, epsilon = 1e-9);
            assert_abs_diff_eq!(oracle::path_prob(&p, &path, &seq).ln(), best, epsilon = 1e-9);
        }
    }

    #[test]
    fn long_sequences_do_not_underflow() {
        let p = HmmParams::random(3, 4, 9);
        let seq = random_seq(4, 200_000, 3);
        let ll = forward_log_likelihood(&p, &seq).unwrap();
        assert!(ll.is_finite() && ll < 0.0);
    }

    #[test]
    fn viterbi_trivial_cases() {
        let one = HmmParams::random(1, 3, 1);
        let (path, _) = viterbi(&one, &[0, 2, 1, 1]).unwrap();
        assert_eq!(path, vec![0; 4]);
        assert!(viterbi(&one, &[]).is_err());

        // emissions are a permutation: state s emits symbol (s + 1) % 3
        let perm = HmmParams::new(
            vec![1.0 / 3.0; 3],
            vec![vec![1.0 / 3.0; 3]; 3],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
        )
        .unwrap();
        let (path, _) = viterbi(&perm, &[1, 2, 0, 0, 2]).unwrap();
        assert_eq!(path, vec![0, 1, 2, 2, 1]);
    }

    #[test]
    fn prediction_cases() {
        let one = HmmParams::random(1, 4, 5);
        let pred = predict_next_obs(&one, &[1, 2, 3]).unwrap();
        for (a, b) in pred.iter().zip(&one.b[0]) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        // identity transitions: history decodes to state 1, prediction is B[1]
        let absorbing = HmmParams::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.1, 0.8]],
        )
        .unwrap();
        let pred = predict_next_obs(&absorbing, &[2, 2, 0]).unwrap();
        assert_eq!(pred, absorbing.b[1]);

        // empty history uses the prior
        let p = HmmParams::random(3, 2, 8);
        let prior = predict_next_obs(&p, &[]).unwrap();
        let expect: Vec<f64> = (0..2).map(|m| (0..3).map(|i| p.pi[i] * p.b[i][m]).sum()).collect();
        assert_eq!(prior, expect);
    }

    #[test]
    fn prediction_hand_trace() {
        // N=2, T=4. Viterbi by hand (log-free, products):
        // t0: d0 = .6*.9 = .54, d1 = .4*.2 = .08          (obs 0)
        // t1: d0 = max(.54*.7, .08*.4)*.1 = .0378          (obs 1)
        //     d1 = max(.54*.3, .08*.6)*.8 = .1296
        // t2: d0 = max(.0378*.7, .1296*.4)*.1 = .005184
        //     d1 = max(.0378*.3, .1296*.6)*.8 = .062208     (obs 1)
        // t3: d0 = max(.005184*.7, .062208*.4)*.9 = .02239488
        //     d1 = max(.005184*.3, .062208*.6)*.2 = .00746496 (obs 0)
        // final state 0 -> next state dist A[0] = (.7,.3)
        // p(obs0) = .7*.9 + .3*.2 = .69, p(obs1) = .7*.1 + .3*.8 = .31
        let p = HmmParams::new(
            vec![0.6, 0.4],
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        )
        .unwrap();
        let (path, lp) = viterbi(&p, &[0, 1, 1, 0]).unwrap();
        assert_eq!(*path.last().unwrap(), 0);
        assert_abs_diff_eq!(lp, 0.02239488f64.ln(), epsilon = 1e-12);
        let pred = predict_next_obs(&p, &[0, 1, 1, 0]).unwrap();
        assert_abs_diff_eq!(pred[0], 0.69, epsilon = 1e-12);
        assert_abs_diff_eq!(pred[1], 0.31, epsilon = 1e-12);
    }

    #[test]
    fn online_decoder_agrees_with_full_viterbi() {
        for seed in 0..50u64 {
            let p = HmmParams::random(1 + (seed % 5) as usize, 4, seed);
            let seq = random_seq(4, 25, seed + 77);
            let mut online = OnlineDecoder::new(&p);
            assert_eq!(online.predict(), predict_next_obs(&p, &[]).unwrap());
            for t in 0..seq.len() {
                online.step(seq[t], |_| true);
                let (path, _) = viterbi(&p, &seq[..=t]).unwrap();
                assert_eq!(online.best_state(), path.last().copied());
                assert_eq!(online.predict(), predict_next_obs(&p, &seq[..=t]).unwrap());
            }
        }
    }

    #[test]
    fn masked_viterbi_respects_mask() {
        let p = HmmParams::random(4, 3, 2);
        let seq = random_seq(3, 6, 4);
        let (path, _) = viterbi_masked(&p, &seq, &|t, s| s % 2 == t % 2).unwrap();
        for (t, s) in path.iter().enumerate() {
            assert_eq!(s % 2, t % 2);
        }
    }

    #[test]
    fn json_round_trip() {
        let p = HmmParams::random(3, 5, 11);
        let back = HmmParams::from_json(&p.to_json().unwrap()).unwrap();
        for (x, y) in p.a.iter().flatten().zip(back.a.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in p.b.iter().flatten().zip(back.b.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12);
        }
        let doc: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        for key in ["n_states", "n_obs", "pi", "A", "B"] {
            assert!(doc.get(key).is_some(), "missing {key}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn relabeling_states_preserves_likelihood(seed in 0u64..10_000, len in 0usize..30) {
            let p = HmmParams::random(4, 3, seed);
            let seq = random_seq(3, len, seed ^ 0x55);
            let perm = [2, 0, 3, 1];
            let a = forward_log_likelihood(&p, &seq).unwrap();
            let b = forward_log_likelihood(&p.permuted(&perm), &seq).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
