//! Classical post-processing end to end: actively-odd-parity pairing,
//! decoy-state bounds on the surviving untagged bits and their phase-flip
//! error, the finite-key secure rate, the repeaterless capacity bound, and
//! source-parameter optimization.
//!
//! All count bounds carry Chernoff-style statistical fluctuation
//! allowances at the configured failure probability; the decoy and AOPP
//! propagation inequalities are documented inline and validated against
//! simulator ground truth by the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{expected_counts, ExpectedCounts};
use crate::protocol::{shannon_entropy, IntensityLabel, SimConditions, SourceParams};
use crate::rng::{derive_stream, StreamRole};

/// Effective-event and sent-pulse counts per two-pulse source, plus the
/// phase-accepted xx statistics feeding the phase-flip bound. Counts are
/// f64 so the expected-value mode can carry fractional expectations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CountTable {
    /// effective[l][r]: effective events with Alice's source l, Bob's r.
    pub effective: [[f64; 4]; 4],
    /// sent[l][r]: pulse pairs sent from source pair (l, r).
    pub sent: [[f64; 4]; 4],
    /// xx windows whose encoding passed the acceptance band.
    pub accepted_xx_windows: f64,
    /// Effective events among accepted xx windows.
    pub accepted_xx_effective: f64,
    /// Wrong-detector outcomes among those.
    pub accepted_xx_errors: f64,
}

impl CountTable {
    pub fn get(&self, l: IntensityLabel, r: IntensityLabel) -> f64 {
        self.effective[l.index()][r.index()]
    }

    /// Bob's 0-class size: Bob sent (y or z), Alice in {v, y, z}.
    pub fn bob_zero_count(&self) -> f64 {
        use IntensityLabel::*;
        [V, Y, Z]
            .iter()
            .flat_map(|&l| [Y, Z].iter().map(move |&r| self.get(l, r)))
            .sum()
    }

    /// Bob's 1-class size: Bob chose v, Alice in {v, y, z}.
    pub fn bob_one_count(&self) -> f64 {
        use IntensityLabel::*;
        [V, Y, Z].iter().map(|&l| self.get(l, V)).sum()
    }

    /// Both-send effective events (the Z-basis error class on Bob's 0s).
    pub fn both_send_count(&self) -> f64 {
        use IntensityLabel::*;
        [Y, Z]
            .iter()
            .flat_map(|&l| [Y, Z].iter().map(move |&r| self.get(l, r)))
            .sum()
    }

    /// Sum over l,r in {y,z} of n_lr, as it appears in the key-length
    /// overhead term.
    pub fn sum_yz(&self) -> f64 {
        self.both_send_count()
    }

    /// Build the expectation table of `n` windows from the analytic model.
    /// `qber_x_override` replaces the modeled X error rate (used when
    /// reproducing operating points quoted with a measured QBER_X).
    pub fn from_expected(exp: &ExpectedCounts, n: f64, qber_x_override: Option<f64>) -> CountTable {
        let mut t = CountTable::default();
        for l in 0..4 {
            for r in 0..4 {
                t.sent[l][r] = n * exp.pair_prob[l][r];
                t.effective[l][r] = t.sent[l][r] * exp.yield_lr[l][r];
            }
        }
        let xx = IntensityLabel::X.index();
        t.accepted_xx_windows = t.sent[xx][xx] * exp.accepted_fraction;
        t.accepted_xx_effective = t.accepted_xx_windows * exp.accepted_yield;
        let qx = qber_x_override.unwrap_or(exp.qber_x);
        t.accepted_xx_errors = t.accepted_xx_effective * qx;
        t
    }
}

/// Failure-probability budget. The total epsilon is split equally among
/// error correction, privacy amplification, the entropy chain rule and the
/// Chernoff bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityParams {
    pub eps_cor: f64,
    pub eps_pa: f64,
    pub eps_hat: f64,
    pub eps_chernoff: f64,
    pub f: f64,
}

impl SecurityParams {
    pub fn from_total(epsilon: f64, f: f64) -> SecurityParams {
        let each = epsilon / 4.0;
        SecurityParams {
            eps_cor: each,
            eps_pa: each,
            eps_hat: each,
            eps_chernoff: each,
            f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, e) in [
            ("eps_cor", self.eps_cor),
            ("eps_pa", self.eps_pa),
            ("eps_hat", self.eps_hat),
            ("eps_chernoff", self.eps_chernoff),
        ] {
            if !(0.0..1.0).contains(&e) || e == 0.0 {
                return Err(Error::config(format!("{name} = {e} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Upper confidence bound on the expectation of a Poisson-like count given
/// the observation `n`: inverts the multiplicative Chernoff tail at
/// failure probability `eps`.
pub fn chernoff_upper(n: f64, eps: f64) -> f64 {
    let beta = (1.0 / eps).ln();
    n + beta + (2.0 * beta * n + beta * beta).sqrt()
}

/// Lower confidence bound companion of [`chernoff_upper`].
pub fn chernoff_lower(n: f64, eps: f64) -> f64 {
    let beta = (1.0 / eps).ln();
    (n - (2.0 * beta * n).sqrt()).max(0.0)
}

/// Decoy-state bounds derived from the count table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecoyBounds {
    /// Lower bound on the single-photon yield.
    pub y1_lower: f64,
    /// Lower bound on untagged bits (before pairing) in Bob's 0-class.
    pub n_u0_lower: f64,
    /// Lower bound on untagged bits (before pairing) in Bob's 1-class.
    pub n_u1_lower: f64,
    /// n_u0 + n_u1.
    pub n1_before: f64,
    /// Upper bound on the untagged phase-flip error rate before pairing.
    pub e1ph_before: f64,
}

/// Standard four-intensity decoy analysis with Chernoff fluctuations.
///
/// With the other side in vacuum, the counting rates of the v/x/y sources
/// expand in the photon-number yields as `S_mu = sum_k e^-mu mu^k/k! Y_k`.
/// The combination
///
/// ```text
/// Y1 >= [mu_y^2 (e^mu_x S_x - S_0) - mu_x^2 (e^mu_y S_y - S_0)]
///       / (mu_x mu_y (mu_y - mu_x))
/// ```
///
/// cancels the two-photon term exactly and drops only non-positive
/// higher-order contributions (mu_x < mu_y), so it lower-bounds Y1. The
/// fluctuation directions (S_x down, S_y up, S_0 up) keep the bound
/// one-sided. The phase-flip bound uses the accepted-xx error counting
/// rate `T`: `T >= e^{-2 mu_x} (Y_0 / 2 + 2 mu_x Y_1 e1ph)` - vacuum dark
/// clicks err half the time, the single-photon pair component errs at the
/// phase-flip rate.
pub fn decoy_bounds(
    table: &CountTable,
    params: &SourceParams,
    _cond: &SimConditions,
    sec: &SecurityParams,
) -> DecoyBounds {
    use IntensityLabel::*;
    let eps = sec.eps_chernoff;

    let rate = |l: IntensityLabel, r: IntensityLabel| -> (f64, f64) {
        (
            table.effective[l.index()][r.index()],
            table.sent[l.index()][r.index()],
        )
    };

    // Pool the two symmetric orientations of each one-sided source pair.
    let (nx, sx) = {
        let (a, sa) = rate(V, X);
        let (b, sb) = rate(X, V);
        (a + b, sa + sb)
    };
    let (ny, sy) = {
        let (a, sa) = rate(V, Y);
        let (b, sb) = rate(Y, V);
        (a + b, sa + sb)
    };
    let (nv, sv) = rate(V, V);

    if sx <= 0.0 || sy <= 0.0 || sv <= 0.0 {
        return DecoyBounds {
            y1_lower: 0.0,
            n_u0_lower: 0.0,
            n_u1_lower: 0.0,
            n1_before: 0.0,
            e1ph_before: 0.5,
        };
    }

    let s_x_low = chernoff_lower(nx, eps) / sx;
    let s_y_up = chernoff_upper(ny, eps) / sy;
    let s_0_up = chernoff_upper(nv, eps) / sv;
    let s_0_low = chernoff_lower(nv, eps) / sv;

    let (mu_x, mu_y) = (params.mu_x, params.mu_y);
    let numerator = mu_y * mu_y * (mu_x.exp() * s_x_low - s_0_up)
        - mu_x * mu_x * (mu_y.exp() * s_y_up - s_0_up);
    let y1_lower = (numerator / (mu_x * mu_y * (mu_y - mu_x))).max(0.0);

    // Untagged windows: one side vacuum, the other side's pulse containing
    // exactly one photon. Sources are symmetric, so both orientations
    // carry the same expectation.
    let n_total: f64 = table.sent.iter().flatten().sum();
    let p_single_send = params.p_y * params.mu_y * (-params.mu_y).exp()
        + params.p_z * params.mu_z * (-params.mu_z).exp();
    let untagged_windows_each = n_total * params.p_v() * p_single_send;
    let n_u0_lower = untagged_windows_each * y1_lower;
    let n_u1_lower = untagged_windows_each * y1_lower;

    let e1ph_before = if table.accepted_xx_windows > 0.0 && y1_lower > 0.0 {
        let t_up = chernoff_upper(table.accepted_xx_errors, eps) / table.accepted_xx_windows;
        let atten = (-2.0 * mu_x).exp();
        let num = t_up - 0.5 * atten * s_0_low;
        let den = 2.0 * mu_x * atten * y1_lower;
        (num / den).clamp(0.0, 0.5)
    } else {
        0.5
    };

    DecoyBounds {
        y1_lower,
        n_u0_lower,
        n_u1_lower,
        n1_before: n_u0_lower + n_u1_lower,
        e1ph_before,
    }
}

/// Outcome of running the pairing on actual raw keys.
#[derive(Debug, Clone)]
pub struct AoppOutcome {
    /// Pairs formed (min of Bob's 0- and 1-class sizes).
    pub pairs_formed: u64,
    /// Pairs surviving the parity comparison.
    pub n_t: u64,
    /// Bit-flip error rate among survivors (against ground truth).
    pub e_t: f64,
    /// Surviving key bits on each side (one bit per surviving pair).
    pub bits_a: Vec<u8>,
    pub bits_b: Vec<u8>,
    /// Index pairs (into the raw keys) of the survivors.
    pub survivors: Vec<(usize, usize)>,
}

/// Actively-odd-parity pairing: Bob pairs each of his 0-bits with a random
/// 1-bit, both sides compare pair parities, and pairs with disagreeing
/// parities are rejected. Each surviving pair contributes the bit of its
/// first member.
pub fn aopp(bits_a: &[u8], bits_b: &[u8], seed: u64) -> Result<AoppOutcome> {
    if bits_a.len() != bits_b.len() {
        return Err(Error::Pipeline(format!(
            "raw keys differ in length: {} vs {}",
            bits_a.len(),
            bits_b.len()
        )));
    }
    let mut zeros: Vec<usize> = Vec::new();
    let mut ones: Vec<usize> = Vec::new();
    for (i, &b) in bits_b.iter().enumerate() {
        if b == 0 {
            zeros.push(i);
        } else {
            ones.push(i);
        }
    }
    if zeros.is_empty() || ones.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "pairing needs both bit values in Bob's key ({} zeros, {} ones)",
            zeros.len(),
            ones.len()
        )));
    }
    let mut rng = derive_stream(seed, StreamRole::Aopp, 0);
    shuffle(&mut zeros, &mut rng);
    shuffle(&mut ones, &mut rng);
    let n_pairs = zeros.len().min(ones.len());

    let mut survivors = Vec::new();
    let mut bits_a_out = Vec::new();
    let mut bits_b_out = Vec::new();
    let mut errors = 0u64;
    for k in 0..n_pairs {
        let (i, j) = (zeros[k], ones[k]);
        let parity_a = bits_a[i] ^ bits_a[j];
        let parity_b = bits_b[i] ^ bits_b[j]; // 1 by construction
        if parity_a != parity_b {
            continue;
        }
        survivors.push((i, j));
        bits_a_out.push(bits_a[i]);
        bits_b_out.push(bits_b[i]);
        if bits_a[i] != bits_b[i] {
            errors += 1;
        }
    }
    let n_t = survivors.len() as u64;
    Ok(AoppOutcome {
        pairs_formed: n_pairs as u64,
        n_t,
        e_t: errors as f64 / n_t.max(1) as f64,
        bits_a: bits_a_out,
        bits_b: bits_b_out,
        survivors,
    })
}

fn shuffle(v: &mut [usize], rng: &mut impl rand::Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Post-pairing quantities entering the key-rate formula.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AoppResult {
    /// Survived bits.
    pub n_t: f64,
    /// Bit-flip error rate among survivors.
    pub e_t: f64,
    /// Lower bound on survived untagged bits.
    pub n1: f64,
    /// Upper bound on the survived untagged phase-flip error rate.
    pub e1_ph: f64,
}

/// Propagate the decoy bounds through the pairing.
///
/// A pair of two untagged events always survives: untagged events carry
/// agreeing bits on both sides (exactly one terminal sent), so the pair
/// parities match automatically. The expected number of untagged pairs
/// under random 0-1 pairing is `pairs * (n_u0/n0) * (n_u1/n1)`, reduced by
/// a Chernoff-style concentration allowance. The surviving bit of an
/// untagged pair inherits a phase flip when exactly one member is flipped:
/// `e1' = 2 e (1 - e)`.
pub fn propagate_aopp_bounds(
    decoy: &DecoyBounds,
    n0: f64,
    n1: f64,
    n_t: f64,
    e_t: f64,
    sec: &SecurityParams,
) -> AoppResult {
    let pairs = n0.min(n1);
    let n1_after = if pairs > 0.0 && n0 > 0.0 && n1 > 0.0 {
        let mean_uu = pairs * (decoy.n_u0_lower / n0).min(1.0) * (decoy.n_u1_lower / n1).min(1.0);
        chernoff_lower(mean_uu, sec.eps_chernoff).min(n_t)
    } else {
        0.0
    };
    let e = decoy.e1ph_before;
    AoppResult {
        n_t,
        e_t,
        n1: n1_after,
        e1_ph: (2.0 * e * (1.0 - e)).clamp(0.0, 0.5),
    }
}

/// Key-rate evaluation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyRateOutput {
    /// Secure key rate per pulse pair (clamped at 0).
    pub rate: f64,
    /// Secure key length in bits before clamping.
    pub key_bits: f64,
    pub clamped: bool,
    pub diagnostics: Vec<String>,
}

/// Finite-key secure rate:
///
/// ```text
/// R = (1/N) { n1 [1 - H(e1ph)] - f n_t H(E_t) }
///   - (1/N) [ 2 log2(2/eps_cor) + 4 log2(1/(sqrt(2) eps_PA eps_hat))
///             + 2 log2(n_t - sum_{l,r=y,z} n_lr) ]
/// ```
///
/// When the last logarithm's argument is non-positive (which happens at
/// realistic operating points because the both-send classes outnumber the
/// survivors), the conservative larger argument n_t is substituted and a
/// diagnostic recorded; a non-positive n_t yields rate 0.
pub fn key_rate(
    aopp: &AoppResult,
    table: &CountTable,
    sec: &SecurityParams,
    n_total: f64,
) -> Result<KeyRateOutput> {
    sec.validate()?;
    let mut diagnostics = Vec::new();
    if n_total < 1.0 {
        return Err(Error::config("total pulse pairs must be >= 1".to_string()));
    }
    if aopp.n_t <= 1.0 {
        return Ok(KeyRateOutput {
            rate: 0.0,
            key_bits: 0.0,
            clamped: true,
            diagnostics: vec!["no surviving bits after pairing".to_string()],
        });
    }
    let h1 = shannon_entropy(aopp.e1_ph.clamp(0.0, 0.5))?;
    let ht = shannon_entropy(aopp.e_t.clamp(0.0, 1.0))?;
    let mut log_arg = aopp.n_t - table.sum_yz();
    if log_arg <= 1.0 {
        diagnostics.push(format!(
            "n_t - sum_yz = {log_arg:.1} <= 0; substituting n_t in the log term"
        ));
        log_arg = aopp.n_t;
    }
    let overhead = 2.0 * (2.0 / sec.eps_cor).log2()
        + 4.0 * (1.0 / (std::f64::consts::SQRT_2 * sec.eps_pa * sec.eps_hat)).log2()
        + 2.0 * log_arg.log2();
    let key_bits = aopp.n1 * (1.0 - h1) - sec.f * aopp.n_t * ht - overhead;
    let clamped = key_bits < 0.0;
    if clamped {
        diagnostics.push(format!("negative key length {key_bits:.1} clamped to 0"));
    }
    Ok(KeyRateOutput {
        rate: (key_bits / n_total).max(0.0),
        key_bits,
        clamped,
        diagnostics,
    })
}

/// Repeaterless secret-key capacity bound `-log2(1 - eta)` for end-to-end
/// transmittance `eta`.
pub fn plob_bound(eta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eta) || eta == 0.0 {
        return Err(Error::domain(format!("transmittance {eta} outside (0, 1)")));
    }
    // ln_1p keeps full precision at the small transmittances of interest.
    Ok(-(-eta).ln_1p() / std::f64::consts::LN_2)
}

/// Full analytic evaluation of one operating point: expected counts ->
/// decoy bounds -> pairing expectations -> key rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpectedEvaluation {
    pub table: CountTable,
    pub qber_z: f64,
    pub qber_x: f64,
    pub decoy: DecoyBounds,
    pub pairs_formed: f64,
    pub aopp: AoppResult,
    pub output: KeyRateOutput,
}

/// Evaluate the expected key rate of an operating point analytically.
/// `qber_x_override` injects a measured X error rate in place of the
/// modeled one.
pub fn expected_key_rate(
    params: &SourceParams,
    cond: &SimConditions,
    lambda: f64,
    sigma_phase: f64,
    qber_x_override: Option<f64>,
) -> Result<ExpectedEvaluation> {
    let sec = SecurityParams::from_total(cond.epsilon, cond.f);
    let exp = expected_counts(params, cond, lambda, sigma_phase);
    let table = CountTable::from_expected(&exp, cond.n_pairs, qber_x_override);
    let decoy = decoy_bounds(&table, params, cond, &sec);

    // Expected pairing outcome from the class composition: errors on Bob's
    // 0s are the both-send events, errors on his 1s the both-vacuum ones.
    let n0 = table.bob_zero_count();
    let n1 = table.bob_one_count();
    let pairs = n0.min(n1);
    let eps0 = if n0 > 0.0 { table.both_send_count() / n0 } else { 0.0 };
    let eps1 = if n1 > 0.0 {
        table.get(IntensityLabel::V, IntensityLabel::V) / n1
    } else {
        0.0
    };
    let survival = eps0 * eps1 + (1.0 - eps0) * (1.0 - eps1);
    let n_t = pairs * survival;
    let e_t = if survival > 0.0 { eps0 * eps1 / survival } else { 0.0 };

    let aopp = propagate_aopp_bounds(&decoy, n0, n1, n_t, e_t, &sec);
    let output = key_rate(&aopp, &table, &sec, cond.n_pairs)?;
    Ok(ExpectedEvaluation {
        table,
        qber_z: exp.qber_z,
        qber_x: qber_x_override.unwrap_or(exp.qber_x),
        decoy,
        pairs_formed: pairs,
        aopp,
        output,
    })
}

/// Optimizer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lambda: f64,
    pub sigma_phase: f64,
    pub n_starts: usize,
    pub initial_step: f64,
    pub min_step: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lambda: 0.07,
            sigma_phase: 0.05,
            n_starts: 4,
            initial_step: 0.25,
            min_step: 1e-3,
            seed: 1,
        }
    }
}

fn objective(v: &[f64; 6], cond: &SimConditions, cfg: &OptimizerConfig) -> f64 {
    let params = SourceParams {
        mu_x: v[0],
        mu_y: v[1],
        mu_z: v[2],
        p_x: v[3],
        p_y: v[4],
        p_z: v[5],
    };
    if params.validate().is_err() || params.p_v() <= 0.0 {
        return f64::NEG_INFINITY;
    }
    match expected_key_rate(&params, cond, cfg.lambda, cfg.sigma_phase, None) {
        Ok(eval) => eval.output.rate,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Maximize the expected key rate over the source intensities and
/// selection probabilities by multi-start coordinate descent with
/// shrinking multiplicative steps. Deterministic given the seed; returns
/// the best parameters found and their rate.
pub fn optimize_source_params(
    cond: &SimConditions,
    cfg: &OptimizerConfig,
) -> Result<(SourceParams, f64)> {
    cond.validate()?;
    let reference = SourceParams::default();
    let mut starts: Vec<[f64; 6]> = vec![[
        reference.mu_x,
        reference.mu_y,
        reference.mu_z,
        reference.p_x,
        reference.p_y,
        reference.p_z,
    ]];
    let mut rng = derive_stream(cfg.seed, StreamRole::Optimizer, 0);
    use rand::Rng;
    while starts.len() < cfg.n_starts {
        let mut scale =
            |x: f64, lo: f64, hi: f64| -> f64 { (x * (0.5 + rng.random::<f64>())).clamp(lo, hi) };
        let s = [
            scale(reference.mu_x, 1e-3, 0.2),
            scale(reference.mu_y, 0.05, 1.0),
            scale(reference.mu_z, 0.05, 1.5),
            scale(reference.p_x, 1e-3, 0.4),
            scale(reference.p_y, 1e-3, 0.4),
            scale(reference.p_z, 1e-3, 0.4),
        ];
        starts.push(s);
    }

    let mut best_v = starts[0];
    let mut best_val = f64::NEG_INFINITY;
    for start in starts {
        let (v, val) = coordinate_descent(start, cond, cfg);
        if val > best_val {
            best_val = val;
            best_v = v;
        }
    }
    if !best_val.is_finite() {
        return Err(Error::Estimation(
            "optimizer found no feasible point".to_string(),
        ));
    }
    let params = SourceParams {
        mu_x: best_v[0],
        mu_y: best_v[1],
        mu_z: best_v[2],
        p_x: best_v[3],
        p_y: best_v[4],
        p_z: best_v[5],
    };
    Ok((params, best_val))
}

fn coordinate_descent(
    mut v: [f64; 6],
    cond: &SimConditions,
    cfg: &OptimizerConfig,
) -> ([f64; 6], f64) {
    let mut val = objective(&v, cond, cfg);
    let mut step = cfg.initial_step;
    while step > cfg.min_step {
        let mut improved = false;
        for i in 0..6 {
            for factor in [1.0 + step, 1.0 / (1.0 + step)] {
                let mut candidate = v;
                candidate[i] = v[i] * factor;
                let c_val = objective(&candidate, cond, cfg);
                if c_val > val {
                    v = candidate;
                    val = c_val;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (v, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn sec() -> SecurityParams {
        SecurityParams::from_total(1e-10, 1.16)
    }

    #[test]
    fn chernoff_bounds_bracket_observation() {
        for n in [0.0, 10.0, 1e4, 1e9] {
            let lo = chernoff_lower(n, 1e-10);
            let hi = chernoff_upper(n, 1e-10);
            assert!(lo <= n && n <= hi, "n = {n}: [{lo}, {hi}]");
        }
    }

    #[test]
    fn chernoff_monotone_in_epsilon() {
        // Shrinking epsilon loosens both bounds.
        let n = 1e6;
        let mut prev_lo = f64::INFINITY;
        let mut prev_hi = f64::NEG_INFINITY;
        for eps in [1e-3, 1e-6, 1e-10, 1e-15] {
            let lo = chernoff_lower(n, eps);
            let hi = chernoff_upper(n, eps);
            assert!(lo < prev_lo);
            assert!(hi > prev_hi);
            prev_lo = lo;
            prev_hi = hi;
        }
    }

    #[test]
    fn chernoff_coverage_on_poisson_draws() {
        use rand_distr::{Distribution, Poisson};
        let mut rng = derive_stream(4, StreamRole::Replica, 0);
        let mean = 500.0;
        let mut covered = 0;
        let n_rep = 2000;
        for _ in 0..n_rep {
            let n: f64 = Poisson::new(mean).unwrap().sample(&mut rng);
            if chernoff_lower(n, 1e-6) <= mean && mean <= chernoff_upper(n, 1e-6) {
                covered += 1;
            }
        }
        assert_eq!(covered, n_rep, "bounds must cover the truth at eps=1e-6");
    }

    #[test]
    fn aopp_error_free_keys() {
        let bits_b: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
        let bits_a = bits_b.clone();
        let out = aopp(&bits_a, &bits_b, 7).unwrap();
        assert_eq!(out.n_t, out.pairs_formed);
        assert_eq!(out.e_t, 0.0);
        assert_eq!(out.pairs_formed, 5000);
    }

    #[test]
    fn aopp_survivors_bounded_by_class_sizes() {
        let mut rng = derive_stream(11, StreamRole::Replica, 1);
        let bits_b: Vec<u8> = (0..5000).map(|_| (rng.random::<f64>() < 0.3) as u8).collect();
        let bits_a: Vec<u8> = bits_b
            .iter()
            .map(|&b| if rng.random::<f64>() < 0.2 { 1 - b } else { b })
            .collect();
        let zeros = bits_b.iter().filter(|&&b| b == 0).count() as u64;
        let ones = bits_b.len() as u64 - zeros;
        let out = aopp(&bits_a, &bits_b, 3).unwrap();
        assert!(out.n_t <= zeros.min(ones));
        assert_eq!(out.pairs_formed, zeros.min(ones));
    }

    #[test]
    fn aopp_uniform_errors_match_conditional_parity_oracle() {
        // Independent oracle: enumerate the pair outcome table. With
        // uniform errors at rate E on both members, a pair survives iff
        // both or neither member is flipped, and survivors err iff both:
        //   E_t = E^2 / (E^2 + (1-E)^2).
        let e = 0.1;
        let n = 400_000usize;
        let mut rng = derive_stream(21, StreamRole::Replica, 2);
        let bits_b: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let bits_a: Vec<u8> = bits_b
            .iter()
            .map(|&b| if rng.random::<f64>() < e { 1 - b } else { b })
            .collect();
        let out = aopp(&bits_a, &bits_b, 5).unwrap();
        let survival = e * e + (1.0 - e) * (1.0 - e);
        let predicted_et = e * e / survival;
        let sigma_nt = ((n as f64 / 2.0) * survival * (1.0 - survival)).sqrt();
        assert!(
            (out.n_t as f64 - n as f64 / 2.0 * survival).abs() < 3.0 * sigma_nt,
            "n_t = {}",
            out.n_t
        );
        let sigma_et = (predicted_et * (1.0 - predicted_et) / out.n_t as f64).sqrt();
        assert!(
            (out.e_t - predicted_et).abs() < 3.0 * sigma_et,
            "e_t = {} vs {predicted_et}",
            out.e_t
        );
    }

    #[test]
    fn aopp_degenerate_input() {
        let bits = vec![0u8; 100];
        assert!(matches!(
            aopp(&bits, &bits, 1),
            Err(Error::DegenerateInput(_))
        ));
    }

    fn ideal_table(params: &SourceParams, cond: &SimConditions, n: f64) -> CountTable {
        let exp = expected_counts(params, cond, 0.07, 0.0);
        CountTable::from_expected(&exp, n, None)
    }

    #[test]
    fn decoy_bound_tight_at_infinite_statistics() {
        let params = SourceParams::default();
        let cond = SimConditions {
            n_pairs: 1e18,
            ..SimConditions::default()
        };
        let table = ideal_table(&params, &cond, cond.n_pairs);
        let b = decoy_bounds(&table, &params, &cond, &sec());
        let exp = expected_counts(&params, &cond, 0.07, 0.0);
        let truth = exp.single_photon_yield;
        assert!(
            b.y1_lower <= truth * 1.0001,
            "bound {} above truth {truth}",
            b.y1_lower
        );
        assert!(
            b.y1_lower > 0.99 * truth,
            "bound {} not within 1% of truth {truth}",
            b.y1_lower
        );
    }

    #[test]
    fn decoy_all_zero_counts() {
        let params = SourceParams::default();
        let cond = SimConditions::default();
        let mut table = CountTable::default();
        for l in 0..4 {
            for r in 0..4 {
                table.sent[l][r] = 1e9;
            }
        }
        let b = decoy_bounds(&table, &params, &cond, &sec());
        assert_eq!(b.y1_lower, 0.0);
        assert_eq!(b.n1_before, 0.0);
    }

    #[test]
    fn decoy_bound_loosens_with_shrinking_epsilon() {
        let params = SourceParams::default();
        let cond = SimConditions {
            n_pairs: 1e10,
            ..SimConditions::default()
        };
        let table = ideal_table(&params, &cond, cond.n_pairs);
        let mut prev = f64::INFINITY;
        for eps in [1e-4, 1e-8, 1e-12] {
            let s = SecurityParams {
                eps_chernoff: eps,
                ..sec()
            };
            let b = decoy_bounds(&table, &params, &cond, &s);
            assert!(b.y1_lower < prev);
            prev = b.y1_lower;
        }
    }

    #[test]
    fn key_rate_zero_when_no_untagged() {
        let aopp = AoppResult {
            n_t: 1000.0,
            e_t: 0.01,
            n1: 0.0,
            e1_ph: 0.3,
        };
        let out = key_rate(&aopp, &CountTable::default(), &sec(), 1e9).unwrap();
        assert_eq!(out.rate, 0.0);
        assert!(out.clamped);
    }

    #[test]
    fn key_rate_matches_literal_formula() {
        let s = sec();
        let aopp = AoppResult {
            n_t: 2.0e6,
            e_t: 0.002,
            n1: 1.0e6,
            e1_ph: 0.14,
        };
        let mut table = CountTable::default();
        table.effective[IntensityLabel::Y.index()][IntensityLabel::Y.index()] = 5e5;
        let out = key_rate(&aopp, &table, &s, 1e12).unwrap();
        let h1 = shannon_entropy(0.14).unwrap();
        let ht = shannon_entropy(0.002).unwrap();
        let expected = (1.0e6 * (1.0 - h1)
            - s.f * 2.0e6 * ht
            - 2.0 * (2.0 / s.eps_cor).log2()
            - 4.0 * (1.0 / (std::f64::consts::SQRT_2 * s.eps_pa * s.eps_hat)).log2()
            - 2.0 * (2.0e6f64 - 5e5).log2())
            / 1e12;
        assert_abs_diff_eq!(out.rate, expected, epsilon = 1e-18);
        assert!(out.diagnostics.is_empty());
    }

    #[test]
    fn key_rate_negative_log_argument_falls_back() {
        let s = sec();
        let aopp = AoppResult {
            n_t: 1.0e4,
            e_t: 0.001,
            n1: 8.0e3,
            e1_ph: 0.1,
        };
        let mut table = CountTable::default();
        table.effective[IntensityLabel::Y.index()][IntensityLabel::Y.index()] = 5e4;
        let out = key_rate(&aopp, &table, &s, 1e9).unwrap();
        assert!(!out.diagnostics.is_empty());
        assert!(out.rate > 0.0);
    }

    #[test]
    fn rate_non_increasing_in_error_rates() {
        let s = sec();
        let table = CountTable::default();
        let mut prev = f64::INFINITY;
        for e1 in [0.0, 0.1, 0.2, 0.3, 0.4, 0.49] {
            let aopp = AoppResult {
                n_t: 1e6,
                e_t: 0.001,
                n1: 5e5,
                e1_ph: e1,
            };
            let r = key_rate(&aopp, &table, &s, 1e12).unwrap().rate;
            assert!(r <= prev);
            prev = r;
        }
        let mut prev = f64::INFINITY;
        for et in [0.0, 0.01, 0.05, 0.1, 0.3] {
            let aopp = AoppResult {
                n_t: 1e6,
                e_t: et,
                n1: 5e5,
                e1_ph: 0.1,
            };
            let r = key_rate(&aopp, &table, &s, 1e12).unwrap().rate;
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn plob_reference_points() {
        assert_abs_diff_eq!(plob_bound(0.5).unwrap(), 1.0, epsilon = 1e-15);
        // Frozen series evaluation at 67 dB total loss.
        assert_abs_diff_eq!(
            plob_bound(10f64.powf(-6.7)).unwrap(),
            2.878_555_334_251_894e-7,
            epsilon = 1e-19
        );
        assert!(plob_bound(1.0).is_err());
        assert!(plob_bound(0.0).is_err());
    }

    proptest! {
        #[test]
        fn plob_sandwich(eta in 1e-9f64..0.5) {
            let p = plob_bound(eta).unwrap();
            let lower = eta * std::f64::consts::LOG2_E * (1.0 - eta);
            prop_assert!(p >= lower);
            prop_assert!(p <= 2.0 * eta);
        }
    }

    #[test]
    fn expected_rate_positive_at_reference_conditions() {
        let eval = expected_key_rate(
            &SourceParams::default(),
            &SimConditions::default(),
            0.07,
            0.05,
            None,
        )
        .unwrap();
        assert!(
            eval.output.rate > 0.0,
            "rate {} at reference point",
            eval.output.rate
        );
    }

    #[test]
    fn optimizer_feasible_on_easy_channel() {
        let cond = SimConditions {
            eta_a_db: 5.0,
            eta_b_db: 5.0,
            eta_m_db: 0.0,
            n_pairs: 1e10,
            ..SimConditions::default()
        };
        let cfg = OptimizerConfig {
            n_starts: 2,
            min_step: 5e-3,
            ..OptimizerConfig::default()
        };
        let (params, rate) = optimize_source_params(&cond, &cfg).unwrap();
        assert!(rate > 0.0);
        params.validate().unwrap();
    }
}
