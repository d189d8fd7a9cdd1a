//! Rate arithmetic for one NOMA pair and the closed-form optimal power split.
//!
//! All rates are spectral efficiencies in bits/s/Hz. A pair on one PRB consists
//! of a SIC user `n` (the stronger channel at the serving base station `k`) and
//! a non-SIC user `m`. The SIC user receives the fraction `alpha` of the PRB
//! power.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::CsiMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioParams {
    pub tx_power: f64,
    pub noise_variance: f64,
}

impl RadioParams {
    pub fn new(tx_power: f64, noise_variance: f64) -> Self {
        RadioParams {
            tx_power,
            noise_variance,
        }
    }

    /// `eta = P / sigma^2`.
    #[inline]
    pub fn snr(&self) -> f64 {
        self.tx_power / self.noise_variance
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRateResult {
    pub alpha_star: f64,
    pub rate_sic: f64,
    pub rate_nonsic: f64,
    pub pair_rate_sum: f64,
}

/// OMA rate with the 1/2 multiplexing loss.
#[inline]
pub fn oma_rate(gain: f64, params: &RadioParams) -> f64 {
    0.5 * (params.snr() * gain).ln_1p() / std::f64::consts::LN_2
}

/// Index of the base station with the weakest channel to UE `n`; ties go to
/// the smallest index. This base station attains the UE's minimum rate.
pub fn weakest_bs(n: usize, csi: &CsiMatrix) -> usize {
    let mut best = 0;
    for k in 1..csi.num_bs() {
        if csi.gain(k, n) < csi.gain(best, n) {
            best = k;
        }
    }
    best
}

/// Minimum rate requirement of UE `n`: its worst OMA rate over all base
/// stations.
pub fn min_rate_threshold(n: usize, csi: &CsiMatrix, params: &RadioParams) -> f64 {
    (0..csi.num_bs())
        .map(|k| oma_rate(csi.gain(k, n), params))
        .fold(f64::INFINITY, f64::min)
}

/// Rate of the non-SIC user, which treats the SIC user's signal as noise.
#[inline]
pub fn nonsic_rate(gain: f64, alpha: f64, params: &RadioParams) -> f64 {
    let signal = (1.0 - alpha) * gain * params.tx_power;
    let interference = alpha * params.tx_power * gain + params.noise_variance;
    (1.0 + signal / interference).log2()
}

/// Rate of the SIC user after cancelling the non-SIC user's signal.
#[inline]
pub fn sic_rate(gain: f64, alpha: f64, params: &RadioParams) -> f64 {
    (alpha * params.snr() * gain).ln_1p() / std::f64::consts::LN_2
}

fn check_pair(m: usize, n: usize, k: usize, csi: &CsiMatrix) -> Result<()> {
    if k >= csi.num_bs() || m >= csi.num_ues() || n >= csi.num_ues() {
        return Err(Error::Dimension(format!(
            "pair (m={m}, n={n}) at base station {k} outside a {}x{} CSI matrix",
            csi.num_bs(),
            csi.num_ues()
        )));
    }
    if csi.gain(k, n) < csi.gain(k, m) {
        return Err(Error::Constraint(format!(
            "SIC user {n} has a weaker channel than non-SIC user {m} at base station {k}"
        )));
    }
    Ok(())
}

/// Largest SIC power fraction that still leaves the non-SIC user `m` its
/// minimum rate. The pair sum rate is nondecreasing in the fraction, so this
/// bound is the optimum.
///
/// With `x = eta*h2[k][m]` and `y = eta*h2[j][m]` (`j` the weakest base station
/// of `m`), the bound is `((1+x)/sqrt(1+y) - 1)/x`. It is evaluated as
/// `(x - y/(1+sqrt(1+y))) / (x*sqrt(1+y))`, the same quantity without the
/// cancellation in the numerator. A zero-gain non-SIC user gets the limit 1.
pub fn optimal_alpha(m: usize, n: usize, k: usize, csi: &CsiMatrix, params: &RadioParams) -> Result<f64> {
    check_pair(m, n, k, csi)?;
    Ok(alpha_unchecked(m, k, csi, params))
}

#[inline]
fn alpha_unchecked(m: usize, k: usize, csi: &CsiMatrix, params: &RadioParams) -> f64 {
    let eta = params.snr();
    let x = csi.gain(k, m) * eta;
    if x == 0.0 {
        return 1.0;
    }
    let y = csi.gain(weakest_bs(m, csi), m) * eta;
    let root = (1.0 + y).sqrt();
    ((x - y / (1.0 + root)) / (x * root)).clamp(0.0, 1.0)
}

/// Optimal rates of the pair (non-SIC `m`, SIC `n`) served on one PRB of base
/// station `k`.
pub fn pair_rate(m: usize, n: usize, k: usize, csi: &CsiMatrix, params: &RadioParams) -> Result<PairRateResult> {
    if m == n {
        return Err(Error::Constraint(format!("UE {m} cannot be paired with itself")));
    }
    check_pair(m, n, k, csi)?;
    let alpha = alpha_unchecked(m, k, csi, params);
    let rate_sic = sic_rate(csi.gain(k, n), alpha, params);
    let rate_nonsic = nonsic_rate(csi.gain(k, m), alpha, params);
    Ok(PairRateResult {
        alpha_star: alpha,
        rate_sic,
        rate_nonsic,
        pair_rate_sum: rate_sic + rate_nonsic,
    })
}
