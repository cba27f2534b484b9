//! Decomposition of mean squared error into dissipation (amplitude) and
//! dispersion (phase) components, and the composite training loss built on
//! it.
//!
//! All statistics are population statistics (divide by `n`); that is what
//! makes `tau == tau_diss + tau_disp == MSE` an exact identity rather than an
//! approximation. The dispersion term is computed division-free as
//! `2(σ_a σ_d − cov)` so constant signals do not hit a 0/0; the correlation
//! coefficient is kept for reporting only.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Degenerate-correlation guard: below `1e-15·max(1, |values|)` of combined
/// spread, `rho` is reported as 1 by convention.
const RHO_EPS: f64 = 1e-15;

/// Standard deviations at or below this are treated as degenerate in
/// [`decompose_gradient`]; the affected terms use subgradient zero. Matches
/// the tape's guarded sqrt at `var <= 1e-30`.
const STD_EPS: f64 = 1e-15;

/// Means, standard deviations, covariance and correlation of an
/// (actual, predicted) signal pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalStats {
    pub mean_a: f64,
    pub mean_d: f64,
    pub std_a: f64,
    pub std_d: f64,
    pub cov: f64,
    pub rho: f64,
}

/// Total MSE split into its amplitude and phase parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub tau: f64,
    pub tau_diss: f64,
    pub tau_disp: f64,
    pub stats: SignalStats,
}

impl ErrorDecomposition {
    /// Flat JSON view with the external key set:
    /// tau, tau_diss, tau_disp, rho, mean_a, mean_d, std_a, std_d.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tau": self.tau,
            "tau_diss": self.tau_diss,
            "tau_disp": self.tau_disp,
            "rho": self.stats.rho,
            "mean_a": self.stats.mean_a,
            "mean_d": self.stats.mean_d,
            "std_a": self.stats.std_a,
            "std_d": self.stats.std_d,
        })
    }
}

/// Mixing weights of the composite loss; both live in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid(format!(
                "loss weights must lie in [0,1]: alpha={alpha}, beta={beta}"
            )));
        }
        Ok(LossWeights { alpha, beta })
    }
}

fn check_pair(ua: &[f64], ud: &[f64]) -> Result<()> {
    if ua.len() != ud.len() {
        return Err(Error::shape(format!(
            "signal lengths differ: {} vs {}",
            ua.len(),
            ud.len()
        )));
    }
    if ua.is_empty() {
        return Err(Error::invalid("empty signals"));
    }
    if !ua.iter().chain(ud).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("signal_stats input".into()));
    }
    Ok(())
}

/// Population statistics of an (actual, predicted) pair of equal length.
pub fn signal_stats(ua: &[f64], ud: &[f64]) -> Result<SignalStats> {
    check_pair(ua, ud)?;
    let n = ua.len() as f64;
    let mean_a = ua.iter().sum::<f64>() / n;
    let mean_d = ud.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_d = 0.0;
    let mut cov = 0.0;
    for (&a, &d) in ua.iter().zip(ud) {
        let da = a - mean_a;
        let dd = d - mean_d;
        var_a += da * da;
        var_d += dd * dd;
        cov += da * dd;
    }
    var_a /= n;
    var_d /= n;
    cov /= n;
    let std_a = var_a.sqrt();
    let std_d = var_d.sqrt();
    let scale = ua
        .iter()
        .chain(ud)
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let rho = if std_a * std_d >= RHO_EPS * scale {
        cov / (std_a * std_d)
    } else {
        1.0
    };
    Ok(SignalStats {
        mean_a,
        mean_d,
        std_a,
        std_d,
        cov,
        rho,
    })
}

/// Splits the MSE between an actual and a predicted signal into dissipation
/// and dispersion parts. `tau` itself is the plain mean of squared pointwise
/// differences, so the identity `tau = tau_diss + tau_disp` is a genuine
/// cross-check, not a tautology.
pub fn decompose(ua: &[f64], ud: &[f64]) -> Result<ErrorDecomposition> {
    let stats = signal_stats(ua, ud)?;
    let n = ua.len() as f64;
    let tau = ua
        .iter()
        .zip(ud)
        .map(|(&a, &d)| (a - d) * (a - d))
        .sum::<f64>()
        / n;
    let ds = stats.std_a - stats.std_d;
    let dm = stats.mean_a - stats.mean_d;
    let tau_diss = ds * ds + dm * dm;
    let tau_disp = 2.0 * (stats.std_a * stats.std_d - stats.cov);
    Ok(ErrorDecomposition {
        tau,
        tau_diss,
        tau_disp,
        stats,
    })
}

/// Applies [`decompose`] along the last (spatial) axis of equally shaped
/// tensors and averages every component over the leading axes. The
/// `tau = tau_diss + tau_disp` identity survives the averaging by linearity.
pub fn decompose_batched(ua: &Tensor, ud: &Tensor) -> Result<ErrorDecomposition> {
    if ua.shape() != ud.shape() {
        return Err(Error::shape(format!(
            "decompose_batched: {:?} vs {:?}",
            ua.shape(),
            ud.shape()
        )));
    }
    if ua.rank() == 0 || ua.is_empty() {
        return Err(Error::invalid("decompose_batched: empty tensor"));
    }
    let nx = ua.shape()[ua.rank() - 1];
    let slices = ua.len() / nx;
    let mut acc: Option<ErrorDecomposition> = None;
    for s in 0..slices {
        let a = &ua.data()[s * nx..(s + 1) * nx];
        let d = &ud.data()[s * nx..(s + 1) * nx];
        let e = decompose(a, d)?;
        acc = Some(match acc {
            None => e,
            Some(t) => ErrorDecomposition {
                tau: t.tau + e.tau,
                tau_diss: t.tau_diss + e.tau_diss,
                tau_disp: t.tau_disp + e.tau_disp,
                stats: SignalStats {
                    mean_a: t.stats.mean_a + e.stats.mean_a,
                    mean_d: t.stats.mean_d + e.stats.mean_d,
                    std_a: t.stats.std_a + e.stats.std_a,
                    std_d: t.stats.std_d + e.stats.std_d,
                    cov: t.stats.cov + e.stats.cov,
                    rho: t.stats.rho + e.stats.rho,
                },
            },
        });
    }
    let mut out = acc.expect("slices >= 1");
    let inv = 1.0 / slices as f64;
    out.tau *= inv;
    out.tau_diss *= inv;
    out.tau_disp *= inv;
    out.stats.mean_a *= inv;
    out.stats.mean_d *= inv;
    out.stats.std_a *= inv;
    out.stats.std_d *= inv;
    out.stats.cov *= inv;
    out.stats.rho *= inv;
    Ok(out)
}

/// Composite training objective:
/// `(1-α)·decoder_loss + α·((1-β)·τ_disp + β·τ_diss)`.
pub fn composite_loss(
    decoder_loss: f64,
    propagator: &ErrorDecomposition,
    weights: &LossWeights,
) -> Result<f64> {
    if !decoder_loss.is_finite() || !propagator.tau_diss.is_finite() || !propagator.tau_disp.is_finite()
    {
        return Err(Error::NonFinite("composite_loss input".into()));
    }
    LossWeights::new(weights.alpha, weights.beta)?;
    let prop = (1.0 - weights.beta) * propagator.tau_disp + weights.beta * propagator.tau_diss;
    Ok((1.0 - weights.alpha) * decoder_loss + weights.alpha * prop)
}

/// Exact gradient of `w_diss·τ_diss + w_disp·τ_disp` with respect to the
/// prediction `ud`.
///
/// When `std_d` is degenerate (at or below `1e-15`) the terms that divide by
/// it take subgradient zero; this matches the tape's guarded-sqrt backward
/// rule, so the analytic and autodiff routes agree even on constant
/// predictions.
pub fn decompose_gradient(ua: &[f64], ud: &[f64], w_diss: f64, w_disp: f64) -> Result<Vec<f64>> {
    check_pair(ua, ud)?;
    if ua.len() < 2 {
        return Err(Error::invalid(
            "decompose_gradient requires at least 2 samples",
        ));
    }
    let stats = signal_stats(ua, ud)?;
    let n = ua.len() as f64;
    let degenerate = stats.std_d <= STD_EPS;
    let mut grad = vec![0.0; ua.len()];
    for (k, g) in grad.iter_mut().enumerate() {
        // d std_d / d ud_k = (ud_k - mean_d) / (n·std_d), guarded
        let dstd = if degenerate {
            0.0
        } else {
            (ud[k] - stats.mean_d) / (n * stats.std_d)
        };
        let dmean = 1.0 / n;
        let dcov = (ua[k] - stats.mean_a) / n;
        let ddiss =
            -2.0 * (stats.std_a - stats.std_d) * dstd - 2.0 * (stats.mean_a - stats.mean_d) * dmean;
        let ddisp = 2.0 * (stats.std_a * dstd - dcov);
        *g = w_diss * ddiss + w_disp * ddisp;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_loss(ua: &[f64], ud: &[f64], w_diss: f64, w_disp: f64) -> f64 {
        let e = decompose(ua, ud).unwrap();
        w_diss * e.tau_diss + w_disp * e.tau_disp
    }

    #[test]
    fn stats_self_correlation() {
        let s = signal_stats(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean_a, 2.0);
        assert_eq!(s.mean_d, 2.0);
        let std = (2.0f64 / 3.0).sqrt();
        assert!((s.std_a - std).abs() < 1e-15);
        assert!((s.cov - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stats_anticorrelated_pair() {
        let s = signal_stats(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!(s.mean_a, 0.5);
        assert_eq!(s.mean_d, 0.5);
        assert_eq!(s.std_a, 0.5);
        assert_eq!(s.std_d, 0.5);
        assert_eq!(s.cov, -0.25);
        assert_eq!(s.rho, -1.0);
    }

    #[test]
    fn stats_degenerate_constant_prediction() {
        let s = signal_stats(&[0.0, 1.0], &[5.0, 5.0]).unwrap();
        assert_eq!(s.std_d, 0.0);
        assert_eq!(s.rho, 1.0);
    }

    #[test]
    fn stats_errors() {
        assert!(signal_stats(&[1.0], &[1.0, 2.0]).is_err());
        assert!(signal_stats(&[], &[]).is_err());
        assert!(signal_stats(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn decompose_perfect_prediction() {
        let e = decompose(&[0.3, -1.0, 2.5], &[0.3, -1.0, 2.5]).unwrap();
        assert_eq!(e.tau, 0.0);
        assert_eq!(e.tau_diss, 0.0);
        assert_eq!(e.tau_disp, 0.0);
    }

    #[test]
    fn decompose_pure_amplitude_error() {
        // ud = 2·ua keeps rho at 1, so the whole error is dissipation
        let e = decompose(&[0.0, 1.0], &[0.0, 2.0]).unwrap();
        assert!((e.tau - 0.5).abs() < 1e-15);
        assert!((e.tau_diss - 0.5).abs() < 1e-15);
        assert!(e.tau_disp.abs() < 1e-15);
        assert!((e.stats.rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decompose_pure_phase_error() {
        let e = decompose(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((e.tau - 1.0).abs() < 1e-15);
        assert!(e.tau_diss.abs() < 1e-15);
        assert!((e.tau_disp - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batched_identical_slices_match_single() {
        let single = decompose(&[0.0, 1.0, 0.5], &[0.2, 0.9, 0.4]).unwrap();
        let ua = Tensor::new(&[2, 2, 3], vec![0.0, 1.0, 0.5, 0.0, 1.0, 0.5, 0.0, 1.0, 0.5, 0.0, 1.0, 0.5]).unwrap();
        let ud = Tensor::new(&[2, 2, 3], vec![0.2, 0.9, 0.4, 0.2, 0.9, 0.4, 0.2, 0.9, 0.4, 0.2, 0.9, 0.4]).unwrap();
        let batched = decompose_batched(&ua, &ud).unwrap();
        assert!((batched.tau - single.tau).abs() < 1e-15);
        assert!((batched.tau_diss - single.tau_diss).abs() < 1e-15);
        assert!((batched.tau_disp - single.tau_disp).abs() < 1e-15);
    }

    #[test]
    fn batched_two_slices_average() {
        let a1 = [0.0, 1.0, 2.0, -1.0];
        let d1 = [0.1, 0.8, 2.2, -0.9];
        let a2 = [3.0, 0.0, -2.0, 0.5];
        let d2 = [2.0, 0.3, -1.0, 0.4];
        let e1 = decompose(&a1, &d1).unwrap();
        let e2 = decompose(&a2, &d2).unwrap();
        let ua = Tensor::new(&[2, 4], [a1, a2].concat()).unwrap();
        let ud = Tensor::new(&[2, 4], [d1, d2].concat()).unwrap();
        let b = decompose_batched(&ua, &ud).unwrap();
        assert!((b.tau - 0.5 * (e1.tau + e2.tau)).abs() < 1e-15);
        assert!((b.tau_diss - 0.5 * (e1.tau_diss + e2.tau_diss)).abs() < 1e-15);
        assert!((b.tau_disp - 0.5 * (e1.tau_disp + e2.tau_disp)).abs() < 1e-15);
        assert!((b.tau - (b.tau_diss + b.tau_disp)).abs() < 1e-12 * (1.0 + b.tau));
    }

    #[test]
    fn batched_zero_error() {
        let ua = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = decompose_batched(&ua, &ua.clone()).unwrap();
        assert_eq!(b.tau, 0.0);
        assert_eq!(b.tau_diss, 0.0);
        assert_eq!(b.tau_disp, 0.0);
    }

    #[test]
    fn composite_corners() {
        let e = ErrorDecomposition {
            tau: 0.4,
            tau_diss: 0.1,
            tau_disp: 0.3,
            stats: SignalStats {
                mean_a: 0.0,
                mean_d: 0.0,
                std_a: 0.0,
                std_d: 0.0,
                cov: 0.0,
                rho: 1.0,
            },
        };
        let w11 = LossWeights::new(1.0, 1.0).unwrap();
        assert_eq!(composite_loss(0.2, &e, &w11).unwrap(), 0.1);
        let w0 = LossWeights::new(0.0, 0.5).unwrap();
        assert_eq!(composite_loss(0.2, &e, &w0).unwrap(), 0.2);
        let w55 = LossWeights::new(0.5, 0.5).unwrap();
        assert!((composite_loss(0.2, &e, &w55).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(-0.1, 0.5).is_err());
        assert!(LossWeights::new(0.5, 1.2).is_err());
        assert!(LossWeights::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn gradient_zero_at_minimum() {
        let ua = [0.3, -0.4, 1.2, 0.0];
        let g = decompose_gradient(&ua, &ua, 0.7, 0.3).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn gradient_constant_offset_case() {
        // ud = ua + c leaves stds equal; only the mean term is active
        let ua = [0.1, 0.9, -0.5, 0.4];
        let c = 0.37;
        let ud: Vec<f64> = ua.iter().map(|v| v + c).collect();
        let g = decompose_gradient(&ua, &ud, 1.0, 0.0).unwrap();
        let expect = 2.0 * c / ua.len() as f64;
        for v in g {
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut state = 0x2468_ace1_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..20 {
            let ua: Vec<f64> = (0..8).map(|_| next()).collect();
            let ud: Vec<f64> = (0..8).map(|_| next()).collect();
            let (w_diss, w_disp) = (0.6, 0.4);
            let g = decompose_gradient(&ua, &ud, w_diss, w_disp).unwrap();
            let h = 1e-6;
            for k in 0..8 {
                let mut plus = ud.clone();
                plus[k] += h;
                let mut minus = ud.clone();
                minus[k] -= h;
                let fd = (fd_loss(&ua, &plus, w_diss, w_disp)
                    - fd_loss(&ua, &minus, w_diss, w_disp))
                    / (2.0 * h);
                let denom = g[k].abs().max(fd.abs()).max(1e-4);
                assert!(
                    ((g[k] - fd) / denom).abs() < 1e-6,
                    "k={k}: analytic {} vs fd {}",
                    g[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn gradient_degenerate_prediction_is_finite() {
        let g = decompose_gradient(&[0.0, 1.0, 2.0], &[3.0, 3.0, 3.0], 1.0, 1.0).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_errors() {
        assert!(decompose_gradient(&[1.0], &[1.0], 1.0, 0.0).is_err());
        assert!(decompose_gradient(&[1.0, 2.0], &[1.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn json_view_has_external_keys() {
        let e = decompose(&[0.0, 1.0], &[0.0, 2.0]).unwrap();
        let v = e.to_json();
        let obj = v.as_object().unwrap();
        for key in [
            "tau", "tau_diss", "tau_disp", "rho", "mean_a", "mean_d", "std_a", "std_d",
        ] {
            assert!(obj.contains_key(key), "missing {key}");
        }
        assert_eq!(obj.len(), 8);
    }

    #[test]
    fn sine_shift_sensitivity() {
        // full-period sampling: dissipation stays ~0, dispersion tracks
        // 1 - cos(2πφ); verified against brute-force MSE
        let n = 256;
        for &phi in &[0.03, 0.1, 0.25, 0.4] {
            let ua: Vec<f64> = (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin())
                .collect();
            let ud: Vec<f64> = (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * (i as f64 / n as f64 - phi)).sin())
                .collect();
            let e = decompose(&ua, &ud).unwrap();
            let brute: f64 =
                ua.iter().zip(&ud).map(|(a, d)| (a - d) * (a - d)).sum::<f64>() / n as f64;
            let expect = 1.0 - (2.0 * std::f64::consts::PI * phi).cos();
            assert!(e.tau_diss <= 1e-10, "phi={phi}: tau_diss={}", e.tau_diss);
            assert!((e.tau_disp - expect).abs() < 1e-10, "phi={phi}");
            assert!((e.tau - brute).abs() < 1e-12 * (1.0 + brute));
        }
    }
}
