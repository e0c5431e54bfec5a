//! Hyperbolic times: detection along orbits, frequency statistics, the
//! non-uniform-expansion criterion on random orbits, and the backward
//! contraction of hyperbolic pre-balls.
//!
//! A time n is lambda-hyperbolic when every suffix of the first n one-step
//! inverse-derivative factors contracts at rate lambda^k. With prefix sums of
//! `log(1/|f'|) - log lambda` this is a running-minimum scan, O(n) overall.

use crate::circle::{circle_dist, Arc};
use crate::map_family::{MapFamily, NoiseKernel};
use crate::orbit_engine::{random_orbit, OrbitError, OrbitRecord, Realization, StartSampler};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HyperbolicError {
    #[error("lambda must lie in (0,1), got {0}")]
    BadLambda(f64),
    #[error("{0} is not a lambda-hyperbolic time for this orbit")]
    NotHyperbolic(usize),
    #[error("pullback left the monotone branch at step {step} (arc width {width})")]
    PullbackFailed { step: usize, width: f64 },
    #[error("orbit generation failed: {0}")]
    Orbit(#[from] OrbitError),
    #[error("operation requires a circle family")]
    NotCircle,
}

#[derive(Debug, Clone, Serialize)]
pub struct HyperbolicReport {
    pub lambda: f64,
    /// Sorted 1-based times n such that the suffix products over the first n
    /// steps all contract.
    pub times: Vec<usize>,
    /// |times| / horizon.
    pub frequency: f64,
    pub horizon: usize,
}

/// Backward-minimum scan over the stored log-derivatives.
pub fn hyperbolic_times(orbit: &OrbitRecord, lambda: f64) -> Result<HyperbolicReport, HyperbolicError> {
    if !(0.0 < lambda && lambda < 1.0) {
        return Err(HyperbolicError::BadLambda(lambda));
    }
    Ok(scan_times(&orbit.log_deriv, lambda))
}

/// Scan on a raw log-derivative sequence. Time m (1-based) is hyperbolic iff
/// P_m <= min_{i<m} P_i where P_m = sum_{j<m} (-log_deriv[j] - log lambda).
pub fn scan_times(log_deriv: &[f64], lambda: f64) -> HyperbolicReport {
    let log_lambda = lambda.ln();
    let n = log_deriv.len();
    let mut times = Vec::new();
    let mut prefix = 0.0f64;
    let mut running_min = 0.0f64;
    for m in 1..=n {
        prefix += -log_deriv[m - 1] - log_lambda;
        if prefix <= running_min {
            times.push(m);
        }
        running_min = running_min.min(prefix);
    }
    let frequency = if n == 0 { 0.0 } else { times.len() as f64 / n as f64 };
    HyperbolicReport { lambda, times, frequency, horizon: n }
}

/// Quadratic-time reference used to validate the scan.
pub fn brute_force_times(log_deriv: &[f64], lambda: f64) -> Vec<usize> {
    let log_lambda = lambda.ln();
    let n = log_deriv.len();
    let mut out = Vec::new();
    'outer: for m in 1..=n {
        for k in 1..=m {
            let tail: f64 = log_deriv[m - k..m].iter().map(|l| -l).sum();
            if tail > k as f64 * log_lambda {
                continue 'outer;
            }
        }
        out.push(m);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct FrequencyReport {
    /// Empirical 5% lower quantile of per-orbit frequencies.
    pub zeta_hat: f64,
    /// Fraction of orbits with a strictly positive frequency.
    pub fraction_positive: f64,
    pub mean_frequency: f64,
    pub per_orbit: Vec<f64>,
}

pub fn frequency_estimate(
    family: &MapFamily,
    kernel: &NoiseKernel,
    lambda: f64,
    n_orbits: usize,
    n_steps: usize,
    sampler: &StartSampler,
    seed: u64,
) -> Result<FrequencyReport, HyperbolicError> {
    if !(0.0 < lambda && lambda < 1.0) {
        return Err(HyperbolicError::BadLambda(lambda));
    }
    let freqs: Vec<f64> = (0..n_orbits as u64)
        .into_par_iter()
        .map(|i| {
            let x0 = sampler.start(family, kernel, seed, i).unwrap_or(0.5);
            let real = Realization::new(
                *kernel,
                seed ^ (i.wrapping_mul(0x2545_F491_4F6C_DD1D) | 1),
                n_steps,
                crate::orbit_engine::Sidedness::OneSided,
            );
            match random_orbit(family, &real, x0, n_steps) {
                Ok(orbit) => scan_times(&orbit.log_deriv, lambda).frequency,
                Err(_) => 0.0,
            }
        })
        .collect();
    let mut sorted = freqs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q_idx = ((0.05 * n_orbits as f64).floor() as usize).min(n_orbits - 1);
    Ok(FrequencyReport {
        zeta_hat: sorted[q_idx],
        fraction_positive: freqs.iter().filter(|&&f| f > 0.0).count() as f64 / n_orbits as f64,
        mean_frequency: freqs.iter().sum::<f64>() / n_orbits as f64,
        per_orbit: freqs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NueroReport {
    pub pass: bool,
    pub a0: f64,
    /// Fraction of sampled orbits whose tail average of log ||Df^{-1}|| lies
    /// below -a0.
    pub fraction_below: f64,
    pub mean_tail_average: f64,
    pub n_orbits: usize,
}

/// Finite-horizon surrogate of the non-uniform expansion criterion: the
/// liminf is replaced by the average over the second half of each orbit;
/// pass requires at least 99% of the sampled orbits below -a0.
pub fn nuero_check(
    family: &MapFamily,
    kernel: &NoiseKernel,
    a0: f64,
    n_orbits: usize,
    n_steps: usize,
    sampler: &StartSampler,
    seed: u64,
) -> Result<NueroReport, HyperbolicError> {
    assert!(a0 > 0.0, "a0 must be positive");
    let tails: Vec<f64> = (0..n_orbits as u64)
        .into_par_iter()
        .map(|i| {
            let x0 = sampler.start(family, kernel, seed, i).unwrap_or(0.5);
            let real = Realization::new(
                *kernel,
                seed ^ (i.wrapping_mul(0x2545_F491_4F6C_DD1D) | 1),
                n_steps,
                crate::orbit_engine::Sidedness::OneSided,
            );
            match random_orbit(family, &real, x0, n_steps) {
                Ok(orbit) => {
                    let half = &orbit.log_deriv[n_steps / 2..];
                    half.iter().map(|l| -l).sum::<f64>() / half.len() as f64
                }
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    let below = tails.iter().filter(|&&t| t < -a0).count();
    let fraction_below = below as f64 / n_orbits as f64;
    Ok(NueroReport {
        pass: fraction_below >= 0.99,
        a0,
        fraction_below,
        mean_tail_average: tails.iter().copied().filter(|t| t.is_finite()).sum::<f64>()
            / tails.iter().filter(|t| t.is_finite()).count().max(1) as f64,
        n_orbits,
    })
}

/// Arc chain of a hyperbolic pre-ball: arcs[k] is the set at time k, pulled
/// back from the hyperbolic ball at time n along the orbit's branches;
/// offsets[k] anchors the lift at step k -> k+1.
#[derive(Debug, Clone)]
pub struct PullbackChain {
    pub arcs: Vec<Arc>,
    pub offsets: Vec<f64>,
}

impl PullbackChain {
    /// Pulls the ball B(points[n], delta1) back along the orbit.
    pub fn from_orbit(
        family: &MapFamily,
        realization: &Realization,
        points: &[f64],
        n: usize,
        delta1: f64,
    ) -> Result<PullbackChain, HyperbolicError> {
        if !family.is_circle() {
            return Err(HyperbolicError::NotCircle);
        }
        let mut arcs = vec![Arc::new(0.0, 0.0); n + 1];
        let mut offsets = vec![0.0f64; n];
        arcs[n] = Arc::around(points[n], delta1);
        for k in (1..=n).rev() {
            let t = realization.parameter_unchecked((k - 1) as i64);
            let anchor = family.lift(t, points[k - 1]);
            let m = (anchor - arcs[k].center()).round();
            let lo = family.inverse_lift(t, arcs[k].lo + m);
            let hi = family.inverse_lift(t, arcs[k].hi + m);
            if !(hi > lo) || hi - lo >= 1.0 {
                return Err(HyperbolicError::PullbackFailed { step: k, width: hi - lo });
            }
            arcs[k - 1] = Arc::new(lo, hi);
            offsets[k - 1] = m;
            if !arcs[k - 1].contains_mod1(points[k - 1]) {
                return Err(HyperbolicError::PullbackFailed { step: k, width: hi - lo });
            }
        }
        Ok(PullbackChain { arcs, offsets })
    }

    /// Trajectory of an image point y (given at time n) backwards through the
    /// chain's branches; returns positions at times 0..=n. Backward-stable:
    /// every step is a single inverse-branch solve.
    pub fn point_history(
        &self,
        family: &MapFamily,
        realization: &Realization,
        y: f64,
    ) -> Vec<f64> {
        let n = self.offsets.len();
        let mut hist = vec![0.0f64; n + 1];
        hist[n] = y;
        for k in (1..=n).rev() {
            let t = realization.parameter_unchecked((k - 1) as i64);
            hist[k - 1] = family.inverse_lift(t, hist[k] + self.offsets[k - 1]);
        }
        hist
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PreballReport {
    pub pass: bool,
    pub n_hyp: usize,
    pub lambda: f64,
    pub delta1: f64,
    /// Worst slack in `dist_{n-k} <= lambda^{k/2} dist_n` (>= 0 when all hold).
    pub worst_contraction_margin: f64,
    /// Largest |log ratio of n-step derivatives| / image distance over pairs.
    pub c0_empirical: f64,
    /// Closed-form distortion constant when the family admits one.
    pub c0_bound: Option<f64>,
    pub preball_width: f64,
    pub n_pairs: usize,
}

/// Builds the pre-ball at a verified hyperbolic time and probes the backward
/// contraction and distortion inequalities on point pairs pulled back from
/// the hyperbolic ball.
pub fn preball_contraction_check(
    family: &MapFamily,
    realization: &Realization,
    x: f64,
    n_hyp: usize,
    lambda: f64,
    delta1: f64,
    n_probe: usize,
) -> Result<PreballReport, HyperbolicError> {
    let orbit = random_orbit(family, realization, x, n_hyp)?;
    let report = hyperbolic_times(&orbit, lambda)?;
    if !report.times.contains(&n_hyp) {
        return Err(HyperbolicError::NotHyperbolic(n_hyp));
    }
    let chain = PullbackChain::from_orbit(family, realization, &orbit.points, n_hyp, delta1)?;

    // probe image points spread over the hyperbolic ball
    let ball = chain.arcs[n_hyp];
    let n_pts = (n_probe + 1).max(2);
    let histories: Vec<Vec<f64>> = (0..n_pts)
        .map(|i| {
            let y = ball.lo + ball.len() * i as f64 / (n_pts - 1) as f64;
            chain.point_history(family, realization, y)
        })
        .collect();

    let mut worst_margin = f64::INFINITY;
    let mut c0_emp = 0.0f64;
    let mut pairs = 0usize;
    for w in histories.windows(2) {
        let (ya, yb) = (&w[0], &w[1]);
        let dist_n = circle_dist(ya[n_hyp], yb[n_hyp]);
        if dist_n == 0.0 {
            continue;
        }
        pairs += 1;
        for k in 1..=n_hyp {
            let d = circle_dist(ya[n_hyp - k], yb[n_hyp - k]);
            let bound = lambda.powf(k as f64 / 2.0) * dist_n;
            worst_margin = worst_margin.min(bound - d);
        }
        // distortion of the n-step derivative along the two histories
        let mut sa = 0.0;
        let mut sb = 0.0;
        for k in 0..n_hyp {
            let t = realization.parameter_unchecked(k as i64);
            sa += family.derivative(t, ya[k].rem_euclid(1.0)).unwrap_or(f64::NAN).abs().ln();
            sb += family.derivative(t, yb[k].rem_euclid(1.0)).unwrap_or(f64::NAN).abs().ln();
        }
        c0_emp = c0_emp.max((sa - sb).abs() / dist_n);
    }

    let c0_bound = family.log_deriv_lipschitz().map(|lg| {
        let root = lambda.sqrt();
        lg * root / (1.0 - root)
    });
    let pass = worst_margin >= -1e-9
        && c0_bound.map(|b| c0_emp <= b.max(1e-12) * (1.0 + 1e-6) + 1e-9).unwrap_or(true);
    Ok(PreballReport {
        pass,
        n_hyp,
        lambda,
        delta1,
        worst_contraction_margin: worst_margin,
        c0_empirical: c0_emp,
        c0_bound,
        preball_width: chain.arcs[0].len(),
        n_pairs: pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_family::{MapFamily, NoiseKernel};
    use crate::orbit_engine::{make_realization, Sidedness};
    use crate::rng::CounterRng;

    fn doubling_orbit(n: usize) -> OrbitRecord {
        let fam = MapFamily::doubling_additive(0.0);
        let real = make_realization(NoiseKernel::dirac(0.0), 0, n, Sidedness::OneSided);
        random_orbit(&fam, &real, 0.1357, n).unwrap()
    }

    #[test]
    fn doubling_every_time_hyperbolic_at_loose_lambda() {
        let orbit = doubling_orbit(100);
        let rep = hyperbolic_times(&orbit, 0.6).unwrap();
        assert_eq!(rep.times.len(), 100);
        assert_eq!(rep.frequency, 1.0);
    }

    #[test]
    fn doubling_no_times_at_tight_lambda() {
        let orbit = doubling_orbit(100);
        let rep = hyperbolic_times(&orbit, 0.4).unwrap();
        assert!(rep.times.is_empty());
        assert_eq!(rep.frequency, 0.0);
    }

    #[test]
    fn synthetic_sequence_matches_hand_enumeration() {
        // |f'| = (3, 1/2, 3, 3), lambda = 0.7: times 1 and 4
        let log_deriv: Vec<f64> = [3.0f64, 0.5, 3.0, 3.0].iter().map(|d| d.ln()).collect();
        let rep = scan_times(&log_deriv, 0.7);
        assert_eq!(rep.times, vec![1, 4]);
        assert_eq!(brute_force_times(&log_deriv, 0.7), vec![1, 4]);
    }

    #[test]
    fn scan_agrees_with_brute_force_on_random_sequences() {
        let rng = CounterRng::new(271828);
        for case in 0..100u64 {
            let len = 1000;
            let log_deriv: Vec<f64> = (0..len)
                .map(|i| {
                    // log|f'| in [-0.8, 1.2]: mixes contraction and expansion
                    -0.8 + 2.0 * rng.unit(case * 10_000 + i)
                })
                .collect();
            let lambda = 0.45 + 0.5 * rng.unit(case * 10_000 + 5000);
            let fast = scan_times(&log_deriv, lambda).times;
            let slow = brute_force_times(&log_deriv, lambda);
            assert_eq!(fast, slow, "case {case} lambda {lambda}");
        }
    }

    #[test]
    fn pliss_bound_constant_derivative() {
        // |f'| = rho > 1 and lambda in (1/rho, 1): every time qualifies
        let log_deriv = vec![1.5f64.ln(); 500];
        let rep = scan_times(&log_deriv, 0.75);
        assert_eq!(rep.frequency, 1.0);
    }

    #[test]
    fn concatenation_property_exhaustive() {
        let fam = MapFamily::expanding_nonlinear(2, 0.1, 0.0).unwrap();
        let real = make_realization(NoiseKernel::uniform(0.0, 0.05), 77, 200, Sidedness::OneSided);
        let orbit = random_orbit(&fam, &real, 0.42, 200).unwrap();
        let lambda = 0.8;
        let times = hyperbolic_times(&orbit, lambda).unwrap().times;
        for &j in &times {
            for i in 1..j {
                let shifted_times = scan_times(&orbit.log_deriv[i..], lambda).times;
                assert!(
                    shifted_times.contains(&(j - i)),
                    "shift {i} lost hyperbolic time {j}"
                );
            }
        }
        assert!(!times.is_empty());
    }

    #[test]
    fn frequency_doubling_is_one() {
        let fam = MapFamily::doubling_additive(0.0);
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let rep =
            frequency_estimate(&fam, &kernel, 0.75, 100, 500, &StartSampler::Uniform, 5).unwrap();
        assert_eq!(rep.zeta_hat, 1.0);
        assert_eq!(rep.fraction_positive, 1.0);
    }

    #[test]
    fn frequency_quadratic_attractor_is_zero() {
        let fam = MapFamily::quadratic(0.5);
        let kernel = NoiseKernel::dirac(0.5);
        let rep =
            frequency_estimate(&fam, &kernel, 0.9, 50, 2000, &StartSampler::Uniform, 6).unwrap();
        assert_eq!(rep.zeta_hat, 0.0);
    }

    #[test]
    fn nuero_doubling_pass_and_fail() {
        let fam = MapFamily::doubling_additive(0.0);
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let pass =
            nuero_check(&fam, &kernel, 0.5, 200, 400, &StartSampler::Uniform, 8).unwrap();
        assert!(pass.pass);
        assert_eq!(pass.fraction_below, 1.0);
        let fail =
            nuero_check(&fam, &kernel, 0.8, 200, 400, &StartSampler::Uniform, 8).unwrap();
        assert!(!fail.pass);
        assert_eq!(fail.fraction_below, 0.0);
    }

    #[test]
    fn preball_doubling_exact_contraction() {
        let fam = MapFamily::doubling_additive(0.0);
        let real = make_realization(NoiseKernel::dirac(0.0), 0, 20, Sidedness::OneSided);
        let rep = preball_contraction_check(&fam, &real, 0.3141, 20, 0.5, 0.1, 20).unwrap();
        assert!(rep.pass, "margin {}", rep.worst_contraction_margin);
        // affine branches: distortion identically zero
        assert_eq!(rep.c0_empirical, 0.0);
        // backward widths are 2 delta1 / 2^n
        assert!((rep.preball_width - 0.2 / (1u64 << 20) as f64).abs() < 1e-15);
    }

    #[test]
    fn preball_nonlinear_inequalities_hold() {
        let fam = MapFamily::expanding_nonlinear(2, 0.1, 0.0).unwrap();
        let real = make_realization(NoiseKernel::uniform(0.0, 0.05), 17, 40, Sidedness::OneSided);
        let orbit = random_orbit(&fam, &real, 0.61, 40).unwrap();
        let times = hyperbolic_times(&orbit, 0.8).unwrap().times;
        let n_hyp = *times.iter().find(|&&t| t >= 15).expect("need a hyperbolic time >= 15");
        let rep = preball_contraction_check(&fam, &real, 0.61, n_hyp, 0.8, 0.05, 100).unwrap();
        assert!(rep.pass, "margin {} c0 {} bound {:?}", rep.worst_contraction_margin, rep.c0_empirical, rep.c0_bound);
        assert!(rep.c0_empirical <= rep.c0_bound.unwrap());
    }

    #[test]
    fn preball_rejects_non_hyperbolic_time() {
        let orbit_fam = MapFamily::doubling_additive(0.0);
        let real = make_realization(NoiseKernel::dirac(0.0), 0, 10, Sidedness::OneSided);
        // lambda = 0.4 < 1/2: no hyperbolic times at all
        let res = preball_contraction_check(&orbit_fam, &real, 0.3, 10, 0.4, 0.1, 4);
        assert!(matches!(res, Err(HyperbolicError::NotHyperbolic(10))));
    }
}
