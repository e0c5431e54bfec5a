//! Parametric map families on the circle and the interval, together with the
//! noise kernels that drive their random perturbation.
//!
//! Circle families are full-branch uniformly expanding maps given through a
//! closed-form lift; the quadratic family lives on [-1, 1] and is the one
//! deliberately non-invertible member of the zoo.

use crate::rng::CounterRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TWO_PI: f64 = std::f64::consts::TAU;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("point {x} outside the phase space {lo}..{hi}")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
    #[error("operation unsupported for this family kind: {0}")]
    Unsupported(&'static str),
    #[error("invalid family parameter: {0}")]
    InvalidParameter(String),
    #[error("expansion certificate failed: min |f'| = {min_deriv} at t = {t}")]
    NotExpanding { min_deriv: f64, t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyKind {
    DoublingAdditive,
    ExpandingNonlinear,
    Quadratic,
    CustomPiecewise,
}

impl FamilyKind {
    pub fn parse(s: &str) -> Option<FamilyKind> {
        match s {
            "doubling-additive" => Some(FamilyKind::DoublingAdditive),
            "expanding-nonlinear" => Some(FamilyKind::ExpandingNonlinear),
            "quadratic" => Some(FamilyKind::Quadratic),
            "custom-piecewise" => Some(FamilyKind::CustomPiecewise),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::DoublingAdditive => "doubling-additive",
            FamilyKind::ExpandingNonlinear => "expanding-nonlinear",
            FamilyKind::Quadratic => "quadratic",
            FamilyKind::CustomPiecewise => "custom-piecewise",
        }
    }
}

/// A parametric family `t -> f_t` with closed-form derivative and branch
/// structure. Immutable after construction; safe to share across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFamily {
    pub kind: FamilyKind,
    /// Base parameter of the unperturbed map.
    pub t_star: f64,
    /// Topological degree for circle kinds.
    pub degree: u32,
    /// Nonlinearity amplitude for the expanding-nonlinear kind.
    pub alpha: f64,
    /// Branch breakpoints for the custom piecewise kind (0 = b_0 < .. < b_d = 1).
    pub breakpoints: Vec<f64>,
}

impl MapFamily {
    /// `f_t(x) = d x + t  mod 1`.
    pub fn doubling_additive(t_star: f64) -> MapFamily {
        MapFamily {
            kind: FamilyKind::DoublingAdditive,
            t_star,
            degree: 2,
            alpha: 0.0,
            breakpoints: Vec::new(),
        }
    }

    pub fn expanding_additive(degree: u32, t_star: f64) -> Result<MapFamily, MapError> {
        if degree < 2 {
            return Err(MapError::InvalidParameter("degree must be >= 2".into()));
        }
        Ok(MapFamily {
            kind: FamilyKind::DoublingAdditive,
            t_star,
            degree,
            alpha: 0.0,
            breakpoints: Vec::new(),
        })
    }

    /// `f_t(x) = d x + t + alpha sin(2 pi x)  mod 1`, expanding iff
    /// `|alpha| < (d - 1) / (2 pi)`.
    pub fn expanding_nonlinear(degree: u32, alpha: f64, t_star: f64) -> Result<MapFamily, MapError> {
        if degree < 2 {
            return Err(MapError::InvalidParameter("degree must be >= 2".into()));
        }
        let bound = (degree as f64 - 1.0) / TWO_PI;
        if !(alpha.abs() < bound) {
            return Err(MapError::InvalidParameter(format!(
                "|alpha| = {} must be < (d-1)/(2 pi) = {}",
                alpha.abs(),
                bound
            )));
        }
        Ok(MapFamily {
            kind: FamilyKind::ExpandingNonlinear,
            t_star,
            degree,
            alpha,
            breakpoints: Vec::new(),
        })
    }

    /// `f_t(x) = 1 - t x^2` on [-1, 1].
    pub fn quadratic(t_star: f64) -> MapFamily {
        MapFamily {
            kind: FamilyKind::Quadratic,
            t_star,
            degree: 0,
            alpha: 0.0,
            breakpoints: Vec::new(),
        }
    }

    /// Full-branch piecewise-affine circle map: branch i maps
    /// [b_i, b_{i+1}) affinely onto the circle, then the parameter shifts
    /// additively mod 1.
    pub fn custom_piecewise(breakpoints: Vec<f64>, t_star: f64) -> Result<MapFamily, MapError> {
        if breakpoints.len() < 3 {
            return Err(MapError::InvalidParameter(
                "need at least two branches (three breakpoints)".into(),
            ));
        }
        if (breakpoints[0] - 0.0).abs() > 1e-15 || (breakpoints[breakpoints.len() - 1] - 1.0).abs() > 1e-15 {
            return Err(MapError::InvalidParameter("breakpoints must start at 0 and end at 1".into()));
        }
        for w in breakpoints.windows(2) {
            if w[1] <= w[0] {
                return Err(MapError::InvalidParameter("breakpoints must be strictly increasing".into()));
            }
        }
        let degree = (breakpoints.len() - 1) as u32;
        Ok(MapFamily {
            kind: FamilyKind::CustomPiecewise,
            t_star,
            degree,
            alpha: 0.0,
            breakpoints,
        })
    }

    pub fn is_circle(&self) -> bool {
        !matches!(self.kind, FamilyKind::Quadratic)
    }

    /// Full-branch expanding circle kinds support preimage enumeration and
    /// the induced-partition machinery.
    pub fn is_full_branch_expanding(&self) -> bool {
        self.is_circle()
    }

    pub fn phase_space(&self) -> (f64, f64) {
        if self.is_circle() {
            (0.0, 1.0)
        } else {
            (-1.0, 1.0)
        }
    }

    fn check_domain(&self, x: f64) -> Result<(), MapError> {
        let (lo, hi) = self.phase_space();
        if self.is_circle() {
            if !(0.0..1.0).contains(&x) {
                return Err(MapError::OutOfDomain { x, lo, hi });
            }
        } else if !(lo..=hi).contains(&x) {
            return Err(MapError::OutOfDomain { x, lo, hi });
        }
        Ok(())
    }

    /// Monotone lift of a circle map: increasing on [0, 1] with
    /// `lift(1) = lift(0) + d`. Accepts any real x (periodic extension).
    pub fn lift(&self, t: f64, x: f64) -> f64 {
        match self.kind {
            FamilyKind::DoublingAdditive => self.degree as f64 * x + t,
            FamilyKind::ExpandingNonlinear => {
                self.degree as f64 * x + t + self.alpha * (TWO_PI * x).sin()
            }
            FamilyKind::CustomPiecewise => {
                let k = x.floor();
                let xf = x - k;
                let d = self.degree as f64;
                // branch containing xf
                let i = match self.breakpoints.binary_search_by(|b| b.partial_cmp(&xf).unwrap()) {
                    Ok(i) => i.min(self.breakpoints.len() - 2),
                    Err(i) => i.saturating_sub(1).min(self.breakpoints.len() - 2),
                };
                let (a, b) = (self.breakpoints[i], self.breakpoints[i + 1]);
                d * k + i as f64 + (xf - a) / (b - a) + t
            }
            FamilyKind::Quadratic => unreachable!("quadratic family has no circle lift"),
        }
    }

    /// Derivative of the lift (= signed derivative of the map).
    pub fn lift_derivative(&self, _t: f64, x: f64) -> f64 {
        match self.kind {
            FamilyKind::DoublingAdditive => self.degree as f64,
            FamilyKind::ExpandingNonlinear => {
                self.degree as f64 + self.alpha * TWO_PI * (TWO_PI * x).cos()
            }
            FamilyKind::CustomPiecewise => {
                let xf = x - x.floor();
                let i = match self.breakpoints.binary_search_by(|b| b.partial_cmp(&xf).unwrap()) {
                    Ok(i) => i.min(self.breakpoints.len() - 2),
                    Err(i) => i.saturating_sub(1).min(self.breakpoints.len() - 2),
                };
                1.0 / (self.breakpoints[i + 1] - self.breakpoints[i])
            }
            FamilyKind::Quadratic => unreachable!(),
        }
    }

    /// Solves `lift(t, x) = target` for the unique x (monotone lift).
    /// Newton iteration with a bisection fallback, accurate to ~1e-14.
    pub fn inverse_lift(&self, t: f64, target: f64) -> f64 {
        match self.kind {
            FamilyKind::DoublingAdditive => (target - t) / self.degree as f64,
            FamilyKind::CustomPiecewise => {
                let d = self.degree as f64;
                let v = target - t;
                let k = (v / d).floor();
                let mut frac = v - d * k; // in [0, d)
                let mut kk = k;
                if frac >= d {
                    frac -= d;
                    kk += 1.0;
                }
                let i = (frac.floor() as usize).min(self.breakpoints.len() - 2);
                let (a, b) = (self.breakpoints[i], self.breakpoints[i + 1]);
                kk + a + (frac - i as f64) * (b - a)
            }
            FamilyKind::ExpandingNonlinear => {
                let d = self.degree as f64;
                // initial guess from the affine part; lift is within alpha of it
                let mut x = (target - t) / d;
                for _ in 0..6 {
                    let fx = d * x + t + self.alpha * (TWO_PI * x).sin() - target;
                    let dfx = d + self.alpha * TWO_PI * (TWO_PI * x).cos();
                    x -= fx / dfx;
                }
                // polish: one guarded bisection sweep if Newton drifted
                let res = d * x + t + self.alpha * (TWO_PI * x).sin() - target;
                if res.abs() > 1e-12 {
                    let (mut lo, mut hi) = (x - 1.0, x + 1.0);
                    for _ in 0..100 {
                        let mid = 0.5 * (lo + hi);
                        if d * mid + t + self.alpha * (TWO_PI * mid).sin() < target {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    x = 0.5 * (lo + hi);
                }
                x
            }
            FamilyKind::Quadratic => unreachable!(),
        }
    }

    /// Evaluates `f_t(x)`, reduced mod 1 for circle kinds.
    pub fn eval(&self, t: f64, x: f64) -> Result<f64, MapError> {
        self.check_domain(x)?;
        match self.kind {
            FamilyKind::Quadratic => Ok(1.0 - t * x * x),
            _ => {
                let y = self.lift(t, x).rem_euclid(1.0);
                // rem_euclid can return 1.0 when the argument is a tiny negative
                Ok(if y >= 1.0 { 0.0 } else { y })
            }
        }
    }

    /// Signed derivative `f_t'(x)`.
    pub fn derivative(&self, t: f64, x: f64) -> Result<f64, MapError> {
        self.check_domain(x)?;
        match self.kind {
            FamilyKind::Quadratic => Ok(-2.0 * t * x),
            _ => Ok(self.lift_derivative(t, x)),
        }
    }

    /// Uniform bounds on |f'| over the phase space; exact closed forms.
    /// Independent of t for the additive circle kinds.
    pub fn derivative_bounds(&self, t: f64) -> (f64, f64) {
        match self.kind {
            FamilyKind::DoublingAdditive => (self.degree as f64, self.degree as f64),
            FamilyKind::ExpandingNonlinear => (
                self.degree as f64 - self.alpha.abs() * TWO_PI,
                self.degree as f64 + self.alpha.abs() * TWO_PI,
            ),
            FamilyKind::CustomPiecewise => {
                let mut lo = f64::INFINITY;
                let mut hi = 0.0f64;
                for w in self.breakpoints.windows(2) {
                    let s = 1.0 / (w[1] - w[0]);
                    lo = lo.min(s);
                    hi = hi.max(s);
                }
                (lo, hi)
            }
            FamilyKind::Quadratic => (0.0, 2.0 * t.abs()),
        }
    }

    /// Lipschitz constant of `x -> log |f_t'(x)|`, or None when unbounded
    /// (quadratic: the derivative vanishes at the critical point).
    pub fn log_deriv_lipschitz(&self) -> Option<f64> {
        match self.kind {
            FamilyKind::DoublingAdditive | FamilyKind::CustomPiecewise => Some(0.0),
            FamilyKind::ExpandingNonlinear => {
                let sup_dd = self.alpha.abs() * TWO_PI * TWO_PI;
                let inf_d = self.degree as f64 - self.alpha.abs() * TWO_PI;
                Some(sup_dd / inf_d)
            }
            FamilyKind::Quadratic => None,
        }
    }

    /// Index of the monotone branch containing x (circle kinds).
    pub fn branch_of(&self, t: f64, x: f64) -> usize {
        let f0 = self.lift(t, 0.0);
        let v = self.lift(t, x) - f0;
        (v.floor() as i64).clamp(0, self.degree as i64 - 1) as usize
    }

    /// Preimage of the circle point y through branch k of `f_t`.
    pub fn branch_inverse_point(&self, t: f64, y: f64, k: usize) -> f64 {
        let f0 = self.lift(t, 0.0);
        // unique integer m with f0 + k <= y + m < f0 + k + 1
        let m = (f0 + k as f64 - y).ceil();
        let x = self.inverse_lift(t, y + m);
        x.clamp(0.0, 1.0).rem_euclid(1.0)
    }

    /// Pullback of the real interval [lo, hi] (a circle arc, hi - lo < 1)
    /// through branch k: the unique arc mapped onto it by that branch.
    /// Returned in [0, 1]-anchored real coordinates (may start slightly
    /// below 0 when the arc crosses the branch's wrap point).
    pub fn branch_inverse_interval(&self, t: f64, lo: f64, hi: f64, k: usize) -> (f64, f64) {
        debug_assert!(hi >= lo && hi - lo < 1.0);
        let f0 = self.lift(t, 0.0);
        let mid = 0.5 * (lo + hi);
        let m = (f0 + k as f64 - mid).ceil();
        (self.inverse_lift(t, lo + m), self.inverse_lift(t, hi + m))
    }

    /// All solutions of `f_t^j(x) = y`, enumerated branch-by-branch through
    /// the monotone lift. The list has d^j entries, sorted.
    pub fn preimages(&self, t: f64, y: f64, depth: u32) -> Result<Vec<f64>, MapError> {
        if !self.is_full_branch_expanding() {
            return Err(MapError::Unsupported("preimages need a full-branch expanding map"));
        }
        self.check_domain(y)?;
        let mut level = vec![y];
        for _ in 0..depth {
            let mut next = Vec::with_capacity(level.len() * self.degree as usize);
            for &z in &level {
                for k in 0..self.degree as usize {
                    next.push(self.branch_inverse_point(t, z, k));
                }
            }
            level = next;
        }
        level.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(level)
    }

    /// Expansion certificate: min |f_t'| over a grid and over parameters
    /// sampled from the kernel support. Errors if the minimum is <= 1 for an
    /// expanding kind.
    pub fn check_expansion(&self, kernel: &NoiseKernel, grid: usize, t_samples: usize) -> Result<f64, MapError> {
        if !self.is_circle() {
            return Err(MapError::Unsupported("expansion certificate applies to circle kinds"));
        }
        let (t_lo, t_hi) = kernel.support();
        let mut min_d = f64::INFINITY;
        let mut min_t = t_lo;
        for i in 0..t_samples.max(1) {
            let t = if t_samples <= 1 {
                kernel.center
            } else {
                t_lo + (t_hi - t_lo) * i as f64 / (t_samples - 1) as f64
            };
            for j in 0..grid {
                let x = j as f64 / grid as f64;
                let d = self.lift_derivative(t, x).abs();
                if d < min_d {
                    min_d = d;
                    min_t = t;
                }
            }
        }
        if min_d <= 1.0 {
            return Err(MapError::NotExpanding { min_deriv: min_d, t: min_t });
        }
        Ok(min_d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelShape {
    Uniform,
    Dirac,
}

/// The law of i.i.d. parameter draws: uniform on [t*-eps, t*+eps] or the
/// Dirac mass at t*.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseKernel {
    pub shape: KernelShape,
    pub center: f64,
    pub radius: f64,
}

impl NoiseKernel {
    pub fn uniform(center: f64, radius: f64) -> NoiseKernel {
        NoiseKernel { shape: KernelShape::Uniform, center, radius }
    }

    pub fn dirac(center: f64) -> NoiseKernel {
        NoiseKernel { shape: KernelShape::Dirac, center, radius: 0.0 }
    }

    pub fn support(&self) -> (f64, f64) {
        match self.shape {
            KernelShape::Dirac => (self.center, self.center),
            KernelShape::Uniform => (self.center - self.radius, self.center + self.radius),
        }
    }

    /// Draws a parameter from the kernel using the given unit sample.
    #[inline]
    pub fn from_unit(&self, u: f64) -> f64 {
        match self.shape {
            KernelShape::Dirac => self.center,
            KernelShape::Uniform => self.center + self.radius * (2.0 * u - 1.0),
        }
    }

    /// Seeded draw through the counter RNG.
    pub fn sample(&self, rng: &CounterRng, index: u64) -> f64 {
        self.from_unit(rng.unit(index))
    }

    /// Deterministic quadrature nodes for annealed averages (midpoint rule).
    pub fn quadrature_nodes(&self, n: usize) -> Vec<f64> {
        match self.shape {
            KernelShape::Dirac => vec![self.center],
            KernelShape::Uniform => {
                let n = n.max(1);
                (0..n)
                    .map(|i| {
                        self.center - self.radius
                            + 2.0 * self.radius * (i as f64 + 0.5) / n as f64
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_eval_matches_closed_form() {
        let fam = MapFamily::doubling_additive(0.0);
        assert_eq!(fam.eval(0.0, 0.3).unwrap(), 0.6);
        assert!((fam.eval(0.05, 0.7).unwrap() - 0.45).abs() < 1e-15);
    }

    #[test]
    fn quadratic_eval_and_derivative() {
        let fam = MapFamily::quadratic(2.0);
        assert_eq!(fam.eval(2.0, 0.0).unwrap(), 1.0);
        assert_eq!(fam.derivative(2.0, 0.5).unwrap(), -2.0);
    }

    #[test]
    fn derivative_examples() {
        let fam = MapFamily::doubling_additive(0.0);
        assert_eq!(fam.derivative(0.02, 0.9).unwrap(), 2.0);
        let nl = MapFamily::expanding_nonlinear(2, 0.1, 0.0).unwrap();
        let expected = 2.0 + 0.2 * std::f64::consts::PI;
        assert!((nl.derivative(0.0, 0.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let fam = MapFamily::doubling_additive(0.0);
        assert!(matches!(fam.eval(0.0, 1.0), Err(MapError::OutOfDomain { .. })));
        let q = MapFamily::quadratic(2.0);
        assert!(matches!(q.eval(2.0, 1.5), Err(MapError::OutOfDomain { .. })));
    }

    #[test]
    fn dyadic_preimages() {
        let fam = MapFamily::doubling_additive(0.0);
        let pre = fam.preimages(0.0, 0.0, 2).unwrap();
        let expect = [0.0, 0.25, 0.5, 0.75];
        assert_eq!(pre.len(), 4);
        for (a, b) in pre.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let pre1 = fam.preimages(0.0, 0.5, 1).unwrap();
        assert!((pre1[0] - 0.25).abs() < 1e-12 && (pre1[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn nonlinear_preimages_solve_the_equation() {
        let fam = MapFamily::expanding_nonlinear(2, 0.1, 0.0).unwrap();
        let pre = fam.preimages(0.0, 0.0, 1).unwrap();
        assert_eq!(pre.len(), 2);
        for &x in &pre {
            let fx = fam.eval(0.0, x).unwrap();
            let err = fx.min(1.0 - fx); // distance to 0 on the circle
            assert!(err < 1e-10, "residual {err}");
        }
    }

    #[test]
    fn preimages_unsupported_for_quadratic() {
        let q = MapFamily::quadratic(1.0);
        assert!(matches!(q.preimages(1.0, 0.0, 1), Err(MapError::Unsupported(_))));
    }

    #[test]
    fn preimage_of_image_contains_the_point() {
        let fam = MapFamily::expanding_nonlinear(3, 0.2, 0.1).unwrap();
        for i in 0..200 {
            let x = i as f64 / 200.0;
            let y = fam.eval(0.1, x).unwrap();
            let pre = fam.preimages(0.1, y, 1).unwrap();
            let hit = pre.iter().any(|&p| {
                let d = (p - x).abs();
                d.min(1.0 - d) < 1e-8
            });
            assert!(hit, "x = {x} missing from preimages of its image");
        }
    }

    #[test]
    fn kernel_support_and_dirac() {
        let dir = NoiseKernel::dirac(0.0);
        let rng = CounterRng::new(1);
        assert_eq!(dir.sample(&rng, 0), 0.0);
        let uni = NoiseKernel::uniform(0.0, 0.1);
        for i in 0..1000 {
            let t = uni.sample(&rng, i);
            assert!((-0.1..=0.1).contains(&t));
        }
    }

    #[test]
    fn uniform_kernel_mean_within_clt_bound() {
        // 1e6 draws, sigma = eps/sqrt(3); bound 3 sigma / sqrt(n)
        let uni = NoiseKernel::uniform(0.0, 0.1);
        let rng = CounterRng::new(42);
        let n = 1_000_000u64;
        let mean = (0..n).map(|i| uni.sample(&rng, i)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3e-4, "mean {mean}");
    }

    #[test]
    fn expansion_certificate() {
        let fam = MapFamily::expanding_nonlinear(2, 0.1, 0.0).unwrap();
        let min = fam.check_expansion(&NoiseKernel::uniform(0.0, 0.05), 10_000, 100).unwrap();
        assert!(min > 1.0);
        // alpha at the boundary is rejected at construction
        assert!(MapFamily::expanding_nonlinear(2, 0.2, 0.0).is_err());
    }

    #[test]
    fn circle_outputs_stay_in_unit_interval() {
        let fams = [
            MapFamily::doubling_additive(0.37),
            MapFamily::expanding_nonlinear(2, 0.1, -0.21).unwrap(),
            MapFamily::custom_piecewise(vec![0.0, 0.3, 1.0], 0.11).unwrap(),
        ];
        for fam in &fams {
            for i in 0..1000 {
                let x = i as f64 / 1000.0;
                let y = fam.eval(fam.t_star, x).unwrap();
                assert!((0.0..1.0).contains(&y), "{} gave {y}", fam.kind.name());
            }
        }
    }

    #[test]
    fn inverse_lift_roundtrip() {
        let fam = MapFamily::expanding_nonlinear(2, 0.1, 0.0).unwrap();
        for i in 0..500 {
            let x = i as f64 / 500.0;
            let l = fam.lift(0.04, x);
            let back = fam.inverse_lift(0.04, l);
            assert!((back - x).abs() < 1e-12);
        }
        let pw = MapFamily::custom_piecewise(vec![0.0, 0.25, 0.6, 1.0], 0.0).unwrap();
        for i in 0..500 {
            let x = i as f64 / 500.0;
            let l = pw.lift(0.3, x);
            let back = pw.inverse_lift(0.3, l);
            assert!((back - x).abs() < 1e-12, "x={x} back={back}");
        }
    }

    #[test]
    fn quadratic_range_stays_inside_interval() {
        let fam = MapFamily::quadratic(2.0);
        for t in [0.0, 0.5, 1.0, 1.76, 2.0] {
            for i in 0..=100 {
                let x = -1.0 + 2.0 * i as f64 / 100.0;
                let y = fam.eval(t, x).unwrap();
                assert!((1.0 - t..=1.0).contains(&y));
            }
        }
    }
}
