//! Inducing-domain selection and the inductive construction of a full-return
//! partition with return times (a random Gibbs-Markov-Young structure), plus
//! its verification.
//!
//! The construction works in 1D on full-branch expanding circle families.
//! Partition elements are intervals of the inducing domain Delta = B(p, d0),
//! each carrying a hyperbolic time n, extra steps m <= N0, the return time
//! R = n + m, and the full branch itinerary of the return chain. Geometry is
//! always reconstructed by pulling Delta back through the itinerary: every
//! backward step is one inverse-branch solve, so endpoints are stable at any
//! return time, while naive forward iteration would lose the element entirely
//! past R of about 30.

use crate::circle::{rep_near, Arc};
use crate::hyperbolic::scan_times;
use crate::map_family::{MapError, MapFamily, NoiseKernel};
use crate::orbit_engine::{random_orbit, OrbitError, Realization, Sidedness};
use crate::rng::CounterRng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GmyError {
    #[error("family is not a full-branch expanding circle map")]
    NotFullBranch,
    #[error("no N0 <= {max} makes the preimage tree {density:.6} dense (need {need:.6})")]
    DomainSelection { max: u32, density: f64, need: f64 },
    #[error("map error: {0}")]
    Map(#[from] MapError),
    #[error("orbit error: {0}")]
    Orbit(#[from] OrbitError),
    #[error("element failed validation at step {step}: residual {residual:e}")]
    ChainValidation { step: usize, residual: f64 },
}

/// Constants of the inducing scheme. `kappa = K0 lambda^{(R0-N0)/2}` is the
/// certified expansion bound of the return maps, `k = D0 + C0 K0` the
/// distortion budget, `eta = 1 + R0 + N0` the counting-inequality slack.
#[derive(Debug, Clone, Serialize)]
pub struct GmyConstants {
    pub p: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub n0: u32,
    pub r0: u32,
    pub lambda: f64,
    pub kappa: f64,
    pub kappa_target: f64,
    pub k0: f64,
    pub d0: f64,
    pub c0: f64,
    pub c2: f64,
    /// Distortion constant K = D0 + C0 K0 of the return maps.
    pub k: f64,
    pub eta: u32,
    /// Empirical satellite-series bound, filled after a build.
    pub l_empirical: Option<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// How the delta0 gap condition reads its expansion constant: sigma is
    /// taken as inf |f'| over the kernel support and the per-step derivative
    /// bound replaces the N0-step one, otherwise no f64-representable domain
    /// exists (see choose_inducing_domain).
    pub gap_note: String,
}

#[derive(Debug, Clone, Copy)]
pub struct DomainOptions {
    pub p: Option<f64>,
    pub lambda: Option<f64>,
    pub kappa_target: f64,
    pub max_n0: u32,
    /// Overrides the gap-condition delta0. The return-time scale of the
    /// induced structure is ~ 1/Leb(Delta) (Kac), so tower experiments need
    /// a domain wide enough that the bulk of the return-time law stays
    /// within f64-representable element widths; the override is flagged in
    /// `gap_note`.
    pub delta0: Option<f64>,
}

impl Default for DomainOptions {
    fn default() -> Self {
        DomainOptions { p: None, lambda: None, kappa_target: 0.9, max_n0: 30, delta0: None }
    }
}

/// Covering radius of a finite point set on the circle (half the largest gap).
fn covering_radius(points: &mut Vec<f64>) -> f64 {
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    let n = points.len();
    if n == 0 {
        return 0.5;
    }
    let mut max_gap = points[0] + 1.0 - points[n - 1];
    for w in points.windows(2) {
        max_gap = max_gap.max(w[1] - w[0]);
    }
    0.5 * max_gap
}

/// Internal Birkhoff estimate of the exponent used for the default lambda.
fn quick_exponent(family: &MapFamily, kernel: &NoiseKernel) -> f64 {
    let real = Realization::new(*kernel, 0x4C59_4150, 32_768, Sidedness::OneSided);
    let x0 = 0.618_033_988_749_894_9;
    match random_orbit(family, &real, x0, 32_768) {
        Ok(orbit) => {
            let tail = &orbit.log_deriv[1024..];
            tail.iter().sum::<f64>() / tail.len() as f64
        }
        Err(_) => family.derivative_bounds(kernel.center).0.ln(),
    }
}

/// Picks the inducing domain and all scheme constants.
///
/// * `p` defaults to 0; `N0` is the least depth at which the preimage tree of
///   p under the base map is `delta1/4`-dense on the circle.
/// * `K0 = (sup |f'|)^{N0}` bounds the derivative over at most N0 steps.
/// * `delta0` is the largest power of two satisfying the gap condition
///   `2 d0 S sigma^{-N0} < delta1 / S` with S = sup |f'| per step and
///   sigma = inf |f'|.
/// * `R0` is the least integer with `kappa = K0 lambda^{(R0-N0)/2}` below the
///   target.
pub fn choose_inducing_domain(
    family: &MapFamily,
    kernel: &NoiseKernel,
    delta1: f64,
    opts: DomainOptions,
) -> Result<GmyConstants, GmyError> {
    if !family.is_full_branch_expanding() {
        return Err(GmyError::NotFullBranch);
    }
    family.check_expansion(kernel, 4096, 16)?;
    let p = opts.p.unwrap_or(0.0);
    let need = delta1 / 4.0;

    // N0: grow the preimage tree of p level by level
    let mut all = vec![p];
    let mut level = vec![p];
    let mut n0 = None;
    for j in 1..=opts.max_n0 {
        let mut next = Vec::with_capacity(level.len() * family.degree as usize);
        for &y in &level {
            for k in 0..family.degree as usize {
                next.push(family.branch_inverse_point(family.t_star, y, k));
            }
        }
        level = next;
        all.extend_from_slice(&level);
        let radius = covering_radius(&mut all);
        if radius <= need {
            n0 = Some((j, radius));
            break;
        }
        if all.len() > 4_000_000 {
            return Err(GmyError::DomainSelection { max: j, density: radius, need });
        }
    }
    let (n0, _radius) = n0.ok_or_else(|| {
        let r = covering_radius(&mut all);
        GmyError::DomainSelection { max: opts.max_n0, density: r, need }
    })?;

    let (sigma_min, sigma_max) = family.derivative_bounds(kernel.center);
    let k0 = sigma_max.powi(n0 as i32);

    let lambda = opts.lambda.unwrap_or_else(|| (-quick_exponent(family, kernel) / 2.0).exp());
    assert!((0.0..1.0).contains(&lambda), "lambda {lambda} outside (0,1)");

    // delta0 from the gap condition (per-step derivative bound reading)
    let gap = delta1 * sigma_min.powi(n0 as i32) / (2.0 * sigma_max.powi(2 * n0 as i32));
    let mut delta0 = 0.25f64;
    while delta0 >= gap || delta0 > delta1 / 8.0 {
        delta0 *= 0.5;
    }
    let mut gap_note =
        "estdelta0 read with sigma = inf|f'| and per-step sup|f'|".to_string();
    if let Some(d0_override) = opts.delta0 {
        if d0_override >= gap {
            gap_note = format!(
                "delta0 = {d0_override:e} overrides the gap bound {gap:e} (return-time scale)"
            );
        }
        delta0 = d0_override;
    }

    // R0 from the kappa formula
    let mut r0 = n0 + 1;
    let kappa_of = |r: u32| k0 * lambda.powf((r - n0) as f64 / 2.0);
    while kappa_of(r0) >= opts.kappa_target {
        r0 += 1;
        assert!(r0 < 10_000, "kappa never drops below target");
    }
    let kappa = kappa_of(r0);

    let lg = family.log_deriv_lipschitz().unwrap_or(f64::NAN);
    let d0 = lg / (sigma_min - 1.0);
    let c0 = lg * lambda.sqrt() / (1.0 - lambda.sqrt());
    let k = d0 + c0 * k0;
    let c2 = (c0 * 2.0 * delta1).exp();

    Ok(GmyConstants {
        p,
        delta0,
        delta1,
        n0,
        r0,
        lambda,
        kappa,
        kappa_target: opts.kappa_target,
        k0,
        d0,
        c0,
        c2,
        k,
        eta: 1 + r0 + n0,
        l_empirical: None,
        sigma_min,
        sigma_max,
        gap_note,
    })
}

/// One partition element: the interval (lo, hi) of Delta returns onto Delta
/// after `r = n + m` steps along the recorded branch itinerary.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionElement {
    pub lo: f64,
    pub hi: f64,
    /// Hyperbolic time at which the element was created.
    pub n: u32,
    /// Extra steps needed to cover Delta from the hyperbolic ball.
    pub m: u32,
    pub r: u32,
    pub branch_itinerary: Vec<u8>,
}

impl PartitionElement {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Sorted list of disjoint intervals; all the residual-set bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct IntervalSet {
    pub parts: Vec<(f64, f64)>,
}

impl IntervalSet {
    pub fn single(lo: f64, hi: f64) -> IntervalSet {
        IntervalSet { parts: vec![(lo, hi)] }
    }

    pub fn total_len(&self) -> f64 {
        self.parts.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.parts
            .binary_search_by(|&(a, b)| {
                if x < a {
                    std::cmp::Ordering::Greater
                } else if x > b {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .is_ok()
    }

    /// Whether [lo, hi] sits inside a single part.
    pub fn contains_interval(&self, lo: f64, hi: f64) -> bool {
        self.parts.iter().any(|&(a, b)| a <= lo && hi <= b)
    }

    /// Removes [lo, hi].
    pub fn subtract(&mut self, lo: f64, hi: f64) {
        let mut out = Vec::with_capacity(self.parts.len() + 1);
        for &(a, b) in &self.parts {
            if b <= lo || a >= hi {
                out.push((a, b));
            } else {
                if a < lo {
                    out.push((a, lo));
                }
                if hi < b {
                    out.push((hi, b));
                }
            }
        }
        self.parts = out;
    }

    /// Intersection of [lo, hi] with the set, as intervals.
    pub fn clip(&self, lo: f64, hi: f64) -> Vec<(f64, f64)> {
        self.parts
            .iter()
            .filter_map(|&(a, b)| {
                let l = a.max(lo);
                let h = b.min(hi);
                if h > l {
                    Some((l, h))
                } else {
                    None
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SatelliteLayer {
    pub n: u32,
    /// Interval cover of the step-n hyperbolic points still in the residual.
    pub intervals: Vec<(f64, f64)>,
    pub mass: f64,
}

/// The per-realization partition with return times, satellites and residuals.
#[derive(Debug, Clone)]
pub struct GmyPartition {
    pub constants: GmyConstants,
    pub realization: Realization,
    /// Sorted by left endpoint (Delta-frame real coordinates).
    pub elements: Vec<PartitionElement>,
    pub satellites: Vec<SatelliteLayer>,
    /// Leb(Delta^n) for n = R0..=n_max, after processing return cohort n.
    pub residual_mass: Vec<f64>,
    pub residual: IntervalSet,
    pub n_max: u32,
    /// Delta in frame coordinates.
    pub delta_lo: f64,
    pub delta_hi: f64,
    /// Estimated true return-time law: mass of Delta returning with R = r,
    /// from the per-step capture fractions of the probe sample (the stored
    /// elements are a budgeted subsample; their widths alone underrepresent
    /// the cohorts).
    pub cohort_mass: Vec<(u32, f64)>,
    /// Mass of Delta whose estimated return lies beyond the horizon.
    pub virtual_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub grid_pow: u32,
    pub max_candidates_per_step: usize,
    /// Whether to store satellite interval covers (detection always runs).
    pub satellites: bool,
    /// Bisection refinement of run boundaries for the satellite cover.
    pub refine_boundaries: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            grid_pow: 10,
            max_candidates_per_step: 64,
            satellites: true,
            refine_boundaries: true,
        }
    }
}

struct Candidate {
    lo: f64,
    hi: f64,
    n: u32,
    m: u32,
    r: u32,
    itinerary: Vec<u8>,
}

/// Branch index and the matching lift translate that place `center + m`
/// inside branch k's lift window, anchored at a known lift value.
fn branch_from_anchor(family: &MapFamily, t: f64, center: f64, anchor_lift: f64) -> (usize, f64) {
    let f0 = family.lift(t, 0.0);
    let m = (anchor_lift - center).round();
    let b_raw = (center + m - f0).floor() as i64;
    let d = family.degree as i64;
    let shift = b_raw.div_euclid(d);
    let b = b_raw.rem_euclid(d) as usize;
    (b, m - (shift * d) as f64)
}

/// Pulls an arc back through one inverse branch; mirror of
/// `MapFamily::branch_inverse_interval` that also reports the translate.
fn pull_arc(family: &MapFamily, t: f64, arc: Arc, branch: usize) -> (Arc, f64) {
    let f0 = family.lift(t, 0.0);
    let m = (f0 + branch as f64 - arc.center()).ceil();
    let lo = family.inverse_lift(t, arc.lo + m);
    let hi = family.inverse_lift(t, arc.hi + m);
    (Arc::new(lo, hi), m)
}

/// Enumerates the depth-m preimages of the circle point y under the maps
/// t_list[0..m] applied in order, together with their branch tuples.
fn preimage_tree(family: &MapFamily, t_list: &[f64], y: f64) -> Vec<(f64, Vec<u8>)> {
    let mut level: Vec<(f64, Vec<u8>)> = vec![(y, Vec::new())];
    // pull back from the last map to the first
    for t in t_list.iter().rev() {
        let mut next = Vec::with_capacity(level.len() * family.degree as usize);
        for (w, branches) in &level {
            for k in 0..family.degree as usize {
                let x = family.branch_inverse_point(*t, *w, k);
                let mut br = Vec::with_capacity(branches.len() + 1);
                br.push(k as u8);
                br.extend_from_slice(branches);
                next.push((x, br));
            }
        }
        level = next;
    }
    level
}

/// First m <= N0 at which the probe point itself returns: its forward image
/// lands in Delta and the inverse component through its own branches fits in
/// the hyperbolic ball. The fraction of probes captured this way estimates
/// the true per-step return mass of the construction (the accepted elements
/// are only a budgeted subsample of each cohort).
fn center_capture(
    family: &MapFamily,
    realization: &Realization,
    constants: &GmyConstants,
    ball_center: f64,
    n: u32,
    delta_arc: Arc,
    ball: &Arc,
) -> Option<u32> {
    let mut y = ball_center;
    let mut path = vec![y];
    for m in 0..=constants.n0 {
        if m > 0 {
            let t = realization.parameter_unchecked(n as i64 + m as i64 - 1);
            y = family.eval(t, y).ok()?;
            path.push(y);
        }
        if !delta_arc.contains_mod1(y) {
            continue;
        }
        // pull Delta back along the center's own branches
        let mut arc = delta_arc;
        let mut ok = true;
        for k in (0..m as usize).rev() {
            let t = realization.parameter_unchecked(n as i64 + k as i64);
            let anchor = family.lift(t, path[k]);
            let mm = (anchor - arc.center()).round();
            let lo = family.inverse_lift(t, arc.lo + mm);
            let hi = family.inverse_lift(t, arc.hi + mm);
            if !(hi > lo) {
                ok = false;
                break;
            }
            arc = Arc::new(lo, hi);
        }
        if ok && ball.contains_arc_mod1(&arc) {
            return Some(n + m);
        }
    }
    None
}

/// Builds the candidate associated with probe point z at hyperbolic time n:
/// the smallest m <= N0 such that the hyperbolic ball B(f^n z, delta1)
/// contains a full inverse component of Delta, pulled back to Delta along
/// z's orbit branches. The second return value is the probe's own capture
/// time, when it has one.
fn make_candidate(
    family: &MapFamily,
    realization: &Realization,
    constants: &GmyConstants,
    z_circle: f64,
    n: u32,
    delta_arc: Arc,
    frame_center: f64,
) -> Option<(Candidate, Option<u32>)> {
    let orbit = random_orbit(family, realization, z_circle, n as usize).ok()?;
    let ball_center = orbit.points[n as usize];
    let ball = Arc::around(ball_center, constants.delta1);
    let capture =
        center_capture(family, realization, constants, ball_center, n, delta_arc, &ball);

    // smallest m whose inverse component of Delta fits inside the ball
    let mut found: Option<(u32, Arc, Vec<u8>)> = None;
    for m in 0..=constants.n0 {
        let t_list: Vec<f64> = (0..m as i64)
            .map(|j| realization.parameter_unchecked(n as i64 + j))
            .collect();
        let tree = preimage_tree(family, &t_list, constants.p.rem_euclid(1.0));
        let mut best: Option<(f64, Arc, Vec<u8>)> = None;
        for (w, branches) in tree {
            let d = crate::circle::circle_dist(w, ball_center);
            if d >= constants.delta1 {
                continue;
            }
            // pull Delta back through this branch tuple
            let mut arc = delta_arc;
            let mut ok = true;
            for (j, &b) in branches.iter().enumerate().rev() {
                let t = t_list[j];
                let (next, _) = pull_arc(family, t, arc, b as usize);
                if !(next.len() > 0.0) {
                    ok = false;
                    break;
                }
                arc = next;
            }
            if !ok || !ball.contains_arc_mod1(&arc) {
                continue;
            }
            match &best {
                Some((bd, _, _)) if *bd <= d => {}
                _ => best = Some((d, arc, branches)),
            }
        }
        if let Some((_, arc, branches)) = best {
            found = Some((m, arc, branches));
            break;
        }
    }
    let (m, j_arc, j_branches) = found?;

    // pull the component back n steps along z's orbit branches
    let mut arc = j_arc;
    let mut itinerary = vec![0u8; n as usize];
    for k in (0..n as usize).rev() {
        let t = realization.parameter_unchecked(k as i64);
        let anchor = family.lift(t, orbit.points[k]);
        let (b, _) = branch_from_anchor(family, t, arc.center(), anchor);
        let (next, _) = pull_arc(family, t, arc, b);
        itinerary[k] = b as u8;
        arc = next;
    }
    itinerary.extend_from_slice(&j_branches);

    // frame coordinates near p
    let c = rep_near(arc.center(), frame_center);
    let half = 0.5 * arc.len();
    Some((
        Candidate { lo: c - half, hi: c + half, n, m, r: n + m, itinerary },
        capture,
    ))
}

/// Reconstructs the full arc chain of an element by pulling Delta back
/// through the stored itinerary. arcs[k] is the element's image at time k;
/// arcs[r] = Delta, arcs[0] = the element.
pub fn element_chain(
    family: &MapFamily,
    realization: &Realization,
    constants: &GmyConstants,
    element: &PartitionElement,
) -> Vec<Arc> {
    let r = element.r as usize;
    let mut arcs = vec![Arc::new(0.0, 0.0); r + 1];
    arcs[r] = Arc::new(constants.p - constants.delta0, constants.p + constants.delta0);
    for k in (0..r).rev() {
        let t = realization.parameter_unchecked(k as i64);
        let (next, _) = pull_arc(family, t, arcs[k + 1], element.branch_itinerary[k] as usize);
        arcs[k] = next;
    }
    arcs
}

/// Pulls a single image point y (in Delta, frame coordinates) back through
/// an element's chain; returns its positions at times 0..=r.
pub fn element_point_history(
    family: &MapFamily,
    realization: &Realization,
    constants: &GmyConstants,
    element: &PartitionElement,
    y_frame: f64,
) -> Vec<f64> {
    let r = element.r as usize;
    let chain = element_chain(family, realization, constants, element);
    let mut hist = vec![0.0f64; r + 1];
    hist[r] = y_frame;
    for k in (0..r).rev() {
        let t = realization.parameter_unchecked(k as i64);
        let f0 = family.lift(t, 0.0);
        let b = element.branch_itinerary[k] as usize;
        let m = (f0 + b as f64 - chain[k + 1].center()).ceil();
        hist[k] = family.inverse_lift(t, hist[k + 1] + m);
    }
    hist
}

/// Refines the boundary of a hyperbolic run by bisecting the scan predicate.
fn refine_boundary(
    family: &MapFamily,
    realization: &Realization,
    n: u32,
    lambda: f64,
    mut inside: f64,
    mut outside: f64,
) -> f64 {
    for _ in 0..20 {
        let mid = 0.5 * (inside + outside);
        let x = mid.rem_euclid(1.0);
        let hyp = match random_orbit(family, realization, x, n as usize) {
            Ok(orbit) => scan_times(&orbit.log_deriv, lambda).times.last() == Some(&(n as usize)),
            Err(_) => false,
        };
        if hyp {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    0.5 * (inside + outside)
}

/// Runs the inductive construction up to horizon `n_max`.
///
/// Differences from a straight transcription of the textbook algorithm, both
/// needed to keep the output a measurable function of the noise prefix and
/// the cost bounded:
/// * candidates are accepted globally in (R, n, left endpoint) order, so an
///   element with return time R depends only on word coordinates < R;
/// * at most `max_candidates_per_step` probe points per step spawn
///   candidates (the maximal disjoint family is taken inside that budget).
pub fn build_partition(
    family: &MapFamily,
    realization: &Realization,
    constants: &GmyConstants,
    n_max: u32,
    opts: BuildOptions,
) -> Result<GmyPartition, GmyError> {
    if !family.is_full_branch_expanding() {
        return Err(GmyError::NotFullBranch);
    }
    let p = constants.p;
    let d0 = constants.delta0;
    let delta_arc = Arc::new(p - d0, p + d0);
    let (delta_lo, delta_hi) = (p - d0, p + d0);

    let cells = 1usize << (opts.grid_pow + 1);
    let mesh = 2.0 * d0 / cells as f64;
    let horizon = n_max as usize + constants.n0 as usize;

    // probe points jittered inside their cells: exact cell centers are
    // dyadic rationals, which alias badly under power-of-two maps (all
    // orbits coincide mod 1 once 2^n cancels the mesh)
    let jitter = CounterRng::stream(
        realization.seed.wrapping_add(realization.offset as u64),
        0x4A49_5454,
    );
    let centers: Vec<f64> = (0..cells)
        .map(|i| delta_lo + (i as f64 + 0.25 + 0.5 * jitter.unit(i as u64)) * mesh)
        .collect();
    let masks: Vec<u128> = centers
        .iter()
        .map(|&c| {
            let x = c.rem_euclid(1.0);
            match random_orbit(family, realization, x, horizon) {
                Ok(orbit) => {
                    let mut mask = 0u128;
                    for t in scan_times(&orbit.log_deriv, constants.lambda).times {
                        if t <= 127 {
                            mask |= 1u128 << t;
                        }
                    }
                    mask
                }
                Err(_) => 0,
            }
        })
        .collect();

    let mut residual = IntervalSet::single(delta_lo, delta_hi);
    let mut elements: Vec<PartitionElement> = Vec::new();
    let mut satellites: Vec<SatelliteLayer> = Vec::new();
    let mut residual_mass = Vec::new();
    let mut pending: Vec<Candidate> = Vec::new();
    // renewal account for the estimated true return-time law
    let mut virtual_residual = delta_hi - delta_lo;
    let mut cohort_acc: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();

    fn accept(
        cand: Candidate,
        delta_lo: f64,
        delta_hi: f64,
        residual: &mut IntervalSet,
        elements: &mut Vec<PartitionElement>,
    ) {
        if cand.lo < delta_lo || cand.hi > delta_hi {
            return;
        }
        // below ~1e-14 the lift-inversion noise can no longer resolve the
        // interval; such candidates are numerically meaningless
        if cand.hi - cand.lo < 1e-14 {
            return;
        }
        if !residual.contains_interval(cand.lo, cand.hi) {
            return;
        }
        residual.subtract(cand.lo, cand.hi);
        elements.push(PartitionElement {
            lo: cand.lo,
            hi: cand.hi,
            n: cand.n,
            m: cand.m,
            r: cand.r,
            branch_itinerary: cand.itinerary,
        });
    }

    for n in constants.r0..=n_max {
        // flush pending candidates whose return time has been reached
        pending.sort_by(|a, b| (a.r, a.n, a.lo).partial_cmp(&(b.r, b.n, b.lo)).unwrap());
        let mut rest = Vec::new();
        for cand in pending.drain(..) {
            if cand.r <= n {
                accept(cand, delta_lo, delta_hi, &mut residual, &mut elements);
            } else {
                rest.push(cand);
            }
        }
        pending = rest;

        // detect the step-n hyperbolic set; capture state enters through the
        // exact residual clip below, not through the cell grid
        let bit = 1u128 << n;
        let flagged: Vec<usize> = (0..cells).filter(|&i| masks[i] & bit != 0).collect();

        if opts.satellites {
            // group into runs and store the interval cover
            let mut intervals: Vec<(f64, f64)> = Vec::new();
            let mut i = 0;
            while i < flagged.len() {
                let start = flagged[i];
                let mut end = start;
                while i + 1 < flagged.len() && flagged[i + 1] == end + 1 {
                    i += 1;
                    end = flagged[i];
                }
                i += 1;
                let mut lo = delta_lo + start as f64 * mesh;
                let mut hi = delta_lo + (end + 1) as f64 * mesh;
                if opts.refine_boundaries && intervals.len() < 128 {
                    if start > 0 && masks[start - 1] & bit == 0 {
                        lo = refine_boundary(
                            family,
                            realization,
                            n,
                            constants.lambda,
                            centers[start],
                            centers[start - 1],
                        );
                    }
                    if end + 1 < cells && masks[end + 1] & bit == 0 {
                        hi = refine_boundary(
                            family,
                            realization,
                            n,
                            constants.lambda,
                            centers[end],
                            centers[end + 1],
                        );
                    }
                }
                intervals.push((lo.max(delta_lo), hi.min(delta_hi)));
            }
            let clipped: Vec<(f64, f64)> = intervals
                .iter()
                .flat_map(|&(lo, hi)| residual.clip(lo, hi))
                .collect();
            let mass = clipped.iter().map(|(a, b)| b - a).sum();
            satellites.push(SatelliteLayer { n, intervals: clipped, mass });
        }

        // probe a budgeted subset of the flagged residual cells for candidates
        let probe_cells: Vec<usize> = flagged
            .iter()
            .copied()
            .filter(|&i| residual.contains(centers[i]))
            .collect();
        if !probe_cells.is_empty() {
            let stride = probe_cells.len().div_ceil(opts.max_candidates_per_step);
            let mut seen = std::collections::HashSet::new();
            let mut probes = 0usize;
            let mut captured_by_r: std::collections::BTreeMap<u32, usize> =
                std::collections::BTreeMap::new();
            for &i in probe_cells.iter().step_by(stride) {
                let z = centers[i].rem_euclid(1.0);
                probes += 1;
                if let Some((cand, capture)) =
                    make_candidate(family, realization, constants, z, n, delta_arc, p)
                {
                    if let Some(r) = capture {
                        *captured_by_r.entry(r).or_insert(0) += 1;
                    }
                    if seen.insert((cand.r, cand.lo.to_bits())) {
                        pending.push(cand);
                    }
                }
            }
            // renewal update: the probes sample the still-unreturned
            // hyperbolic mass, so the captured fraction estimates the mass
            // that truly returns through this step's candidates
            if probes > 0 {
                let flagged_res_mass = probe_cells.len() as f64 * mesh;
                let active_fraction =
                    (flagged_res_mass / residual.total_len().max(f64::MIN_POSITIVE)).min(1.0);
                let active = virtual_residual * active_fraction;
                let mut captured_total = 0.0;
                for (&r, &count) in &captured_by_r {
                    let mass = active * count as f64 / probes as f64;
                    *cohort_acc.entry(r).or_insert(0.0) += mass;
                    captured_total += mass;
                }
                virtual_residual -= captured_total.min(virtual_residual);
            }
        }

        residual_mass.push(residual.total_len());
    }

    // flush what remains (return times beyond the horizon cohort)
    pending.sort_by(|a, b| (a.r, a.n, a.lo).partial_cmp(&(b.r, b.n, b.lo)).unwrap());
    for cand in pending.drain(..) {
        accept(cand, delta_lo, delta_hi, &mut residual, &mut elements);
    }
    if let Some(last) = residual_mass.last_mut() {
        *last = residual.total_len();
    }

    elements.sort_by(|a, b| a.lo.partial_cmp(&b.lo).unwrap());
    // cohorts without an accepted element carry no usable geometry; fold
    // their estimated mass back into the unresolved residual
    let explicit_r: std::collections::BTreeSet<u32> = elements.iter().map(|e| e.r).collect();
    let mut cohort_mass = Vec::new();
    for (r, mass) in cohort_acc {
        if explicit_r.contains(&r) {
            cohort_mass.push((r, mass));
        } else {
            virtual_residual += mass;
        }
    }
    Ok(GmyPartition {
        constants: constants.clone(),
        realization: *realization,
        elements,
        satellites,
        residual_mass,
        residual,
        n_max,
        delta_lo,
        delta_hi,
        cohort_mass,
        virtual_residual,
    })
}

impl GmyPartition {
    pub fn leb_delta(&self) -> f64 {
        self.delta_hi - self.delta_lo
    }

    /// Element containing the frame coordinate x, together with its index.
    pub fn element_at(&self, x: f64) -> Option<(usize, &PartitionElement)> {
        let i = self.elements.partition_point(|e| e.lo <= x);
        if i == 0 {
            return None;
        }
        let e = &self.elements[i - 1];
        (x <= e.hi).then_some((i - 1, e))
    }

    /// Partial sums of Leb(S^n) for n from R0 (satellite mass series).
    pub fn satellite_mass_series(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.satellites
            .iter()
            .map(|layer| {
                acc += layer.mass;
                acc
            })
            .collect()
    }

    /// Whether the frame point x lies in the stored step-n satellite cover.
    pub fn in_satellite(&self, n: u32, x: f64) -> bool {
        self.satellites
            .iter()
            .find(|l| l.n == n)
            .map(|l| l.intervals.iter().any(|&(a, b)| a <= x && x <= b))
            .unwrap_or(false)
    }

    /// JSON dump with constants, elements and the per-step masses.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "constants": self.constants,
            "n_max": self.n_max,
            "delta": [self.delta_lo, self.delta_hi],
            "elements": self.elements.iter().map(|e| serde_json::json!({
                "a": e.lo, "b": e.hi, "n": e.n, "m": e.m, "R": e.r,
            })).collect::<Vec<_>>(),
            "residual_mass": self.residual_mass,
            "satellite_mass": self.satellites.iter().map(|s| s.mass).collect::<Vec<_>>(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GmyReport {
    pub elements_checked: usize,
    pub pass: bool,
    /// min over elements of log|Df^R| - log(1/kappa); positive is good.
    pub worst_expansion_margin: f64,
    /// min over probe pairs of K*dist - |log ratio|; positive is good.
    pub worst_distortion_margin: f64,
    pub empirical_k: f64,
    pub bijectivity_ok: bool,
    pub disjoint_ok: bool,
    pub mass_accounting_error: f64,
    pub failures: Vec<String>,
}

/// Verifies the partition against the structure definition: every element is
/// checked for onto-Delta bijectivity along its chain, for the expansion
/// bound |Df^R| > 1/kappa, and for the distortion inequality on a probe grid
/// pulled back from Delta.
pub fn verify_gmy(family: &MapFamily, partition: &GmyPartition, probes: usize) -> GmyReport {
    let constants = &partition.constants;
    let realization = &partition.realization;
    let kappa_log = (1.0 / constants.kappa).ln();
    let mut worst_exp = f64::INFINITY;
    let mut worst_dist = f64::INFINITY;
    let mut emp_k = 0.0f64;
    let mut bijectivity_ok = true;
    let mut failures = Vec::new();

    for (idx, e) in partition.elements.iter().enumerate() {
        let chain = element_chain(family, realization, constants, e);
        // chain consistency: reconstruction lands on the stored endpoints
        let c = rep_near(chain[0].center(), constants.p);
        if (c - 0.5 * chain[0].len() - e.lo).abs() > 1e-9
            || (c + 0.5 * chain[0].len() - e.hi).abs() > 1e-9
        {
            bijectivity_ok = false;
            failures.push(format!("element {idx}: itinerary does not reproduce endpoints"));
            continue;
        }
        // stepwise forward consistency of the chain endpoints
        for k in 0..e.r as usize {
            let t = realization.parameter_unchecked(k as i64);
            let lo_img = family.lift(t, chain[k].lo);
            let hi_img = family.lift(t, chain[k].hi);
            let res = (lo_img - chain[k + 1].lo - (lo_img - chain[k + 1].lo).round())
                .abs()
                .max((hi_img - chain[k + 1].hi - (hi_img - chain[k + 1].hi).round()).abs());
            if res > 1e-9 {
                bijectivity_ok = false;
                failures.push(format!("element {idx}: step {k} image residual {res:e}"));
                break;
            }
            if chain[k].len() <= 0.0 {
                bijectivity_ok = false;
                failures.push(format!("element {idx}: degenerate interval at step {k}"));
                break;
            }
        }

        // probe grid pulled back from Delta (stable against expansion)
        let np = probes.max(2);
        let mut logs = Vec::with_capacity(np);
        let mut ys = Vec::with_capacity(np);
        let mut xs = Vec::with_capacity(np);
        for i in 0..np {
            let y = partition.delta_lo
                + (partition.delta_hi - partition.delta_lo) * i as f64 / (np - 1) as f64;
            let hist = element_point_history(family, realization, constants, e, y);
            let mut s = 0.0;
            for (k, h) in hist.iter().enumerate().take(e.r as usize) {
                let t = realization.parameter_unchecked(k as i64);
                s += family.lift_derivative(t, h.rem_euclid(1.0)).abs().ln();
            }
            logs.push(s);
            ys.push(y);
            xs.push(hist[0]);
        }
        // monotone (orientation-preserving lifts)
        if !xs.windows(2).all(|w| w[0] < w[1]) {
            bijectivity_ok = false;
            failures.push(format!("element {idx}: probe preimages not monotone"));
        }
        for s in &logs {
            worst_exp = worst_exp.min(s - kappa_log);
        }
        for i in 0..np {
            for j in (i + 1)..np {
                let dist = (ys[j] - ys[i]).abs();
                if dist == 0.0 {
                    continue;
                }
                let lhs = (logs[i] - logs[j]).abs();
                emp_k = emp_k.max(lhs / dist);
                if constants.k.is_finite() {
                    worst_dist = worst_dist.min(constants.k * dist - lhs);
                }
            }
        }
    }

    // pairwise disjointness of sorted elements
    let mut disjoint_ok = true;
    for w in partition.elements.windows(2) {
        if w[1].lo < w[0].hi - 1e-12 {
            disjoint_ok = false;
            failures.push(format!("overlap between elements at {} and {}", w[0].lo, w[1].lo));
        }
    }

    let covered: f64 = partition.elements.iter().map(|e| e.width()).sum();
    let mass_err = (partition.leb_delta() - covered - partition.residual.total_len()).abs();

    let pass = bijectivity_ok
        && disjoint_ok
        && worst_exp > 0.0
        && (worst_dist >= -1e-12 || !constants.k.is_finite())
        && mass_err < 1e-9
        && failures.is_empty();
    GmyReport {
        elements_checked: partition.elements.len(),
        pass,
        worst_expansion_margin: worst_exp,
        worst_distortion_margin: worst_dist,
        empirical_k: emp_k,
        bijectivity_ok,
        disjoint_ok,
        mass_accounting_error: mass_err,
        failures,
    }
}

/// Covering diagnostic: sampled points of Delta with a hyperbolic time n in
/// [R0, n_max] must lie in the step-n satellite cover or in an element
/// created at a step <= n.
pub fn covering_check(
    family: &MapFamily,
    partition: &GmyPartition,
    n_points: usize,
    seed: u64,
) -> (usize, usize) {
    let constants = &partition.constants;
    let rng = CounterRng::stream(seed, 0x434F_5645);
    let mut checked = 0;
    let mut misses = 0;
    let horizon = partition.n_max as usize;
    for i in 0..n_points as u64 {
        let x_frame = partition.delta_lo + partition.leb_delta() * rng.unit(i);
        let x = x_frame.rem_euclid(1.0);
        let Ok(orbit) = random_orbit(family, &partition.realization, x, horizon) else {
            continue;
        };
        let times = scan_times(&orbit.log_deriv, constants.lambda).times;
        for &n in times.iter().filter(|&&t| t >= constants.r0 as usize) {
            checked += 1;
            let in_element = partition
                .element_at(x_frame)
                .map(|(_, e)| e.n as usize <= n)
                .unwrap_or(false);
            if !in_element && !partition.in_satellite(n as u32, x_frame) {
                misses += 1;
            }
        }
    }
    (checked, misses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_family::{MapFamily, NoiseKernel};

    fn doubling_constants(lambda: Option<f64>) -> GmyConstants {
        let fam = MapFamily::doubling_additive(0.0);
        let kernel = NoiseKernel::dirac(0.0);
        choose_inducing_domain(
            &fam,
            &kernel,
            0.1,
            DomainOptions { lambda, ..DomainOptions::default() },
        )
        .unwrap()
    }

    #[test]
    fn doubling_domain_selection_matches_dyadic_mesh() {
        let c = doubling_constants(Some(0.75));
        // dyadic preimages up to level j have mesh 2^-j; least j with
        // 2^-(j+1) <= 0.025 is 5
        assert_eq!(c.n0, 5);
        assert_eq!(c.k0, 32.0);
        // least R0 with 32 * 0.75^{(R0-5)/2} < 0.9
        assert_eq!(c.r0, 30);
        assert!(c.kappa < 0.9);
        assert!(32.0 * 0.75f64.powf((29.0 - 5.0) / 2.0) >= 0.9);
        assert_eq!(c.eta, 1 + 30 + 5);
    }

    #[test]
    fn doubling_default_lambda_and_gap() {
        let c = doubling_constants(None);
        // default lambda = exp(-log2 / 2)
        assert!((c.lambda - (-std::f64::consts::LN_2 / 2.0).exp()).abs() < 1e-12);
        // delta0 is a power of two below the gap bound
        let gap = 0.1 * 32.0 / (2.0 * 1024.0);
        assert!(c.delta0 < gap);
        assert!(c.delta0.log2().fract() == 0.0);
        assert!(c.delta0 > 0.0 && c.delta0 < c.delta1 / 4.0);
    }

    fn build_doubling_dirac() -> (MapFamily, GmyPartition) {
        let fam = MapFamily::doubling_additive(0.0);
        let c = doubling_constants(None);
        let real = Realization::new(NoiseKernel::dirac(0.0), 1, 0, Sidedness::OneSided);
        let part = build_partition(&fam, &real, &c, 40, BuildOptions::default()).unwrap();
        (fam, part)
    }

    #[test]
    fn dirac_doubling_elements_are_exact_dyadic_returns() {
        let (fam, part) = build_doubling_dirac();
        assert!(!part.elements.is_empty(), "no elements built");
        for e in &part.elements {
            assert!(e.r >= part.constants.r0);
            assert_eq!(e.r, e.n + e.m);
            assert!(e.m <= part.constants.n0);
            // dirac doubling is exact dyadic arithmetic: forward iteration
            // of the endpoints reproduces Delta's endpoints exactly
            let mut lo = e.lo.rem_euclid(1.0);
            let mut hi = e.hi.rem_euclid(1.0);
            for _ in 0..e.r {
                lo = fam.eval(0.0, lo).unwrap();
                hi = fam.eval(0.0, hi).unwrap();
            }
            let lo_expect = (part.delta_lo).rem_euclid(1.0);
            let hi_expect = (part.delta_hi).rem_euclid(1.0);
            assert!(
                crate::circle::circle_dist(lo, lo_expect) < 1e-9,
                "lo image {lo} vs {lo_expect}"
            );
            assert!(crate::circle::circle_dist(hi, hi_expect) < 1e-9);
        }
    }

    #[test]
    fn partition_invariants_hold() {
        let (_fam, part) = build_doubling_dirac();
        // residual non-increasing
        for w in part.residual_mass.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        // mass accounting
        let covered: f64 = part.elements.iter().map(|e| e.width()).sum();
        let err = (part.leb_delta() - covered - part.residual.total_len()).abs();
        assert!(err < 1e-9, "mass accounting error {err}");
        // disjoint
        for w in part.elements.windows(2) {
            assert!(w[1].lo >= w[0].hi - 1e-12);
        }
        // satellite partial sums non-decreasing
        let sums = part.satellite_mass_series();
        for w in sums.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn verify_passes_on_dirac_doubling() {
        let (fam, part) = build_doubling_dirac();
        let report = verify_gmy(&fam, &part, 10);
        assert!(report.pass, "failures: {:?}", report.failures);
        // affine branches: zero distortion and empirical K = 0
        assert_eq!(report.empirical_k, 0.0);
        assert!(report.worst_expansion_margin > 0.0);
    }

    #[test]
    fn verify_passes_on_noisy_nonlinear() {
        let fam = MapFamily::expanding_nonlinear(2, 0.1, 0.0).unwrap();
        let kernel = NoiseKernel::uniform(0.0, 0.05);
        // lambda below the default: keeps R0 (and so the element scale)
        // within comfortable f64 range for the nonlinear lift inversions
        let c = choose_inducing_domain(
            &fam,
            &kernel,
            0.1,
            DomainOptions { lambda: Some(0.55), ..DomainOptions::default() },
        )
        .unwrap();
        let real = Realization::new(kernel, 3, 0, Sidedness::OneSided);
        let part = build_partition(
            &fam,
            &real,
            &c,
            c.r0 + 10,
            BuildOptions { max_candidates_per_step: 32, ..BuildOptions::default() },
        )
        .unwrap();
        assert!(!part.elements.is_empty(), "no elements for nonlinear family");
        let report = verify_gmy(&fam, &part, 10);
        assert!(report.pass, "failures: {:?}", report.failures);
        assert!(report.empirical_k <= c.k);
    }

    #[test]
    fn prefix_measurability_of_elements() {
        // partitions built to horizons L and L' >= L agree on all elements
        // with R <= L: the construction never reads coordinates past the
        // return time cohort it is processing
        let fam = MapFamily::doubling_additive(0.0);
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let c = choose_inducing_domain(&fam, &kernel, 0.1, DomainOptions::default()).unwrap();
        let real_a = Realization::new(kernel, 10, 0, Sidedness::OneSided);
        let part_a =
            build_partition(&fam, &real_a, &c, c.r0 + 8, BuildOptions::default()).unwrap();
        let ell = c.r0 + 4;
        let part_b = build_partition(&fam, &real_a, &c, ell, BuildOptions::default()).unwrap();
        let a_early: Vec<_> = part_a.elements.iter().filter(|e| e.r <= ell).collect();
        let b_early: Vec<_> = part_b.elements.iter().filter(|e| e.r <= ell).collect();
        assert_eq!(a_early.len(), b_early.len());
        for (x, y) in a_early.iter().zip(b_early.iter()) {
            assert_eq!(x.lo.to_bits(), y.lo.to_bits());
            assert_eq!(x.hi.to_bits(), y.hi.to_bits());
            assert_eq!(x.r, y.r);
        }
    }

    #[test]
    fn covering_has_zero_misses_for_doubling() {
        let fam = MapFamily::doubling_additive(0.0);
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let c = choose_inducing_domain(&fam, &kernel, 0.1, DomainOptions::default()).unwrap();
        let real = Realization::new(kernel, 21, 0, Sidedness::OneSided);
        let part = build_partition(&fam, &real, &c, c.r0 + 10, BuildOptions::default()).unwrap();
        let (checked, misses) = covering_check(&fam, &part, 200, 99);
        assert!(checked > 0);
        assert_eq!(misses, 0, "{misses} of {checked} covering misses");
    }

    #[test]
    fn interval_set_operations() {
        let mut s = IntervalSet::single(0.0, 1.0);
        s.subtract(0.2, 0.3);
        s.subtract(0.5, 0.6);
        assert!((s.total_len() - 0.8).abs() < 1e-15);
        assert!(s.contains(0.1));
        assert!(!s.contains(0.25));
        assert!(s.contains_interval(0.61, 0.99));
        assert!(!s.contains_interval(0.25, 0.55));
        let clipped = s.clip(0.25, 0.55);
        let len: f64 = clipped.iter().map(|(a, b)| b - a).sum();
        assert!((len - 0.2).abs() < 1e-15);
    }
}
