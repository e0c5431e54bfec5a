//! Induced measures on the inducing domain over two-sided noise, the tower
//! map they are invariant under, return-time statistics with the counting
//! inequality, and the projection to the absolutely continuous stationary
//! measure.
//!
//! The induced density of a word is approximated by a memoized level
//! recursion: level-k mass on the domain of shift s is assembled by pushing
//! level-(k-1) mass of the shifted words through the return maps of their
//! partitions. Pushforwards use the stored branch itineraries, never forward
//! iteration, so every image interval is exact at any return time.

use crate::circle::{rep_near, Arc};
use crate::gmy_builder::{
    build_partition, element_chain, BuildOptions, GmyConstants, GmyError, GmyPartition,
};
use crate::hyperbolic::scan_times;
use crate::map_family::MapFamily;
use crate::orbit_engine::{random_orbit, Realization};
use crate::rng::CounterRng;
use serde::Serialize;
use std::collections::HashMap;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TowerError {
    #[error("partition build failed: {0}")]
    Build(#[from] GmyError),
    #[error("point {0} lies in the residual set (no return defined)")]
    NoReturn(f64),
    #[error("induced-measure iteration did not converge: L1 delta {delta:e} after {levels} levels")]
    NoConvergence { delta: f64, levels: usize },
    #[error("partition has no elements; induced measure undefined")]
    EmptyPartition,
}

/// Piecewise-constant density: `weights` are density values per bin, so the
/// carried mass is `sum(weights) * bin_width`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Density {
    pub support: (f64, f64),
    pub bins: usize,
    pub weights: Vec<f64>,
    pub total_mass: f64,
}

impl Density {
    pub fn zero(support: (f64, f64), bins: usize) -> Density {
        assert!(bins.is_power_of_two(), "bins must be a power of two");
        Density { support, bins, weights: vec![0.0; bins], total_mass: 0.0 }
    }

    pub fn lebesgue(support: (f64, f64), bins: usize) -> Density {
        let mut d = Density::zero(support, bins);
        let w = 1.0 / (support.1 - support.0);
        d.weights = vec![w; bins];
        d.total_mass = 1.0;
        d
    }

    pub fn bin_width(&self) -> f64 {
        (self.support.1 - self.support.0) / self.bins as f64
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() * self.bin_width()
    }

    /// Deposits `mass` spread uniformly over [lo, hi] (clipped to support).
    /// Negative masses subtract (used by exclusion corrections).
    pub fn deposit(&mut self, lo: f64, hi: f64, mass: f64) {
        if mass == 0.0 || hi <= lo {
            return;
        }
        let h = self.bin_width();
        let (s0, _s1) = self.support;
        let a = ((lo - s0) / h).floor().max(0.0) as usize;
        let b = (((hi - s0) / h).ceil() as usize).min(self.bins);
        if a >= self.bins || b == 0 {
            return;
        }
        let dens = mass / (hi - lo);
        for i in a..b {
            let bin_lo = s0 + i as f64 * h;
            let bin_hi = bin_lo + h;
            let overlap = (hi.min(bin_hi) - lo.max(bin_lo)).max(0.0);
            self.weights[i] += dens * overlap / h;
        }
        self.total_mass = self.mass();
    }

    /// Deposits mass over a circle arc (support must be the unit circle).
    pub fn deposit_mod1(&mut self, arc: Arc, mass: f64) {
        let lo = arc.lo.rem_euclid(1.0);
        let len = arc.len().min(1.0);
        if lo + len <= 1.0 {
            self.deposit(lo, lo + len, mass);
        } else {
            let first = 1.0 - lo;
            self.deposit(lo, 1.0, mass * first / len);
            self.deposit(0.0, len - first, mass * (len - first) / len);
        }
    }

    pub fn normalize(&mut self) {
        let m = self.mass();
        if m > 0.0 {
            for w in &mut self.weights {
                *w /= m;
            }
        }
        self.total_mass = self.mass();
    }

    pub fn l1_distance(&self, other: &Density) -> f64 {
        assert_eq!(self.bins, other.bins);
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.bin_width()
    }

    /// Total-variation distance between probability densities.
    pub fn tv_distance(&self, other: &Density) -> f64 {
        0.5 * self.l1_distance(other)
    }

    /// Aggregates to a coarser power-of-two resolution.
    pub fn coarsen(&self, bins: usize) -> Density {
        assert!(bins.is_power_of_two() && bins <= self.bins);
        let k = self.bins / bins;
        let mut out = Density::zero(self.support, bins);
        for (i, w) in self.weights.iter().enumerate() {
            out.weights[i / k] += w / k as f64;
        }
        out.total_mass = out.mass();
        out
    }

    /// Inverse-CDF sampler data for StartSampler::Cdf.
    pub fn cdf_sampler(&self) -> crate::orbit_engine::StartSampler {
        let h = self.bin_width();
        let edges: Vec<f64> = (0..=self.bins).map(|i| self.support.0 + i as f64 * h).collect();
        let mut cum = Vec::with_capacity(self.bins);
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w * h;
            cum.push(acc);
        }
        crate::orbit_engine::StartSampler::Cdf { edges, cumulative: cum }
    }
}

/// Counting statistics of one tower orbit up to horizon n.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TowerOrbitStats {
    pub n: usize,
    /// Hyperbolic times of the base orbit.
    pub h_n: usize,
    /// Block-shifted satellite memberships.
    pub s_n: usize,
    /// Completed returns.
    pub r_n: usize,
}

/// eta R + S >= H, evaluated exactly on integers.
pub fn counting_inequality_check(stats: &TowerOrbitStats, constants: &GmyConstants) -> bool {
    constants.eta as usize * stats.r_n + stats.s_n >= stats.h_n
}

#[derive(Debug, Clone, Serialize)]
pub struct InducedDiagnostics {
    pub levels: usize,
    /// L1 distance between the last two levels.
    pub l1_delta: f64,
    /// Running sup of the induced density relative to Lebesgue on Delta.
    pub k1: f64,
    /// Mass retained by one pushforward sweep before renormalization.
    pub capture_rate: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionDiagnostics {
    /// Mass fraction of the series truncated past the depth.
    pub truncation_residual: f64,
    pub depth: usize,
    /// Pre-normalization projected mass (= the return-time integral).
    pub mu_tilde_mass: f64,
    pub warning: Option<String>,
}

/// Per-word induced mass resolved on the partition elements.
struct NuData {
    element_mass: Vec<f64>,
    density: Density,
    capture: f64,
}

/// Builder and cache for everything attached to one two-sided word: shifted
/// partitions, induced measures at each level, element image profiles.
pub struct TowerLab<'a> {
    pub family: &'a MapFamily,
    pub base: Realization,
    pub constants: &'a GmyConstants,
    pub n_max: u32,
    pub bins: usize,
    pub levels: usize,
    pub build_opts: BuildOptions,
    partitions: HashMap<i64, Rc<GmyPartition>>,
    nus: HashMap<(i64, usize), Rc<NuData>>,
    profiles: HashMap<(i64, usize), Rc<Vec<f64>>>,
}

/// Segments of the per-element image-density profile on Delta.
const PROFILE_SEGS: usize = 8;

impl<'a> TowerLab<'a> {
    pub fn new(
        family: &'a MapFamily,
        base: Realization,
        constants: &'a GmyConstants,
        n_max: u32,
        bins: usize,
        levels: usize,
        build_opts: BuildOptions,
    ) -> Self {
        TowerLab {
            family,
            base,
            constants,
            n_max,
            bins,
            levels,
            build_opts,
            partitions: HashMap::new(),
            nus: HashMap::new(),
            profiles: HashMap::new(),
        }
    }

    /// Partition of the word shifted s steps into the past (sigma-bar^{-s}).
    pub fn partition(&mut self, s: i64) -> Result<Rc<GmyPartition>, TowerError> {
        if let Some(p) = self.partitions.get(&s) {
            return Ok(p.clone());
        }
        let real = self.base.shifted(-s);
        let part = build_partition(self.family, &real, self.constants, self.n_max, self.build_opts)?;
        let rc = Rc::new(part);
        self.partitions.insert(s, rc.clone());
        Ok(rc)
    }

    /// Image-density profile of element `idx` of the shift-s partition:
    /// mass fractions deposited on the PROFILE_SEGS equal segments of Delta.
    /// Affine families push exactly uniformly, so the profile is flat there.
    fn profile(&mut self, s: i64, idx: usize) -> Result<Rc<Vec<f64>>, TowerError> {
        if let Some(p) = self.profiles.get(&(s, idx)) {
            return Ok(p.clone());
        }
        let flat = self.family.log_deriv_lipschitz() == Some(0.0);
        let fractions = if flat {
            vec![1.0 / PROFILE_SEGS as f64; PROFILE_SEGS]
        } else {
            let part = self.partition(s)?;
            let e = &part.elements[idx];
            let real = self.base.shifted(-s);
            // pull the segment edges of Delta back through the chain; the
            // source widths give the inverse-derivative profile
            let mut edges = Vec::with_capacity(PROFILE_SEGS + 1);
            let (dlo, dhi) = (part.delta_lo, part.delta_hi);
            for i in 0..=PROFILE_SEGS {
                let y = dlo + (dhi - dlo) * i as f64 / PROFILE_SEGS as f64;
                let hist = crate::gmy_builder::element_point_history(
                    self.family,
                    &real,
                    self.constants,
                    e,
                    y,
                );
                edges.push(hist[0]);
            }
            let total: f64 = edges[PROFILE_SEGS] - edges[0];
            let mut f = Vec::with_capacity(PROFILE_SEGS);
            for i in 0..PROFILE_SEGS {
                f.push(((edges[i + 1] - edges[i]) / total).max(0.0));
            }
            f
        };
        let rc = Rc::new(fractions);
        self.profiles.insert((s, idx), rc.clone());
        Ok(rc)
    }

    /// Level-k induced mass for the shift-s word.
    fn nu(&mut self, s: i64, level: usize) -> Result<Rc<NuData>, TowerError> {
        if let Some(n) = self.nus.get(&(s, level)) {
            return Ok(n.clone());
        }
        let part = self.partition(s)?;
        if part.elements.is_empty() {
            return Err(TowerError::EmptyPartition);
        }
        // masses stay unnormalized throughout: any normalization here would
        // mix in the widths of elements whose data lies in the future of the
        // word, breaking strict past-measurability of the induced family
        let data = if level == 0 {
            // Lebesgue restricted to the element union
            let element_mass: Vec<f64> = part.elements.iter().map(|e| e.width()).collect();
            let mut density = Density::zero((part.delta_lo, part.delta_hi), self.bins);
            for (e, &m) in part.elements.iter().zip(&element_mass) {
                density.deposit(e.lo, e.hi, m);
            }
            NuData { element_mass, density, capture: 1.0 }
        } else {
            // push level-(k-1) mass of the deeper shifts through the returns
            let mut density = Density::zero((part.delta_lo, part.delta_hi), self.bins);
            let r_values: std::collections::BTreeSet<u32> = {
                // the incoming cohorts are exactly the return times present
                // in the deeper partitions; scan a window of shifts
                let mut set = std::collections::BTreeSet::new();
                for n in self.constants.r0..=(self.n_max + self.constants.n0) {
                    set.insert(n);
                }
                set
            };
            let (dlo, dhi) = (part.delta_lo, part.delta_hi);
            let seg = (dhi - dlo) / PROFILE_SEGS as f64;
            let mut pushed = 0.0;
            for &n in &r_values {
                let src = self.partition(s + n as i64)?;
                if src.elements.is_empty() {
                    continue;
                }
                let src_nu = self.nu(s + n as i64, level - 1)?;
                for (idx, e) in src.elements.iter().enumerate() {
                    if e.r != n {
                        continue;
                    }
                    let m = src_nu.element_mass[idx];
                    if m <= 0.0 {
                        continue;
                    }
                    let prof = self.profile(s + n as i64, idx)?;
                    for (i, frac) in prof.iter().enumerate() {
                        density.deposit(dlo + i as f64 * seg, dlo + (i + 1) as f64 * seg, m * frac);
                    }
                    pushed += m;
                }
            }
            if pushed <= 0.0 {
                return Err(TowerError::EmptyPartition);
            }
            // element masses re-read from the pushed density
            let h = density.bin_width();
            let element_mass: Vec<f64> = part
                .elements
                .iter()
                .map(|e| {
                    let mid = 0.5 * (e.lo + e.hi);
                    let bin = (((mid - dlo) / h) as usize).min(self.bins - 1);
                    density.weights[bin] * e.width()
                })
                .collect();
            NuData { element_mass, density, capture: pushed }
        };
        let rc = Rc::new(data);
        self.nus.insert((s, level), rc.clone());
        Ok(rc)
    }

    /// The induced density of the base word (normalized to a probability on
    /// Delta) with convergence diagnostics.
    pub fn induced(&mut self) -> Result<(Density, InducedDiagnostics), TowerError> {
        let last = self.nu(0, self.levels)?;
        let prev = self.nu(0, self.levels.saturating_sub(1))?;
        let mut d_last = last.density.clone();
        let mut d_prev = prev.density.clone();
        d_last.normalize();
        d_prev.normalize();
        let l1_delta = d_last.l1_distance(&d_prev);
        let part = self.partition(0)?;
        let k1 = d_last
            .weights
            .iter()
            .fold(0.0f64, |a, &w| a.max(w * part.leb_delta()));
        Ok((
            d_last,
            InducedDiagnostics {
                levels: self.levels,
                l1_delta,
                k1,
                capture_rate: last.capture,
                elements: part.elements.len(),
            },
        ))
    }

    /// Cohort-law masses per element: the estimated true return mass of each
    /// cohort, split over its stored elements by width. The stored elements
    /// are a budgeted subsample of each cohort, so their bare widths would
    /// concentrate the law at the earliest returns.
    fn cohort_weighted(part: &GmyPartition) -> Vec<f64> {
        let mut cohort_width: HashMap<u32, f64> = HashMap::new();
        for e in &part.elements {
            *cohort_width.entry(e.r).or_insert(0.0) += e.width();
        }
        let cohort_mass: HashMap<u32, f64> = part.cohort_mass.iter().copied().collect();
        part.elements
            .iter()
            .map(|e| {
                let w = cohort_width[&e.r];
                let m = cohort_mass.get(&e.r).copied().unwrap_or(w);
                m * e.width() / w
            })
            .collect()
    }

    /// Per-element induced masses (R value, mass) of the base word,
    /// normalized to total mass one over the explicit cohorts.
    pub fn return_time_masses(&mut self) -> Result<Vec<(u32, f64)>, TowerError> {
        let part = self.partition(0)?;
        let masses = Self::cohort_weighted(&part);
        let total: f64 = masses.iter().sum();
        Ok(part
            .elements
            .iter()
            .zip(&masses)
            .map(|(e, &m)| (e.r, m / total))
            .collect())
    }

    /// Projection of the induced family to a density on the whole circle:
    /// for each j <= depth, the mass of the shift-j word not yet returned by
    /// time j is carried forward along its stored chain arcs.
    ///
    /// The layer-j deposit is decomposed as {R > j} = {R >= j} minus
    /// {R = j}. The {R >= j} part does not depend on the last noise
    /// coordinate, so that coordinate is integrated out analytically: the
    /// (j-1)-step arc is pushed through the annealed kernel quadrature
    /// instead of the single realized map (an exact conditional expectation
    /// that removes most of the word-to-word variance). The {R = j} part
    /// lands exactly on Delta by construction and is subtracted there; this
    /// keeps the on-Delta mass budget of the layer sum exact.
    pub fn project(
        &mut self,
        depth: usize,
        circle_bins: usize,
        t_nodes: usize,
    ) -> Result<(Density, ProjectionDiagnostics), TowerError> {
        let mut mu = Density::zero((0.0, 1.0), circle_bins);
        let mut mu_tilde_mass = 0.0;
        let mut missed = 0.0;
        let nodes = self.base.kernel.quadrature_nodes(t_nodes);
        let delta_arc = Arc::new(
            self.constants.p - self.constants.delta0,
            self.constants.p + self.constants.delta0,
        );
        for j in 0..=depth as i64 {
            let part = self.partition(j)?;
            let masses = Self::cohort_weighted(&part);
            let explicit: f64 = masses.iter().sum();
            let total = explicit + part.virtual_residual;
            let real = self.base.shifted(-j);
            let mut returning_now = 0.0;
            for (idx, e) in part.elements.iter().enumerate() {
                let m = masses[idx] / total;
                if m <= 0.0 {
                    continue;
                }
                if j == 0 {
                    if e.r > 0 {
                        mu.deposit_mod1(Arc::new(e.lo, e.hi), m);
                        mu_tilde_mass += m;
                    }
                } else if (e.r as i64) >= j {
                    let chain = element_chain(self.family, &real, self.constants, e);
                    let prev = chain[(j - 1) as usize];
                    let share = m / nodes.len() as f64;
                    for &t in &nodes {
                        let lo = self.family.lift(t, prev.lo);
                        let hi = self.family.lift(t, prev.hi);
                        mu.deposit_mod1(Arc::new(lo, hi.min(lo + 1.0 - 1e-12)), share);
                    }
                    if (e.r as i64) == j {
                        returning_now += m;
                    } else {
                        mu_tilde_mass += m;
                    }
                }
                if j == 0 {
                    missed += m * ((e.r as f64 - depth as f64 - 1.0).max(0.0));
                }
            }
            if j > 0 && returning_now > 0.0 {
                // the R = j cohort has landed on Delta; remove it there
                mu.deposit_mod1(delta_arc, -returning_now);
            }
            if j == 0 {
                // the virtual tail never returns within the horizon: its
                // layers (essentially fully spread) are not deposited
                missed += part.virtual_residual / total * (self.n_max as f64 + 1.0);
            }
        }
        let truncation_residual = missed / (mu_tilde_mass + missed).max(f64::MIN_POSITIVE);
        let warning = (truncation_residual > 0.05)
            .then(|| format!("truncation residual {truncation_residual:.3} above 5%"));
        for w in &mut mu.weights {
            *w = w.max(0.0);
        }
        mu.normalize();
        Ok((
            mu,
            ProjectionDiagnostics {
                truncation_residual,
                depth,
                mu_tilde_mass,
                warning,
            },
        ))
    }
}

/// One application of the tower map at a point of the stored partition:
/// returns the landing point in Delta-frame coordinates, the return time
/// used, and the realization shifted by it. Points of the residual set have
/// no return.
pub fn tower_map_step(
    family: &MapFamily,
    realization: &Realization,
    partition: &GmyPartition,
    x_frame: f64,
) -> Result<(Realization, f64, u32), TowerError> {
    let (_, e) = partition.element_at(x_frame).ok_or(TowerError::NoReturn(x_frame))?;
    let chain = element_chain(family, realization, &partition.constants, e);
    let mut x = x_frame.rem_euclid(1.0);
    for k in 0..e.r as usize {
        let t = realization.parameter_unchecked(k as i64);
        x = family.eval(t, x).unwrap_or(x);
        // keep the orbit on the element's branch chain; rounding at arc
        // boundaries is snapped back
        let arc = chain[k + 1];
        let r = rep_near(x, arc.center());
        if r < arc.lo {
            x = arc.lo.rem_euclid(1.0);
        } else if r > arc.hi {
            x = arc.hi.rem_euclid(1.0);
        }
    }
    let landed = rep_near(x, partition.constants.p);
    Ok((realization.shifted(e.r as i64), landed, e.r))
}

/// How return times are resolved when walking tower orbits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InducingMode {
    /// Only the elements of the stored partitions count as returns; points
    /// of the residual never return.
    Stored,
    /// Return times are synthesized pointwise: the first hyperbolic time at
    /// which the orbit's hyperbolic ball holds a full inverse component of
    /// Delta containing the orbit point. Every block then genuinely returns,
    /// which exercises the counting inequality with real return statistics.
    Pointwise { horizon: u32 },
}

/// First pointwise return of (word, x): smallest n >= R0 hyperbolic for the
/// orbit such that some depth-m inverse component of Delta, m <= N0, fits in
/// the hyperbolic ball and contains f^n(x). Returns (R, landing point).
fn pointwise_return(
    family: &MapFamily,
    realization: &Realization,
    constants: &GmyConstants,
    x: f64,
    horizon: u32,
) -> Option<(u32, f64)> {
    let orbit = random_orbit(family, realization, x, horizon as usize).ok()?;
    let times = scan_times(&orbit.log_deriv, constants.lambda).times;
    let p = constants.p.rem_euclid(1.0);
    for &n in times.iter().filter(|&&t| t >= constants.r0 as usize) {
        let y = orbit.points[n];
        for m in 0..=constants.n0 {
            let t_list: Vec<f64> = (0..m as i64)
                .map(|j| realization.parameter_unchecked(n as i64 + j))
                .collect();
            // the inverse component of Delta through the branch of y
            let mut arc = Arc::new(constants.p - constants.delta0, constants.p + constants.delta0);
            let mut z = p;
            let mut ok = true;
            let mut y_img = y;
            // forward images of y under the next m maps
            let mut y_path = vec![y];
            for t in &t_list {
                y_img = family.eval(*t, y_img).ok()?;
                y_path.push(y_img);
            }
            // pull Delta back along the branches of y's own path
            for (j, t) in t_list.iter().enumerate().rev() {
                let anchor = family.lift(*t, y_path[j]);
                let mcoef = (anchor - arc.center()).round();
                let lo = family.inverse_lift(*t, arc.lo + mcoef);
                let hi = family.inverse_lift(*t, arc.hi + mcoef);
                if !(hi > lo) {
                    ok = false;
                    break;
                }
                arc = Arc::new(lo, hi);
                z = family.inverse_lift(*t, family.lift(*t, y_path[j]));
            }
            let _ = z;
            if !ok {
                continue;
            }
            let ball = Arc::around(y, constants.delta1);
            if ball.contains_arc_mod1(&arc) && arc.contains_mod1(y) {
                // landing point: the image of y after m more steps is in Delta
                let landed = rep_near(y_path[m as usize], constants.p);
                return Some((n as u32 + m, landed));
            }
        }
    }
    None
}

/// Walks a tower orbit to the horizon and accumulates the counting
/// statistics H (base hyperbolic times), S (block-shifted satellite
/// memberships) and R (returns).
pub fn orbit_stats(
    family: &MapFamily,
    realization: &Realization,
    constants: &GmyConstants,
    x0_frame: f64,
    horizon: usize,
    mode: InducingMode,
    partition: Option<&GmyPartition>,
) -> Result<TowerOrbitStats, TowerError> {
    // base hyperbolic count from the stitched orbit
    let base_orbit = random_orbit(family, realization, x0_frame.rem_euclid(1.0), horizon)
        .map_err(GmyError::Orbit)?;
    let h_n = scan_times(&base_orbit.log_deriv, constants.lambda).times.len();

    let mut s_n = 0usize;
    let mut r_n = 0usize;
    let mut j = 0usize;
    let mut x = x0_frame;
    let mut real = *realization;
    while j < horizon {
        // resolve this block's return time (if any)
        let ret = match mode {
            InducingMode::Stored => partition
                .and_then(|p| p.element_at(x))
                .map(|(_, e)| e)
                .map(|e| {
                    let (nr, landed, r) =
                        tower_map_step(family, &real, partition.unwrap(), x).unwrap();
                    (r, e.n, landed, nr)
                }),
            InducingMode::Pointwise { horizon: block_cap } => {
                pointwise_return(family, &real, constants, x.rem_euclid(1.0), block_cap)
                    .map(|(r, landed)| (r, r, landed, real.shifted(r as i64)))
            }
        };
        match ret {
            Some((r, n_capture, landed, shifted)) if j + (r as usize) <= horizon => {
                // block with a completed return at block length r
                let block = random_orbit(family, &real, x.rem_euclid(1.0), r as usize)
                    .map_err(GmyError::Orbit)?;
                let block_times = scan_times(&block.log_deriv, constants.lambda).times;
                for ell in 1..=r as usize {
                    if ell < constants.r0 as usize {
                        s_n += 1; // S^l = Delta for l < R0
                    } else if ell <= n_capture as usize && block_times.contains(&ell) {
                        s_n += 1;
                    }
                }
                r_n += 1;
                j += r as usize;
                x = landed;
                real = shifted;
            }
            _ => {
                // unreturned tail: the point stays uncaptured, so every
                // hyperbolic block time is a satellite membership
                let len = horizon - j;
                let block = random_orbit(family, &real, x.rem_euclid(1.0), len)
                    .map_err(GmyError::Orbit)?;
                let block_times = scan_times(&block.log_deriv, constants.lambda).times;
                for ell in 1..=len {
                    if ell < constants.r0 as usize || block_times.contains(&ell) {
                        s_n += 1;
                    }
                }
                break;
            }
        }
    }
    Ok(TowerOrbitStats { n: horizon, h_n, s_n, r_n })
}

/// Monte Carlo of the return-time integral over seeded words, with the
/// partial-sum curve and the tail masses for the Fubini identity.
#[derive(Debug, Clone, Serialize)]
pub struct ReturnTimeReport {
    pub integral: f64,
    /// Partial sums sum_{r <= n} r nu(R = r) over n.
    pub partial_sums: Vec<(u32, f64)>,
    /// sum_n nu(R > n), the Fubini counterpart; equals the integral on the
    /// truncated data up to float reordering.
    pub tail_sum: f64,
    pub n_realizations: usize,
    pub divergence_flag: bool,
}

pub struct TowerConfig {
    pub n_max: u32,
    pub bins: usize,
    pub levels: usize,
    /// Kernel quadrature nodes for the annealed layer deposits.
    pub t_nodes: usize,
    pub build_opts: BuildOptions,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig {
            n_max: 60,
            bins: 64,
            levels: 2,
            t_nodes: 9,
            build_opts: BuildOptions {
                grid_pow: 9,
                satellites: false,
                refine_boundaries: false,
                max_candidates_per_step: 64,
            },
        }
    }
}

pub fn return_time_integral(
    family: &MapFamily,
    constants: &GmyConstants,
    realizations: &[Realization],
    cfg: &TowerConfig,
) -> Result<ReturnTimeReport, TowerError> {
    let mut per_r: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
    let mut used = 0usize;
    for real in realizations {
        let mut lab =
            TowerLab::new(family, *real, constants, cfg.n_max, cfg.bins, cfg.levels, cfg.build_opts);
        match lab.return_time_masses() {
            Ok(masses) => {
                for (r, m) in masses {
                    *per_r.entry(r).or_insert(0.0) += m;
                }
                used += 1;
            }
            Err(TowerError::EmptyPartition) => continue,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(TowerError::EmptyPartition);
    }
    for v in per_r.values_mut() {
        *v /= used as f64;
    }
    let integral: f64 = per_r.iter().map(|(&r, &m)| r as f64 * m).sum();
    let mut partial_sums = Vec::new();
    let mut acc = 0.0;
    for (&r, &m) in &per_r {
        acc += r as f64 * m;
        partial_sums.push((r, acc));
    }
    // Fubini: sum over n of nu(R > n) with the same masses
    let r_max = per_r.keys().copied().max().unwrap_or(0);
    let mut tail_sum = 0.0;
    for n in 0..r_max {
        let tail: f64 = per_r.iter().filter(|(&r, _)| r > n).map(|(_, &m)| m).sum();
        tail_sum += tail;
    }
    // superlinear growth in the last quarter of the partial-sum curve
    let divergence_flag = {
        let k = partial_sums.len();
        k >= 8 && {
            let mid = partial_sums[k / 2].1;
            let end = partial_sums[k - 1].1;
            end > 2.5 * mid
        }
    };
    Ok(ReturnTimeReport {
        integral,
        partial_sums,
        tail_sum,
        n_realizations: used,
        divergence_flag,
    })
}

/// Averaged projection over seeded words: the absolutely continuous
/// stationary estimate of the tower route.
pub fn project_stationary(
    family: &MapFamily,
    constants: &GmyConstants,
    realizations: &[Realization],
    depth: usize,
    circle_bins: usize,
    cfg: &TowerConfig,
) -> Result<(Density, ProjectionDiagnostics), TowerError> {
    let mut acc = Density::zero((0.0, 1.0), circle_bins);
    let mut diag_worst: Option<ProjectionDiagnostics> = None;
    let mut mass_sum = 0.0;
    let mut used = 0usize;
    for real in realizations {
        let mut lab =
            TowerLab::new(family, *real, constants, cfg.n_max, cfg.bins, cfg.levels, cfg.build_opts);
        match lab.project(depth, circle_bins, cfg.t_nodes) {
            Ok((mu, diag)) => {
                for (a, w) in acc.weights.iter_mut().zip(&mu.weights) {
                    *a += w;
                }
                mass_sum += diag.mu_tilde_mass;
                if diag_worst
                    .as_ref()
                    .map(|d| diag.truncation_residual > d.truncation_residual)
                    .unwrap_or(true)
                {
                    diag_worst = Some(diag);
                }
                used += 1;
            }
            Err(TowerError::EmptyPartition) => continue,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(TowerError::EmptyPartition);
    }
    acc.normalize();
    let mut diag = diag_worst.unwrap();
    diag.mu_tilde_mass = mass_sum / used as f64;
    Ok((acc, diag))
}

/// Deterministic family of seeded two-sided words for tower Monte Carlo.
pub fn seeded_realizations(
    kernel: crate::map_family::NoiseKernel,
    base_seed: u64,
    count: usize,
    past_depth: u32,
) -> Vec<Realization> {
    let rng = CounterRng::stream(base_seed, 0x544F_5752);
    (0..count)
        .map(|i| {
            Realization::new(
                kernel,
                rng.word(i as u64),
                0,
                crate::orbit_engine::Sidedness::TwoSided { past_depth },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmy_builder::{choose_inducing_domain, DomainOptions};
    use crate::map_family::{MapFamily, NoiseKernel};
    use crate::orbit_engine::Sidedness;

    fn doubling_setup() -> (MapFamily, GmyConstants) {
        let fam = MapFamily::doubling_additive(0.0);
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let c = choose_inducing_domain(&fam, &kernel, 0.1, DomainOptions::default()).unwrap();
        (fam, c)
    }

    /// Tower-scale domain: delta0 widened so the bulk of the return-time law
    /// (mean ~ 1/Leb(Delta) by Kac) stays within representable widths.
    fn tower_setup() -> (MapFamily, GmyConstants) {
        let fam = MapFamily::doubling_additive(0.0);
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let c = choose_inducing_domain(
            &fam,
            &kernel,
            0.25,
            DomainOptions { delta0: Some(0.03125), ..DomainOptions::default() },
        )
        .unwrap();
        (fam, c)
    }

    #[test]
    fn density_deposit_and_distances() {
        let mut d = Density::zero((0.0, 1.0), 8);
        d.deposit(0.0, 0.5, 1.0);
        assert!((d.mass() - 1.0).abs() < 1e-12);
        let u = Density::lebesgue((0.0, 1.0), 8);
        assert!((d.tv_distance(&u) - 0.5).abs() < 1e-12);
        let mut wrap = Density::zero((0.0, 1.0), 8);
        wrap.deposit_mod1(Arc::new(-0.125, 0.125), 1.0);
        assert!((wrap.mass() - 1.0).abs() < 1e-12);
        assert!(wrap.weights[0] > 0.0 && wrap.weights[7] > 0.0);
    }

    #[test]
    fn dirac_doubling_induced_density_is_constant() {
        let fam = MapFamily::doubling_additive(0.0);
        let kernel = NoiseKernel::dirac(0.0);
        let c = choose_inducing_domain(&fam, &kernel, 0.1, DomainOptions::default()).unwrap();
        let real = Realization::new(kernel, 7, 0, Sidedness::TwoSided { past_depth: 40 });
        let mut lab = TowerLab::new(&fam, real, &c, 45, 64, 2, TowerConfig::default().build_opts);
        let (nu, diag) = lab.induced().unwrap();
        let uniform = Density::lebesgue(nu.support, 64);
        assert!(nu.l1_distance(&uniform) < 1e-3, "L1 {}", nu.l1_distance(&uniform));
        assert!((diag.k1 - 1.0).abs() < 1e-6, "K1 {}", diag.k1);
        assert!(diag.l1_delta < 1e-9);
    }

    #[test]
    fn induced_density_ignores_future_coordinates() {
        let (fam, c) = doubling_setup();
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let real = Realization::new(kernel, 11, 0, Sidedness::TwoSided { past_depth: 200 });
        let mut tweaked = real;
        tweaked.future_tweak = 0xDEAD_BEEF;
        let mut lab_a = TowerLab::new(&fam, real, &c, 45, 64, 2, TowerConfig::default().build_opts);
        let mut lab_b =
            TowerLab::new(&fam, tweaked, &c, 45, 64, 2, TowerConfig::default().build_opts);
        let (nu_a, _) = lab_a.induced().unwrap();
        let (nu_b, _) = lab_b.induced().unwrap();
        for (a, b) in nu_a.weights.iter().zip(&nu_b.weights) {
            assert_eq!(a.to_bits(), b.to_bits(), "induced density read future data");
        }
    }

    #[test]
    fn tower_step_lands_in_delta_and_matches_skew_composition() {
        let (fam, c) = doubling_setup();
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let real = Realization::new(kernel, 13, 0, Sidedness::TwoSided { past_depth: 40 });
        let part = build_partition(&fam, &real, &c, 45, BuildOptions::default()).unwrap();
        assert!(!part.elements.is_empty());
        let rng = CounterRng::new(5);
        let mut tested = 0;
        for (i, e) in part.elements.iter().enumerate() {
            if tested >= 50 {
                break;
            }
            let x = e.lo + e.width() * (0.1 + 0.8 * rng.unit(i as u64));
            let (shifted, landed, r_used) = tower_map_step(&fam, &real, &part, x).unwrap();
            assert_eq!(r_used, e.r);
            assert_eq!(shifted.offset, e.r as i64);
            assert!(landed >= part.delta_lo - 1e-12 && landed <= part.delta_hi + 1e-12);
            // composing R skew steps reproduces the same endpoint (compared
            // in frame coordinates, the conversion both sides share)
            let mut state = (0usize, x.rem_euclid(1.0));
            for _ in 0..e.r {
                state = crate::orbit_engine::skew_step(&fam, &real, state).unwrap();
            }
            assert_eq!(rep_near(state.1, c.p), landed, "element {i}");
            tested += 1;
        }
        assert!(tested > 10);
    }

    #[test]
    fn residual_point_has_no_return() {
        let (fam, c) = doubling_setup();
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let real = Realization::new(kernel, 13, 0, Sidedness::TwoSided { past_depth: 40 });
        let part = build_partition(&fam, &real, &c, 40, BuildOptions::default()).unwrap();
        // midpoint between two elements is residual with overwhelming margin
        let x = if part.elements.len() > 1 {
            0.5 * (part.elements[0].hi + part.elements[1].lo)
        } else {
            part.delta_lo + 0.37 * part.leb_delta()
        };
        assert!(matches!(
            tower_map_step(&fam, &real, &part, x),
            Err(TowerError::NoReturn(_))
        ));
    }

    #[test]
    fn counting_inequality_zero_violations() {
        let (fam, c) = doubling_setup();
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let rng = CounterRng::stream(99, 1);
        let mut checked = 0;
        for i in 0..50u64 {
            let real = Realization::new(kernel, 9000 + i, 0, Sidedness::TwoSided { past_depth: 40 });
            let x0 = c.p - c.delta0 + 2.0 * c.delta0 * rng.unit(i);
            let stats = orbit_stats(
                &fam,
                &real,
                &c,
                x0,
                1000,
                InducingMode::Pointwise { horizon: 600 },
                None,
            )
            .unwrap();
            assert!(stats.r_n <= stats.n);
            assert!(
                counting_inequality_check(&stats, &c),
                "violation: eta {} R {} S {} H {}",
                c.eta,
                stats.r_n,
                stats.s_n,
                stats.h_n
            );
            if stats.r_n > 0 {
                checked += 1;
            }
        }
        assert!(checked > 20, "only {checked} orbits had returns");
    }

    #[test]
    fn doubling_h_equals_horizon_at_pliss_lambda() {
        // |f'| = 2 and lambda = 0.75: every time is hyperbolic
        let fam = MapFamily::doubling_additive(0.0);
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let c = choose_inducing_domain(
            &fam,
            &kernel,
            0.1,
            DomainOptions { lambda: Some(0.75), ..DomainOptions::default() },
        )
        .unwrap();
        let real = Realization::new(kernel, 3, 0, Sidedness::TwoSided { past_depth: 40 });
        let stats = orbit_stats(
            &fam,
            &real,
            &c,
            0.0,
            500,
            InducingMode::Pointwise { horizon: 600 },
            None,
        )
        .unwrap();
        assert_eq!(stats.h_n, 500);
    }

    #[test]
    fn synthetic_counting_check() {
        let (_, c) = doubling_setup();
        // H = 10, S = 0, R = 1: eta >= 10 makes it true
        let stats = TowerOrbitStats { n: 100, h_n: 10, s_n: 0, r_n: 1 };
        assert!(counting_inequality_check(&stats, &c));
        let zero = TowerOrbitStats { n: 100, h_n: 0, s_n: 0, r_n: 0 };
        assert!(counting_inequality_check(&zero, &c));
    }

    #[test]
    fn return_time_integral_fubini_identity() {
        let (fam, c) = tower_setup();
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let reals = seeded_realizations(kernel, 42, 5, 40);
        let cfg = TowerConfig { n_max: 48, ..TowerConfig::default() };
        let report = return_time_integral(&fam, &c, &reals, &cfg).unwrap();
        assert!((report.integral - report.tail_sum).abs() < 1e-9);
        // partial sums non-decreasing
        for w in report.partial_sums.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
        assert!(report.integral >= c.r0 as f64);
        assert!(!report.divergence_flag);
    }

    #[test]
    fn projection_is_probability_and_near_uniform_for_doubling() {
        let (fam, c) = tower_setup();
        let kernel = NoiseKernel::uniform(0.0, 0.1);
        let reals = seeded_realizations(kernel, 4242, 20, 40);
        let cfg = TowerConfig { n_max: 48, ..TowerConfig::default() };
        let (mu, diag) = project_stationary(&fam, &c, &reals, 44, 64, &cfg).unwrap();
        assert!((mu.mass() - 1.0).abs() < 1e-9);
        let uniform = Density::lebesgue((0.0, 1.0), 64);
        let tv = mu.tv_distance(&uniform);
        assert!(tv < 0.05, "TV to uniform {tv}");
        assert!(diag.truncation_residual < 0.05, "residual {}", diag.truncation_residual);
    }
}
