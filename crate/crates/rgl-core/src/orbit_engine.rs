//! Seeded realizations of the noise process and the random orbits they
//! drive: the skew product over the shift, and the power perturbation that
//! replaces single steps by N-step blocks.

use crate::map_family::{MapError, MapFamily, NoiseKernel};
use crate::rng::{zigzag, CounterRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OrbitError {
    #[error("map evaluation failed at step {step}: {source}")]
    Map {
        step: usize,
        #[source]
        source: MapError,
    },
    #[error("orbit escaped the phase space at step {step} (x = {x})")]
    Escape { step: usize, x: f64 },
    #[error("realization index {index} below the declared past depth {past_depth}")]
    PastDepth { index: i64, past_depth: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sidedness {
    OneSided,
    TwoSided { past_depth: u32 },
}

/// A seeded word of i.i.d. parameter draws. Draws are counter-based pure
/// functions of (seed, index), so the word extends lazily and shifting it is
/// free; the same (seed, kernel) always reproduces the same word.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub kernel: NoiseKernel,
    pub seed: u64,
    pub len: usize,
    pub sidedness: Sidedness,
    /// Shift applied to indices: entry i of this view is entry offset + i of
    /// the base word. sigma advances it by +1, sigma-bar^{-1} by -1.
    pub offset: i64,
    /// Perturbs draws at non-negative absolute indices only, leaving the
    /// past untouched. Produces coupled word pairs for past-measurability
    /// diagnostics; zero in normal use.
    pub future_tweak: u64,
}

impl Realization {
    pub fn new(kernel: NoiseKernel, seed: u64, len: usize, sidedness: Sidedness) -> Realization {
        Realization { kernel, seed, len, sidedness, offset: 0, future_tweak: 0 }
    }

    #[inline]
    fn rng(&self) -> CounterRng {
        CounterRng::stream(self.seed, 0x52_45_41_4C) // "REAL"
    }

    /// Raw draw at an absolute (unshifted) word index. Defined for all of Z;
    /// callers that honour the declared sidedness go through `parameter`.
    #[inline]
    pub fn param_at(&self, absolute_index: i64) -> f64 {
        let mut idx = zigzag(absolute_index);
        if self.future_tweak != 0 && absolute_index >= 0 {
            idx ^= self.future_tweak;
        }
        self.kernel.sample(&self.rng(), idx)
    }

    /// Entry i of this view (i = 0 is the first map applied).
    #[inline]
    pub fn parameter_unchecked(&self, i: i64) -> f64 {
        self.param_at(self.offset + i)
    }

    /// Range-checked accessor honouring the declared sidedness.
    pub fn parameter(&self, i: i64) -> Result<f64, OrbitError> {
        match self.sidedness {
            Sidedness::OneSided if i < 0 => {
                Err(OrbitError::PastDepth { index: i, past_depth: 0 })
            }
            Sidedness::TwoSided { past_depth } if i < -(past_depth as i64) => {
                Err(OrbitError::PastDepth { index: i, past_depth })
            }
            _ => Ok(self.parameter_unchecked(i)),
        }
    }

    /// The word as a vector (prefix of length n from this view).
    pub fn word(&self, n: usize) -> Vec<f64> {
        (0..n as i64).map(|i| self.parameter_unchecked(i)).collect()
    }

    /// View shifted by k steps (k may be negative for two-sided words).
    pub fn shifted(&self, k: i64) -> Realization {
        let mut r = *self;
        r.offset += k;
        r
    }

    /// One-sided projection of a two-sided word: drops negative indices.
    pub fn one_sided(&self) -> Realization {
        let mut r = *self;
        r.sidedness = Sidedness::OneSided;
        r
    }
}

/// Builds a reproducible realization; extending `n` later preserves the
/// existing prefix because draws are keyed by index.
pub fn make_realization(
    kernel: NoiseKernel,
    seed: u64,
    n: usize,
    sidedness: Sidedness,
) -> Realization {
    Realization::new(kernel, seed, n, sidedness)
}

/// A finite random orbit together with the log-derivatives collected along
/// it; `log_deriv[k] = log |f'_{t_k}(points[k])|`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitRecord {
    pub start: f64,
    pub points: Vec<f64>,
    pub log_deriv: Vec<f64>,
    pub realization: Realization,
}

impl OrbitRecord {
    pub fn steps(&self) -> usize {
        self.log_deriv.len()
    }
}

fn step_checked(family: &MapFamily, t: f64, x: f64, step: usize) -> Result<(f64, f64), OrbitError> {
    let d = family
        .derivative(t, x)
        .map_err(|source| OrbitError::Map { step, source })?;
    let y = family.eval(t, x).map_err(|source| OrbitError::Map { step, source })?;
    if !family.is_circle() && !(-1.0..=1.0).contains(&y) {
        return Err(OrbitError::Escape { step, x: y });
    }
    Ok((y, d.abs().ln()))
}

/// Runs the random orbit `x, f_{t_0}(x), f_{t_1}(f_{t_0}(x)), ...` for n
/// steps. n = 0 yields the identity orbit.
pub fn random_orbit(
    family: &MapFamily,
    realization: &Realization,
    x0: f64,
    n: usize,
) -> Result<OrbitRecord, OrbitError> {
    let mut points = Vec::with_capacity(n + 1);
    let mut log_deriv = Vec::with_capacity(n);
    let mut x = x0;
    points.push(x);
    for k in 0..n {
        let t = realization.parameter_unchecked(k as i64);
        let (y, ld) = step_checked(family, t, x, k)?;
        log_deriv.push(ld);
        x = y;
        points.push(x);
    }
    Ok(OrbitRecord { start: x0, points, log_deriv, realization: *realization })
}

/// One application of the skew product S(omega, x) = (sigma omega, f_omega x),
/// tracked by the step counter k. Indices past the declared length extend
/// automatically (draws are seeded by index).
pub fn skew_step(
    family: &MapFamily,
    realization: &Realization,
    state: (usize, f64),
) -> Result<(usize, f64), OrbitError> {
    let (k, x) = state;
    let t = realization.parameter_unchecked(k as i64);
    let (y, _) = step_checked(family, t, x, k)?;
    Ok((k + 1, y))
}

/// Orbit of the power perturbation: points at indices 0, N, 2N, ..., Nn of
/// the base orbit, with log-derivatives summed over each N-block.
pub fn powered_orbit(
    family: &MapFamily,
    realization: &Realization,
    x0: f64,
    block: usize,
    n: usize,
) -> Result<OrbitRecord, OrbitError> {
    assert!(block >= 1, "power N must be >= 1");
    let base = random_orbit(family, realization, x0, block * n)?;
    let points = (0..=n).map(|j| base.points[j * block]).collect();
    let log_deriv = (0..n)
        .map(|j| base.log_deriv[j * block..(j + 1) * block].iter().sum())
        .collect();
    Ok(OrbitRecord { start: x0, points, log_deriv, realization: *realization })
}

/// How Monte Carlo drivers choose orbit start points.
#[derive(Debug, Clone, PartialEq)]
pub enum StartSampler {
    /// Lebesgue on the phase space.
    Uniform,
    /// A fixed list, cycled.
    Points(Vec<f64>),
    /// Tail of a random orbit started from Lebesgue (approximately
    /// stationary after the burn-in).
    BirkhoffTail { burn: usize },
    /// Inverse-CDF sampling from a piecewise-constant density given by bin
    /// edges (len = w.len() + 1) and cumulative weights.
    Cdf { edges: Vec<f64>, cumulative: Vec<f64> },
}

impl StartSampler {
    /// Deterministic start point for the orbit with the given index.
    pub fn start(
        &self,
        family: &MapFamily,
        kernel: &NoiseKernel,
        seed: u64,
        index: u64,
    ) -> Result<f64, OrbitError> {
        let rng = CounterRng::stream(seed, 0x53_54_52_54); // "STRT"
        let (lo, hi) = family.phase_space();
        let u = rng.unit(index);
        match self {
            StartSampler::Uniform => Ok(lo + (hi - lo) * u),
            StartSampler::Points(pts) => Ok(pts[(index as usize) % pts.len()]),
            StartSampler::BirkhoffTail { burn } => {
                let x0 = lo + (hi - lo) * u;
                let real = Realization::new(*kernel, seed ^ (0x9E37 + index), *burn, Sidedness::OneSided);
                let orbit = random_orbit(family, &real, x0, *burn)?;
                Ok(*orbit.points.last().unwrap())
            }
            StartSampler::Cdf { edges, cumulative } => {
                let total = *cumulative.last().unwrap();
                let target = u * total;
                let i = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
                let c_lo = if i == 0 { 0.0 } else { cumulative[i - 1] };
                let c_hi = cumulative[i];
                let frac = if c_hi > c_lo { (target - c_lo) / (c_hi - c_lo) } else { 0.5 };
                Ok(edges[i] + (edges[i + 1] - edges[i]) * frac)
            }
        }
    }
}
