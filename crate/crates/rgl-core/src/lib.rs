//! A numerical laboratory for random perturbations of expanding interval and
//! circle maps.
//!
//! The crate builds, at desk scale, the objects that organize the ergodic
//! theory of such systems: seeded random orbits and their Lyapunov exponents,
//! hyperbolic times and their frequencies, an inductively constructed
//! full-return partition of a small inducing domain with return times, the
//! induced measures on that domain and their projection to absolutely
//! continuous stationary measures, plus independent stationary-measure
//! estimators (annealed Ulam operator, Birkhoff histograms) used for
//! cross-checks and stability experiments.
//!
//! Everything is deterministic: parameter words are counter-based functions
//! of `(seed, index)`, so results are bit-identical at any worker count.

pub mod circle;
pub mod cli;
pub mod config;
pub mod gmy_builder;
pub mod hyperbolic;
pub mod lyapunov;
pub mod map_family;
pub mod orbit_engine;
pub mod rng;
pub mod stationary_lab;
pub mod tower;

pub use map_family::{FamilyKind, KernelShape, MapError, MapFamily, NoiseKernel};
pub use orbit_engine::{
    make_realization, powered_orbit, random_orbit, skew_step, OrbitError, OrbitRecord,
    Realization, Sidedness, StartSampler,
};
