use rgl_core::gmy_builder::*;
use rgl_core::map_family::{MapFamily, NoiseKernel};
use rgl_core::tower::*;
use std::time::Instant;

fn main() {
    let fam = MapFamily::doubling_additive(0.0);
    let kernel = NoiseKernel::uniform(0.0, 0.1);
    let c = choose_inducing_domain(&fam, &kernel, 0.25,
        DomainOptions { delta0: Some(0.03125), ..DomainOptions::default() }).unwrap();
    println!("N0={} K0={} R0={} kappa={:.3} delta0={}", c.n0, c.k0, c.r0, c.kappa, c.delta0);
    let mut cfg = TowerConfig { n_max: 44, levels: 1, ..TowerConfig::default() };
    cfg.build_opts.max_candidates_per_step = 32;

    let reals = seeded_realizations(kernel, 42, 1, 40);
    let t0 = Instant::now();
    let mut lab = TowerLab::new(&fam, reals[0], &c, cfg.n_max, cfg.bins, cfg.levels, cfg.build_opts);
    let masses = lab.return_time_masses().unwrap();
    let z: f64 = masses.iter().map(|(r, m)| *r as f64 * m).sum();
    println!("E[R] explicit = {z:.2}  (one word: {:?})", t0.elapsed());

    for n_words in [20usize, 60] {
        let reals = seeded_realizations(kernel, 4242, n_words, 40);
        let t0 = Instant::now();
        let (mu, diag) = project_stationary(&fam, &c, &reals, 36, 64, &cfg).unwrap();
        let uniform = Density::lebesgue((0.0, 1.0), 64);
        println!("words={n_words}: TV={:.4} trunc={:.4} Z={:.2} elapsed={:?}",
            mu.tv_distance(&uniform), diag.truncation_residual, diag.mu_tilde_mass, t0.elapsed());
        let mx = mu.weights.iter().cloned().fold(0.0f64, f64::max);
        let mn = mu.weights.iter().cloned().fold(f64::INFINITY, f64::min);
        let arg = mu.weights.iter().position(|&w| w == mx).unwrap();
        println!("  range [{mn:.3},{mx:.3}] max at x={:.3}", (arg as f64+0.5)/64.0);
    }
}
