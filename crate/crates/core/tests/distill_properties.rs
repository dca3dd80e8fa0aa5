use std::sync::Arc;

use distill_lab::bench::{self, LABEL};
use distill_lab::distill::{DeltaRule, DistillConfig, DistillVariant, Distiller, RunSeed};
use distill_lab::metrics::{fidelity_nll, pairwise_diversity, wasserstein2, SampleSet};
use distill_lab::ode::ddim_forward;
use distill_lab::oracle::{Guidance, Oracle};
use distill_lab::rng;
use distill_lab::schedule::TimeGrid;
use distill_lab::DVector;
use proptest::prelude::*;

const BASE: u64 = 1;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn two_mode() -> Arc<Oracle> {
    Arc::new(bench::two_mode().unwrap())
}

fn finals(oracle: &Arc<Oracle>, cfg: DistillConfig, x_init: f64, seeds: u64) -> Vec<DVector<f64>> {
    let d = Distiller::new(oracle.clone(), cfg).unwrap();
    (0..seeds)
        .map(|i| {
            d.optimize_image(&v(&[x_init]), LABEL, RunSeed { base: BASE, index: i })
                .unwrap()
                .final_x
        })
        .collect()
}

fn ddim_samples(oracle: &Oracle, seeds: u64, steps: usize) -> Vec<DVector<f64>> {
    let grid = TimeGrid::ddim(1000.0, steps).unwrap();
    (0..seeds)
        .map(|i| {
            let seed = rng::eps_star(BASE, i, oracle.dim());
            ddim_forward(oracle, &seed, LABEL, 0.0, &grid, Guidance::new(7.5).unwrap())
                .unwrap()
                .sample(oracle.schedule())
                .unwrap()
        })
        .collect()
}

fn set(xs: Vec<DVector<f64>>) -> SampleSet {
    SampleSet::from_vectors(xs).unwrap()
}

fn dist_to_mode(x: &DVector<f64>) -> f64 {
    (x[0].abs() - 2.0).abs()
}

#[test]
fn sampling_dsd_equals_ddim_on_every_registered_mixture() {
    for (name, oracle, y) in bench::registered().unwrap() {
        let mut cfg = DistillConfig::new(DistillVariant::SamplingDsd);
        cfg.steps = 10;
        cfg.lr = 1.0;
        cfg.t_min = 0.0;
        let d = Distiller::new(oracle.clone(), cfg).unwrap();
        let grid = TimeGrid::ddim(1000.0, 10).unwrap();
        for i in 0..20 {
            let run = RunSeed { base: 77, index: i };
            let x = d.optimize_image(&DVector::zeros(oracle.dim()), y, run).unwrap().final_x;
            let seed = rng::eps_star(77, i, oracle.dim());
            let want = ddim_forward(&oracle, &seed, y, 0.0, &grid, Guidance::new(7.5).unwrap())
                .unwrap()
                .sample(oracle.schedule())
                .unwrap();
            let rel = (&x - &want).norm() / want.norm().max(1e-12);
            assert!(rel <= 1e-6, "{name} seed {i}: {rel}");
        }
    }
}

#[test]
fn sampling_dsd_on_a_gaussian_lands_near_the_seed() {
    let oracle = Arc::new(bench::standard_normal(2).unwrap());
    let mut cfg = DistillConfig::new(DistillVariant::SamplingDsd);
    cfg.steps = 100;
    cfg.ddim_steps = 100;
    // 0.1·t overshoots a 10-wide grid spacing above t = 100
    cfg.delta = DeltaRule::GridSpacing;
    cfg.lr = 1.0;
    cfg.t_min = 0.0;
    let d = Distiller::new(oracle.clone(), cfg).unwrap();
    let s = oracle.schedule();
    let theta = s.sigma(1000.0).unwrap().atan() - s.sigma(0.0).unwrap().atan();
    let floor = theta * theta / 200.0;
    for i in 0..10 {
        let seed = rng::eps_star(8, i, 2);
        for x_init in [v(&[0.0, 0.0]), v(&[3.0, -4.0])] {
            let x = d
                .optimize_image(&x_init, LABEL, RunSeed { base: 8, index: i })
                .unwrap()
                .final_x;
            assert!((&x - &seed).norm() <= 1.1 * floor * seed.norm(), "seed {i}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn only_dsd_sees_the_image(x in -3.0f64..3.0, dx in 0.05f64..1.0, t in 25.0f64..990.0, e in -2.0f64..2.0) {
        let oracle = two_mode();
        let s = Distiller::new(oracle.clone(), DistillConfig::new(DistillVariant::SamplingDsd)).unwrap();
        let d = Distiller::new(oracle, DistillConfig::new(DistillVariant::Dsd)).unwrap();
        let seed = v(&[e]);
        prop_assert_eq!(s.grad_sampling_dsd(t, LABEL, &seed).unwrap(), s.grad_sampling_dsd(t, LABEL, &seed).unwrap());
        let a = d.grad_dsd(&v(&[x]), t, LABEL, &seed).unwrap();
        let b = d.grad_dsd(&v(&[x + dx]), t, LABEL, &seed).unwrap();
        prop_assert_ne!(a.grad, b.grad);
    }
}

/// The part of the DSD gradient that depends on the image, measured against
/// the trajectory-only gradient at the same time. It restores displaced
/// images while both noise levels are above the mode width; below it
/// (σ_lo ≲ 0.6·s) and near the basin boundary it pushes outwards instead.
#[test]
fn dsd_correction_term_restores_at_moderate_noise() {
    use rand::Rng;
    let oracle = two_mode();
    let d = Distiller::new(oracle.clone(), DistillConfig::new(DistillVariant::Dsd)).unwrap();
    let s = Distiller::new(oracle.clone(), DistillConfig::new(DistillVariant::SamplingDsd)).unwrap();
    let grid = TimeGrid::ddim(1000.0, 10).unwrap();
    let mut r = rng::stream(5, 0, "perturbations");
    let mut restoring = 0;
    for k in 0..1000 {
        let seed = rng::eps_star(5, k, 1);
        let t: f64 = r.random_range(50.0..400.0);
        let t_hi = d.t_high_on_grid(t);
        let path = ddim_forward(&oracle, &seed, LABEL, t_hi, &grid, Guidance::new(7.5).unwrap()).unwrap();
        let x0 = path.prediction_at(oracle.schedule(), t_hi).unwrap();
        let dx = rng::standard_normal(&mut r, 1) * 0.5;
        let g = d.grad_dsd(&(&x0 + &dx), t, LABEL, &seed).unwrap().grad;
        let drive = s.grad_sampling_dsd(t, LABEL, &seed).unwrap().grad;
        // at the trajectory's own prediction the two rules agree exactly
        assert!((d.grad_dsd(&x0, t, LABEL, &seed).unwrap().grad - &drive).norm() < 1e-9);
        if (g - drive).dot(&dx) > 0.0 {
            restoring += 1;
        }
    }
    assert!(restoring >= 950, "{restoring}/1000");
}

#[test]
fn dsd_correction_term_flips_below_the_mode_width() {
    let oracle = two_mode();
    let d = Distiller::new(oracle.clone(), DistillConfig::new(DistillVariant::Dsd)).unwrap();
    let s = Distiller::new(oracle, DistillConfig::new(DistillVariant::SamplingDsd)).unwrap();
    // t = 25 pairs σ_lo ≈ 0.04 with σ_hi ≈ 0.16 around a mode of width 0.1
    let seed = v(&[0.8]);
    let drive = s.grad_sampling_dsd(25.0, LABEL, &seed).unwrap().grad;
    let x = v(&[2.1]);
    let g = d.grad_dsd(&x, 25.0, LABEL, &seed).unwrap().grad;
    assert!((g - drive)[0] < 0.0);
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[test]
fn sds_gradient_is_noisier_than_dsd() {
    let oracle = two_mode();
    let sds = Distiller::new(oracle.clone(), DistillConfig::new(DistillVariant::Sds)).unwrap();
    let dsd = Distiller::new(oracle, DistillConfig::new(DistillVariant::Dsd)).unwrap();
    let mut draws = rng::stream(6, 0, "sds");
    let x = v(&[0.0]);
    let t = 500.0;
    let a: Vec<f64> = (0..1000)
        .map(|_| {
            sds.grad_sds(&x, t, LABEL, &rng::standard_normal(&mut draws, 1))
                .unwrap()
                .grad[0]
        })
        .collect();
    let b: Vec<f64> = (0..1000)
        .map(|i| dsd.grad_dsd(&x, t, LABEL, &rng::eps_star(6, i, 1)).unwrap().grad[0])
        .collect();
    let ratio = std_dev(&a) / std_dev(&b);
    assert!(ratio >= 3.0, "{ratio}");
}

#[test]
fn sdi_has_no_diversity() {
    let oracle = two_mode();
    let dsd = set(finals(&oracle, DistillConfig::new(DistillVariant::Dsd), 0.0, 50));
    let sdi = finals(&oracle, DistillConfig::new(DistillVariant::Sdi), 0.0, 50);
    let mut distinct: Vec<f64> = Vec::new();
    for x in &sdi {
        if !distinct.iter().any(|d| (d - x[0]).abs() < 1e-6) {
            distinct.push(x[0]);
        }
    }
    assert!(distinct.len() <= 2, "{distinct:?}");
    let ratio = pairwise_diversity(&set(sdi)).unwrap() / pairwise_diversity(&dsd).unwrap();
    assert!(ratio <= 0.5, "{ratio}");
}

#[test]
fn consistent3d_is_diverse_but_needs_guidance() {
    let oracle = two_mode();
    let mut c3d = DistillConfig::new(DistillVariant::Consistent3d);
    c3d.cfg_low = 1.0;
    let c3d = finals(&oracle, c3d, bench::TWO_MODE_INIT, 100);
    let dsd = finals(
        &oracle,
        DistillConfig::new(DistillVariant::Dsd),
        bench::TWO_MODE_INIT,
        100,
    );
    assert_ne!(c3d[0], c3d[1]);
    assert!(pairwise_diversity(&set(c3d.clone())).unwrap() > 0.5);
    let mean = |xs: &[DVector<f64>]| xs.iter().map(dist_to_mode).sum::<f64>() / xs.len() as f64;
    let (a, b) = (mean(&c3d), mean(&dsd));
    assert!(a >= 2.0 * b, "consistent3d {a}, dsd {b}");
    let nll_c3d = fidelity_nll(&set(c3d), &oracle, LABEL).unwrap();
    let nll_dsd = fidelity_nll(&set(dsd), &oracle, LABEL).unwrap();
    assert!(nll_dsd <= nll_c3d, "{nll_dsd} {nll_c3d}");
}

#[test]
fn dsd_stays_near_the_ddim_sample() {
    let oracle = two_mode();
    let dsd = finals(&oracle, DistillConfig::new(DistillVariant::Dsd), 0.0, 100);
    let ddim = ddim_samples(&oracle, 100, 10);
    let mut checked = 0;
    for (i, (a, b)) in dsd.iter().zip(&ddim).enumerate() {
        // seeds this close to the basin boundary can change mode
        if rng::eps_star(BASE, i as u64, 1)[0].abs() < 0.1 {
            continue;
        }
        checked += 1;
        assert!((a - b).norm() <= 0.15, "seed {i}: {}", (a - b).norm());
    }
    assert!(checked >= 90);
}

#[test]
fn two_mode_benchmark_orderings() {
    let oracle = two_mode();
    let run = |variant| finals(&oracle, DistillConfig::new(variant), bench::TWO_MODE_INIT, 100);
    let dsd = run(DistillVariant::Dsd);
    let sds = run(DistillVariant::Sds);
    for side in [-1.0, 1.0] {
        let n = dsd
            .iter()
            .filter(|x| x[0] * side > 0.0 && dist_to_mode(x) < 0.5)
            .count();
        assert!(n >= 30, "{n} finals near {}", 2.0 * side);
    }
    let div_dsd = pairwise_diversity(&set(dsd.clone())).unwrap();
    let div_sds = pairwise_diversity(&set(sds.clone())).unwrap();
    assert!(div_dsd >= 2.0 * div_sds, "{div_dsd} {div_sds}");
    for variant in [DistillVariant::Asd, DistillVariant::Sdi, DistillVariant::Consistent3d] {
        let div = pairwise_diversity(&set(run(variant))).unwrap();
        assert!(div_dsd > div, "{variant}: {div} ≥ {div_dsd}");
    }
    let reference = set(ddim_samples(&oracle, 100, 10));
    let w_dsd = wasserstein2(&set(dsd), &reference).unwrap();
    let w_sds = wasserstein2(&set(sds), &reference).unwrap();
    assert!(w_dsd <= w_sds, "{w_dsd} {w_sds}");
}

#[test]
#[ignore = "refuted: SDS from x_init = 0 spreads out (diversity 1.26) instead of settling at the mean"]
fn sds_from_the_mean_stays_at_the_mean() {
    let oracle = two_mode();
    let sds = finals(&oracle, DistillConfig::new(DistillVariant::Sds), 0.0, 100);
    let near = sds.iter().filter(|x| x[0].abs() <= 0.5).count();
    assert!(near >= 80, "{near}/100");
}

#[test]
fn seeded_runs_are_pure_functions_of_the_seed() {
    let oracle = two_mode();
    for variant in [
        DistillVariant::Dsd,
        DistillVariant::SamplingDsd,
        DistillVariant::Consistent3d,
    ] {
        let a = finals(&oracle, DistillConfig::new(variant), 0.3, 5);
        let b = finals(&oracle, DistillConfig::new(variant), 0.3, 5);
        assert_eq!(a, b, "{variant}");
    }
}
