use distill_lab::bench;
use distill_lab::ode::{ddim_forward, ddim_invert, reference_integrate};
use distill_lab::oracle::{Condition, Guidance, Oracle};
use distill_lab::rng;
use distill_lab::schedule::TimeGrid;
use distill_lab::DVector;

const Y: Condition = bench::LABEL;

/// RK4 on the probability-flow ODE written as `dx̄/du = σ ε(√α x̄, t)` with
/// `u = ln σ`, integrated from `t = T` down to `t = 0`. Shares nothing with
/// the DDIM code beyond the oracle itself.
fn rk4(oracle: &Oracle, seed: &DVector<f64>, steps: usize) -> DVector<f64> {
    let s = oracle.schedule();
    let t_max = s.t_max();
    let time_of = |sigma: f64| -> f64 {
        let t = 2.0 * t_max / std::f64::consts::PI * (1.0 / (1.0 + sigma * sigma).sqrt()).acos();
        t.clamp(0.0, t_max)
    };
    let rhs = |u: f64, xb: &DVector<f64>| -> DVector<f64> {
        let sigma = u.exp();
        let alpha = 1.0 / (1.0 + sigma * sigma);
        let x = xb * alpha.sqrt();
        oracle.eps_predict(&x, time_of(sigma), Y).unwrap() * sigma
    };
    let u0 = s.sigma(t_max).unwrap().ln();
    let u1 = s.sigma(0.0).unwrap().ln();
    let h = (u1 - u0) / steps as f64;
    let mut xb = seed / s.signal(t_max).unwrap();
    for i in 0..steps {
        let u = u0 + h * i as f64;
        let k1 = rhs(u, &xb);
        let k2 = rhs(u + h / 2.0, &(&xb + &k1 * (h / 2.0)));
        let k3 = rhs(u + h / 2.0, &(&xb + &k2 * (h / 2.0)));
        let k4 = rhs(u + h, &(&xb + &k3 * h));
        xb += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    xb * s.signal(0.0).unwrap()
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

#[test]
fn rk4_oracle_solves_the_gaussian_case() {
    let o = bench::standard_normal(2).unwrap();
    for i in 0..5 {
        let seed = rng::eps_star(17, i, 2);
        let e = (rk4(&o, &seed, 400) - &seed).norm();
        assert!(e < 1e-7, "{e}");
    }
}

/// First-order DDIM on `N(0, I)` loses `½Δθ²·|ε*|` per step with
/// `θ = atan σ`; the cosine schedule on a uniform grid keeps `Δθ` constant,
/// so the error at `x(0)` is `Θ²/(2N)·|ε*|` with `Θ` the clamped θ range.
fn euler_floor(oracle: &Oracle, steps: usize) -> f64 {
    let s = oracle.schedule();
    let theta = s.sigma(s.t_max()).unwrap().atan() - s.sigma(0.0).unwrap().atan();
    theta * theta / (2.0 * steps as f64)
}

#[test]
fn gaussian_seeds_are_fixed_points_up_to_the_euler_floor() {
    let o = bench::standard_normal(2).unwrap();
    let grid = TimeGrid::ddim(1000.0, 1000).unwrap();
    let floor = euler_floor(&o, 1000);
    for i in 0..50 {
        let seed = rng::eps_star(5, i, 2);
        let x = ddim_forward(&o, &seed, Y, 0.0, &grid, Guidance::NONE).unwrap().last().x;
        let ratio = (&x - &seed).norm() / (floor * seed.norm());
        assert!((0.95..=1.05).contains(&ratio), "seed {i}: {ratio}");
        let fine = reference_integrate(&o, &seed, Y, 10_000, Guidance::NONE).unwrap();
        let ratio = (&fine - &seed).norm() / (euler_floor(&o, 10_000) * seed.norm());
        assert!((0.95..=1.05).contains(&ratio), "seed {i}: {ratio}");
    }
}

#[test]
fn ddim_converges_to_the_rk4_solution() {
    for (name, o, y) in bench::registered().unwrap() {
        if y != Y {
            continue;
        }
        for i in 0..8 {
            let seed = rng::eps_star(23, i, o.dim());
            let want = rk4(&o, &seed, 4000);
            let err = |n: usize| {
                let grid = TimeGrid::ddim(1000.0, n).unwrap();
                rel(
                    &ddim_forward(&o, &seed, Y, 0.0, &grid, Guidance::NONE).unwrap().last().x,
                    &want,
                )
            };
            let (e1, e2) = (err(1000), err(2000));
            assert!(
                e1 <= 2.0 * euler_floor(&o, 1000) * seed.norm().max(1.0),
                "{name} seed {i}: {e1}"
            );
            assert!(e2 <= 1e-3, "{name} seed {i}: {e2}");
            assert!((1.7..=2.3).contains(&(e1 / e2)), "{name} seed {i}: {e1} {e2}");
        }
    }
}

#[test]
fn two_mode_sample_keeps_the_seed_sign() {
    let o = bench::two_mode().unwrap();
    let grid = TimeGrid::ddim(1000.0, 1000).unwrap();
    let mut checked = 0;
    for i in 0..100 {
        let seed = rng::eps_star(31, i, 1);
        if seed[0].abs() < 0.1 {
            continue;
        }
        checked += 1;
        let x = ddim_forward(&o, &seed, Y, 0.0, &grid, Guidance::NONE).unwrap().last().x;
        let fine = reference_integrate(&o, &seed, Y, 10_000, Guidance::NONE).unwrap();
        assert_eq!(x[0].signum(), seed[0].signum(), "seed {i}");
        assert_eq!(fine[0].signum(), seed[0].signum(), "seed {i}");
    }
    assert!(checked > 80);
}

#[test]
fn reference_integrator_is_first_order() {
    let o = bench::two_mode().unwrap();
    for i in 0..4 {
        let seed = rng::eps_star(41, i, 1);
        let exact = rk4(&o, &seed, 8000);
        let errs: Vec<f64> = [500, 1000, 2000]
            .iter()
            .map(|&n| (reference_integrate(&o, &seed, Y, n, Guidance::NONE).unwrap() - &exact).norm())
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.6..=2.5).contains(&ratio), "seed {i}: errors {errs:?}");
        }
    }
}

#[test]
fn reference_on_a_ddim_grid_is_ddim() {
    let o = bench::three_mode_2d().unwrap();
    let seed = rng::eps_star(2, 0, 2);
    let grid = TimeGrid::ddim(1000.0, 50).unwrap();
    let a = reference_integrate(&o, &seed, Y, 50, Guidance::NONE).unwrap();
    let b = ddim_forward(&o, &seed, Y, 0.0, &grid, Guidance::NONE).unwrap().last().x;
    assert_eq!(a, b);
}

#[test]
fn gaussian_inversion_recovers_the_point() {
    let o = bench::standard_normal(2).unwrap();
    let grid = TimeGrid::ddim(1000.0, 100).unwrap();
    let floor = euler_floor(&o, 100);
    for i in 0..20 {
        let x0 = rng::eps_star(7, i, 2);
        let seed = ddim_invert(&o, &x0, Y, 1000.0, &grid).unwrap().last().x;
        let err = (&seed - &x0).norm();
        assert!(err <= 1.1 * floor * x0.norm(), "{i}: {err}");
    }
}

fn round_trip(o: &Oracle, x0: &DVector<f64>, grid: &TimeGrid) -> f64 {
    let seed = ddim_invert(o, x0, Y, o.schedule().t_max(), grid).unwrap().last().x;
    let back = ddim_forward(o, &seed, Y, 0.0, grid, Guidance::NONE).unwrap().last().x;
    (back - x0).norm()
}

fn in_distribution_points(n: usize) -> Vec<DVector<f64>> {
    use rand::Rng;
    let mut r = rng::stream(99, 0, "points");
    (0..n)
        .map(|_| {
            let mode = if r.random::<bool>() { 2.0 } else { -2.0 };
            DVector::from_element(1, mode) + rng::standard_normal(&mut r, 1) * bench::TWO_MODE_SCALE
        })
        .collect()
}

#[test]
fn inversion_round_trip_on_in_distribution_points() {
    let o = bench::two_mode().unwrap();
    let coarse = TimeGrid::ddim(1000.0, 1000).unwrap();
    let fine = TimeGrid::ddim(1000.0, 4000).unwrap();
    for (i, x0) in in_distribution_points(50).iter().enumerate() {
        let (a, b) = (round_trip(&o, x0, &coarse), round_trip(&o, x0, &fine));
        assert!(b <= 1e-3, "point {i} at {}: {b}", x0[0]);
        if b > 1e-5 {
            assert!((3.5..=4.5).contains(&(a / b)), "point {i}: {a} {b}");
        }
    }
}

#[test]
fn inverted_means_return_to_their_mode() {
    let grid = TimeGrid::ddim(1000.0, 1000).unwrap();
    for (name, o, y) in bench::registered().unwrap() {
        if y != Y {
            continue;
        }
        for c in o.mixture(Y).unwrap().components() {
            let err = round_trip(&o, &c.mean, &grid);
            assert!(err <= 1e-2, "{name}: {err}");
        }
    }
}

#[test]
fn round_trip_on_three_mode_samples() {
    use rand::Rng;
    let o = bench::three_mode_2d().unwrap();
    let grid = TimeGrid::ddim(1000.0, 4000).unwrap();
    let comps = o.mixture(Y).unwrap().components().to_vec();
    let mut r = rng::stream(3, 0, "points");
    for i in 0..20 {
        let c = &comps[r.random_range(0..comps.len())];
        let x0 = &c.mean + rng::standard_normal(&mut r, 2) * c.scale;
        assert!(x0.norm() <= 4.0);
        let err = round_trip(&o, &x0, &grid);
        assert!(err <= 1e-3, "point {i}: {err}");
    }
}
