use asreach::poly::Polynomial;
use asreach::sde::{SdeSystem, SemialgebraicSet};
use asreach::simulate::{
    decrease_probability, euler_maruyama, grid_sweep_decrease, hitting_cdf, SimConfig,
};
use statrs::function::erf::erfc;

fn brownian(n: usize, sigma: f64) -> SdeSystem {
    let f = vec![Polynomial::zero(n); n];
    let g = (0..n)
        .map(|i| (0..n).map(|j| if i == j { Polynomial::constant(n, sigma) } else { Polynomial::zero(n) }).collect())
        .collect();
    SdeSystem::new(f, g).unwrap()
}

fn phi(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[test]
fn reflection_principle() {
    let sys = brownian(1, 1.0);
    let set = SemialgebraicSet::ball(&[0.0], 1.0);
    let cfg = SimConfig { dt: 1e-3, t_max: 16.0, n_traj: 2000, seed: 42 };
    let cdf = hitting_cdf(&sys, &[2.0], &set, &cfg, &[1.0, 4.0, 16.0]).unwrap();
    for (t, p) in cdf.horizons.iter().zip(&cdf.p_mean) {
        let exact = 2.0 * (1.0 - phi(1.0 / t.sqrt()));
        assert!((p - exact).abs() <= 0.05, "t = {t}: {p} vs {exact}");
    }
}

#[test]
fn three_dimensional_brownian_saturates_below_one() {
    let sys = brownian(3, 1.0);
    let set = SemialgebraicSet::ball(&[0.0; 3], 1.0);
    let cfg = SimConfig { dt: 1e-2, t_max: 100.0, n_traj: 300, seed: 9 };
    let cdf = hitting_cdf(&sys, &[2.0, 0.0, 0.0], &set, &cfg, &[100.0]).unwrap();
    assert!(cdf.terminal() < 1.0);
}

#[test]
fn ornstein_uhlenbeck_second_moment() {
    // A = -I, B = I: E|x(t)|^2 = |x0|^2 e^{-2t} + n (1 - e^{-2t}) / 2
    let sys = SdeSystem::linear(&[vec![-1.0, 0.0], vec![0.0, -1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let x0 = [1.0, -2.0];
    let t = 5.0;
    let cfg = SimConfig { dt: 1e-3, t_max: t, n_traj: 1, seed: 17 };
    let n = 2000;
    let vals: Vec<f64> = (0..n)
        .map(|k| {
            let tr = euler_maruyama(&sys, &x0, &cfg, k).unwrap();
            tr.state(tr.len() - 1).iter().map(|v| v * v).sum()
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let e = (-2.0 * t).exp();
    let exact = 5.0 * e + 2.0 * (1.0 - e) / 2.0;
    assert!((mean - exact).abs() < 5.0 * sd / (n as f64).sqrt(), "{mean} vs {exact}");
}

#[test]
fn same_seed_same_bytes() {
    let sys = brownian(2, 1.0);
    let set = SemialgebraicSet::ball(&[0.0; 2], 1.0);
    let cfg = SimConfig { dt: 1e-2, t_max: 5.0, n_traj: 100, seed: 5 };
    let a = hitting_cdf(&sys, &[2.0, 0.0], &set, &cfg, &[1.0, 2.5, 5.0]).unwrap().to_csv();
    let b = hitting_cdf(&sys, &[2.0, 0.0], &set, &cfg, &[1.0, 2.5, 5.0]).unwrap().to_csv();
    assert_eq!(a, b);
    let tr1 = euler_maruyama(&sys, &[2.0, 0.0], &cfg, 3).unwrap().to_csv();
    let tr2 = euler_maruyama(&sys, &[2.0, 0.0], &cfg, 3).unwrap().to_csv();
    assert_eq!(tr1, tr2);
    let other = SimConfig { seed: 6, ..cfg };
    assert_ne!(tr1, euler_maruyama(&sys, &[2.0, 0.0], &other, 3).unwrap().to_csv());
}

#[test]
fn more_trajectories_keep_earlier_ones() {
    let sys = brownian(1, 1.0);
    let set = SemialgebraicSet::ball(&[0.0], 1.0);
    let small = SimConfig { dt: 1e-2, t_max: 4.0, n_traj: 50, seed: 1 };
    let large = SimConfig { n_traj: 120, ..small };
    let a = hitting_cdf(&sys, &[2.0], &set, &small, &[4.0]).unwrap();
    let b = hitting_cdf(&sys, &[2.0], &set, &large, &[4.0]).unwrap();
    assert_eq!(a.hit_times[..], b.hit_times[..50]);
}

#[test]
fn decrease_probability_is_deterministic() {
    let f = Polynomial::from_terms(1, [(-1.0, vec![1])]).unwrap();
    let sys = SdeSystem::new(vec![f], vec![vec![Polynomial::constant(1, 1.0)]]).unwrap();
    let zeta = Polynomial::from_terms(1, [(1.0, vec![2]), (-1.0, vec![0])]).unwrap();
    let a = decrease_probability(&sys, &zeta, 2.0, &[1.5], 0.01, 1e-3, 1000, 4).unwrap();
    let b = decrease_probability(&sys, &zeta, 2.0, &[1.5], 0.01, 1e-3, 1000, 4).unwrap();
    assert_eq!(a, b);
    assert!(a.value > 0.0 && a.value < 1.0);
    let field = grid_sweep_decrease(&sys, &zeta, 2.0, &[(-3.0, 3.0)], 13, 0.01, 1e-3, 200, 4).unwrap();
    assert_eq!(field.to_csv(), grid_sweep_decrease(&sys, &zeta, 2.0, &[(-3.0, 3.0)], 13, 0.01, 1e-3, 200, 4).unwrap().to_csv());
    assert!(field.points.iter().all(|p| p.x[0].abs() > 1.0));
}
