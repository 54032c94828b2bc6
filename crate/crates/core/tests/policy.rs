use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use ratioeval::constraints::{ConstraintKind, ConstraintSet};
use ratioeval::dual::{DualControl, DualProblem};
use ratioeval::grid::ValueGrid;
use ratioeval::market::{
    simulate_factor, simulate_wealth_density, Cells, Coefficients, FactorDynamics, FactorModel, PathStats, Shape,
    SimConfig,
};
use ratioeval::policy_sim::{
    optimal_ratio_sampler, policy_gamma1, policy_log, rollout, value_bounds, value_bounds_check, verify_martingale_d,
    Continuation, PeriodicPolicy, RolloutConfig,
};
use ratioeval::reduce::Moments;
use ratioeval::utility::{HFunction, ModifiedUtility, UtilityMode, UtilitySpec};

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn constant_model(r: f64, mu: &[f64], sigma: &[f64]) -> FactorModel {
    let n = mu.len();
    FactorModel::new(
        Coefficients::constant(r, v(mu), DMatrix::from_row_slice(n, n, sigma)),
        FactorDynamics { kappa: 1.0, mean: 0.0, beta: 0.3 },
        DVector::zeros(n),
        None,
    )
    .unwrap()
}

fn factor_model() -> FactorModel {
    FactorModel::new(
        Coefficients {
            shape: Shape::Sigmoid { center: 0.0, width: 0.5 },
            r0: 0.03,
            r1: 0.01,
            mu0: v(&[0.08, 0.06]),
            mu1: v(&[0.02, -0.01]),
            sigma0: DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.05, 0.15]),
            vol_mod: 0.2,
        },
        FactorDynamics { kappa: 2.0, mean: 0.0, beta: 0.4 },
        v(&[0.3, 0.2]),
        None,
    )
    .unwrap()
}

fn power(alpha: f64, gamma: f64, rho: f64, h: f64) -> UtilitySpec {
    UtilitySpec::new(UtilityMode::Power { alpha }, gamma, rho, 1.0, h, HFunction::Constant(h)).unwrap()
}

fn cells(count: usize) -> Cells {
    Cells::new(ValueGrid::uniform_nodes(-1.0, 1.0, count)).unwrap()
}

fn flat(cells: &Cells, c: f64) -> ValueGrid {
    ValueGrid::constant(cells.nodes().to_vec(), c).unwrap()
}

/// Stationary `A` for `gamma = 1` and constant coefficients with `tau = 1`.
fn merton_a(model: &FactorModel, alpha: f64, rho: f64, h: f64) -> f64 {
    let theta_sq = model.sharpe_theta(0.0).unwrap().norm_squared();
    let zeta = model.r(0.0) * alpha + alpha * theta_sq / (2.0 * (1.0 - alpha));
    h * (zeta - rho).exp() / (1.0 - (-rho).exp())
}

#[test]
fn gamma_one_interior_is_merton() {
    let model = constant_model(0.02, &[0.09, 0.07], &[0.2, 0.0, 0.05, 0.15]);
    let k = ConstraintSet::new(ConstraintKind::Unconstrained, 2).unwrap();
    for alpha in [0.5, -1.0] {
        let (pi, nu) = policy_gamma1(&model, &k, alpha, 0.0).unwrap();
        let sst = model.sigma(0.0) * model.sigma(0.0).transpose();
        let merton = sst.try_inverse().unwrap() * model.excess(0.0) / (1.0 - alpha);
        assert!((&pi - merton).amax() < 1e-12);
        assert!(nu.amax() < 1e-12);
    }
    assert!(policy_gamma1(&model, &k, 0.0, 0.0).is_err());
    assert!(policy_gamma1(&model, &k, 1.0, 0.0).is_err());
}

#[test]
fn gamma_one_box_caps_the_position() {
    let model = constant_model(0.02, &[0.08], &[0.2]);
    let alpha = 0.5;
    let e = 0.06;
    let brute = (0..=100_000)
        .map(|i| i as f64 / 100_000.0)
        .map(|p| (p, p * e - 0.5 * (1.0 - alpha) * 0.04 * p * p))
        .fold((0.0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
    for kind in [ConstraintKind::Box { lo: v(&[0.0]), hi: v(&[1.0]) }, ConstraintKind::NoShortAndBorrowCap { a: 1.0 }] {
        let k = ConstraintSet::new(kind, 1).unwrap();
        let (pi, nu) = policy_gamma1(&model, &k, alpha, 0.0).unwrap();
        assert!((pi[0] - 1.0).abs() < 1e-9, "{pi}");
        assert!((pi[0] - brute.0).abs() < 1e-4);
        assert!((nu[0] + 0.04).abs() < 1e-9, "{nu}");
    }
}

#[test]
fn symmetric_assets_share_the_borrowing_cap() {
    let model = constant_model(0.02, &[0.08, 0.08], &[0.2, 0.0, 0.0, 0.2]);
    for a in [1.0, 2.5] {
        let k = ConstraintSet::new(ConstraintKind::BorrowCap { a }, 2).unwrap();
        let (pi, nu) = policy_gamma1(&model, &k, 0.5, 0.0).unwrap();
        assert!((pi[0] - pi[1]).abs() < 1e-12 && (pi.sum() - a).abs() < 1e-12, "{pi}");
        let phi = 0.5 * 0.04 * a / 2.0 - 0.06;
        assert!((&nu - DVector::from_element(2, phi)).amax() < 1e-12, "{nu}");
    }
}

#[test]
fn log_policy_examples() {
    let model = constant_model(0.02, &[0.09, 0.07], &[0.2, 0.0, 0.05, 0.15]);
    let k = ConstraintSet::new(ConstraintKind::Unconstrained, 2).unwrap();
    let (pi, nu) = policy_log(&model, &k, 0.0).unwrap();
    let sst = model.sigma(0.0) * model.sigma(0.0).transpose();
    assert!((pi - sst.try_inverse().unwrap() * model.excess(0.0)).amax() < 1e-12);
    assert!(nu.amax() < 1e-12);

    // negative Sharpe ratio under a short-sale ban
    let model = constant_model(0.05, &[0.01], &[0.2]);
    assert!((model.sharpe_theta(0.0).unwrap()[0] + 0.2).abs() < 1e-12);
    let k = ConstraintSet::new(ConstraintKind::NoShort, 1).unwrap();
    let (pi, nu) = policy_log(&model, &k, 0.0).unwrap();
    assert!(pi[0].abs() < 1e-12);
    assert!((nu[0] - 0.04).abs() < 1e-10, "{nu}");
}

proptest! {
    #[test]
    fn no_short_log_policy_satisfies_kkt(
        mu in prop::array::uniform2(-0.05..0.15f64),
        s11 in 0.1..0.4f64, s21 in -0.2..0.2f64, s22 in 0.1..0.4f64,
    ) {
        let model = constant_model(0.03, &mu, &[s11, 0.0, s21, s22]);
        let k = ConstraintSet::new(ConstraintKind::NoShort, 2).unwrap();
        let (pi, nu) = policy_log(&model, &k, 0.0).unwrap();
        let sst = model.sigma(0.0) * model.sigma(0.0).transpose();
        let residual = &sst * &pi - model.excess(0.0) - &nu;
        prop_assert!(residual.amax() < 1e-8, "{residual}");
        for i in 0..2 {
            prop_assert!(pi[i] >= -1e-10 && nu[i] >= -1e-10);
            prop_assert!((pi[i] * nu[i]).abs() < 1e-9);
        }
    }
}

fn lambda_for(model: &FactorModel, k: &ConstraintSet, ctrl: &DualControl, mu: &ModifiedUtility, sim: &SimConfig) -> f64 {
    let stats = PathStats::build(model, &ctrl.cells, 0.0, sim).unwrap();
    let utils: Vec<_> = (0..stats.count).map(|p| mu.at(stats.path(p).y_end)).collect();
    let p = DualProblem { model, k, cells: &ctrl.cells, stats: &stats, utils: &utils };
    let ld = p.log_deflators(&ctrl.nu, &ctrl.eta).unwrap();
    p.solve_lambda(&ld).unwrap()
}

#[test]
fn riskless_market_ratio_is_the_bond() {
    let r = 0.03;
    let model = constant_model(r, &[r], &[0.2]);
    let k = ConstraintSet::new(ConstraintKind::Unconstrained, 1).unwrap();
    let spec = power(0.5, 0.6, 0.2, 0.8);
    let c = cells(3);
    let mu = ModifiedUtility::new(&spec, flat(&c, 1.3)).unwrap();
    let mut ctrl = DualControl::zero(&c, 1);
    ctrl.lambda = r.exp() * mu.marginal(r.exp(), 0.0).unwrap();
    let out = optimal_ratio_sampler(&model, &k, &mu, &ctrl, 0.0, &SimConfig::new(2, 512, 8, 1.0).unwrap()).unwrap();
    assert!(out.ratios.iter().all(|x| (x / r.exp() - 1.0).abs() < 1e-10));
    assert!((out.budget.mean - 1.0).abs() < 1e-10);
}

#[test]
fn ratio_sampler_meets_the_budget() {
    let model = factor_model();
    let k = ConstraintSet::new(ConstraintKind::NoShort, 2).unwrap();
    let spec = UtilitySpec::new(UtilityMode::Power { alpha: 0.5 }, 0.5, 0.2, 1.0, 0.6, HFunction::Sigmoid {
        lo: 0.6,
        hi: 1.0,
        center: 0.0,
        width: 0.5,
    })
    .unwrap();
    let c = cells(5);
    let a = ValueGrid::new(c.nodes().to_vec(), vec![1.0, 1.2, 1.5, 1.7, 1.8]).unwrap();
    let mu = ModifiedUtility::new(&spec, a).unwrap();
    let mut ctrl = DualControl::zero(&c, 2);
    for (nu, &y) in ctrl.nu.iter_mut().zip(c.nodes()) {
        *nu = policy_gamma1(&model, &k, 0.5, y).unwrap().1;
    }
    let fit = SimConfig::new(3, 1 << 14, 16, 1.0).unwrap();
    ctrl.lambda = lambda_for(&model, &k, &ctrl, &mu, &fit);
    let same = optimal_ratio_sampler(&model, &k, &mu, &ctrl, 0.0, &fit).unwrap();
    assert!((same.budget.mean - 1.0).abs() < 1e-8, "{}", same.budget.mean);
    let fresh = optimal_ratio_sampler(&model, &k, &mu, &ctrl, 0.0, &fit.with_seed(99)).unwrap();
    let se = fresh.budget.std_err();
    assert!((fresh.budget.mean - 1.0).abs() < 3.0 * se, "{} +- {se}", fresh.budget.mean);
    assert!(fresh.ratios.iter().all(|x| *x > 0.0));
}

#[test]
fn gamma_one_ratio_matches_the_primal_wealth() {
    let model = constant_model(0.02, &[0.09, 0.07], &[0.2, 0.0, 0.05, 0.15]);
    let k = ConstraintSet::new(ConstraintKind::NoShortAndBorrowCap { a: 1.0 }, 2).unwrap();
    let alpha = 0.5;
    let spec = power(alpha, 1.0, 0.2, 0.9);
    let c = cells(3);
    let mu = ModifiedUtility::new(&spec, flat(&c, 1.4)).unwrap();
    let (pi, nu) = policy_gamma1(&model, &k, alpha, 0.0).unwrap();
    let mut ctrl = DualControl::zero(&c, 2);
    ctrl.nu = vec![nu.clone(); 3];
    let sim = SimConfig::new(8, 1 << 15, 8, 1.0).unwrap();
    ctrl.lambda = lambda_for(&model, &k, &ctrl, &mu, &sim);
    let dual = optimal_ratio_sampler(&model, &k, &mu, &ctrl, 0.0, &sim.with_seed(81)).unwrap();
    let mut dual_m = Moments::default();
    dual.ratios.iter().for_each(|x| dual_m.push(*x));

    let paths = simulate_factor(&model, 0.0, &sim.with_seed(82)).unwrap();
    let zero = |_: f64| DVector::zeros(2);
    let out = simulate_wealth_density(&model, &k, &paths, &|_| pi.clone(), &zero, &|_| 0.0, 50.0).unwrap();
    let mut primal_m = Moments::default();
    out.iter().for_each(|w| primal_m.push(w.x()));

    let se = (dual_m.std_err().powi(2) + primal_m.std_err().powi(2)).sqrt();
    assert!((dual_m.mean - primal_m.mean).abs() < 3.0 * se, "{} vs {} (se {se})", dual_m.mean, primal_m.mean);
    let (vd, vp) = (dual_m.variance(), primal_m.variance());
    assert!((vd / vp - 1.0).abs() < 0.05, "{vd} vs {vp}");
}

fn rollout_cfg(paths: usize, periods: usize, x0: f64) -> RolloutConfig {
    RolloutConfig { paths, steps_per_period: 4, periods, seed: 3, x0, y0: 0.0, log_cap: 50.0 }
}

#[test]
fn risk_free_objective_is_a_geometric_sum() {
    let r = 0.03;
    let model = constant_model(r, &[0.08], &[0.2]);
    let c = cells(3);
    let policy = PeriodicPolicy::risk_free(c.clone(), 1).unwrap();
    for (alpha, gamma) in [(0.5, 0.5), (-1.0, 0.7), (0.3, 1.0)] {
        let rho = 0.2;
        let spec = power(alpha, gamma, rho, 0.8);
        let cont = Continuation::Power(flat(&c, 1.0));
        let periods = 6;
        let res = rollout(&model, &spec, &policy, &cont, &rollout_cfg(16, periods, 1.0)).unwrap();
        let exact: f64 = (1..=periods)
            .map(|n| {
                let lratio = r - gamma * rho + (1.0 - gamma) * (n - 1) as f64 * r;
                (-rho * n as f64).exp() * 0.8 * (alpha * lratio).exp() / alpha
            })
            .sum();
        assert!((res.objective - exact).abs() < 1e-12 * exact.abs(), "{} vs {exact}", res.objective);
        assert!(res.objective_se < 1e-12);
        assert!((res.min_wealth() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn value_bounds_collapse_without_risk_premium() {
    let r = 0.03;
    let model = constant_model(r, &[r], &[0.2]);
    assert_eq!(model.bounds.m0, 0.0);
    for (alpha, gamma) in [(0.5, 0.5), (-1.0, 0.7)] {
        let rho = 0.2;
        let spec = power(alpha, gamma, rho, 1.0);
        let b = value_bounds(&model, &spec, 1.0).unwrap();
        let growth = alpha * (1.0 - gamma) * r;
        let exact = (alpha * (r - gamma * rho)).exp() / alpha * (-rho).exp() / (1.0 - (growth - rho).exp());
        assert!((b.lower - exact).abs() < 1e-12 * exact.abs(), "{b:?} vs {exact}");
        assert!((b.upper - exact).abs() < 1e-12 * exact.abs(), "{b:?} vs {exact}");

        // the risk-free rollout over many periods converges to the same value
        let policy = PeriodicPolicy::risk_free(cells(3), 1).unwrap();
        let cont = Continuation::Power(flat(&cells(3), 0.0));
        let res = rollout(&model, &spec, &policy, &cont, &rollout_cfg(4, 200, 1.0)).unwrap();
        assert!((res.objective - exact).abs() < 1e-10 * exact.abs());
        assert!(value_bounds_check(&model, &spec, 1.0, res.objective, 1e-10 * exact.abs()).unwrap().passed);
    }
}

#[test]
fn value_bounds_orientation() {
    let model = factor_model();
    for alpha in [0.5, -1.0] {
        let spec = power(alpha, 0.6, 0.3, 0.8);
        let b = value_bounds(&model, &spec, 2.0).unwrap();
        assert!(b.lower < b.upper, "{b:?}");
        assert_eq!(b.lower.signum(), alpha.signum());
        assert_eq!(b.upper.signum(), alpha.signum());
    }
}

#[test]
fn wealth_scaling() {
    let model = factor_model();
    let k = ConstraintSet::new(ConstraintKind::NoShort, 2).unwrap();
    let c = cells(5);
    let policy = PeriodicPolicy::gamma1(&model, &k, 0.5, c.clone()).unwrap();
    let a = ValueGrid::new(c.nodes().to_vec(), vec![1.0, 1.2, 1.5, 1.7, 1.8]).unwrap();
    for gamma in [0.5, 1.0] {
        let spec = power(0.5, gamma, 0.3, 0.8);
        let cont = Continuation::Power(a.clone());
        let one = rollout(&model, &spec, &policy, &cont, &rollout_cfg(256, 3, 1.0)).unwrap();
        let two = rollout(&model, &spec, &policy, &cont, &rollout_cfg(256, 3, 2.0)).unwrap();
        let f = 2f64.powf(0.5 * (1.0 - gamma));
        assert!((two.objective / one.objective - f).abs() < 1e-10, "gamma {gamma}");
        assert!((two.value_estimate / one.value_estimate - f).abs() < 1e-10);
        assert!(one.min_wealth() > 0.0);
    }
}

#[test]
fn optimal_rollout_is_a_martingale() {
    let model = constant_model(0.02, &[0.08], &[0.2]);
    let k = ConstraintSet::new(ConstraintKind::Unconstrained, 1).unwrap();
    let (alpha, rho, h) = (0.5, 0.2, 0.9);
    let spec = power(alpha, 1.0, rho, h);
    let c = cells(3);
    let a = merton_a(&model, alpha, rho, h);
    let cont = Continuation::Power(flat(&c, a));
    let policy = PeriodicPolicy::gamma1(&model, &k, alpha, c.clone()).unwrap();
    let cfg = rollout_cfg(1 << 14, 5, 1.0);
    let res = rollout(&model, &spec, &policy, &cont, &cfg).unwrap();
    let stats = verify_martingale_d(&res, 0.0).unwrap();
    assert!(stats.iter().all(|s| s.martingale), "{stats:?}");

    let value = (-rho * alpha).exp() * a / alpha;
    assert!((res.value_estimate - value).abs() < 3.0 * res.value_se, "{} vs {value}", res.value_estimate);
    assert!((value - res.objective).abs() <= res.tail_bound + 3.0 * res.objective_se);
    let partial = value * (1.0 - (-rho * cfg.periods as f64).exp());
    assert!((res.objective - partial).abs() < 3.0 * res.objective_se, "{} vs {partial}", res.objective);
    assert!(value_bounds_check(&model, &spec, 1.0, res.value_estimate, 3.0 * res.value_se).unwrap().passed);

    let half = rollout(&model, &spec, &policy.scaled(0.5), &cont, &cfg).unwrap();
    let stats = verify_martingale_d(&half, 0.0).unwrap();
    assert!(stats.iter().all(|s| s.supermartingale));
    assert!(stats.iter().any(|s| !s.martingale), "{stats:?}");

    let idle = rollout(&model, &spec, &PeriodicPolicy::risk_free(c, 1).unwrap(), &cont, &cfg).unwrap();
    for s in verify_martingale_d(&idle, 0.0).unwrap() {
        assert!(s.mean < -3.0 * s.std_err, "{s:?}");
    }
}

#[test]
fn rollout_rejects_bad_configs() {
    let model = constant_model(0.02, &[0.08], &[0.2]);
    let spec = power(0.5, 1.0, 0.2, 1.0);
    let c = cells(3);
    let policy = PeriodicPolicy::risk_free(c.clone(), 1).unwrap();
    let cont = Continuation::Power(flat(&c, 1.0));
    for cfg in [rollout_cfg(0, 3, 1.0), rollout_cfg(8, 0, 1.0), rollout_cfg(8, 3, 0.0)] {
        assert!(rollout(&model, &spec, &policy, &cont, &cfg).is_err());
    }
    let wild = policy.scaled(0.0);
    let lever = PeriodicPolicy::markov(c.clone(), vec![v(&[400.0]); 3]).unwrap();
    assert!(rollout(&model, &spec, &wild, &cont, &rollout_cfg(8, 3, 1.0)).is_ok());
    assert!(rollout(&model, &spec, &lever, &cont, &RolloutConfig { log_cap: 5.0, ..rollout_cfg(64, 3, 1.0) }).is_err());
    assert!(PeriodicPolicy::new(c, vec![vec![v(&[0.0]); 2]; 3]).is_err());
}
