use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use ratioeval::constraints::{nu_star_log, nu_star_power_gamma1, ConstraintKind, ConstraintSet};
use ratioeval::dual::{kkt_check, log_dual_control, theta_nu, DualConfig, DualControl, DualProblem};
use ratioeval::grid::ValueGrid;
use ratioeval::market::{
    simulate_factor, simulate_wealth_density, Cells, Coefficients, FactorDynamics, FactorModel, PathSet, PathStats,
    Shape, SimConfig,
};
use ratioeval::policy_sim::policy_gamma1;
use ratioeval::reduce::Moments;
use ratioeval::utility::{HFunction, LocalUtility, ModifiedUtility, UtilityMode, UtilitySpec};

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn constant_model(r: f64, mu: &[f64], sigma: &[f64], q: &[f64]) -> FactorModel {
    let n = mu.len();
    FactorModel::new(
        Coefficients::constant(r, v(mu), DMatrix::from_row_slice(n, n, sigma)),
        FactorDynamics { kappa: 1.0, mean: 0.0, beta: 0.3 },
        v(q),
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

fn spec(alpha: f64, gamma: f64, h: HFunction) -> UtilitySpec {
    UtilitySpec::new(UtilityMode::Power { alpha }, gamma, 0.3, 1.0, 0.5, h).unwrap()
}

/// Frozen reduced paths with terminal utilities.
struct Fixture {
    model: FactorModel,
    k: ConstraintSet,
    cells: Cells,
    stats: PathStats,
    utils: Vec<LocalUtility>,
}

impl Fixture {
    fn new(model: FactorModel, k: ConstraintSet, spec: &UtilitySpec, a: ValueGrid, sim: SimConfig) -> Self {
        let cells = Cells::new(a.nodes().to_vec()).unwrap();
        let stats = PathStats::build(&model, &cells, 0.0, &sim).unwrap();
        let mu = ModifiedUtility::new(spec, a).unwrap();
        let utils = (0..stats.count).map(|p| mu.at(stats.path(p).y_end)).collect();
        Fixture { model, k, cells, stats, utils }
    }

    fn problem(&self) -> DualProblem<'_> {
        DualProblem { model: &self.model, k: &self.k, cells: &self.cells, stats: &self.stats, utils: &self.utils }
    }

    fn zero(&self) -> (Vec<DVector<f64>>, Vec<f64>) {
        (vec![DVector::zeros(self.model.n); self.cells.len()], vec![0.0; self.cells.len()])
    }
}

fn flat_a(nodes: usize, c: f64) -> ValueGrid {
    ValueGrid::constant(ValueGrid::uniform_nodes(-1.0, 1.0, nodes), c).unwrap()
}

#[test]
fn theta_nu_examples() {
    let m = constant_model(0.02, &[0.08], &[0.2], &[0.0]);
    assert!((theta_nu(&m, 0.0, &v(&[0.0])).unwrap() - m.sharpe_theta(0.0).unwrap()).amax() < 1e-15);
    assert!(theta_nu(&m, 0.0, &v(&[-0.06])).unwrap()[0].abs() < 1e-15);
    assert!((theta_nu(&m, 0.0, &v(&[0.02])).unwrap()[0] - 0.4).abs() < 1e-14);
}

#[test]
fn degenerate_density_gives_exact_dual() {
    let r = 0.04;
    let model = constant_model(r, &[r, r], &[0.2, 0.0, 0.0, 0.3], &[0.5, 0.0]);
    let k = ConstraintSet::new(ConstraintKind::Unconstrained, 2).unwrap();
    let s = spec(0.5, 0.6, HFunction::Constant(0.8));
    let fx = Fixture::new(model, k, &s, flat_a(3, 1.7), SimConfig::new(1, 256, 8, 1.0).unwrap());
    let (nu, eta) = fx.zero();
    let ld = fx.problem().log_deflators(&nu, &eta).unwrap();
    assert!(ld.iter().all(|l| (l + r).abs() < 1e-14));
    let local = LocalUtility { alpha: 0.5, gamma: 0.6, h: 0.8, a: 1.7 };
    for lambda in [0.3, 1.0, 2.5] {
        let ctrl = DualControl { cells: fx.cells.clone(), nu: nu.clone(), eta: eta.clone(), lambda };
        let ev = fx.problem().dual_objective(&ctrl).unwrap();
        let (phi, _) = local.legendre(lambda * (-r).exp()).unwrap();
        assert!((ev.value - (phi + lambda)).abs() < 1e-12, "{} vs {}", ev.value, phi + lambda);
        assert!(ev.std_err < 1e-12);
        assert_eq!(ev.paths_used, 256);
    }
}

#[test]
fn multiplier_closed_form_without_risk() {
    let r = 0.05;
    let model = constant_model(r, &[r], &[0.25], &[0.0]);
    let k = ConstraintSet::new(ConstraintKind::NoShort, 1).unwrap();
    for alpha in [0.5, -2.0] {
        let s = spec(alpha, 1.0, HFunction::Constant(1.0));
        let fx = Fixture::new(model.clone(), k.clone(), &s, flat_a(3, 0.9), SimConfig::new(4, 64, 4, 1.0).unwrap());
        let (nu, eta) = fx.zero();
        let ld = fx.problem().log_deflators(&nu, &eta).unwrap();
        let lambda = fx.problem().solve_lambda(&ld).unwrap();
        let exact = (alpha * r).exp();
        assert!((lambda / exact - 1.0).abs() < 1e-8, "alpha {alpha}: {lambda} vs {exact}");
    }
}

/// `E[Phi(lambda Z / B)]` for a lognormal deflator by composite Simpson
/// quadrature against the Gaussian density, with `h = 1`, `A = 0`.
fn lognormal_conjugate(alpha: f64, lambda: f64, mean: f64, var: f64) -> f64 {
    let phi = |u: f64| (1.0 - alpha) / alpha * u.powf(alpha / (alpha - 1.0));
    let (lo, hi, n) = (-12.0, 12.0, 24_000);
    let h = (hi - lo) / n as f64;
    let f = |z: f64| phi(lambda * (mean + var.sqrt() * z).exp()) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn dual_value_matches_quadrature() {
    let (r, mu, sig) = (0.02, 0.08, 0.2);
    let model = constant_model(r, &[mu], &[sig], &[0.0]);
    let k = ConstraintSet::new(ConstraintKind::Unconstrained, 1).unwrap();
    let theta_sq = ((mu - r) / sig).powi(2);
    for (alpha, gamma) in [(0.5, 0.3), (-1.0, 0.8)] {
        let s = spec(alpha, gamma, HFunction::Constant(1.0));
        let fx = Fixture::new(model.clone(), k.clone(), &s, flat_a(3, 0.0), SimConfig::new(8, 1 << 16, 4, 1.0).unwrap());
        let (nu, eta) = fx.zero();
        for lambda in [0.7, 1.3] {
            let ctrl = DualControl { cells: fx.cells.clone(), nu: nu.clone(), eta: eta.clone(), lambda };
            let ev = fx.problem().dual_objective(&ctrl).unwrap();
            let exact = lognormal_conjugate(alpha, lambda, -r - 0.5 * theta_sq, theta_sq);
            let got = ev.value - lambda;
            assert!((got - exact).abs() < 3.0 * ev.std_err, "alpha {alpha}: {got} vs {exact} (se {})", ev.std_err);
        }
    }
}

#[test]
fn budget_decreasing_and_scales_with_wealth() {
    let model = factor_model();
    let k = ConstraintSet::new(ConstraintKind::NoShortAndBorrowCap { a: 1.5 }, 2).unwrap();
    for alpha in [0.5, -1.0] {
        let s = spec(alpha, 1.0, HFunction::Constant(1.0));
        let fx = Fixture::new(model.clone(), k.clone(), &s, flat_a(5, 0.0), SimConfig::new(2, 4096, 16, 1.0).unwrap());
        let p = fx.problem();
        let nu = vec![v(&[0.01, 0.0]); 5];
        let eta = vec![0.1, 0.0, -0.1, 0.2, 0.0];
        let ld = p.log_deflators(&nu, &eta).unwrap();
        let budgets: Vec<f64> = (0..30).map(|i| p.evaluate(&ld, 0.05 * 1.3f64.powi(i)).unwrap().budget).collect();
        assert!(budgets.windows(2).all(|w| w[1] < w[0]));

        let lambda = p.solve_lambda(&ld).unwrap();
        assert!((p.evaluate(&ld, lambda).unwrap().budget - 1.0).abs() <= 1e-6);
        // gamma = 1, A = 0: x* is a power of lambda, so doubling the budget scales lambda by 2^(alpha - 1)
        let doubled = p.evaluate(&ld, lambda * 2f64.powf(alpha - 1.0)).unwrap().budget;
        assert!((doubled - 2.0).abs() < 1e-9, "{doubled}");
    }
}

#[test]
fn dual_functional_has_interior_minimum_in_lambda() {
    let model = factor_model();
    let k = ConstraintSet::new(ConstraintKind::NoShortAndBorrowCap { a: 1.5 }, 2).unwrap();
    let h = HFunction::Sigmoid { lo: 0.6, hi: 1.0, center: 0.0, width: 1.0 };
    for alpha in [0.5, -1.0] {
        let a = ValueGrid::new(ValueGrid::uniform_nodes(-1.0, 1.0, 5), vec![1.0, 1.5, 2.0, 1.2, 0.8]).unwrap();
        let fx = Fixture::new(model.clone(), k.clone(), &spec(alpha, 0.5, h.clone()), a, SimConfig::new(3, 4096, 16, 1.0).unwrap());
        let p = fx.problem();
        let (nu, eta) = fx.zero();
        let ld = p.log_deflators(&nu, &eta).unwrap();
        let star = p.solve_lambda(&ld).unwrap();
        let lambdas: Vec<f64> = (-40..=40).map(|i| star * 1.05f64.powi(i)).collect();
        let vals: Vec<f64> = lambdas.iter().map(|&l| p.evaluate(&ld, l).unwrap().value).collect();
        let (imin, _) = vals.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(imin, 40, "minimum away from the budget root");
        assert!(vals[..=40].windows(2).all(|w| w[1] < w[0]));
        assert!(vals[40..].windows(2).all(|w| w[1] > w[0]));
    }
}

#[test]
fn dual_functional_convex_in_eta() {
    let model = factor_model();
    let k = ConstraintSet::new(ConstraintKind::NoShort, 2).unwrap();
    let h = HFunction::Sigmoid { lo: 0.6, hi: 1.0, center: 0.0, width: 1.0 };
    let a = ValueGrid::new(ValueGrid::uniform_nodes(-1.0, 1.0, 3), vec![1.0, 2.0, 0.5]).unwrap();
    let fx = Fixture::new(model, k, &spec(0.5, 0.5, h), a, SimConfig::new(5, 1 << 14, 16, 1.0).unwrap());
    let p = fx.problem();
    let nu = vec![v(&[0.0, 0.01]); 3];
    let (e1, e2) = (vec![-0.4, 0.2, 0.6], vec![0.5, -0.3, -0.2]);
    let at = |t: f64| {
        let eta: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let ctrl = DualControl { cells: fx.cells.clone(), nu: nu.clone(), eta, lambda: 1.1 };
        p.dual_objective(&ctrl).unwrap()
    };
    let (l0, l1) = (at(0.0), at(1.0));
    for i in 1..10 {
        let t = i as f64 / 10.0;
        let mid = at(t);
        let chord = t * l1.value + (1.0 - t) * l0.value;
        assert!(mid.value <= chord + 3.0 * mid.std_err, "t = {t}: {} > {chord}", mid.value);
    }
}

#[test]
fn gamma_one_minimizer_is_the_closed_form() {
    let model = constant_model(0.02, &[0.09, 0.07], &[0.2, 0.0, 0.05, 0.15], &[0.4, 0.3]);
    let k = ConstraintSet::new(ConstraintKind::NoShortAndBorrowCap { a: 1.0 }, 2).unwrap();
    for alpha in [0.5, -1.0] {
        let fx = Fixture::new(
            model.clone(),
            k.clone(),
            &spec(alpha, 1.0, HFunction::Constant(0.9)),
            flat_a(3, 1.4),
            SimConfig::new(6, 1 << 13, 8, 1.0).unwrap(),
        );
        let out = fx.problem().minimize(&DualConfig::default()).unwrap();
        let closed = nu_star_power_gamma1(&k, &model.sharpe_theta(0.0).unwrap(), &model.sigma(0.0), alpha).unwrap();
        for nu in &out.control.nu {
            assert!((nu - &closed).amax() < 1e-4, "{nu} vs {closed}");
        }
        assert_eta_is_noise(&fx.problem(), &out.control, 1);
        assert!((out.evaluation.budget - 1.0).abs() <= 1e-6);
        let (_, nu_closed) = policy_gamma1(&model, &k, alpha, 0.0).unwrap();
        assert!((nu_closed - closed).amax() < 1e-10);
    }
}

#[test]
fn complete_market_keeps_eta_at_zero() {
    let model = constant_model(0.02, &[0.08], &[0.2], &[1.0]);
    let k = ConstraintSet::new(ConstraintKind::Unconstrained, 1).unwrap();
    let h = HFunction::Sigmoid { lo: 0.6, hi: 1.0, center: 0.0, width: 0.3 };
    let a = ValueGrid::new(ValueGrid::uniform_nodes(-1.0, 1.0, 3), vec![0.5, 1.0, 2.0]).unwrap();
    let fx = Fixture::new(model, k, &spec(0.5, 0.5, h), a, SimConfig::new(7, 1 << 14, 8, 1.0).unwrap());
    let p = fx.problem();
    let (nu, zero) = fx.zero();
    let ld = p.log_deflators(&nu, &zero).unwrap();
    let lambda = p.solve_lambda(&ld).unwrap();
    let base = p.evaluate(&ld, lambda).unwrap();
    for e in [-0.3, 0.2] {
        let ld = p.log_deflators(&nu, &vec![e; 3]).unwrap();
        let perturbed = p.evaluate(&ld, lambda).unwrap();
        assert!(perturbed.value >= base.value - 3.0 * base.std_err, "eta {e}: {} < {}", perturbed.value, base.value);
    }
    let out = p.minimize(&DualConfig::default()).unwrap();
    assert_eta_is_noise(&p, &out.control, 1);
}

/// `eta` from the descent is small in the well visited cell `centre`, and
/// resetting it to zero changes the dual value by less than the noise.
fn assert_eta_is_noise(p: &DualProblem<'_>, ctrl: &DualControl, centre: usize) {
    assert!(ctrl.eta[centre].abs() < 0.02, "eta = {:?}", ctrl.eta);
    let fitted = p.dual_objective(ctrl).unwrap();
    let ld = p.log_deflators(&ctrl.nu, &vec![0.0; ctrl.eta.len()]).unwrap();
    let zero = p.evaluate(&ld, p.solve_lambda(&ld).unwrap()).unwrap();
    assert!(zero.value - fitted.value <= fitted.std_err, "{} vs {}", zero.value, fitted.value);
}

#[test]
fn log_control_examples() {
    let model = factor_model();
    let k = ConstraintSet::new(ConstraintKind::NoShort, 2).unwrap();
    let cells = Cells::new(ValueGrid::uniform_nodes(-1.0, 1.0, 5)).unwrap();
    let ctrl = log_dual_control(&model, &k, &cells, 4.0).unwrap();
    assert_eq!(ctrl.lambda, 0.25);
    assert!(ctrl.eta.iter().all(|e| *e == 0.0));
    for (&y, nu) in cells.nodes().iter().zip(&ctrl.nu) {
        assert_eq!(nu, &nu_star_log(&k, &model.sharpe_theta(y).unwrap(), &model.sigma(y)).unwrap());
    }
    let (nu_max, eta_max, d_max) = ctrl.sup_norms(&k).unwrap();
    assert!(nu_max.is_finite() && eta_max == 0.0 && d_max == 0.0);
}

#[test]
fn kkt_examples() {
    let model = factor_model();
    let cells = Cells::new(ValueGrid::uniform_nodes(-1.0, 1.0, 5)).unwrap();
    let free = ConstraintSet::new(ConstraintKind::Unconstrained, 2).unwrap();
    let ctrl = DualControl::zero(&cells, 2);
    let merton: Vec<_> = cells.nodes().iter().map(|&y| policy_gamma1(&model, &free, 0.5, y).unwrap().0).collect();
    assert!(kkt_check(&free, &ctrl, &merton, 1e-8).passed);

    let k = ConstraintSet::new(ConstraintKind::NoShortAndBorrowCap { a: 0.8 }, 2).unwrap();
    let pairs: Vec<_> = cells.nodes().iter().map(|&y| policy_gamma1(&model, &k, -1.0, y).unwrap()).collect();
    let ctrl = DualControl {
        cells: cells.clone(),
        nu: pairs.iter().map(|p| p.1.clone()).collect(),
        eta: vec![0.0; 5],
        lambda: 1.0,
    };
    let pi: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
    let rep = kkt_check(&k, &ctrl, &pi, 1e-8);
    assert!(rep.passed, "{rep:?}");

    let mut bad = pi.clone();
    bad[2] = v(&[1.0, 0.5]);
    let rep = kkt_check(&k, &ctrl, &bad, 1e-8);
    assert!(!rep.passed && !rep.nodes[2].feasible && rep.nodes[2].distance_to_k > 0.1);
}

#[test]
fn control_csv_layout() {
    let cells = Cells::new(vec![-1.0, 1.0]).unwrap();
    let mut ctrl = DualControl::zero(&cells, 2);
    ctrl.lambda = 0.5;
    ctrl.nu[1] = v(&[0.25, 0.0]);
    let mut buf = Vec::new();
    ctrl.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lambda,5e-1");
    assert_eq!(lines[1], "y,nu_1,nu_2,eta");
    assert_eq!(lines[3], "1e0,2.5e-1,0e0,0e0");
}

struct WeakDuality {
    model: FactorModel,
    k: ConstraintSet,
    paths: PathSet,
    a: ValueGrid,
    h: HFunction,
}

fn weak_fixture() -> &'static WeakDuality {
    static CELL: OnceLock<WeakDuality> = OnceLock::new();
    CELL.get_or_init(|| {
        let model = factor_model();
        let paths = simulate_factor(&model, 0.0, &SimConfig::new(31, 1 << 13, 16, 1.0).unwrap()).unwrap();
        WeakDuality {
            k: ConstraintSet::new(ConstraintKind::NoShortAndBorrowCap { a: 1.5 }, 2).unwrap(),
            a: ValueGrid::new(ValueGrid::uniform_nodes(-1.0, 1.0, 5), vec![1.0, 1.5, 2.0, 1.2, 0.8]).unwrap(),
            h: HFunction::Sigmoid { lo: 0.6, hi: 1.0, center: 0.0, width: 1.0 },
            model,
            paths,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weak_duality_holds(
        alpha in prop_oneof![Just(0.5), Just(-1.0)],
        raw_pi in prop::collection::vec(-1.0..2.0f64, 4),
        raw_nu in prop::collection::vec(-0.3..0.3f64, 4),
        eta in prop::collection::vec(-0.5..0.5f64, 2),
        lambda in 0.2..3.0f64,
    ) {
        let w = weak_fixture();
        let mu = ModifiedUtility::new(&spec(alpha, 0.5, w.h.clone()), w.a.clone()).unwrap();
        let (pl, ph) = (w.k.project(&v(&raw_pi[..2])), w.k.project(&v(&raw_pi[2..])));
        let (nl, nh) = (w.k.prox_support(&v(&raw_nu[..2]), 1.0), w.k.prox_support(&v(&raw_nu[2..]), 1.0));
        let policy = |y: f64| if y < 0.0 { pl.clone() } else { ph.clone() };
        let nu = |y: f64| if y < 0.0 { nl.clone() } else { nh.clone() };
        let eta_fn = |y: f64| if y < 0.0 { eta[0] } else { eta[1] };
        let out = simulate_wealth_density(&w.model, &w.k, &w.paths, &policy, &nu, &eta_fn, 50.0).unwrap();
        let mut gap = Moments::default();
        for (p, wd) in out.iter().enumerate() {
            let y = w.paths.y(p, w.paths.steps);
            let (phi, _) = mu.legendre(lambda * wd.deflator(), y).unwrap();
            gap.push(phi + lambda - mu.h_a(wd.x(), y).unwrap());
        }
        prop_assert!(gap.mean >= -3.0 * gap.std_err(), "{} +- {}", gap.mean, gap.std_err());
    }
}
