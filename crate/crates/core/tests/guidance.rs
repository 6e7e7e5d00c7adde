use std::cell::RefCell;
use std::time::Instant;

use proptest::prelude::*;
use tgtensor::Tensor;
use topoguide::diffusion::{p_sample_loop, EpsModel, Schedule, ScheduleKind};
use topoguide::guidance::*;
use topoguide::{CoreError, Result};

/// Stub surrogate `grad = f(x)` elementwise that records every call.
struct Stub<F: Fn(f64) -> f64> {
    f: F,
    calls: RefCell<Vec<(usize, Vec<f64>)>>,
}

impl<F: Fn(f64) -> f64> Stub<F> {
    fn new(f: F) -> Self {
        Self { f, calls: RefCell::new(Vec::new()) }
    }

    fn eval(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.calls.borrow_mut().push((t, x.data().to_vec()));
        Ok(x.map(&self.f))
    }

    fn count(&self) -> usize {
        self.calls.borrow().len()
    }
}

impl<F: Fn(f64) -> f64> ComplianceGradient for Stub<F> {
    fn grad(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.eval(x, t)
    }
}

impl<F: Fn(f64) -> f64> LogProbGradient for Stub<F> {
    fn grad(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.eval(x, t)
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap()
}

fn both(lambda_c: f64, lambda_fm: f64, mln: usize) -> GuidanceConfig {
    GuidanceConfig { lambda_c, lambda_fm, mln_c: mln, mln_fm: mln, classifier_first: true }
}

#[test]
fn zero_scales_leave_the_mean_and_skip_surrogates() {
    let r = Stub::new(|x| x + 1.0);
    let c = Stub::new(|x| 2.0 * x);
    let mu = Tensor::new(vec![1, 1, 2, 2], vec![0.1, -0.4, 0.9, 0.0]).unwrap();
    let out = guided_mean(&mu, 0.3, 10, &both(0.0, 0.0, 1000), Some(&r), Some(&c)).unwrap();
    assert_eq!(out, mu);
    assert_eq!(r.count() + c.count(), 0);
}

#[test]
fn closed_gates_leave_the_mean_and_skip_surrogates() {
    let r = Stub::new(|x| x + 1.0);
    let c = Stub::new(|x| 2.0 * x);
    let mu = scalar(0.25);
    let cfg = GuidanceConfig { mln_c: 300, mln_fm: 500, ..both(1.0, 1.0, 0) };
    for t in [500, 501, 1000] {
        assert_eq!(guided_mean(&mu, 0.1, t, &cfg, Some(&r), Some(&c)).unwrap(), mu);
    }
    assert_eq!(r.count() + c.count(), 0);
    guided_mean(&mu, 0.1, 300, &cfg, Some(&r), Some(&c)).unwrap();
    assert_eq!((r.count(), c.count()), (0, 1));
    guided_mean(&mu, 0.1, 299, &cfg, Some(&r), Some(&c)).unwrap();
    assert_eq!((r.count(), c.count()), (1, 2));
}

#[test]
fn linear_stubs_combine_in_either_order() {
    let (a, b, s2, lc, lf, mu) = (0.7, -1.3, 0.05, 1.5, 2.5, 0.2);
    let r = Stub::new(move |_| a);
    let c = Stub::new(move |_| b);
    let want = mu + lf * s2 * b - lc * s2 * a;
    for classifier_first in [true, false] {
        let cfg = GuidanceConfig { classifier_first, ..both(lc, lf, 10) };
        let out = guided_mean(&scalar(mu), s2, 3, &cfg, Some(&r), Some(&c)).unwrap();
        assert!((out.data()[0] - want).abs() < 1e-15);
    }
}

#[test]
fn regressor_sees_the_classifier_shifted_mean() {
    let r = Stub::new(|x| x);
    let c = Stub::new(|_| 1.0);
    let out = guided_mean(&scalar(0.0), 0.5, 1, &both(1.0, 1.0, 10), Some(&r), Some(&c)).unwrap();
    // Classifier moves 0 -> 0.5; regressor gradient there is 0.5.
    assert_eq!(r.calls.borrow()[0].1, vec![0.5]);
    assert!((out.data()[0] - 0.25).abs() < 1e-15);
    let swapped = GuidanceConfig { classifier_first: false, ..both(1.0, 1.0, 10) };
    let r2 = Stub::new(|x| x);
    guided_mean(&scalar(0.0), 0.5, 1, &swapped, Some(&r2), Some(&c)).unwrap();
    assert_eq!(r2.calls.borrow()[0].1, vec![0.0]);
}

#[test]
fn regressor_shift_examples() {
    let quad = Stub::new(|x| 3.0 * (x - 0.4));
    let out = regressor_guidance_shift(&scalar(0.4), 0.2, 5, 1.0, &quad).unwrap();
    assert_eq!(out.data()[0], 0.4);
    let a = -2.5;
    let lin = Stub::new(move |_| a);
    let out = regressor_guidance_shift(&scalar(0.1), 0.04, 5, 1.0, &lin).unwrap();
    assert!((out.data()[0] - (0.1 - 0.04 * a)).abs() < 1e-15);
}

#[test]
fn classifier_shift_examples() {
    let flat = Stub::new(|_| 0.0);
    assert_eq!(classifier_guidance_shift(&scalar(0.3), 0.5, 1, 4.0, &flat).unwrap(), scalar(0.3));
    let b = 0.8;
    let lin = Stub::new(move |_| b);
    let out = classifier_guidance_shift(&scalar(0.3), 0.09, 1, 2.0, &lin).unwrap();
    assert!((out.data()[0] - (0.3 + 0.18 * b)).abs() < 1e-15);
}

#[test]
fn non_finite_gradients_abort() {
    let bad = Stub::new(|_| f64::NAN);
    let err = guided_mean(&scalar(0.0), 0.1, 7, &both(1.0, 0.0, 10), Some(&bad), None).unwrap_err();
    assert!(matches!(err, CoreError::NonFiniteGradient { what: "regressor", t: 7 }));
    let err = guided_mean(&scalar(0.0), 0.1, 7, &both(0.0, 1.0, 10), None, Some(&bad)).unwrap_err();
    assert!(matches!(err, CoreError::NonFiniteGradient { what: "classifier", t: 7 }));
    assert!(guided_mean(&scalar(0.0), 0.1, 7, &both(1.0, 0.0, 10), None, None).is_err());
}

#[test]
fn config_validation_and_round_trip() {
    assert!(both(1.0, 1.0, 1000).validate(1000).is_ok());
    assert!(both(-1.0, 1.0, 10).validate(1000).is_err());
    assert!(both(1.0, 1.0, 1001).validate(1000).is_err());
    assert!(both(1.0, 2.0, 0).is_unguided());
    assert!(both(0.0, 0.0, 500).is_unguided());
    let cfg = GuidanceConfig { mln_c: 17, classifier_first: false, ..both(0.5, 3.0, 400) };
    let mut kv = tgtensor::kv::KvFile::new();
    cfg.write_kv(&mut kv, "guidance");
    assert_eq!(GuidanceConfig::read_kv(&kv, "guidance").unwrap(), cfg);
}

/// Composite Simpson rule on `[lo, hi]` with `n` (even) intervals.
fn simpson(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Mean of the density proportional to `N(mu, s^2) exp(log_w(x))`.
fn tilted_mean_1d(mu: f64, sigma: f64, log_w: impl Fn(f64) -> f64) -> f64 {
    let (lo, hi) = (mu - 8.0 * sigma, mu + 8.0 * sigma);
    let w0 = log_w(mu);
    let density = |x: f64| (-(x - mu).powi(2) / (2.0 * sigma * sigma) + log_w(x) - w0).exp();
    let z = simpson(lo, hi, 4000, &density);
    simpson(lo, hi, 4000, |x| x * density(x)) / z
}

/// Mean of `N(mu, s^2 I) exp(log_w(x))` on the plane.
fn tilted_mean_2d(mu: [f64; 2], sigma: f64, log_w: impl Fn([f64; 2]) -> f64) -> [f64; 2] {
    let n = 400;
    let h = 16.0 * sigma / n as f64;
    let weight = |i: usize| {
        if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let w0 = log_w(mu);
    let (mut z, mut m0, mut m1) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let x = mu[0] - 8.0 * sigma + i as f64 * h;
        for j in 0..=n {
            let y = mu[1] - 8.0 * sigma + j as f64 * h;
            let r2 = (x - mu[0]).powi(2) + (y - mu[1]).powi(2);
            let d = weight(i) * weight(j) * (-r2 / (2.0 * sigma * sigma) + log_w([x, y]) - w0).exp();
            z += d;
            m0 += x * d;
            m1 += y * d;
        }
    }
    [m0 / z, m1 / z]
}

fn shift_1d(mu: f64, sigma: f64, lambda: f64, grad: impl Fn(f64) -> f64 + 'static) -> f64 {
    regressor_guidance_shift(&scalar(mu), sigma * sigma, 1, lambda, &Stub::new(grad)).unwrap().data()[0]
}

#[test]
fn linear_cost_matches_quadrature_exactly() {
    let a = 1.7;
    for (mu, sigma) in [(0.3, 0.2), (-0.5, 0.05), (0.0, 0.5)] {
        let exact = tilted_mean_1d(mu, sigma, |x| -a * x);
        let approx = shift_1d(mu, sigma, 1.0, move |_| a);
        assert!((exact - approx).abs() < 1e-8, "{exact} vs {approx}");
    }
}

#[test]
fn quadratic_cost_within_five_percent_of_sigma() {
    let m = 0.1;
    for (k, sigma) in [(1.0, 0.2), (5.0, 0.1), (-2.0, 0.15), (20.0, 0.05)] {
        assert!(f64::abs(k) * sigma * sigma <= 0.05);
        let mu = 0.6;
        let exact = tilted_mean_1d(mu, sigma, |x| -0.5 * k * (x - m) * (x - m));
        let approx = shift_1d(mu, sigma, 1.0, move |x| k * (x - m));
        assert!((exact - approx).abs() < 0.05 * sigma, "k = {k}, sigma = {sigma}");
    }
}

#[test]
fn logistic_classifier_within_five_percent_of_sigma() {
    let (b, x0) = (3.0, 0.2);
    let log_p = move |x: f64| -(1.0 + (-b * (x - x0)).exp()).ln();
    let grad = move |x: f64| b / (1.0 + (b * (x - x0)).exp());
    for (mu, sigma, lambda) in [(0.0, 0.05, 1.0), (0.5, 0.1, 1.0), (-0.3, 0.08, 2.0)] {
        let exact = tilted_mean_1d(mu, sigma, |x| lambda * log_p(x));
        let approx =
            classifier_guidance_shift(&scalar(mu), sigma * sigma, 1, lambda, &Stub::new(grad)).unwrap().data()[0];
        assert!((exact - approx).abs() < 0.05 * sigma, "mu = {mu}: {exact} vs {approx}");
    }
}

/// Least-squares slope of `log err` against `log sigma`.
fn log_log_slope(sigmas: &[f64], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = sigmas.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

const SIGMAS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

/// Relative error of the first-order shift against the exact tilted mean
/// shrinks like `sigma^2`.
#[test]
fn shift_error_is_second_order_in_sigma() {
    let start = Instant::now();
    let (k, m, mu) = (1.5, -0.2, 0.5);
    let errors: Vec<f64> = SIGMAS
        .iter()
        .map(|&s| {
            let exact = tilted_mean_1d(mu, s, |x| -0.5 * k * (x - m) * (x - m)) - mu;
            let approx = shift_1d(mu, s, 1.0, move |x| k * (x - m)) - mu;
            (exact - approx).abs() / approx.abs()
        })
        .collect();
    let slope = log_log_slope(&SIGMAS, &errors);
    assert!((1.8..=2.2).contains(&slope), "1-D slope {slope}, errors {errors:?}");

    // Non-quadratic cost on the plane.
    let mu2 = [0.3, -0.4];
    let cost = |p: [f64; 2]| 0.5 * (2.0 * p[0] * p[0] + p[1] * p[1] + p[0] * p[1]) + 0.3 * p[0].sin() * p[1];
    let grad = |p: [f64; 2]| [2.0 * p[0] + 0.5 * p[1] + 0.3 * p[0].cos() * p[1], p[1] + 0.5 * p[0] + 0.3 * p[0].sin()];
    struct Plane<G: Fn([f64; 2]) -> [f64; 2]>(G);
    impl<G: Fn([f64; 2]) -> [f64; 2]> ComplianceGradient for Plane<G> {
        fn grad(&self, x: &Tensor, _t: usize) -> Result<Tensor> {
            let g = (self.0)([x.data()[0], x.data()[1]]);
            Ok(Tensor::new(x.shape().to_vec(), g.to_vec())?)
        }
    }
    let errors: Vec<f64> = SIGMAS
        .iter()
        .map(|&s| {
            let exact = tilted_mean_2d(mu2, s, |p| -cost(p));
            let x = Tensor::new(vec![1, 1, 1, 2], mu2.to_vec()).unwrap();
            let approx = regressor_guidance_shift(&x, s * s, 1, 1.0, &Plane(grad)).unwrap();
            let d = [exact[0] - approx.data()[0], exact[1] - approx.data()[1]];
            let shift = [approx.data()[0] - mu2[0], approx.data()[1] - mu2[1]];
            d[0].hypot(d[1]) / shift[0].hypot(shift[1])
        })
        .collect();
    let slope = log_log_slope(&SIGMAS, &errors);
    assert!((1.8..=2.2).contains(&slope), "2-D slope {slope}, errors {errors:?}");
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

proptest! {
    #[test]
    fn shift_is_linear_in_scale_and_variance(
        coef in -3.0f64..3.0,
        mu in proptest::collection::vec(-1.0f64..1.0, 4),
        lambda in 0.0f64..5.0,
        var in 1e-4f64..0.5,
        c in 0.1f64..10.0,
    ) {
        let g = move |x: f64| coef * x.sin() + 0.3;
        let mu = Tensor::new(vec![1, 1, 2, 2], mu).unwrap();
        let base = regressor_guidance_shift(&mu, var, 1, lambda, &Stub::new(g)).unwrap();
        let by_l = regressor_guidance_shift(&mu, var, 1, c * lambda, &Stub::new(g)).unwrap();
        let by_v = classifier_guidance_shift(&mu, c * var, 1, lambda, &Stub::new(g)).unwrap();
        for i in 0..4 {
            let d = base.data()[i] - mu.data()[i];
            prop_assert!((by_l.data()[i] - mu.data()[i] - c * d).abs() <= 1e-12 * (1.0 + c * d.abs()));
            prop_assert!((by_v.data()[i] - mu.data()[i] + c * d).abs() <= 1e-12 * (1.0 + c * d.abs()));
        }
    }
}

struct ZeroEps;

impl EpsModel for ZeroEps {
    fn predict_eps(&self, x_t: &Tensor, _cond: &Tensor, _t: &[f64]) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape().to_vec()))
    }
}

#[test]
fn sampling_loop_respects_noise_gates() {
    let s = Schedule::new(1000, ScheduleKind::Linear).unwrap().respace(100).unwrap();
    let r = Stub::new(|x| 0.1 * x);
    let c = Stub::new(|_| 0.05);
    let config = GuidanceConfig { lambda_c: 1.0, lambda_fm: 1.0, mln_c: 300, mln_fm: 500, classifier_first: true };
    let mut hook = GuidedHook { config, regressor: Some(&r), classifier: Some(&c) };
    let cond = Tensor::zeros(vec![2, 1, 4, 4]);
    p_sample_loop(&ZeroEps, &cond, &s, &mut hook, &[1, 2]).unwrap();
    let below = |mln: usize| (1..=s.len()).filter(|&k| s.timestep(k) < mln).count();
    assert_eq!(r.count(), below(300));
    assert_eq!(c.count(), below(500));
    assert!(r.calls.borrow().iter().all(|(t, _)| *t < 300));
    assert!(c.calls.borrow().iter().all(|(t, _)| *t < 500));

    let r = Stub::new(|x| 0.1 * x);
    let c = Stub::new(|_| 0.05);
    let closed = GuidanceConfig { mln_c: 0, mln_fm: 0, ..config };
    let mut hook = GuidedHook { config: closed, regressor: Some(&r), classifier: Some(&c) };
    p_sample_loop(&ZeroEps, &cond, &s, &mut hook, &[1, 2]).unwrap();
    assert_eq!(r.count() + c.count(), 0);
}
