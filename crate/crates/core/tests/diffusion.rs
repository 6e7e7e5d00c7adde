use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tgtensor::Tensor;
use topoguide::diffusion::*;
use topoguide::Result;

#[test]
fn single_step_schedule() {
    let s = Schedule::new(1, ScheduleKind::Linear).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s.alpha_bar(1), s.alpha(1));
    assert_eq!(s.alpha_bar(0), 1.0);
}

#[test]
fn linear_schedule_end_point() {
    let s = Schedule::new(1000, ScheduleKind::Linear).unwrap();
    // Independent product of (1 - beta_t) over the linear ramp.
    let prod: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
    assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
    assert!(s.alpha_bar(1000) < 1e-4);
}

#[test]
fn schedules_are_valid() {
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for t_max in [1, 10, 1000] {
            let s = Schedule::new(t_max, kind).unwrap();
            for t in 1..=t_max {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }
    assert!("quadratic".parse::<ScheduleKind>().is_err());
    assert!(Schedule::new(0, ScheduleKind::Linear).is_err());
}

#[test]
fn respacing_keeps_marginals() {
    let s = Schedule::new(1000, ScheduleKind::Linear).unwrap();
    let r = s.respace(100).unwrap();
    assert_eq!(r.len(), 100);
    assert_eq!((r.timestep(1), r.timestep(100)), (1, 1000));
    for k in 1..=100 {
        let t = r.timestep(k);
        assert!((r.alpha_bar(k) - s.alpha_bar(t)).abs() < 1e-15);
        assert!(r.beta(k) > 0.0 && r.beta(k) < 1.0);
    }
    let full = s.respace(1000).unwrap();
    for t in 1..=1000 {
        assert_eq!(full.timestep(t), t);
        assert!((full.beta(t) - s.beta(t)).abs() < 1e-12);
    }
    assert!(s.respace(1001).is_err());
}

#[test]
fn q_sample_edge_cases() {
    let s = Schedule::new(100, ScheduleKind::Linear).unwrap();
    let x0 = [0.3, -0.7, 1.0];
    let noise = [0.5, 1.5, -2.0];
    assert_eq!(q_sample(&x0, 0, &noise, &s).unwrap(), x0.to_vec());
    let xt = q_sample(&[0.0; 3], 40, &noise, &s).unwrap();
    for (a, e) in xt.iter().zip(noise) {
        assert_eq!(*a, (1.0 - s.alpha_bar(40)).sqrt() * e);
    }
    assert!(q_sample(&x0, 101, &noise, &s).is_err());
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn q_sample_variance_by_monte_carlo() {
    let s = Schedule::new(1000, ScheduleKind::Linear).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    for t in [250, 500, 1000] {
        let xt = q_sample(&vec![0.0; n], t, &normals(&mut rng, n), &s).unwrap();
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var - want).abs() / want < 0.02, "t = {t}: {var} vs {want}");
    }
}

#[test]
fn composed_steps_match_closed_form_marginal() {
    let s = Schedule::new(1000, ScheduleKind::Linear).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let x0 = 0.6;
    for t in [10, 300] {
        // Noise-free path gives the mean exactly.
        let mut m = vec![x0];
        for step in 1..=t {
            m = q_step(&m, step, &[0.0], &s);
        }
        assert!((m[0] - s.alpha_bar(t).sqrt() * x0).abs() < 1e-10);
        let mut x = vec![x0; n];
        for step in 1..=t {
            let z = normals(&mut rng, n);
            x = q_step(&x, step, &z, &s);
        }
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var - want).abs() / want < 0.02, "t = {t}: {var} vs {want}");
    }
}

/// Returns the noise that produced `x_t` from a known clean image.
struct KnownNoise {
    x0: Vec<f64>,
    schedule: Schedule,
}

impl EpsModel for KnownNoise {
    fn predict_eps(&self, x_t: &Tensor, _cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(t[0] as usize);
        let eps = x_t.data().iter().zip(&self.x0).map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect();
        Ok(Tensor::new(x_t.shape().to_vec(), eps)?)
    }
}

#[test]
fn perfect_noise_prediction_gives_true_posterior() {
    let s = Schedule::new(1000, ScheduleKind::Linear).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let model = KnownNoise { x0: x0.clone(), schedule: s.clone() };
    let cond = Tensor::zeros(vec![1, 1, 4, 4]);
    for k in [2, 17, 500, 1000] {
        let xt = q_sample(&x0, k, &normals(&mut rng, 16), &s).unwrap();
        let xt = Tensor::new(vec![1, 1, 4, 4], xt).unwrap();
        let (mu, var) = posterior_mean_variance(&model, &xt, &cond, k, &s, true).unwrap();
        // Gaussian conditioning of q(x_{k-1} | x0) by q(x_k | x_{k-1}).
        let (ab_prev, a, b) = (s.alpha_bar(k - 1), s.alpha(k), s.beta(k));
        let precision = 1.0 / (1.0 - ab_prev) + a / b;
        for (i, m) in mu.data().iter().enumerate() {
            let oracle = (ab_prev.sqrt() * x0[i] / (1.0 - ab_prev) + a.sqrt() * xt.data()[i] / b) / precision;
            assert!((m - oracle).abs() < 1e-10, "k = {k}");
        }
        assert!((var - 1.0 / precision).abs() < 1e-12);
    }
    let xt = Tensor::zeros(vec![1, 1, 4, 4]);
    let (_, var1) = posterior_mean_variance(&model, &xt, &cond, 1, &s, true).unwrap();
    assert_eq!(var1, s.posterior_variance(1));
}

/// Exact noise predictor for a two-point data distribution on one pixel.
struct MixtureOracle {
    schedule: Schedule,
    points: [f64; 2],
    weights: [f64; 2],
}

impl EpsModel for MixtureOracle {
    fn predict_eps(&self, x_t: &Tensor, _cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(t[0] as usize);
        let var = 1.0 - ab;
        let eps = x_t
            .data()
            .iter()
            .map(|&x| {
                let logw: Vec<f64> = (0..2)
                    .map(|i| self.weights[i].ln() - (x - ab.sqrt() * self.points[i]).powi(2) / (2.0 * var))
                    .collect();
                let mx = logw[0].max(logw[1]);
                let w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
                let ex0 = (w[0] * self.points[0] + w[1] * self.points[1]) / (w[0] + w[1]);
                (x - ab.sqrt() * ex0) / var.sqrt()
            })
            .collect();
        Ok(Tensor::new(x_t.shape().to_vec(), eps)?)
    }
}

#[test]
fn oracle_denoiser_recovers_data_moments() {
    let s = Schedule::new(1000, ScheduleKind::Linear).unwrap();
    let oracle = MixtureOracle { schedule: s.clone(), points: [-0.6, 0.8], weights: [0.3, 0.7] };
    let n = 4000;
    let cond = Tensor::zeros(vec![n, 1, 1, 1]);
    let seeds: Vec<u64> = (0..n as u64).collect();
    let d = p_sample_loop(&oracle, &cond, &s, &mut NoGuidance, &seeds).unwrap();
    let x: Vec<f64> = d.data().iter().map(|v| 2.0 * v - 1.0).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let true_mean = 0.3 * -0.6 + 0.7 * 0.8;
    assert!((mean - true_mean).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} vs {true_mean}");
    let near = x.iter().filter(|v| (*v - 0.8).abs() < 0.05 || (*v + 0.6).abs() < 0.05).count();
    assert!(near as f64 > 0.95 * n as f64);
}

struct Identity {
    calls: usize,
}

impl GuidanceHook for Identity {
    fn shift(&mut self, mean: &Tensor, _variance: f64, _t: usize) -> Result<Tensor> {
        self.calls += 1;
        Ok(mean.clone())
    }
}

fn tiny_model(seed: u64) -> Denoiser {
    let mut cfg = DenoiserConfig::new(8, 8, 2);
    cfg.base_width = 8;
    cfg.time_dim = 16;
    cfg.timesteps = 100;
    Denoiser::new(cfg, seed).unwrap()
}

#[test]
fn sampling_hook_identity_and_determinism() {
    let m = tiny_model(4);
    let s = m.schedule.respace(10).unwrap();
    let cond = Tensor::full(vec![2, 2, 8, 8], 0.3);
    let a = p_sample_loop(&m, &cond, &s, &mut NoGuidance, &[1, 2]).unwrap();
    let mut hook = Identity { calls: 0 };
    let b = p_sample_loop(&m, &cond, &s, &mut hook, &[1, 2]).unwrap();
    assert_eq!(a, b);
    assert_eq!(hook.calls, 10);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let c = p_sample_loop(&m, &cond, &s, &mut NoGuidance, &[1, 3]).unwrap();
    assert_eq!(a.item(0), c.item(0));
    assert_ne!(a.item(1), c.item(1));
}

fn example(rng: &mut ChaCha8Rng) -> DiffusionExample {
    DiffusionExample {
        x0: (0..64).map(|i| if (i / 8 + i % 8) % 3 == 0 { 1.0 } else { -1.0 }).collect(),
        cond: (0..128).map(|_| rng.random_range(0.0..1.0)).collect(),
    }
}

#[test]
fn overfits_a_single_example() {
    let mut m = tiny_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ex = example(&mut rng);
    let batch = vec![ex; 8];
    let losses: Vec<f64> = (0..500).map(|_| m.train_step(&batch, &mut rng).unwrap()).collect();
    let start = losses[..10].iter().sum::<f64>() / 10.0;
    let end = losses[490..].iter().sum::<f64>() / 10.0;
    assert!(end <= 0.5 * start, "{start} -> {end}");
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let run = || {
        let mut m = tiny_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch: Vec<DiffusionExample> = (0..3).map(|_| example(&mut rng)).collect();
        let losses: Vec<f64> = (0..5).map(|_| m.train_step(&batch, &mut rng).unwrap()).collect();
        (m, losses)
    };
    let (m, a) = run();
    let (_, b) = run();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path(), &Default::default()).unwrap();
    let (back, meta) = Denoiser::load(dir.path()).unwrap();
    assert_eq!(meta.get("kind"), Some("denoiser"));
    assert_eq!(back.steps_taken(), 5);
    let x = Tensor::full(vec![1, 1, 8, 8], 0.1);
    let c = Tensor::full(vec![1, 2, 8, 8], 0.2);
    assert_eq!(m.predict_eps(&x, &c, &[30.0]).unwrap(), back.predict_eps(&x, &c, &[30.0]).unwrap());
}

#[test]
fn rejects_mismatched_examples() {
    let mut m = tiny_model(9);
    let bad = DiffusionExample { x0: vec![0.0; 10], cond: vec![0.0; 128] };
    assert!(m.train_step(&[bad], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    let mut cfg = DenoiserConfig::new(6, 8, 2);
    cfg.base_width = 8;
    assert!(Denoiser::new(cfg, 0).is_err());
}
