//! Denoising diffusion: variance schedules, forward noising, the
//! conditional UNet noise predictor, training and the reverse sampling loop.
//!
//! Timesteps are 1-based (`t = 1..=T`) with `alpha_bar(0) = 1`. Data live in
//! `[-1, 1]` via `x = 2 d - 1` for densities `d`.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tgtensor::checkpoint;
use tgtensor::kv::KvFile;
use tgtensor::layers::{Conv2d, GroupNorm, ResBlock, TimeEmbedding};
use tgtensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(CoreError::Invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        }
    }
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;

/// Variance schedule. Index `k = 1..=len()` is a sampling step; for a
/// respaced schedule it corresponds to original timestep `timestep(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    timesteps: Vec<usize>,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl Schedule {
    pub fn new(t_max: usize, kind: ScheduleKind) -> Result<Self> {
        if t_max == 0 {
            return Err(CoreError::Invalid("schedule needs at least one step".into()));
        }
        let mut betas = vec![0.0];
        match kind {
            ScheduleKind::Linear => {
                for t in 1..=t_max {
                    let f = if t_max == 1 { 0.0 } else { (t - 1) as f64 / (t_max - 1) as f64 };
                    betas.push(LINEAR_BETA_START + f * (LINEAR_BETA_END - LINEAR_BETA_START));
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    ((t / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                for t in 1..=t_max {
                    let b = 1.0 - f(t as f64) / f((t - 1) as f64);
                    betas.push(b.clamp(1e-8, 0.999));
                }
            }
        }
        let mut alpha_bars = vec![1.0];
        for t in 1..=t_max {
            alpha_bars.push(alpha_bars[t - 1] * (1.0 - betas[t]));
        }
        Ok(Self::from_parts(kind, (0..=t_max).collect(), betas, alpha_bars))
    }

    fn from_parts(kind: ScheduleKind, timesteps: Vec<usize>, betas: Vec<f64>, alpha_bars: Vec<f64>) -> Self {
        let mut posterior_var = vec![0.0];
        for t in 1..betas.len() {
            posterior_var.push(betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]));
        }
        Self { kind, timesteps, betas, alpha_bars, posterior_var }
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Original-scale timestep of step `k`.
    pub fn timestep(&self, k: usize) -> usize {
        self.timesteps[k]
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.betas[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    /// `beta_tilde_k = beta_k (1 - abar_{k-1}) / (1 - abar_k)`.
    pub fn posterior_variance(&self, k: usize) -> f64 {
        self.posterior_var[k]
    }

    /// Evenly strided subsequence of `steps` timesteps,
    /// `tau_j = 1 + round((j - 1)(T - 1) / (steps - 1))`, with betas
    /// recomputed from the retained `alpha_bar`s.
    pub fn respace(&self, steps: usize) -> Result<Schedule> {
        let t_max = self.len();
        if steps == 0 || steps > t_max {
            return Err(CoreError::Invalid(format!("cannot respace {t_max} steps to {steps}")));
        }
        let mut timesteps = vec![0];
        for j in 1..=steps {
            let tau = if steps == 1 {
                t_max
            } else {
                1 + ((j - 1) as f64 * (t_max - 1) as f64 / (steps - 1) as f64).round() as usize
            };
            timesteps.push(self.timesteps[tau]);
        }
        let mut alpha_bars = vec![1.0];
        let mut betas = vec![0.0];
        for j in 1..=steps {
            let tau = self.timesteps.iter().position(|&t| t == timesteps[j]).unwrap();
            alpha_bars.push(self.alpha_bars[tau]);
            betas.push(1.0 - alpha_bars[j] / alpha_bars[j - 1]);
        }
        Ok(Self::from_parts(self.kind, timesteps, betas, alpha_bars))
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn q_sample(x0: &[f64], t: usize, noise: &[f64], schedule: &Schedule) -> Result<Vec<f64>> {
    if t > schedule.len() {
        return Err(CoreError::Invalid(format!("timestep {t} outside 0..={}", schedule.len())));
    }
    if x0.len() != noise.len() {
        return Err(CoreError::Invalid("noise and data differ in size".into()));
    }
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| sa * x + sn * e).collect())
}

/// One forward transition `x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) noise`.
pub fn q_step(x_prev: &[f64], t: usize, noise: &[f64], schedule: &Schedule) -> Vec<f64> {
    let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    x_prev.iter().zip(noise).map(|(x, e)| a * x + b * e).collect()
}

/// Mean of `q(x_{k-1} | x_k, x0)`.
pub fn posterior_mean(x0: &[f64], x_t: &[f64], k: usize, schedule: &Schedule) -> Vec<f64> {
    let (ab, ab_prev, beta) = (schedule.alpha_bar(k), schedule.alpha_bar(k - 1), schedule.beta(k));
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = schedule.alpha(k).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    x0.iter().zip(x_t).map(|(a, b)| c0 * a + ct * b).collect()
}

/// Noise predictor `eps(x_t, cond, t)` over a batch; `t` is on the
/// original timestep scale.
pub trait EpsModel {
    fn predict_eps(&self, x_t: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor>;
}

/// Mean and (isotropic) variance of the reverse transition at step `k`.
/// The implied `x0` estimate is clipped to `[-1, 1]` when `clip` is set.
pub fn posterior_mean_variance(
    model: &dyn EpsModel,
    x_t: &Tensor,
    cond: &Tensor,
    k: usize,
    schedule: &Schedule,
    clip: bool,
) -> Result<(Tensor, f64)> {
    let n = x_t.dim(0);
    let t = vec![schedule.timestep(k) as f64; n];
    let eps = model.predict_eps(x_t, cond, &t)?;
    if eps.shape() != x_t.shape() {
        return Err(CoreError::Invalid(format!("model returned {:?} for input {:?}", eps.shape(), x_t.shape())));
    }
    let ab = schedule.alpha_bar(k);
    let x0: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| {
            let v = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
            if clip {
                v.clamp(-1.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    let mean = posterior_mean(&x0, x_t.data(), k, schedule);
    Ok((Tensor::new(x_t.shape().to_vec(), mean)?, schedule.posterior_variance(k)))
}

/// Hook applied to the reverse-transition mean before sampling. `t` is the
/// original-scale timestep.
pub trait GuidanceHook {
    fn shift(&mut self, mean: &Tensor, variance: f64, t: usize) -> Result<Tensor>;
}

/// Identity hook: unguided sampling.
pub struct NoGuidance;

impl GuidanceHook for NoGuidance {
    fn shift(&mut self, mean: &Tensor, _variance: f64, _t: usize) -> Result<Tensor> {
        Ok(mean.clone())
    }
}

/// Reverse sampling from pure noise for a batch of conditions
/// `cond [N, C, H, W]`. Item `i` draws all its noise from a generator seeded
/// with `seeds[i]`. The last step emits the mean. Returns densities
/// `[N, 1, H, W]` in `[0, 1]`.
pub fn p_sample_loop(
    model: &dyn EpsModel,
    cond: &Tensor,
    schedule: &Schedule,
    hook: &mut dyn GuidanceHook,
    seeds: &[u64],
) -> Result<Tensor> {
    let (n, h, w) = (cond.dim(0), cond.dim(2), cond.dim(3));
    if seeds.len() != n {
        return Err(CoreError::Invalid(format!("{} seeds for {n} samples", seeds.len())));
    }
    let per = h * w;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Vec<f64> {
        let mut out = Vec::with_capacity(n * per);
        for r in rngs.iter_mut() {
            out.extend((0..per).map(|_| r.sample::<f64, _>(StandardNormal)));
        }
        out
    };
    let mut x = Tensor::new(vec![n, 1, h, w], draw(&mut rngs))?;
    for k in (1..=schedule.len()).rev() {
        let (mean, var) = posterior_mean_variance(model, &x, cond, k, schedule, true)?;
        let mean = hook.shift(&mean, var, schedule.timestep(k))?;
        if k > 1 {
            let z = draw(&mut rngs);
            let sd = var.sqrt();
            let mut next = mean.into_data();
            for (v, e) in next.iter_mut().zip(z) {
                *v += sd * e;
            }
            x = Tensor::new(vec![n, 1, h, w], next)?;
        } else {
            x = mean;
        }
    }
    Ok(x.map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Input channels: the noisy image plus conditioning planes.
    pub in_channels: usize,
    pub base_width: usize,
    pub time_dim: usize,
}

/// Three-resolution UNet predicting noise; needs spatial sizes divisible by 4.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    time: TimeEmbedding,
    conv_in: Conv2d,
    enc1: ResBlock,
    down1: Conv2d,
    enc2: ResBlock,
    down2: Conv2d,
    mid: ResBlock,
    up2: Conv2d,
    dec2: ResBlock,
    up1: Conv2d,
    dec1: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: UNetConfig, rng: &mut R) -> Self {
        let w = config.base_width;
        let td = config.time_dim;
        let p = |s: &str| format!("{name}.{s}");
        Self {
            config,
            time: TimeEmbedding::new(store, &p("time"), td, td, rng),
            conv_in: Conv2d::new(store, &p("conv_in"), config.in_channels, w, 3, 1, rng),
            enc1: ResBlock::new(store, &p("enc1"), w, w, td, rng),
            down1: Conv2d::new(store, &p("down1"), w, 2 * w, 3, 2, rng),
            enc2: ResBlock::new(store, &p("enc2"), 2 * w, 2 * w, td, rng),
            down2: Conv2d::new(store, &p("down2"), 2 * w, 2 * w, 3, 2, rng),
            mid: ResBlock::new(store, &p("mid"), 2 * w, 2 * w, td, rng),
            up2: Conv2d::new(store, &p("up2"), 2 * w, 2 * w, 3, 1, rng),
            dec2: ResBlock::new(store, &p("dec2"), 4 * w, 2 * w, td, rng),
            up1: Conv2d::new(store, &p("up1"), 2 * w, w, 3, 1, rng),
            dec1: ResBlock::new(store, &p("dec1"), 2 * w, w, td, rng),
            norm_out: GroupNorm::new(store, &p("norm_out"), w),
            conv_out: Conv2d::new(store, &p("conv_out"), w, 1, 3, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, steps: &[f64]) -> Result<Var> {
        let temb = self.time.forward(tape, store, steps)?;
        let h0 = self.conv_in.forward(tape, store, x)?;
        let h1 = self.enc1.forward(tape, store, h0, temb)?;
        let d1 = self.down1.forward(tape, store, h1)?;
        let h2 = self.enc2.forward(tape, store, d1, temb)?;
        let d2 = self.down2.forward(tape, store, h2)?;
        let m = self.mid.forward(tape, store, d2, temb)?;
        let u2 = tape.upsample2x(m)?;
        let u2 = self.up2.forward(tape, store, u2)?;
        let c2 = tape.concat(u2, h2)?;
        let g2 = self.dec2.forward(tape, store, c2, temb)?;
        let u1 = tape.upsample2x(g2)?;
        let u1 = self.up1.forward(tape, store, u1)?;
        let c1 = tape.concat(u1, h1)?;
        let g1 = self.dec1.forward(tape, store, c1, temb)?;
        let o = self.norm_out.forward(tape, store, g1)?;
        let o = tape.silu(o)?;
        Ok(self.conv_out.forward(tape, store, o)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub cond_channels: usize,
    pub base_width: usize,
    pub time_dim: usize,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub adam: AdamConfig,
}

impl DenoiserConfig {
    pub fn new(height: usize, width: usize, cond_channels: usize) -> Self {
        Self {
            height,
            width,
            cond_channels,
            base_width: 32,
            time_dim: 32,
            timesteps: 1000,
            schedule: ScheduleKind::Linear,
            adam: AdamConfig::default(),
        }
    }

    fn unet(&self) -> UNetConfig {
        UNetConfig { in_channels: 1 + self.cond_channels, base_width: self.base_width, time_dim: self.time_dim }
    }

    fn write_kv(&self, kv: &mut KvFile) {
        kv.set("kind", "denoiser");
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("cond_channels", self.cond_channels);
        kv.set("base_width", self.base_width);
        kv.set("time_dim", self.time_dim);
        kv.set("timesteps", self.timesteps);
        kv.set("schedule", self.schedule.name());
        kv.set("adam.lr", self.adam.lr);
    }

    fn read_kv(kv: &KvFile) -> Result<Self> {
        if kv.get("kind") != Some("denoiser") {
            return Err(CoreError::Format("checkpoint is not a denoiser".into()));
        }
        Ok(Self {
            height: kv.parse("height")?,
            width: kv.parse("width")?,
            cond_channels: kv.parse("cond_channels")?,
            base_width: kv.parse("base_width")?,
            time_dim: kv.parse("time_dim")?,
            timesteps: kv.parse("timesteps")?,
            schedule: kv.require("schedule")?.parse()?,
            adam: AdamConfig { lr: kv.parse("adam.lr")?, ..AdamConfig::default() },
        })
    }
}

/// Conditional noise predictor with its schedule and optimizer state.
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub schedule: Schedule,
    pub store: ParamStore,
    net: UNet,
    adam: Adam,
    steps_taken: usize,
}

/// One training example: clean image in `[-1, 1]` (`H * W`) and its
/// conditioning planes (`C * H * W`).
#[derive(Clone, Debug)]
pub struct DiffusionExample {
    pub x0: Vec<f64>,
    pub cond: Vec<f64>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.height % 4 != 0 || config.width % 4 != 0 {
            return Err(CoreError::Invalid("grid sides must be multiples of 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, "unet", config.unet(), &mut rng);
        Ok(Self {
            schedule: Schedule::new(config.timesteps, config.schedule)?,
            config,
            store,
            net,
            adam: Adam::new(config.adam),
            steps_taken: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    fn input(&self, x_t: &Tensor, cond: &Tensor) -> Result<Tensor> {
        Ok(Tensor::concat_channels(x_t, cond)?)
    }

    /// Draw `t` uniformly in `1..=T` per example, noise the data and record
    /// the mean-squared error of the predicted noise.
    fn forward_loss<R: Rng + ?Sized>(&self, batch: &[DiffusionExample], rng: &mut R) -> Result<(Tape, Var, f64)> {
        let (h, w, c) = (self.config.height, self.config.width, self.config.cond_channels);
        let n = batch.len();
        let mut x_t = Vec::with_capacity(n * h * w);
        let mut noise_all = Vec::with_capacity(n * h * w);
        let mut cond = Vec::with_capacity(n * c * h * w);
        let mut steps = Vec::with_capacity(n);
        for ex in batch {
            if ex.x0.len() != h * w || ex.cond.len() != c * h * w {
                return Err(CoreError::Invalid("example shape differs from the model".into()));
            }
            let t = rng.random_range(1..=self.schedule.len());
            let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
            x_t.extend(q_sample(&ex.x0, t, &noise, &self.schedule)?);
            noise_all.extend(noise);
            cond.extend_from_slice(&ex.cond);
            steps.push(t as f64);
        }
        let input = self.input(&Tensor::new(vec![n, 1, h, w], x_t)?, &Tensor::new(vec![n, c, h, w], cond)?)?;
        let mut tape = Tape::new();
        let xv = tape.input(input)?;
        let pred = self.net.forward(&mut tape, &self.store, xv, &steps)?;
        let target = tape.input(Tensor::new(vec![n, 1, h, w], noise_all)?)?;
        let loss = tape.mse(pred, target)?;
        let value = tape.value(loss)?.data()[0];
        if !value.is_finite() {
            return Err(CoreError::NonFiniteLoss(self.steps_taken));
        }
        Ok((tape, loss, value))
    }

    /// Noise-regression loss on a batch without updating the weights.
    pub fn loss<R: Rng + ?Sized>(&self, batch: &[DiffusionExample], rng: &mut R) -> Result<f64> {
        Ok(self.forward_loss(batch, rng)?.2)
    }

    /// One Adam step on the noise-regression loss; returns the loss.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[DiffusionExample], rng: &mut R) -> Result<f64> {
        let (tape, loss, value) = self.forward_loss(batch, rng)?;
        let grads = tape.backward(loss, None)?.param_grads(&self.store);
        self.adam.step(&mut self.store, &grads);
        self.steps_taken += 1;
        Ok(value)
    }

    pub fn save(&self, dir: &Path, extra: &KvFile) -> Result<()> {
        let mut meta = extra.clone();
        self.config.write_kv(&mut meta);
        meta.set("steps_taken", self.steps_taken);
        checkpoint::save(dir, &self.store, &meta)?;
        Ok(())
    }

    /// Returns the model and the checkpoint metadata.
    pub fn load(dir: &Path) -> Result<(Self, KvFile)> {
        let (meta, store) = checkpoint::load(dir)?;
        let config = DenoiserConfig::read_kv(&meta)?;
        let mut model = Self::new(config, 0)?;
        checkpoint::copy_into(&mut model.store, &store)?;
        model.steps_taken = meta.parse("steps_taken")?;
        Ok((model, meta))
    }
}

impl EpsModel for Denoiser {
    fn predict_eps(&self, x_t: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        let input = self.input(x_t, cond)?;
        let mut tape = Tape::new();
        let xv = tape.input(input)?;
        let out = self.net.forward(&mut tape, &self.store, xv, t)?;
        Ok(tape.value(out)?.clone())
    }
}
