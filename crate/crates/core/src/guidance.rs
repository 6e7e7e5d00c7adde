//! Surrogate guidance of the reverse diffusion mean.
//!
//! Each reverse transition `N(mu, s2 I)` is tilted by `exp(-lambda_c c(x))`
//! (compliance regressor) and by `p(no floating material | x)^lambda_fm`
//! (classifier). To first order this moves the mean by
//! `-lambda_c s2 grad c` and `+lambda_fm s2 grad log p`, both evaluated at
//! the current mean. The classifier term goes first and the regressor is
//! evaluated at the already-shifted mean. Each term is active only while the
//! original-scale timestep is below its noise threshold.

use tgtensor::kv::KvFile;
use tgtensor::Tensor;

use crate::diffusion::GuidanceHook;
use crate::error::{CoreError, Result};
use crate::surrogates::{Classifier, Regressor, AUX_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub lambda_c: f64,
    pub lambda_fm: f64,
    /// Regressor guidance runs only for `t < mln_c`.
    pub mln_c: usize,
    /// Classifier guidance runs only for `t < mln_fm`.
    pub mln_fm: usize,
    pub classifier_first: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::unguided()
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        Self { lambda_c: 0.0, lambda_fm: 0.0, mln_c: 0, mln_fm: 0, classifier_first: true }
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite())
            || !(self.lambda_fm >= 0.0 && self.lambda_fm.is_finite())
        {
            return Err(CoreError::Invalid(format!("guidance scales must be finite and >= 0: {self:?}")));
        }
        if self.mln_c > t_max || self.mln_fm > t_max {
            return Err(CoreError::Invalid(format!("noise thresholds must lie in 0..={t_max}: {self:?}")));
        }
        Ok(())
    }

    pub fn regressor_active(&self, t: usize) -> bool {
        self.lambda_c > 0.0 && t < self.mln_c
    }

    pub fn classifier_active(&self, t: usize) -> bool {
        self.lambda_fm > 0.0 && t < self.mln_fm
    }

    pub fn is_unguided(&self) -> bool {
        (self.lambda_c == 0.0 || self.mln_c == 0) && (self.lambda_fm == 0.0 || self.mln_fm == 0)
    }

    pub fn write_kv(&self, kv: &mut KvFile, prefix: &str) {
        kv.set(format!("{prefix}.lambda_c"), self.lambda_c);
        kv.set(format!("{prefix}.lambda_fm"), self.lambda_fm);
        kv.set(format!("{prefix}.mln_c"), self.mln_c);
        kv.set(format!("{prefix}.mln_fm"), self.mln_fm);
        kv.set(format!("{prefix}.classifier_first"), self.classifier_first);
    }

    pub fn read_kv(kv: &KvFile, prefix: &str) -> Result<Self> {
        Ok(Self {
            lambda_c: kv.parse(&format!("{prefix}.lambda_c"))?,
            lambda_fm: kv.parse(&format!("{prefix}.lambda_fm"))?,
            mln_c: kv.parse(&format!("{prefix}.mln_c"))?,
            mln_fm: kv.parse(&format!("{prefix}.mln_fm"))?,
            classifier_first: kv.parse_or(&format!("{prefix}.classifier_first"), true)?,
        })
    }
}

/// Gradient of predicted compliance with respect to the design.
pub trait ComplianceGradient {
    fn grad(&self, x: &Tensor, t: usize) -> Result<Tensor>;
}

/// Gradient of `log p(no floating material)` with respect to the design.
pub trait LogProbGradient {
    fn grad(&self, x: &Tensor, t: usize) -> Result<Tensor>;
}

fn checked(g: Tensor, x: &Tensor, what: &'static str, t: usize) -> Result<Tensor> {
    if g.shape() != x.shape() {
        return Err(CoreError::Invalid(format!("{what} gradient shape {:?} for input {:?}", g.shape(), x.shape())));
    }
    if !g.is_finite() {
        return Err(CoreError::NonFiniteGradient { what, t });
    }
    Ok(g)
}

fn shifted(mean: &Tensor, grad: &Tensor, step: f64) -> Tensor {
    let mut out = mean.clone();
    out.axpy(step, grad);
    out
}

/// `mu - lambda_c s2 grad c(mu)`.
pub fn regressor_guidance_shift(
    mean: &Tensor,
    variance: f64,
    t: usize,
    lambda_c: f64,
    regressor: &dyn ComplianceGradient,
) -> Result<Tensor> {
    let g = checked(regressor.grad(mean, t)?, mean, "regressor", t)?;
    Ok(shifted(mean, &g, -lambda_c * variance))
}

/// `mu + lambda_fm s2 grad log p(mu)`.
pub fn classifier_guidance_shift(
    mean: &Tensor,
    variance: f64,
    t: usize,
    lambda_fm: f64,
    classifier: &dyn LogProbGradient,
) -> Result<Tensor> {
    let g = checked(classifier.grad(mean, t)?, mean, "classifier", t)?;
    Ok(shifted(mean, &g, lambda_fm * variance))
}

/// Apply both gated shifts in the configured order. A surrogate is only
/// evaluated when its term is active; an active term without a surrogate is
/// an error.
pub fn guided_mean(
    mean: &Tensor,
    variance: f64,
    t: usize,
    config: &GuidanceConfig,
    regressor: Option<&dyn ComplianceGradient>,
    classifier: Option<&dyn LogProbGradient>,
) -> Result<Tensor> {
    let missing = |what: &str| CoreError::Invalid(format!("{what} guidance is active but no {what} was given"));
    let apply_c = |m: Tensor| -> Result<Tensor> {
        if !config.regressor_active(t) {
            return Ok(m);
        }
        let r = regressor.ok_or_else(|| missing("regressor"))?;
        regressor_guidance_shift(&m, variance, t, config.lambda_c, r)
    };
    let apply_fm = |m: Tensor| -> Result<Tensor> {
        if !config.classifier_active(t) {
            return Ok(m);
        }
        let c = classifier.ok_or_else(|| missing("classifier"))?;
        classifier_guidance_shift(&m, variance, t, config.lambda_fm, c)
    };
    if config.classifier_first {
        apply_c(apply_fm(mean.clone())?)
    } else {
        apply_fm(apply_c(mean.clone())?)
    }
}

/// Sampling hook applying [`guided_mean`] at every reverse step.
pub struct GuidedHook<'a> {
    pub config: GuidanceConfig,
    pub regressor: Option<&'a dyn ComplianceGradient>,
    pub classifier: Option<&'a dyn LogProbGradient>,
}

impl GuidanceHook for GuidedHook<'_> {
    fn shift(&mut self, mean: &Tensor, variance: f64, t: usize) -> Result<Tensor> {
        guided_mean(mean, variance, t, &self.config, self.regressor, self.classifier)
    }
}

/// A trained regressor bound to the problem planes of the batch being
/// sampled (`[N, 7, H, W]`).
pub struct RegressorGuide<'a> {
    pub model: &'a Regressor,
    pub aux: Tensor,
}

impl<'a> RegressorGuide<'a> {
    pub fn new(model: &'a Regressor, aux: Tensor) -> Result<Self> {
        let c = &model.config;
        if aux.shape() != [aux.dim(0), AUX_CHANNELS, c.height, c.width] {
            return Err(CoreError::Invalid(format!("problem planes have shape {:?}", aux.shape())));
        }
        Ok(Self { model, aux })
    }
}

impl ComplianceGradient for RegressorGuide<'_> {
    fn grad(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        if x.dim(0) != self.aux.dim(0) {
            return Err(CoreError::Invalid("design and problem batches differ".into()));
        }
        let steps = vec![t as f64; x.dim(0)];
        Ok(self.model.value_and_grad(x, &self.aux, &steps)?.1)
    }
}

pub struct ClassifierGuide<'a> {
    pub model: &'a Classifier,
}

impl LogProbGradient for ClassifierGuide<'_> {
    fn grad(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let steps = vec![t as f64; x.dim(0)];
        Ok(self.model.log_prob_and_grad(x, &steps)?.1)
    }
}
