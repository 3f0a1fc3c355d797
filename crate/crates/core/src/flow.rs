//! Straight-path flow matching over displacement fields and the multi-step
//! sampler built on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{reg_loss, reg_loss_and_grad, LossConfig};
use crate::network::Model;
use crate::optim::Adam;
use crate::volume::{ensure_same_dims, sample_noise_field, DisplacementField, Volume};

const CHURN_CAP: f64 = std::f64::consts::SQRT_2 - 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub lambda_g: f64,
    pub use_sde: bool,
    pub use_heun: bool,
    pub use_ig: bool,
    pub use_guidance: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::with_steps(10)
    }
}

impl SamplerConfig {
    /// All features on, `lambda_g = 0.05`, and `eta` large enough to
    /// saturate the churn factor for this step count.
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            eta: saturating_eta(steps),
            lambda_g: 0.05,
            use_sde: true,
            use_heun: true,
            use_ig: true,
            use_guidance: true,
            seed: 0,
        }
    }

    /// Every refinement feature off: plain Euler from noise.
    pub fn plain(steps: usize) -> Self {
        Self {
            use_sde: false,
            use_heun: false,
            use_ig: false,
            use_guidance: false,
            ..Self::with_steps(steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid("eta", format!("{} is not a finite non-negative number", self.eta)));
        }
        if !(self.lambda_g >= 0.0) || !self.lambda_g.is_finite() {
            return Err(Error::invalid(
                "lambda_g",
                format!("{} is not a finite non-negative number", self.lambda_g),
            ));
        }
        Ok(())
    }
}

pub fn saturating_eta(steps: usize) -> f64 {
    steps as f64 * CHURN_CAP
}

fn check_time(t: f64, allow_one: bool) -> Result<()> {
    let ok = t >= 0.0 && (t < 1.0 || (allow_one && t == 1.0));
    if ok {
        Ok(())
    } else {
        Err(Error::TimeDomain { t })
    }
}

/// `t * psi1 + (1 - t) * eps`.
pub fn interpolate(psi1: &DisplacementField, eps: &DisplacementField, t: f64) -> Result<DisplacementField> {
    ensure_same_dims("interpolate noise", psi1.dims, eps.dims)?;
    check_time(t, true)?;
    let data = psi1.data.iter().zip(&eps.data).map(|(a, e)| t * a + (1.0 - t) * e).collect();
    DisplacementField::new(psi1.dims, psi1.spacing, data)
}

/// `(psi_hat1 - psi_t) / (1 - t)`.
pub fn velocity(psi_hat1: &DisplacementField, psi_t: &DisplacementField, t: f64) -> Result<DisplacementField> {
    ensure_same_dims("velocity state", psi_hat1.dims, psi_t.dims)?;
    check_time(t, false)?;
    let inv = 1.0 - t;
    let data = psi_hat1.data.iter().zip(&psi_t.data).map(|(a, b)| (a - b) / inv).collect();
    DisplacementField::new(psi_t.dims, psi_t.spacing, data)
}

/// Returns `(sigma, sigma_hat)` for time `t`.
pub fn churn_sigma(t: f64, eta: f64, steps: usize) -> (f64, f64) {
    let sigma = 1.0 - t;
    let gamma = (eta / steps as f64).min(CHURN_CAP);
    (sigma, sigma * (1.0 + gamma))
}

/// `psi + sqrt(sigma_hat^2 - sigma^2) * eps`; returns `psi` untouched when
/// the two levels coincide.
pub fn inject_noise(
    psi: &DisplacementField,
    sigma: f64,
    sigma_hat: f64,
    eps: &DisplacementField,
) -> Result<DisplacementField> {
    ensure_same_dims("churn noise", psi.dims, eps.dims)?;
    if !(sigma_hat >= sigma) {
        return Err(Error::invalid(
            "sigma_hat",
            format!("{sigma_hat} is below sigma {sigma}"),
        ));
    }
    if sigma_hat == sigma {
        return Ok(psi.clone());
    }
    let scale = (sigma_hat * sigma_hat - sigma * sigma).sqrt();
    Ok(psi.axpy(scale, eps))
}

/// Anything that maps a noisy field at time `t` to a clean-field estimate.
pub trait FieldPredictor {
    fn predict_field(
        &mut self,
        fixed: &Volume,
        moving: &Volume,
        psi_t: &DisplacementField,
        t: f64,
    ) -> Result<DisplacementField>;
}

impl FieldPredictor for Model {
    fn predict_field(
        &mut self,
        fixed: &Volume,
        moving: &Volume,
        psi_t: &DisplacementField,
        t: f64,
    ) -> Result<DisplacementField> {
        self.predict(fixed, moving, psi_t, t)
    }
}

/// Prediction followed, when `lambda_g > 0`, by one descent step on the
/// registration loss with the prediction as the free variable.
pub fn guided_forward<P: FieldPredictor + ?Sized>(
    model: &mut P,
    fixed: &Volume,
    moving: &Volume,
    psi: &DisplacementField,
    t: f64,
    lambda_g: f64,
    loss: &LossConfig,
) -> Result<DisplacementField> {
    let pred = model.predict_field(fixed, moving, psi, t)?;
    if lambda_g == 0.0 {
        return Ok(pred);
    }
    let (_, grad) = reg_loss_and_grad(moving, fixed, &pred, loss)?;
    Ok(pred.axpy(-lambda_g, &grad))
}

/// States visited during one sampler step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: f64,
    /// State entering the step, before churn.
    pub entering: DisplacementField,
    /// State after churn; equal to `entering` when no noise was injected.
    pub churned: DisplacementField,
    pub prediction: DisplacementField,
    pub next: DisplacementField,
}

#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub initial_noise: DisplacementField,
    pub steps: Vec<StepRecord>,
}

pub fn sample<P: FieldPredictor + ?Sized>(
    model: &mut P,
    fixed: &Volume,
    moving: &Volume,
    cfg: &SamplerConfig,
    loss: &LossConfig,
) -> Result<DisplacementField> {
    run_sampler(model, fixed, moving, cfg, loss, None)
}

/// [`sample`] that also returns every intermediate state.
pub fn sample_traced<P: FieldPredictor + ?Sized>(
    model: &mut P,
    fixed: &Volume,
    moving: &Volume,
    cfg: &SamplerConfig,
    loss: &LossConfig,
) -> Result<(DisplacementField, SampleTrace)> {
    let mut trace = SampleTrace {
        initial_noise: DisplacementField::zeros(fixed.dims, fixed.spacing),
        steps: Vec::with_capacity(cfg.steps),
    };
    let out = run_sampler(model, fixed, moving, cfg, loss, Some(&mut trace))?;
    Ok((out, trace))
}

fn run_sampler<P: FieldPredictor + ?Sized>(
    model: &mut P,
    fixed: &Volume,
    moving: &Volume,
    cfg: &SamplerConfig,
    loss: &LossConfig,
    mut trace: Option<&mut SampleTrace>,
) -> Result<DisplacementField> {
    cfg.validate()?;
    ensure_same_dims("moving image", fixed.dims, moving.dims)?;
    let lambda = if cfg.use_guidance { cfg.lambda_g } else { 0.0 };
    let n = cfg.steps;
    let h = 1.0 / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut psi = sample_noise_field(fixed.dims, fixed.spacing, &mut rng);
    if let Some(tr) = trace.as_deref_mut() {
        tr.initial_noise = psi.clone();
    }

    for i in 0..n {
        let t = i as f64 / n as f64;
        let entering = psi;
        let churned = if cfg.use_sde && i > 0 {
            let (sigma, sigma_hat) = churn_sigma(t, cfg.eta, n);
            let eps = sample_noise_field(fixed.dims, fixed.spacing, &mut rng);
            inject_noise(&entering, sigma, sigma_hat, &eps)?
        } else {
            entering.clone()
        };
        let pred = guided_forward(model, fixed, moving, &churned, t, lambda, loss)?;
        // The last step has h = 1 - t, so Euler lands exactly on the prediction.
        let next = if (cfg.use_ig && i == 0) || i + 1 == n {
            pred.clone()
        } else {
            let mut v = velocity(&pred, &churned, t)?;
            if cfg.use_heun && i + 1 < n {
                let t_next = (i + 1) as f64 / n as f64;
                let probe = churned.axpy(h, &v);
                let probe_pred = guided_forward(model, fixed, moving, &probe, t_next, lambda, loss)?;
                let v2 = velocity(&probe_pred, &probe, t_next)?;
                v = v.axpy(1.0, &v2).scale(0.5);
            }
            churned.axpy(h, &v)
        };
        if let Some(tr) = trace.as_deref_mut() {
            tr.steps.push(StepRecord {
                t,
                entering,
                churned,
                prediction: pred,
                next: next.clone(),
            });
        }
        psi = next;
    }
    Ok(psi)
}

/// Adam directly on the displacement components. Returns the final field and
/// the loss before each step followed by the final loss.
pub fn instance_optimise(
    fixed: &Volume,
    moving: &Volume,
    ddf0: &DisplacementField,
    steps: usize,
    lr: f64,
    loss: &LossConfig,
) -> Result<(DisplacementField, Vec<f64>)> {
    ensure_same_dims("instance moving", fixed.dims, moving.dims)?;
    ensure_same_dims("instance field", fixed.dims, ddf0.dims)?;
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid("lr", format!("{lr} is not a finite non-negative number")));
    }
    let mut field = ddf0.clone();
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut opt = Adam::new(field.data.len(), lr);
    for _ in 0..steps {
        let (value, grad) = reg_loss_and_grad(moving, fixed, &field, loss)?;
        trajectory.push(value);
        opt.step(&mut field.data, &grad.data);
    }
    trajectory.push(reg_loss(moving, fixed, &field, loss)?);
    Ok((field, trajectory))
}

#[cfg(test)]
mod tests;
