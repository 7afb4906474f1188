//! EDM preconditioning, the weighted denoising objective, condition dropout,
//! classifier-free guidance and the deterministic DDIM sampler.

use tokenmotion_tensor::{Rng, Tape, Tensor, Var};

use crate::backbone::{Conditions, Model};
use crate::error::{CoreError, Result};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_P_DROP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            sigma_min: 0.002,
            sigma_max: 80.0,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0) {
            return Err(CoreError::Config(format!(
                "sigma_data must be positive, got {}",
                self.sigma_data
            )));
        }
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max) {
            return Err(CoreError::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.p_std > 0.0) || !self.p_mean.is_finite() {
            return Err(CoreError::Config(
                "training sigma distribution is invalid".into(),
            ));
        }
        Ok(())
    }

    /// `ln sigma ~ N(p_mean, p_std^2)`.
    pub fn sample_sigma(&self, rng: &mut Rng) -> f64 {
        (self.p_mean + self.p_std * rng.normal()).exp()
    }

    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Coefficients {
    pub fn at(sigma: f64, sigma_data: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(CoreError::Domain(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let s2 = sigma * sigma + sigma_data * sigma_data;
        Ok(Self {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / s2.sqrt(),
            c_in: 1.0 / s2.sqrt(),
            c_noise: sigma.ln() / 4.0,
        })
    }
}

/// `D(z) = c_skip z + c_out F(c_in z; c_noise)` on the tape.
pub fn precondition<'t, F>(
    z_noised: &Var<'t>,
    sigma: f64,
    cfg: &DenoiserConfig,
    network: F,
) -> Result<Var<'t>>
where
    F: FnOnce(&Var<'t>, f64) -> Result<Var<'t>>,
{
    let c = Coefficients::at(sigma, cfg.sigma_data)?;
    let f = network(&z_noised.scale(c.c_in)?, c.c_noise)?;
    if f.shape() != z_noised.shape() {
        return Err(CoreError::Config(format!(
            "network output {:?} does not match input {:?}",
            f.shape(),
            z_noised.shape()
        )));
    }
    Ok(z_noised.scale(c.c_skip)?.add(&f.scale(c.c_out)?)?)
}

/// Weighted objective for fixed `sigma` and noise `eps`:
/// `lambda(sigma) * mean((D(z + sigma eps) - z)^2)`.
pub fn loss_at<'t, F>(
    tape: &'t Tape,
    z: &Tensor,
    sigma: f64,
    eps: &Tensor,
    cfg: &DenoiserConfig,
    network: F,
) -> Result<Var<'t>>
where
    F: FnOnce(&Var<'t>, f64) -> Result<Var<'t>>,
{
    let noised = z.zip_with(eps, |a, e| a + sigma * e)?;
    let zn = tape.constant(noised);
    let d = precondition(&zn, sigma, cfg, network)?;
    let diff = d.sub(&tape.constant(z.clone()))?;
    let loss = diff.mul(&diff)?.mean()?.scale(cfg.loss_weight(sigma))?;
    let value = loss.value().data()[0];
    if !value.is_finite() {
        return Err(CoreError::Training {
            step: 0,
            msg: format!("non-finite loss at sigma={sigma}"),
        });
    }
    Ok(loss)
}

/// Draws `sigma` and `eps` from `rng` and evaluates [`loss_at`]. Returns the
/// loss node and the drawn `sigma`.
pub fn training_loss<'t, F>(
    tape: &'t Tape,
    z: &Tensor,
    cfg: &DenoiserConfig,
    rng: &mut Rng,
    network: F,
) -> Result<(Var<'t>, f64)>
where
    F: FnOnce(&Var<'t>, f64) -> Result<Var<'t>>,
{
    if !z.is_finite() {
        return Err(CoreError::Validation("clean sample is not finite".into()));
    }
    let sigma = cfg.sample_sigma(rng);
    let eps = rng.normal_tensor(z.shape(), 1.0);
    Ok((loss_at(tape, z, sigma, &eps, cfg, network)?, sigma))
}

/// Which condition groups were nulled by [`condition_dropout`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dropped {
    pub prompt: bool,
    pub camera: bool,
    pub pose: bool,
}

/// Independently replaces each of prompt, camera and pose by its null form
/// with probability `p_drop`.
pub fn condition_dropout(
    cond: &Conditions,
    p_drop: f64,
    rng: &mut Rng,
) -> Result<(Conditions, Dropped)> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(CoreError::Config(format!(
            "p_drop must lie in [0, 1), got {p_drop}"
        )));
    }
    let mut draw = || rng.uniform() < p_drop;
    let dropped = Dropped {
        prompt: draw(),
        camera: draw(),
        pose: draw(),
    };
    let mut out = cond.clone();
    if dropped.prompt {
        out.prompt.clear();
    }
    if dropped.camera {
        out.camera = Tensor::zeros(cond.camera.shape());
    }
    if dropped.pose {
        out.pose = Tensor::zeros(cond.pose.shape());
    }
    Ok((out, dropped))
}

/// `d_uncond + w (d_cond - d_uncond)`; `w = 1` and `w = 0` return the
/// respective input unchanged.
pub fn cfg_combine(d_cond: &Tensor, d_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if d_cond.shape() != d_uncond.shape() {
        return Err(CoreError::Config(format!(
            "guidance shapes differ: {:?} vs {:?}",
            d_cond.shape(),
            d_uncond.shape()
        )));
    }
    if w == 1.0 {
        return Ok(d_cond.clone());
    }
    if w == 0.0 {
        return Ok(d_uncond.clone());
    }
    Ok(d_cond.zip_with(d_uncond, |c, u| u + w * (c - u))?)
}

/// Deterministic step `z' = D + (sigma_next / sigma_i)(z - D)`.
pub fn ddim_step(z: &Tensor, sigma_i: f64, sigma_next: f64, denoised: &Tensor) -> Result<Tensor> {
    if !(sigma_i > sigma_next && sigma_next >= 0.0) {
        return Err(CoreError::Domain(format!(
            "schedule must decrease: sigma_i={sigma_i}, sigma_next={sigma_next}"
        )));
    }
    let r = sigma_next / sigma_i;
    Ok(denoised.zip_with(z, |d, z| d + r * (z - d))?)
}

/// Descending noise levels: `steps` geometric values from `sigma_max` to
/// `sigma_min`, then a terminal 0.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn geometric(steps: usize, sigma_max: f64, sigma_min: f64) -> Result<Self> {
        if steps == 0 {
            return Err(CoreError::Config("sampling needs at least one step".into()));
        }
        if !(0.0 < sigma_min && sigma_min < sigma_max) {
            return Err(CoreError::Config(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
            )));
        }
        let mut sigmas: Vec<f64> = if steps == 1 {
            vec![sigma_max]
        } else {
            let ratio = sigma_min / sigma_max;
            (0..steps)
                .map(|i| sigma_max * ratio.powf(i as f64 / (steps - 1) as f64))
                .collect()
        };
        sigmas[steps - 1] = if steps == 1 { sigma_max } else { sigma_min };
        sigmas.push(0.0);
        Ok(Self { sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }
}

/// Denoised estimate `D(z; sigma, cond)` of `model` on constant inputs.
pub fn denoise(
    model: &Model,
    cfg: &DenoiserConfig,
    z: &Tensor,
    sigma: f64,
    cond: &Conditions,
) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.store.bind_frozen(&tape);
    let zv = tape.constant(z.clone());
    let d = precondition(&zv, sigma, cfg, |x, c_noise| {
        model.forward(&bound, x, c_noise, cond, true)
    })?;
    Ok(d.value())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            seed: 0,
        }
    }
}

/// DDIM sampling with classifier-free guidance. `denoiser(z, sigma, cond)`
/// returns `D`; the conditional and unconditional evaluations run
/// concurrently, and only one of them is evaluated at `w = 1` or `w = 0`.
pub fn sample_with<F>(
    denoiser: F,
    shape: &[usize],
    cfg: &DenoiserConfig,
    cond: &Conditions,
    uncond: &Conditions,
    opts: &SampleOptions,
) -> Result<Tensor>
where
    F: Fn(&Tensor, f64, &Conditions) -> Result<Tensor> + Sync,
{
    let schedule = NoiseSchedule::geometric(opts.steps, cfg.sigma_max, cfg.sigma_min)?;
    let mut rng = Rng::stream(opts.seed, "sample");
    let mut z = rng.normal_tensor(shape, cfg.sigma_max);
    let w = opts.guidance;
    for pair in schedule.sigmas.windows(2) {
        let (s, s_next) = (pair[0], pair[1]);
        let d = if w == 1.0 {
            denoiser(&z, s, cond)?
        } else if w == 0.0 {
            denoiser(&z, s, uncond)?
        } else {
            let (dc, du) = rayon::join(|| denoiser(&z, s, cond), || denoiser(&z, s, uncond));
            cfg_combine(&dc?, &du?, w)?
        };
        z = ddim_step(&z, s, s_next, &d)?;
    }
    Ok(z)
}

pub fn sample(
    model: &Model,
    cfg: &DenoiserConfig,
    cond: &Conditions,
    opts: &SampleOptions,
) -> Result<Tensor> {
    let uncond = model.null_conditions();
    sample_with(
        |z, s, c| denoise(model, cfg, z, s, c),
        &model.config.video_shape(),
        cfg,
        cond,
        &uncond,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients_at_sigma_data() {
        let c = Coefficients::at(0.5, 0.5).unwrap();
        assert!((c.c_skip - 0.5).abs() < 1e-15);
        assert!((c.c_out - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        assert!((c.c_in - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            Coefficients::at(0.0, 0.5),
            Err(CoreError::Domain(_))
        ));
        let tiny = Coefficients::at(1e-9, 0.5).unwrap();
        assert!((tiny.c_skip - 1.0).abs() < 1e-15 && tiny.c_out < 1e-8);
    }

    #[test]
    fn schedule_is_strictly_decreasing_to_zero() {
        for steps in [1, 2, 5, 50] {
            let s = NoiseSchedule::geometric(steps, 80.0, 0.002).unwrap();
            assert_eq!(s.sigmas.len(), steps + 1);
            assert_eq!(s.sigmas[0], 80.0);
            assert_eq!(*s.sigmas.last().unwrap(), 0.0);
            assert!(s.sigmas.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let c = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let u = Tensor::new(vec![3], vec![-1.0, 7.0, 1e-17]).unwrap();
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let g = cfg_combine(&Tensor::scalar(1.0), &Tensor::scalar(0.0), DEFAULT_GUIDANCE).unwrap();
        assert_eq!(g.data()[0], 7.5);
    }

    #[test]
    fn ddim_terminal_step_returns_denoised() {
        let z = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap();
        let d = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        assert_eq!(ddim_step(&z, 1.0, 0.0, &d).unwrap(), d);
        assert_eq!(ddim_step(&z, 1.0, 0.5, &z).unwrap(), z);
        assert!(ddim_step(&z, 1.0, 1.0, &d).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let cond = Conditions {
            prompt: "walk".into(),
            camera: Tensor::full(&[6, 2, 2, 2], 1.0),
            pose: Tensor::full(&[3, 2, 2, 2], 1.0),
        };
        let mut rng = Rng::new(1);
        let (same, d) = condition_dropout(&cond, 0.0, &mut rng).unwrap();
        assert_eq!(same, cond);
        assert_eq!(d, Dropped::default());
        let (nulled, d) = condition_dropout(&cond, 1.0 - 1e-15, &mut rng).unwrap();
        assert!(d.prompt && d.camera && d.pose);
        assert!(
            nulled.prompt.is_empty()
                && nulled.camera.max_abs() == 0.0
                && nulled.pose.max_abs() == 0.0
        );
        assert!(condition_dropout(&cond, 1.0, &mut rng).is_err());
    }
}
