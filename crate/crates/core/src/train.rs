//! Seeded training loop: per-sample condition dropout and denoising loss on
//! independent tapes, gradients summed in batch order, then one Adam step.

use rayon::prelude::*;
use tokenmotion_tensor::{Adam, AdamConfig, AdamSlot, Rng, Tape, Tensor};

use crate::backbone::{Conditions, Model};
use crate::config::{LrSchedule, RunConfig, TrainMode};
use crate::data::Clip;
use crate::diffusion::{condition_dropout, training_loss, DenoiserConfig};
use crate::error::{CoreError, Result};
use crate::params::Role;

/// A clean video with its full conditions.
#[derive(Clone, Debug)]
pub struct Example {
    pub clean: Tensor,
    pub cond: Conditions,
}

impl Example {
    pub fn from_clip(clip: &Clip, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            clean: clip.video.clone(),
            cond: clip.conditions(config.ray_convention)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub p_drop: f64,
    pub mode: TrainMode,
    pub seed: u64,
    pub denoiser: DenoiserConfig,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub lr_floor: f64,
    /// Horizon of the learning-rate schedule.
    pub total_steps: usize,
}

impl TrainSettings {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            p_drop: c.p_drop,
            mode: c.mode,
            seed: c.seed,
            denoiser: c.denoiser,
            adam: c.adam,
            lr_schedule: c.lr_schedule,
            lr_floor: c.lr_floor,
            total_steps: c.train_steps,
        }
    }

    pub fn trains(&self, role: Role) -> bool {
        match self.mode {
            TrainMode::Full => true,
            TrainMode::ControlFinetune => role != Role::Backbone,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub sigmas: Vec<f64>,
    pub loss: f64,
}

impl StepLog {
    /// `step=<n> sigma=<s0>,<s1>,... loss=<mean loss>`
    pub fn line(&self) -> String {
        let sigmas: Vec<String> = self.sigmas.iter().map(|s| format!("{s:.6e}")).collect();
        format!(
            "step={} sigma={} loss={:.9e}",
            self.step,
            sigmas.join(","),
            self.loss
        )
    }
}

struct SampleResult {
    loss: f64,
    sigma: f64,
    grads: Vec<Option<Tensor>>,
}

fn sample_gradients(
    model: &Model,
    examples: &[Example],
    settings: &TrainSettings,
    step: usize,
    b: usize,
) -> Result<SampleResult> {
    let mut rng = Rng::stream_indexed(settings.seed, "train", &[step as u64, b as u64]);
    let ex = &examples[rng.below(examples.len())];
    let (cond, _) = condition_dropout(&ex.cond, settings.p_drop, &mut rng)?;
    let tape = Tape::new();
    let bound = model.store.bind(&tape, |r| settings.trains(r));
    let (loss, sigma) = training_loss(
        &tape,
        &ex.clean,
        &settings.denoiser,
        &mut rng,
        |x, c_noise| model.forward(&bound, x, c_noise, &cond, true),
    )
    .map_err(|e| match e {
        CoreError::Training { msg, .. } => CoreError::Training { step, msg },
        other => other,
    })?;
    let grads = tape.backward(loss)?;
    let grads = model
        .store
        .iter()
        .map(|(id, p)| {
            settings
                .trains(p.role)
                .then(|| grads.get_or_zeros(bound[id]))
        })
        .collect();
    Ok(SampleResult {
        loss: loss.value().data()[0],
        sigma,
        grads,
    })
}

pub struct Trainer {
    pub settings: TrainSettings,
    pub adam: Adam,
    pub step: usize,
}

impl Trainer {
    pub fn new(settings: TrainSettings) -> Self {
        Self {
            settings,
            adam: Adam::new(settings.adam),
            step: 0,
        }
    }

    /// One optimizer step on a batch drawn from `examples`.
    pub fn step(&mut self, model: &mut Model, examples: &[Example]) -> Result<StepLog> {
        if examples.is_empty() {
            return Err(CoreError::Training {
                step: self.step,
                msg: "no training examples".into(),
            });
        }
        let step = self.step;
        let settings = self.settings;
        let shared: &Model = model;
        let results = (0..settings.batch_size)
            .into_par_iter()
            .map(|b| sample_gradients(shared, examples, &settings, step, b))
            .collect::<Result<Vec<_>>>()?;

        let n = results.len() as f64;
        let mut total: Vec<Option<Tensor>> = vec![None; model.store.len()];
        for r in &results {
            for (acc, g) in total.iter_mut().zip(&r.grads) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                        None => *acc = Some(g.clone()),
                    }
                }
            }
        }
        for g in total.iter_mut().flatten() {
            for x in g.data_mut() {
                *x /= n;
            }
        }
        let mut slots: Vec<AdamSlot<'_>> = model
            .store
            .iter_mut()
            .zip(&total)
            .filter_map(|((id, p), g)| {
                g.as_ref().map(|g| AdamSlot {
                    slot: id.index(),
                    name: &p.name,
                    value: &mut p.value,
                    grad: g,
                })
            })
            .collect();
        let s = &self.settings;
        self.adam.config.lr = s.adam.lr * s.lr_schedule.factor(step, s.total_steps, s.lr_floor);
        self.adam
            .step(&mut slots)
            .map_err(|e| CoreError::Training {
                step,
                msg: e.to_string(),
            })?;
        self.step += 1;
        Ok(StepLog {
            step,
            sigmas: results.iter().map(|r| r.sigma).collect(),
            loss: results.iter().map(|r| r.loss).sum::<f64>() / n,
        })
    }

    /// Runs `steps` steps, calling `after` with each log line and the model.
    pub fn run(
        &mut self,
        model: &mut Model,
        examples: &[Example],
        steps: usize,
        mut after: impl FnMut(&StepLog, &Model) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let log = self.step(model, examples)?;
            after(&log, model)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Mean loss over `logs[range]`.
pub fn window_mean(logs: &[StepLog], range: std::ops::Range<usize>) -> f64 {
    let w = &logs[range];
    w.iter().map(|l| l.loss).sum::<f64>() / w.len() as f64
}
