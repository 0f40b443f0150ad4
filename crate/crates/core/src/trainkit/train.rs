use alloc::format;
use alloc::vec::Vec;

use super::model::Model;
use super::optim::{clip_global_norm, lr_at, AdamW, AdamWParams};
use super::task::Task;
use crate::qlinear::LayerConfig;
use crate::rng::CounterRng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub warmup_frac: f64,
    /// Final learning rate as a fraction of the peak.
    pub final_lr_frac: f64,
    /// Record the training loss every this many steps.
    pub log_every: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 64,
            lr: 1e-2,
            weight_decay: 0.1,
            clip: 1.0,
            warmup_frac: 0.1,
            final_lr_frac: 0.0,
            log_every: 10,
            eval_size: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.steps == 0 || self.log_every == 0 || self.eval_size == 0 {
            return bad("steps, log_every and eval_size must be positive");
        }
        if self.batch_size == 0 || self.batch_size % 32 != 0 {
            return bad("batch_size must be a positive multiple of 32");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.clip > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.final_lr_frac) {
            return bad("clip must be positive, warmup_frac in [0, 1), final_lr_frac in [0, 1]");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self.steps, self.lr, self.warmup_frac, self.final_lr_frac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    /// Held-out loss of the final model under the training forward pass.
    Finished { final_loss: f64 },
    Diverged { step: usize },
}

impl Outcome {
    pub fn final_loss(&self) -> Option<f64> {
        match *self {
            Outcome::Finished { final_loss } => Some(final_loss),
            Outcome::Diverged { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    pub outcome: Outcome,
    /// Largest global gradient norm after clipping, over the steps where
    /// clipping fired (0 if it never did).
    pub max_clipped_norm: f64,
    pub clip_events: usize,
}

/// Trains `model` on `task` with the layer pass given by `layer`.
/// Data order and all rounding noise derive from `cfg.seed`.
pub fn train(mut model: Model, task: &Task, layer: &LayerConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if model.input_dim() != task.input_dim() || model.output_dim() != task.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "model maps {} -> {}, task needs {} -> {}",
            model.input_dim(),
            model.output_dim(),
            task.input_dim(),
            task.output_dim()
        )));
    }
    let rng = CounterRng::new(cfg.seed);
    let data_seed = rng.derive(&[1]).seed();
    let mut opt = AdamW::new(
        model.weights.iter().map(|w| w.shape()),
        AdamWParams {
            weight_decay: cfg.weight_decay,
            ..AdamWParams::default()
        },
    );
    let mut curve = Vec::new();
    let mut max_clipped_norm: f64 = 0.0;
    let mut clip_events = 0;
    for step in 0..cfg.steps {
        let (x, targets) = task.batch(cfg.batch_size, data_seed, step as u64);
        let step_rng = rng.derive(&[2, step as u64]);
        let trace = model.forward(&x, layer, step_rng.derive(&[0]).seed())?;
        let (loss, grad_out) = task.loss_and_grad(trace.output(), &targets)?;
        if !loss.is_finite() {
            return Ok(diverged(model, curve, step, max_clipped_norm, clip_events));
        }
        let mut grads = model.backward(&trace, &grad_out, layer, step_rng.derive(&[1]).seed())?.weights;
        let (pre, post) = clip_global_norm(&mut grads, cfg.clip);
        if !pre.is_finite() {
            return Ok(diverged(model, curve, step, max_clipped_norm, clip_events));
        }
        if pre > cfg.clip {
            clip_events += 1;
            max_clipped_norm = max_clipped_norm.max(post);
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut model.weights, &grads, lr);
        if !model.is_finite() {
            return Ok(diverged(model, curve, step, max_clipped_norm, clip_events));
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(CurvePoint { step, loss, lr });
        }
    }
    let final_loss = evaluate(&model, task, layer, cfg.eval_size, rng.derive(&[3]).seed())?;
    let outcome = if final_loss.is_finite() {
        Outcome::Finished { final_loss }
    } else {
        Outcome::Diverged { step: cfg.steps }
    };
    Ok(TrainResult {
        model,
        curve,
        outcome,
        max_clipped_norm,
        clip_events,
    })
}

/// Held-out loss of `model` under the forward pass of `layer`.
pub fn evaluate(model: &Model, task: &Task, layer: &LayerConfig, rows: usize, seed: u64) -> Result<f64> {
    let (x, targets) = task.eval_set(rows);
    let trace = model.forward(&x, layer, seed)?;
    Ok(task.loss_and_grad(trace.output(), &targets)?.0)
}

fn diverged(model: Model, curve: Vec<CurvePoint>, step: usize, max_clipped_norm: f64, clip_events: usize) -> TrainResult {
    TrainResult {
        model,
        curve,
        outcome: Outcome::Diverged { step },
        max_clipped_norm,
        clip_events,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainkit::TeacherStudent;

    fn small() -> (Model, Task, TrainConfig) {
        let task = Task::TeacherStudent(TeacherStudent::new(32, 32, 32, 0.1, 5));
        let model = Model::new(&[32, 64, 32], 1).unwrap();
        let cfg = TrainConfig {
            steps: 120,
            batch_size: 32,
            eval_size: 64,
            ..TrainConfig::default()
        };
        (model, task, cfg)
    }

    #[test]
    fn deterministic_curves() {
        let (model, task, cfg) = small();
        let a = train(model.clone(), &task, &LayerConfig::quartet(), &cfg).unwrap();
        let b = train(model, &task, &LayerConfig::quartet(), &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.outcome, b.outcome);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn exact_training_reduces_loss() {
        let (model, task, cfg) = small();
        let before = evaluate(&model, &task, &LayerConfig::exact(), 64, 0).unwrap();
        let r = train(model, &task, &LayerConfig::exact(), &cfg).unwrap();
        assert!(r.outcome.final_loss().unwrap() < 0.5 * before);
        assert!(r.max_clipped_norm <= cfg.clip + 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        let (model, task, mut cfg) = small();
        cfg.batch_size = 48;
        assert!(train(model, &task, &LayerConfig::exact(), &cfg).is_err());
    }
}
