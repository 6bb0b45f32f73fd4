//! AdamW with decoupled weight decay and the warmup-then-cosine schedule.

use std::f64::consts::PI;

use crate::encoders::{Dense, DenseGrad, GradientBag, TwoTowerModel};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
/// `step` is clamped into `[0, total_steps]`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps - warmup_steps.min(total_steps);
    if span == 0 {
        return peak_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    if progress >= 1.0 {
        return 0.0;
    }
    0.5 * peak_lr * (1.0 + (PI * progress).cos())
}

/// Parameters touched by fine-tuning: the two towers and an optional head.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneState {
    pub model: TwoTowerModel,
    pub head: Option<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneGrads {
    pub bag: GradientBag,
    pub head: Option<DenseGrad>,
}

impl FineTuneGrads {
    pub fn zeros_like(state: &FineTuneState) -> Self {
        Self {
            bag: GradientBag::zeros_like(&state.model),
            head: state.head.as_ref().map(|h| DenseGrad {
                weights: crate::numeric::Matrix::zeros(h.output_dim(), h.input_dim()),
                bias: vec![0.0; h.output_dim()],
            }),
        }
    }
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableMask {
    pub image: bool,
    pub text: bool,
    pub temperature: bool,
    pub head: bool,
}

impl TrainableMask {
    pub const NONE: Self = Self {
        image: false,
        text: false,
        temperature: false,
        head: false,
    };
}

/// First/second moments per parameter group, in the fixed order
/// image layers, text layers, `log τ`, head.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

/// One contiguous block of parameters with its gradient.
pub struct ParamGroup<'a> {
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
    pub trainable: bool,
    /// Decoupled weight decay applies to this group.
    pub decay: bool,
}

impl OptimizerState {
    pub fn new(group_sizes: &[usize], weight_decay: f64) -> Result<Self> {
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "weight_decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            step: 0,
            weight_decay,
            first: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_state(state: &FineTuneState, weight_decay: f64) -> Result<Self> {
        let sizes: Vec<usize> = state_groups_sizes(state);
        Self::new(&sizes, weight_decay)
    }

    pub fn moments_finite(&self) -> bool {
        self.first
            .iter()
            .chain(&self.second)
            .flatten()
            .all(|v| v.is_finite())
    }

    /// One AdamW step over `groups`. Frozen groups keep their parameters and
    /// moments untouched; the step counter advances once per call.
    pub fn apply(&mut self, groups: &mut [ParamGroup<'_>], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        if groups.len() != self.first.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter groups for an optimizer over {}",
                groups.len(),
                self.first.len()
            )));
        }
        for (k, g) in groups.iter().enumerate() {
            if g.params.len() != self.first[k].len() || g.grads.len() != g.params.len() {
                return Err(Error::ShapeMismatch(format!(
                    "group {k}: {} params, {} grads, {} moments",
                    g.params.len(),
                    g.grads.len(),
                    self.first[k].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (k, g) in groups.iter_mut().enumerate() {
            if !g.trainable {
                continue;
            }
            let decay = if g.decay { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..g.params.len() {
                let grad = g.grads[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad * grad;
                let p = g.params[i] - decay * g.params[i];
                g.params[i] = p - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        if !self.moments_finite() {
            return Err(Error::NonFinite("optimizer moments"));
        }
        Ok(())
    }
}

fn state_groups_sizes(state: &FineTuneState) -> Vec<usize> {
    let mut sizes: Vec<usize> = state
        .model
        .image
        .param_slices()
        .iter()
        .chain(state.model.text.param_slices().iter())
        .map(|s| s.len())
        .collect();
    sizes.push(1);
    if let Some(h) = &state.head {
        sizes.push(h.weights.data().len());
        sizes.push(h.bias.len());
    }
    sizes
}

/// AdamW on a [`FineTuneState`]. Weight matrices decay; biases and `log τ`
/// do not. `τ` is clamped afterwards.
pub fn optimizer_step(
    state: &mut FineTuneState,
    grads: &FineTuneGrads,
    mask: TrainableMask,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if state.head.is_some() != grads.head.is_some() {
        return Err(Error::ShapeMismatch(
            "head present on only one of params/grads".into(),
        ));
    }
    let log_t_grad = [grads.bag.log_temperature];
    let mut groups = Vec::new();
    let FineTuneState { model, head } = state;
    for (tower, tower_grads, trainable) in [
        (&mut model.image, &grads.bag.image, mask.image),
        (&mut model.text, &grads.bag.text, mask.text),
    ] {
        let gs = tower_grads.slices();
        let ps = tower.param_slices_mut();
        if gs.len() != ps.len() {
            return Err(Error::ShapeMismatch(
                "gradient layers do not match the tower".into(),
            ));
        }
        for (k, (p, g)) in ps.into_iter().zip(gs).enumerate() {
            groups.push(ParamGroup {
                params: p,
                grads: g,
                trainable,
                decay: k % 2 == 0,
            });
        }
    }
    groups.push(ParamGroup {
        params: std::slice::from_mut(&mut model.log_temperature),
        grads: &log_t_grad,
        trainable: mask.temperature,
        decay: false,
    });
    if let (Some(h), Some(hg)) = (head.as_mut(), grads.head.as_ref()) {
        groups.push(ParamGroup {
            params: h.weights.data_mut(),
            grads: hg.weights.data(),
            trainable: mask.head,
            decay: true,
        });
        groups.push(ParamGroup {
            params: &mut h.bias,
            grads: &hg.bias,
            trainable: mask.head,
            decay: false,
        });
    }
    opt.apply(&mut groups, lr)?;
    model.clamp_temperature();
    Ok(())
}
