//! Adam and learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Element> Adam<T> {
    /// State for parameters with the given shapes.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, config: AdamConfig) -> Result<Self> {
        let m = shapes
            .into_iter()
            .map(Tensor::zeros)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            v: m.clone(),
            m,
            t: 0,
        })
    }

    pub fn for_params(params: &[&Tensor<T>], config: AdamConfig) -> Result<Self> {
        Self::new(params.iter().map(|p| p.dims()), config)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One bias-corrected update. Weight decay, when nonzero, is added to
    /// the gradient (L2 form).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} is not a finite non-negative number")));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dims() != self.m[i].dims() || g.dims() != self.m[i].dims() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.dims().to_vec(),
                    rhs: g.dims().to_vec(),
                });
            }
        }

        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps, wd) = (T::from_f64(lr), T::from_f64(c.eps), T::from_f64(c.weight_decay));

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                let gj = if c.weight_decay != 0.0 { gj + wd * p[j] } else { gj };
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::step`].
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut Adam<T>,
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    OneCycle,
    Cosine,
    Constant,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "onecycle" => Some(Self::OneCycle),
            "cosine" => Some(Self::Cosine),
            "constant" => Some(Self::Constant),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::OneCycle => "onecycle",
            Self::Cosine => "cosine",
            Self::Constant => "constant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub min_lr: f64,
}

impl ScheduleSpec {
    pub fn one_cycle(max_lr: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::OneCycle,
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            min_lr: 0.0,
        }
    }

    pub fn cosine(max_lr: f64, min_lr: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            min_lr,
            ..Self::one_cycle(max_lr, total_steps)
        }
    }

    pub fn constant(lr: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            ..Self::one_cycle(lr, total_steps)
        }
    }

    pub fn with_final_div_factor(mut self, f: f64) -> Self {
        self.final_div_factor = f;
        self
    }

    /// Step at which the one-cycle warmup ends.
    pub fn peak_step(&self) -> usize {
        (self.pct_start * self.total_steps as f64).round() as usize
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        match self.kind {
            ScheduleKind::OneCycle => self.initial_lr() / self.final_div_factor,
            ScheduleKind::Cosine => self.min_lr,
            ScheduleKind::Constant => self.max_lr,
        }
    }

    pub fn lr_at(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside schedule of {} steps",
                self.total_steps
            )));
        }
        // cosine interpolation from a (at frac 0) to b (at frac 1)
        let anneal = |a: f64, b: f64, frac: f64| b + (a - b) * (1.0 + (PI * frac).cos()) / 2.0;
        Ok(match self.kind {
            ScheduleKind::Constant => self.max_lr,
            ScheduleKind::Cosine => {
                if t == 0 {
                    return Ok(self.max_lr);
                }
                if t == self.total_steps {
                    return Ok(self.min_lr);
                }
                anneal(self.max_lr, self.min_lr, t as f64 / self.total_steps as f64)
            }
            ScheduleKind::OneCycle => {
                let peak = self.peak_step();
                if t == peak {
                    self.max_lr
                } else if t == 0 {
                    self.initial_lr()
                } else if t < peak {
                    anneal(self.initial_lr(), self.max_lr, t as f64 / peak as f64)
                } else if t == self.total_steps {
                    self.final_lr()
                } else {
                    let frac = (t - peak) as f64 / (self.total_steps - peak) as f64;
                    anneal(self.max_lr, self.final_lr(), frac)
                }
            }
        })
    }
}
