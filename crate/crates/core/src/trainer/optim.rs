//! Optimizers, learning-rate schedules and gradient clipping.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid optimizer spec {spec:?}: {reason}")]
pub struct ParseError {
    pub spec: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
    Adagrad,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Adagrad => "adagrad",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    None,
    InverseSqrt,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    /// Length of the cosine decay, counted from step 1.
    pub max_steps: u64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        let eps = if kind == OptimizerKind::Adagrad {
            1e-10
        } else {
            1e-8
        };
        Self {
            kind,
            lr,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay: if kind == OptimizerKind::AdamW {
                0.01
            } else {
                0.0
            },
            lr_decay: 0.0,
            warmup_steps: 0,
            schedule: Schedule::None,
            max_steps: 0,
        }
    }
}

/// Parses `name,key=value,...`, e.g. `adam,lr=1e-4` or
/// `adam_inverse_sqrt,lr=5e-4,warmup_updates=4000`.
pub fn parse_optimizer(spec: &str) -> Result<OptimizerConfig, ParseError> {
    let fail = |reason: String| ParseError {
        spec: spec.to_string(),
        reason,
    };
    let mut parts = spec.split(',');
    let head = parts.next().unwrap_or("").trim();
    let (name, schedule) = match head.split_once('_') {
        Some((n, "inverse_sqrt")) => (n, Some(Schedule::InverseSqrt)),
        Some((n, "cosine")) => (n, Some(Schedule::Cosine)),
        Some((n, "warmup")) => (n, Some(Schedule::None)),
        _ => (head, None),
    };
    let kind = match name {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::Adam,
        "adamw" => OptimizerKind::AdamW,
        "adagrad" => OptimizerKind::Adagrad,
        _ => return Err(fail(format!("unknown optimizer {head:?}"))),
    };
    let mut c = OptimizerConfig::new(kind, 1e-3);
    if let Some(s) = schedule {
        c.schedule = s;
    }
    for pair in parts {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| fail(format!("expected key=value, got {pair:?}")))?;
        let k = k.trim();
        let v = v.trim();
        if k == "schedule" {
            c.schedule = match v {
                "none" => Schedule::None,
                "inverse_sqrt" => Schedule::InverseSqrt,
                "cosine" => Schedule::Cosine,
                _ => return Err(fail(format!("unknown schedule {v:?}"))),
            };
            continue;
        }
        let x: f64 = v
            .parse()
            .map_err(|_| fail(format!("value of {k} is not a number: {v:?}")))?;
        if !x.is_finite() {
            return Err(fail(format!("value of {k} is not finite")));
        }
        let count = |x: f64| -> Result<u64, ParseError> {
            if x < 0.0 || x.fract() != 0.0 {
                Err(fail(format!("{k} must be a nonnegative integer")))
            } else {
                Ok(x as u64)
            }
        };
        match k {
            "lr" => c.lr = x,
            "momentum" => c.momentum = x,
            "beta1" => c.beta1 = x,
            "beta2" => c.beta2 = x,
            "eps" => c.eps = x,
            "weight_decay" => c.weight_decay = x,
            "lr_decay" => c.lr_decay = x,
            "warmup_steps" | "warmup_updates" => c.warmup_steps = count(x)?,
            "max_steps" | "max_update" => c.max_steps = count(x)?,
            _ => return Err(fail(format!("unknown parameter {k:?}"))),
        }
    }
    if c.lr <= 0.0 {
        return Err(fail("lr must be positive".into()));
    }
    if !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) {
        return Err(fail("betas must be in [0, 1)".into()));
    }
    if c.schedule == Schedule::Cosine && c.max_steps <= c.warmup_steps {
        return Err(fail(
            "cosine schedule needs max_steps greater than warmup_steps".into(),
        ));
    }
    Ok(c)
}

impl FromStr for OptimizerConfig {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, ParseError> {
        parse_optimizer(s)
    }
}

impl fmt::Display for OptimizerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},lr={}", self.kind.name(), self.lr)?;
        if self.warmup_steps > 0 {
            write!(f, ",warmup_steps={}", self.warmup_steps)?;
        }
        match self.schedule {
            Schedule::None => Ok(()),
            Schedule::InverseSqrt => write!(f, ",schedule=inverse_sqrt"),
            Schedule::Cosine => write!(f, ",schedule=cosine,max_steps={}", self.max_steps),
        }
    }
}

/// Learning rate for the 1-based update `step`.
pub fn effective_lr(step: u64, c: &OptimizerConfig) -> f64 {
    let step = step.max(1);
    let w = c.warmup_steps;
    if w > 0 && step <= w {
        return c.lr * step as f64 / w as f64;
    }
    match c.schedule {
        Schedule::None => c.lr,
        Schedule::InverseSqrt => c.lr * (w.max(1) as f64 / step as f64).sqrt(),
        Schedule::Cosine => {
            let span = (c.max_steps - w) as f64;
            let progress = ((step - w) as f64 / span).min(1.0);
            c.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Rescales all gradients so that their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping. `max_norm <= 0` disables.
pub fn clip_gradients<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        params.scale_grads(T::lit(max_norm / norm));
    }
    norm
}

/// Optimizer with its per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    /// Completed updates.
    pub step: u64,
    /// First moments (Adam), momentum buffers (SGD) or squared-gradient
    /// sums (Adagrad).
    pub m: Vec<Vec<T>>,
    /// Second moments (Adam only).
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .values
                .iter()
                .map(|p| vec![T::zero(); p.len()])
                .collect::<Vec<_>>()
        };
        let uses_v = matches!(config.kind, OptimizerKind::Adam | OptimizerKind::AdamW);
        let uses_m = uses_v || config.kind == OptimizerKind::Adagrad || config.momentum != 0.0;
        Self {
            step: 0,
            m: if uses_m { zeros() } else { Vec::new() },
            v: if uses_v { zeros() } else { Vec::new() },
            config,
        }
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        effective_lr(self.step + 1, &self.config)
    }

    /// Applies one update from the current gradients and zeroes them.
    /// Returns the learning rate used.
    pub fn update(&mut self, params: &mut ParamStore<T>) -> f64 {
        self.step += 1;
        let c = &self.config;
        let lr_f = effective_lr(self.step, c);
        let lr = T::lit(lr_f);
        let wd = T::lit(c.weight_decay);
        let t = self.step as i32;
        for p in 0..params.values.len() {
            let w = &mut params.values[p];
            let g = &params.grads[p];
            match c.kind {
                OptimizerKind::Sgd => {
                    let mu = T::lit(c.momentum);
                    for i in 0..w.len() {
                        let gi = g[i] + wd * w[i];
                        let d = if self.m.is_empty() {
                            gi
                        } else {
                            let b = &mut self.m[p][i];
                            *b = if t == 1 { gi } else { mu * *b + gi };
                            *b
                        };
                        w[i] -= lr * d;
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                    let one = T::one();
                    let bc1 = T::lit(1.0 - c.beta1.powi(t));
                    let bc2 = T::lit(1.0 - c.beta2.powi(t));
                    let eps = T::lit(c.eps);
                    let decoupled = c.kind == OptimizerKind::AdamW;
                    let (m, v) = (&mut self.m[p], &mut self.v[p]);
                    for i in 0..w.len() {
                        let mut gi = g[i];
                        if decoupled {
                            let wi = w[i];
                            w[i] = wi - lr * wd * wi;
                        } else {
                            gi += wd * w[i];
                        }
                        m[i] = b1 * m[i] + (one - b1) * gi;
                        v[i] = b2 * v[i] + (one - b2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        w[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                OptimizerKind::Adagrad => {
                    let clr = T::lit(lr_f / (1.0 + (t - 1) as f64 * c.lr_decay));
                    let eps = T::lit(c.eps);
                    let s = &mut self.m[p];
                    for i in 0..w.len() {
                        let gi = g[i] + wd * w[i];
                        s[i] += gi * gi;
                        w[i] -= clr * gi / (s[i].sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grads();
        lr_f
    }
}
