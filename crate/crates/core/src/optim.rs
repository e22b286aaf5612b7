//! Named parameter tensors and the AdamW optimizer.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub names: Vec<String>,
    pub tensors: Vec<ArrayD<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayD<T>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Zeros with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::dims("parameter names", format!("{:?}", self.names), format!("{:?}", other.names)));
        }
        for ((n, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::dims(&format!("parameter {n}"), format!("{:?}", a.shape()), format!("{:?}", b.shape())));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over the full run.
    Cosine,
}

impl LrSchedule {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!(
                "unknown train.lr_schedule {other:?}; expected \"constant\" or \"cosine\""
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        }
    }

    pub fn rate(self, base: f64, step: u64, total_steps: u64) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let progress = (step as f64 / total_steps.max(1) as f64).min(1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: None }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Params<T>,
    pub v: Params<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &Params<T>) -> Self {
        Self { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// One update at learning rate `lr`. Returns the gradient norm before clipping.
    pub fn update(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) -> Result<f64> {
        params.check_same_layout(grads)?;
        params.check_same_layout(&self.m)?;
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::ContractViolation("non-finite gradient".into()));
        }
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => T::lit(max / norm),
            _ => T::one(),
        };
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr_t, decay, eps) = (T::lit(lr), T::lit(1.0 - lr * c.weight_decay), T::lit(c.eps));
        let one = T::one();
        for i in 0..params.len() {
            Zip::from(&mut params.tensors[i])
                .and(&grads.tensors[i])
                .and(&mut self.m.tensors[i])
                .and(&mut self.v.tensors[i])
                .for_each(|p, &g, m, v| {
                    let g = g * clip;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(norm)
    }
}
