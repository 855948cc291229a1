//! SGD with heavy-ball momentum, weight decay and per-group learning rates.
//!
//! `v <- beta v + g + lambda theta; theta <- theta - eta_group v`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Bandwidths are projected to at least this value after every step.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Unary-provider layers below the last one.
    Body,
    /// The unary provider's last layer.
    Top,
    CrfWeight,
    CrfSigma,
    CrfCompat,
    /// Fixed state (e.g. feature statistics); never updated.
    Buffer,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Body => "body",
            ParamGroup::Top => "top",
            ParamGroup::CrfWeight => "crf_weight",
            ParamGroup::CrfSigma => "crf_sigma",
            ParamGroup::CrfCompat => "crf_compat",
            ParamGroup::Buffer => "buffer",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            ParamGroup::Body,
            ParamGroup::Top,
            ParamGroup::CrfWeight,
            ParamGroup::CrfSigma,
            ParamGroup::CrfCompat,
            ParamGroup::Buffer,
        ]
        .into_iter()
        .find(|g| g.name() == name)
    }

    pub fn is_crf(self) -> bool {
        matches!(
            self,
            ParamGroup::CrfWeight | ParamGroup::CrfSigma | ParamGroup::CrfCompat
        )
    }
}

/// A named, grouped parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub group: ParamGroup,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, group: ParamGroup, values: Vec<f64>) -> Self {
        ParamTensor {
            name: name.into(),
            group,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_top: f64,
    pub lr_body: f64,
    pub lr_crf: f64,
    /// Also decay CRF parameters (off by default).
    pub decay_crf: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_top: 0.01,
            lr_body: 0.001,
            lr_crf: 0.001,
            decay_crf: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lr_top", self.lr_top),
            ("lr_body", self.lr_body),
            ("lr_crf", self.lr_crf),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn learning_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Top => self.lr_top,
            ParamGroup::Body => self.lr_body,
            ParamGroup::CrfWeight | ParamGroup::CrfSigma | ParamGroup::CrfCompat => self.lr_crf,
            ParamGroup::Buffer => 0.0,
        }
    }

    fn decay(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Buffer => 0.0,
            g if g.is_crf() && !self.decay_crf => 0.0,
            _ => self.weight_decay,
        }
    }
}

/// Hyperparameters plus one velocity buffer per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    velocities: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimState {
            config,
            velocities: BTreeMap::new(),
        })
    }

    pub fn velocities(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.velocities
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, v: Vec<f64>) {
        self.velocities.insert(name.into(), v);
    }
}

/// One update of every parameter; rejects the whole step on any non-finite gradient.
pub fn sgd_step(params: &mut [ParamTensor], grads: &[Vec<f64>], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} gradients", params.len()), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.values.len() != g.len() {
            return Err(Error::shape(
                format!("{} gradient entries for {}", p.values.len(), p.name),
                g.len(),
            ));
        }
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite gradient {} at {}[{k}]; step rejected",
                g[k], p.name
            )));
        }
        if let Some(v) = state.velocities.get(&p.name) {
            if v.len() != g.len() {
                return Err(Error::shape(
                    format!("{} velocity entries for {}", g.len(), p.name),
                    v.len(),
                ));
            }
        }
    }
    let cfg = state.config;
    for (p, g) in params.iter_mut().zip(grads) {
        if p.group == ParamGroup::Buffer {
            continue;
        }
        let lr = cfg.learning_rate(p.group);
        let decay = cfg.decay(p.group);
        let v = state
            .velocities
            .entry(p.name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((theta, vel), &grad) in p.values.iter_mut().zip(v.iter_mut()).zip(g) {
            *vel = cfg.momentum * *vel + grad + decay * *theta;
            if lr != 0.0 {
                *theta -= lr * *vel;
            }
        }
        if p.group == ParamGroup::CrfSigma {
            for theta in &mut p.values {
                *theta = theta.max(SIGMA_FLOOR);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plain(momentum: f64, decay: f64, lr: f64) -> OptimState {
        OptimState::new(OptimConfig {
            momentum,
            weight_decay: decay,
            lr_top: lr,
            lr_body: lr,
            lr_crf: lr,
            decay_crf: false,
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = plain(0.9, 0.0, 0.5);
        let mut p = vec![ParamTensor::new("a", ParamGroup::Top, vec![1.5, -2.0])];
        sgd_step(&mut p, &[vec![0.0, 0.0]], &mut s).unwrap();
        assert_eq!(p[0].values, vec![1.5, -2.0]);
    }

    #[test]
    fn single_plain_step() {
        let mut s = plain(0.0, 0.0, 0.1);
        let mut p = vec![ParamTensor::new("a", ParamGroup::Top, vec![1.0])];
        sgd_step(&mut p, &[vec![0.5]], &mut s).unwrap();
        assert!((p[0].values[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_recursion() {
        let mut s = plain(0.9, 0.0, 1.0);
        let mut p = vec![ParamTensor::new("a", ParamGroup::Body, vec![0.0])];
        sgd_step(&mut p, &[vec![1.0]], &mut s).unwrap();
        sgd_step(&mut p, &[vec![1.0]], &mut s).unwrap();
        assert!((p[0].values[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_crf_groups() {
        let mut s = plain(0.0, 0.5, 1.0);
        let mut p = vec![
            ParamTensor::new("u", ParamGroup::Top, vec![2.0]),
            ParamTensor::new("w", ParamGroup::CrfWeight, vec![2.0]),
        ];
        sgd_step(&mut p, &[vec![0.0], vec![0.0]], &mut s).unwrap();
        assert_eq!(p[0].values[0], 1.0);
        assert_eq!(p[1].values[0], 2.0);
    }

    #[test]
    fn sigma_is_floored_and_buffers_frozen() {
        let mut s = plain(0.0, 0.0, 1.0);
        let mut p = vec![
            ParamTensor::new("s", ParamGroup::CrfSigma, vec![0.5, 3.0]),
            ParamTensor::new("b", ParamGroup::Buffer, vec![7.0]),
        ];
        sgd_step(&mut p, &[vec![10.0, 1.0], vec![5.0]], &mut s).unwrap();
        assert_eq!(p[0].values, vec![SIGMA_FLOOR, 2.0]);
        assert_eq!(p[1].values, vec![7.0]);
    }

    #[test]
    fn non_finite_gradient_rejects_whole_step() {
        let mut s = plain(0.0, 0.0, 1.0);
        let mut p = vec![
            ParamTensor::new("a", ParamGroup::Top, vec![1.0]),
            ParamTensor::new("b", ParamGroup::Top, vec![1.0]),
        ];
        assert!(sgd_step(&mut p, &[vec![1.0], vec![f64::NAN]], &mut s).is_err());
        assert_eq!(p[0].values, vec![1.0]);
        assert!(s.velocities().is_empty());
    }

    #[test]
    fn invalid_hyperparameters() {
        let mut c = OptimConfig::default();
        c.momentum = 1.0;
        assert!(OptimState::new(c).is_err());
        let mut c = OptimConfig::default();
        c.lr_top = -0.1;
        assert!(OptimState::new(c).is_err());
    }

    proptest! {
        #[test]
        fn zero_lr_group_is_bitwise_unchanged(
            vals in proptest::collection::vec(-10.0f64..10.0, 1..8),
            g in -5.0f64..5.0,
        ) {
            let mut s = OptimState::new(OptimConfig { lr_body: 0.0, ..OptimConfig::default() }).unwrap();
            let mut p = vec![
                ParamTensor::new("body", ParamGroup::Body, vals.clone()),
                ParamTensor::new("top", ParamGroup::Top, vals.clone()),
            ];
            let grads = vec![vec![g; vals.len()], vec![g; vals.len()]];
            sgd_step(&mut p, &grads, &mut s).unwrap();
            sgd_step(&mut p, &grads, &mut s).unwrap();
            prop_assert_eq!(&p[0].values, &vals);
        }

        #[test]
        fn no_momentum_no_decay_is_gradient_descent(
            vals in proptest::collection::vec(-10.0f64..10.0, 1..8),
            g in -5.0f64..5.0,
            lr in 0.0f64..1.0,
        ) {
            let mut s = plain(0.0, 0.0, lr);
            let mut p = vec![ParamTensor::new("a", ParamGroup::Top, vals.clone())];
            sgd_step(&mut p, &[vec![g; vals.len()]], &mut s).unwrap();
            for (a, b) in p[0].values.iter().zip(&vals) {
                prop_assert_eq!(*a, b - lr * g);
            }
        }
    }
}
