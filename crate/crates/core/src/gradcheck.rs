//! Central-difference verification of every learnable scalar in the
//! unary provider and the CRF.
//!
//! A central difference is meaningless when the two probes sit on
//! different sides of a ReLU or max-pool switch. Such coordinates are
//! flagged and re-probed with a step ten times smaller.

use crate::crf::PairwiseModel;
use crate::data::Sample;
use crate::error::Result;
use crate::learning::{loss_nll_with, predict, sample_gradients, TrainConfig};
use crate::optim::{ParamGroup, ParamTensor};
use crate::unary::UnaryProvider;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Absolute finite-difference step.
    pub step: f64,
    /// Check every `stride`-th scalar of each tensor.
    pub stride: usize,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            stride: 1,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub group: ParamGroup,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// The probes at `+-step` saw different activation patterns.
    pub kink: bool,
    /// Central difference at `step / 10`, taken when `kink` is set.
    pub numeric_fine: Option<f64>,
}

impl GradCheckRow {
    /// The difference used for the verdict: the fine one across a kink.
    pub fn reference(&self) -> f64 {
        self.numeric_fine.unwrap_or(self.numeric)
    }

    pub fn abs_err(&self) -> f64 {
        (self.analytic - self.reference()).abs()
    }

    /// Error relative to the larger magnitude; zero when both are zero.
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.reference().abs());
        if scale == 0.0 {
            0.0
        } else {
            self.abs_err() / scale
        }
    }

    pub fn passes(&self, opts: &GradCheckOptions) -> bool {
        self.abs_err() <= opts.abs_floor || self.rel_err() <= opts.rel_tol
    }
}

/// Loss of one sample under the training configuration.
pub fn sample_loss<P: UnaryProvider>(
    sample: &Sample,
    provider: &P,
    model: &PairwiseModel,
    cfg: &TrainConfig,
) -> Result<f64> {
    let q = predict(&sample.image, provider, model, cfg)?;
    Ok(loss_nll_with(&q, &sample.labels, cfg.backward.loss)?.value)
}

/// Compares analytic gradients with central differences for every
/// non-buffer parameter, unary tensors first, then the CRF.
pub fn gradcheck<P: UnaryProvider + Clone>(
    sample: &Sample,
    provider: &P,
    model: &PairwiseModel,
    cfg: &TrainConfig,
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheckRow>> {
    let grads = sample_gradients(sample, provider, model, cfg)?;
    let mut rows = Vec::new();
    let unary_params = provider.params();
    for (t, tensor) in unary_params.iter().enumerate() {
        if tensor.group == ParamGroup::Buffer {
            continue;
        }
        for k in (0..tensor.values.len()).step_by(opts.stride.max(1)) {
            let moved = |delta: f64| -> Result<P> {
                let mut p = provider.clone();
                p.set_params(&shifted(&unary_params, t, k, delta))?;
                Ok(p)
            };
            let central = |step: f64| -> Result<(f64, bool)> {
                let (up, down) = (moved(step)?, moved(-step)?);
                let numeric = (sample_loss(sample, &up, model, cfg)?
                    - sample_loss(sample, &down, model, cfg)?)
                    / (2.0 * step);
                let kink = up.activation_pattern(&sample.image)?
                    != down.activation_pattern(&sample.image)?;
                Ok((numeric, kink))
            };
            let (numeric, kink) = central(opts.step)?;
            let mut r = row(tensor, k, grads.unary[t][k], numeric);
            if kink {
                r.kink = true;
                r.numeric_fine = Some(central(opts.step / 10.0)?.0);
            }
            rows.push(r);
        }
    }
    if let Some(bundle) = &grads.crf {
        let crf_params = model.params();
        let analytic = bundle.param_grads();
        for (t, tensor) in crf_params.iter().enumerate() {
            for k in (0..tensor.values.len()).step_by(opts.stride.max(1)) {
                let eval = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    m.set_params(&shifted(&crf_params, t, k, delta))?;
                    sample_loss(sample, provider, &m, cfg)
                };
                let numeric = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
                rows.push(row(tensor, k, analytic[t][k], numeric));
            }
        }
    }
    Ok(rows)
}

fn shifted(params: &[ParamTensor], t: usize, k: usize, delta: f64) -> Vec<ParamTensor> {
    let mut p = params.to_vec();
    p[t].values[k] += delta;
    p
}

fn row(tensor: &ParamTensor, index: usize, analytic: f64, numeric: f64) -> GradCheckRow {
    GradCheckRow {
        group: tensor.group,
        name: tensor.name.clone(),
        index,
        analytic,
        numeric,
        kink: false,
        numeric_fine: None,
    }
}

/// Worst row per parameter group, in first-seen order.
pub fn worst_per_group(rows: &[GradCheckRow]) -> Vec<GradCheckRow> {
    let mut out: Vec<GradCheckRow> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|o| o.group == r.group) {
            Some(o) if r.rel_err() > o.rel_err() => *o = r.clone(),
            Some(_) => {}
            None => out.push(r.clone()),
        }
    }
    out
}
