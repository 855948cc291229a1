//! Mean-field inference for the dense model.
//!
//! The closed-form block update is
//! `q_i(l) ∝ exp(u_i(l) + sum_{j != i} sum_l' f_ij(l, l') q_j(l'))`.
//! Parallel steps apply it to every pixel from the same iterate, computing
//! the neighbor sums by filtering; sequential steps visit pixels one at a
//! time with exact scalar sums and are used for diagnostics.

use crate::crf::{check_scalar_size, Compatibility, PairwiseModel};
use crate::error::{Error, Result};
use crate::fields::{softmax_normalize, softmax_row, Field, MarginalField, ScoreField};
use crate::filter::{FeatureField, FilterMode, FilterPlan};

/// Probabilities are floored here before taking logs in diagnostics.
pub const LOG_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MfConfig {
    pub iterations: usize,
    pub update_mode: UpdateMode,
    pub filter_mode: FilterMode,
}

impl MfConfig {
    pub fn new(iterations: usize, update_mode: UpdateMode, filter_mode: FilterMode) -> Result<Self> {
        let cfg = MfConfig {
            iterations,
            update_mode,
            filter_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every combination is valid; zero iterations leave `q^0`.
    pub fn validate(&self) -> Result<()> {
        Ok(())
    }
}

/// Everything the backward pass needs from one inference run.
#[derive(Debug, Clone)]
pub struct MfTrajectory {
    /// `q^0 ... q^T`.
    pub marginals: Vec<MarginalField>,
    /// `responses[t - 1][m] = K_m q^{t-1}` for parallel runs; empty for sequential ones.
    pub responses: Vec<Vec<Field>>,
    pub unary: ScoreField,
    pub update_mode: UpdateMode,
}

impl MfTrajectory {
    pub fn iterations(&self) -> usize {
        self.marginals.len() - 1
    }

    pub fn last(&self) -> &MarginalField {
        self.marginals.last().expect("trajectory holds q^0")
    }
}

/// `q^0 = softmax(unary)`.
pub fn mf_init(unary: &ScoreField) -> Result<MarginalField> {
    softmax_normalize(unary)
}

fn check_unary(q: &MarginalField, unary: &ScoreField) -> Result<()> {
    q.field().check_same_shape(unary)
}

/// `softmax(unary + mu * sum_m w_m (g_m - q))` for given filter responses.
fn update_from_responses(
    q: &Field,
    unary: &ScoreField,
    model: &PairwiseModel,
    responses: &[Field],
) -> Result<MarginalField> {
    let combined = model.combined_message(q, responses);
    let mut s = model.compat().mix(&combined, false);
    s.add_assign(unary);
    softmax_normalize(&s)
}

/// One Jacobi step over all pixels.
pub fn mf_step_parallel(
    q: &MarginalField,
    unary: &ScoreField,
    model: &PairwiseModel,
    plans: &[FilterPlan],
) -> Result<MarginalField> {
    check_unary(q, unary)?;
    model.check_plans(plans, q.field())?;
    let g = model.responses(q.field(), plans)?;
    update_from_responses(q.field(), unary, model, &g)
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(Error::Invalid(format!(
            "update order has {} entries for {n} pixels",
            order.len()
        )));
    }
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Invalid("update order is not a permutation".into()));
        }
    }
    Ok(())
}

/// In-place sweep given the mixture kernel `kappa(i, j) = sum_m w_m k_m(i, j)`.
fn sweep(
    q: &mut Field,
    unary: &ScoreField,
    compat: &Compatibility,
    kappa: &dyn Fn(usize, usize) -> f64,
    order: &[usize],
) -> Result<()> {
    let n = q.num_pixels();
    let labels = q.channels();
    let mut acc = vec![0.0; labels];
    let mut s = vec![0.0; labels];
    for &i in order {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for j in 0..n {
            if j == i {
                continue;
            }
            let k = kappa(i, j);
            for (a, &qj) in acc.iter_mut().zip(q.pixel(j)) {
                *a += k * qj;
            }
        }
        for l in 0..labels {
            let mut m = 0.0;
            for (l2, &a) in acc.iter().enumerate() {
                m += compat.value(l, l2) * a;
            }
            s[l] = unary.get(i, l) + m;
        }
        if let Some(l) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                x: i % q.width(),
                y: i / q.width(),
                label: l,
                value: s[l],
            });
        }
        softmax_row(&mut s);
        q.pixel_mut(i).copy_from_slice(&s);
    }
    Ok(())
}

/// One Gauss-Seidel sweep in the given pixel order, exact pairwise sums.
pub fn mf_step_sequential(
    q: &MarginalField,
    unary: &ScoreField,
    model: &PairwiseModel,
    feats: &FeatureField,
    order: &[usize],
) -> Result<MarginalField> {
    check_unary(q, unary)?;
    let n = q.num_pixels();
    check_scalar_size(n)?;
    check_order(order, n)?;
    if feats.num_pixels() != n {
        return Err(Error::shape(format!("{n} feature rows"), feats.num_pixels()));
    }
    let kappa = kappa_matrix(n, |i, j| model.mixture(feats.pixel(i), feats.pixel(j)))?;
    let mut out = q.field().clone();
    sweep(&mut out, unary, model.compat(), &|i, j| kappa[i * n + j], order)?;
    Ok(MarginalField::from_field_unchecked(out))
}

fn kappa_matrix(n: usize, f: impl Fn(usize, usize) -> Result<f64>) -> Result<Vec<f64>> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = f(i, j)?;
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    Ok(k)
}

/// Runs `cfg.iterations` steps from `mf_init(unary)`, recording the trajectory.
pub fn mf_infer(
    unary: &ScoreField,
    model: &PairwiseModel,
    plans: &[FilterPlan],
    cfg: &MfConfig,
) -> Result<MfTrajectory> {
    cfg.validate()?;
    let q0 = mf_init(unary)?;
    model.check_plans(plans, q0.field())?;
    let mut marginals = Vec::with_capacity(cfg.iterations + 1);
    let mut responses = Vec::new();
    marginals.push(q0);
    match cfg.update_mode {
        UpdateMode::Parallel => {
            for _ in 0..cfg.iterations {
                let q = marginals.last().expect("nonempty").field();
                let g = model.responses(q, plans)?;
                let next = update_from_responses(q, unary, model, &g)?;
                responses.push(g);
                marginals.push(next);
            }
        }
        UpdateMode::Sequential => {
            let n = unary.num_pixels();
            check_scalar_size(n)?;
            let kappa = kappa_matrix(n, |i, j| {
                Ok(model
                    .kernels()
                    .iter()
                    .zip(plans)
                    .map(|(k, p)| k.weight * p.kernel(i, j))
                    .sum())
            })?;
            let order: Vec<usize> = (0..n).collect();
            for _ in 0..cfg.iterations {
                let mut q = marginals.last().expect("nonempty").field().clone();
                sweep(&mut q, unary, model.compat(), &|i, j| kappa[i * n + j], &order)?;
                marginals.push(MarginalField::from_field_unchecked(q));
            }
        }
    }
    Ok(MfTrajectory {
        marginals,
        responses,
        unary: unary.clone(),
        update_mode: cfg.update_mode,
    })
}

/// `-E_q[F] - H(q)`, which equals `KL(q || p) - log Z`.
pub fn variational_objective(
    q: &MarginalField,
    unary: &ScoreField,
    model: &PairwiseModel,
    feats: &FeatureField,
) -> Result<f64> {
    check_unary(q, unary)?;
    let pair = crate::crf::expected_pairwise_score(q, model, feats)?;
    let mut unary_term = 0.0;
    let mut neg_entropy = 0.0;
    for (&p, &u) in q.field().data().iter().zip(unary.data()) {
        unary_term += p * u;
        if p > 0.0 {
            neg_entropy += p * p.max(LOG_FLOOR).ln();
        }
    }
    Ok(-unary_term - pair + neg_entropy)
}
