//! Surrogate loss on mean-field marginals and exact backpropagation through
//! the unrolled parallel updates.
//!
//! With `s^t = u + mu * sum_m w_m (K_m q^{t-1} - q^{t-1})` and
//! `q^t = softmax(s^t)`, one reverse step maps the upstream `dq^t` to
//! `ds = q^t * (dq^t - <dq^t, q^t>)`, accumulates the unary and parameter
//! gradients, and sends `dq^{t-1} = sum_m w_m (K_m r - r)` with
//! `r = mu^T ds`, relying on `K_m` being symmetric.

use rayon::prelude::*;

use crate::crf::{upper_triangle, PairwiseModel};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fields::{softmax_normalize, Field, LabelMap, MarginalField, ScoreField, VOID_LABEL};
use crate::filter::{build_features, FeatureKind, FilterMode, FilterPlan};
use crate::meanfield::{mf_infer, MfConfig, MfTrajectory, UpdateMode};
use crate::optim::{sgd_step, OptimState};
use crate::unary::UnaryProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Mean over non-void pixels.
    Mean,
    /// Sum over non-void pixels.
    Sum,
}

/// How bandwidth gradients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaGrad {
    /// Exact derivative filtering; brute-mode plans only.
    Brute,
    /// Central differences of the whole forward pass, any filter mode.
    FiniteDiff,
    /// Reported as zero.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardOptions {
    pub loss: LossMode,
    pub sigma_grad: SigmaGrad,
    /// Relative step for `SigmaGrad::FiniteDiff`.
    pub fd_step: f64,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            loss: LossMode::Mean,
            sigma_grad: SigmaGrad::Brute,
            fd_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub counted_pixels: usize,
}

/// Gradients of the loss with respect to the unary scores and CRF parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_unary: Field,
    pub d_weights: Vec<f64>,
    /// Per kernel, per feature dimension.
    pub d_sigma: Vec<Vec<f64>>,
    /// For a full compatibility matrix, the gradient with respect to each
    /// upper-triangle entry `a <= b`, row by row; an off-diagonal value is
    /// shared by `mu(a, b)` and `mu(b, a)`.
    pub d_compat: Option<Vec<f64>>,
}

impl GradientBundle {
    /// Gradients aligned with `PairwiseModel::params`.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.d_weights.clone()];
        out.extend(self.d_sigma.iter().cloned());
        if let Some(c) = &self.d_compat {
            out.push(c.clone());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.param_grads().iter().flatten().all(|v| v.is_finite())
            && self.d_unary.data().iter().all(|v| v.is_finite())
    }
}

fn check_labels(q: &MarginalField, gt: &LabelMap) -> Result<()> {
    if q.height() != gt.height() || q.width() != gt.width() {
        return Err(Error::shape(
            format!("{}x{} labels", q.height(), q.width()),
            format!("{}x{}", gt.height(), gt.width()),
        ));
    }
    let l = q.num_labels();
    if let Some(i) = gt
        .labels()
        .iter()
        .position(|&y| y != VOID_LABEL && y as usize >= l)
    {
        return Err(Error::Invalid(format!(
            "label {} at pixel ({}, {}) is outside [0, {l}) and not void",
            gt.labels()[i],
            i % gt.width(),
            i / gt.width()
        )));
    }
    Ok(())
}

fn counted(gt: &LabelMap) -> usize {
    gt.labels().iter().filter(|&&y| y != VOID_LABEL).count()
}

fn normalizer(mode: LossMode, count: usize) -> f64 {
    match mode {
        LossMode::Mean if count > 0 => 1.0 / count as f64,
        _ => 1.0,
    }
}

/// Mean of `-ln q_i(y_i)` over non-void pixels.
pub fn loss_nll(q: &MarginalField, gt: &LabelMap) -> Result<LossReport> {
    loss_nll_with(q, gt, LossMode::Mean)
}

pub fn loss_nll_with(q: &MarginalField, gt: &LabelMap, mode: LossMode) -> Result<LossReport> {
    check_labels(q, gt)?;
    let mut total = 0.0;
    for (i, &y) in gt.labels().iter().enumerate() {
        if y == VOID_LABEL {
            continue;
        }
        let p = q.get(i, y as usize);
        if p == 0.0 {
            return Err(Error::ZeroProbability {
                x: i % gt.width(),
                y: i / gt.width(),
            });
        }
        total -= p.ln();
    }
    let count = counted(gt);
    Ok(LossReport {
        value: total * normalizer(mode, count),
        counted_pixels: count,
    })
}

/// `-1 / (q_i(y_i) * count)` at the ground-truth label, zero elsewhere.
pub fn loss_grad_marginals(q: &MarginalField, gt: &LabelMap) -> Result<Field> {
    loss_grad_marginals_with(q, gt, LossMode::Mean)
}

pub fn loss_grad_marginals_with(q: &MarginalField, gt: &LabelMap, mode: LossMode) -> Result<Field> {
    check_labels(q, gt)?;
    let scale = normalizer(mode, counted(gt));
    let mut out = Field::zeros(q.height(), q.width(), q.num_labels());
    for (i, &y) in gt.labels().iter().enumerate() {
        if y == VOID_LABEL {
            continue;
        }
        let p = q.get(i, y as usize);
        if p == 0.0 {
            return Err(Error::ZeroProbability {
                x: i % gt.width(),
                y: i / gt.width(),
            });
        }
        out.set(i, y as usize, -scale / p);
    }
    Ok(out)
}

/// `q(l) * (upstream(l) - sum_l' upstream(l') q(l'))` for one pixel.
pub fn softmax_backward(q: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mean: f64 = q.iter().zip(upstream).map(|(a, b)| a * b).sum();
    q.iter().zip(upstream).map(|(p, u)| p * (u - mean)).collect()
}

fn softmax_backward_field(q: &MarginalField, upstream: &Field) -> Field {
    let mut out = Field::zeros(q.height(), q.width(), q.num_labels());
    for i in 0..q.num_pixels() {
        out.pixel_mut(i)
            .copy_from_slice(&softmax_backward(q.pixel(i), upstream.pixel(i)));
    }
    out
}

fn check_trajectory(traj: &MfTrajectory, model: &PairwiseModel, plans: &[FilterPlan]) -> Result<()> {
    if traj.update_mode != UpdateMode::Parallel {
        return Err(Error::Invalid(
            "backpropagation needs a trajectory of parallel updates".into(),
        ));
    }
    if traj.responses.len() != traj.iterations()
        || traj.responses.iter().any(|r| r.len() != model.num_kernels())
    {
        return Err(Error::Invalid(
            "trajectory does not match the model's kernel count".into(),
        ));
    }
    model.check_plans(plans, traj.last().field())?;
    traj.last().field().check_same_shape(&traj.unary)
}

/// Gradients of the surrogate loss at `q^T` through every recorded iteration.
pub fn mf_backward(
    traj: &MfTrajectory,
    model: &PairwiseModel,
    plans: &[FilterPlan],
    gt: &LabelMap,
    opts: &BackwardOptions,
) -> Result<GradientBundle> {
    check_trajectory(traj, model, plans)?;
    let m_count = model.num_kernels();
    if opts.sigma_grad == SigmaGrad::Brute {
        if let Some(p) = plans.iter().find(|p| p.mode() != FilterMode::Brute) {
            return Err(Error::UnsupportedMode {
                mode: p.mode().name(),
                what: "exact bandwidth gradients (use finite differences or freeze them)".into(),
            });
        }
    }
    let q_last = traj.last();
    let mut dq = loss_grad_marginals_with(q_last, gt, opts.loss)?;
    let labels = q_last.num_labels();
    let mut d_unary = Field::zeros(q_last.height(), q_last.width(), labels);
    let mut d_weights = vec![0.0; m_count];
    let mut d_sigma: Vec<Vec<f64>> = model
        .kernels()
        .iter()
        .map(|k| vec![0.0; k.spec.dim()])
        .collect();
    let full = model.compat().is_full();
    let mut d_mu = vec![0.0; if full { labels * labels } else { 0 }];

    for t in (1..=traj.iterations()).rev() {
        let q_prev = traj.marginals[t - 1].field();
        let g = &traj.responses[t - 1];
        let ds = softmax_backward_field(&traj.marginals[t], &dq);
        d_unary.add_assign(&ds);
        if full {
            let c = model.combined_message(q_prev, g);
            for i in 0..ds.num_pixels() {
                for (a, &dsa) in ds.pixel(i).iter().enumerate() {
                    for (b, &cb) in c.pixel(i).iter().enumerate() {
                        d_mu[a * labels + b] += dsa * cb;
                    }
                }
            }
        }
        let r = model.compat().mix(&ds, true);
        let mut next = Field::zeros(r.height(), r.width(), labels);
        for (m, (entry, plan)) in model.kernels().iter().zip(plans).enumerate() {
            let mut corr = 0.0;
            for ((&rv, &gv), &qv) in r.data().iter().zip(g[m].data()).zip(q_prev.data()) {
                corr += rv * (gv - qv);
            }
            d_weights[m] += corr;
            if opts.sigma_grad == SigmaGrad::Brute && entry.weight != 0.0 {
                let c = plan.contract_grad_sigma(&r, q_prev)?;
                for (acc, v) in d_sigma[m].iter_mut().zip(c) {
                    *acc += entry.weight * v;
                }
            }
            if entry.weight != 0.0 {
                let kr = plan.apply(&r)?;
                let w = entry.weight;
                for ((n, &kv), &rv) in next.data_mut().iter_mut().zip(kr.data()).zip(r.data()) {
                    *n += w * (kv - rv);
                }
            }
        }
        dq = next;
    }
    d_unary.add_assign(&softmax_backward_field(&traj.marginals[0], &dq));

    if opts.sigma_grad == SigmaGrad::FiniteDiff {
        d_sigma = sigma_finite_differences(traj, model, plans, gt, opts)?;
    }
    let d_compat = full.then(|| {
        for a in 0..labels {
            for b in a + 1..labels {
                d_mu[a * labels + b] += d_mu[b * labels + a];
            }
        }
        upper_triangle(&d_mu, labels)
    });
    Ok(GradientBundle {
        d_unary,
        d_weights,
        d_sigma,
        d_compat,
    })
}

fn sigma_finite_differences(
    traj: &MfTrajectory,
    model: &PairwiseModel,
    plans: &[FilterPlan],
    gt: &LabelMap,
    opts: &BackwardOptions,
) -> Result<Vec<Vec<f64>>> {
    let cfg = MfConfig::new(
        traj.iterations(),
        UpdateMode::Parallel,
        plans.first().map_or(FilterMode::Brute, |p| p.mode()),
    )?;
    let mut out = Vec::with_capacity(model.num_kernels());
    for m in 0..model.num_kernels() {
        let sigma = model.kernels()[m].spec.sigma().to_vec();
        let mut grads = vec![0.0; sigma.len()];
        for d in 0..sigma.len() {
            let h = opts.fd_step * sigma[d];
            let eval = |delta: f64| -> Result<f64> {
                let mut s = sigma.clone();
                s[d] += delta;
                let mut moved = model.clone();
                moved.set_sigma(m, s.clone())?;
                let mut moved_plans = plans.to_vec();
                moved_plans[m] = plans[m].with_sigma(s)?;
                let t = mf_infer(&traj.unary, &moved, &moved_plans, &cfg)?;
                Ok(loss_nll_with(t.last(), gt, opts.loss)?.value)
            };
            grads[d] = (eval(h)? - eval(-h)?) / (2.0 * h);
        }
        out.push(grads);
    }
    Ok(out)
}

/// Settings for one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mf: MfConfig,
    /// When false the CRF is skipped entirely and only the unary is trained.
    pub crf_enabled: bool,
    pub backward: BackwardOptions,
}

/// Loss and gradients for one sample.
#[derive(Debug, Clone)]
pub struct SampleGradients {
    pub loss: LossReport,
    /// Aligned with the provider's `params()`.
    pub unary: Vec<Vec<f64>>,
    /// Present when the CRF ran.
    pub crf: Option<GradientBundle>,
}

/// Marginals the model predicts for an image (`q^T`, or the unary softmax
/// when the CRF is disabled).
pub fn predict<P: UnaryProvider>(
    image: &crate::image::RgbImage,
    provider: &P,
    model: &PairwiseModel,
    cfg: &TrainConfig,
) -> Result<MarginalField> {
    let (scores, _) = provider.forward(image)?;
    if !cfg.crf_enabled || model.num_kernels() == 0 {
        return softmax_normalize(&scores);
    }
    let feats = build_features(image, FeatureKind::Bilateral)?;
    let plans = model.build_plans(&feats, cfg.mf.filter_mode)?;
    Ok(mf_infer(&scores, model, &plans, &cfg.mf)?.last().clone())
}

/// Forward and backward pass for one sample.
pub fn sample_gradients<P: UnaryProvider>(
    sample: &Sample,
    provider: &P,
    model: &PairwiseModel,
    cfg: &TrainConfig,
) -> Result<SampleGradients> {
    let (scores, cache) = provider.forward(&sample.image)?;
    let (loss, d_unary, crf) = if cfg.crf_enabled && model.num_kernels() > 0 {
        let feats = build_features(&sample.image, FeatureKind::Bilateral)?;
        let plans = model.build_plans(&feats, cfg.mf.filter_mode)?;
        let traj = mf_infer(&scores, model, &plans, &cfg.mf)?;
        let loss = loss_nll_with(traj.last(), &sample.labels, cfg.backward.loss)?;
        let bundle = mf_backward(&traj, model, &plans, &sample.labels, &cfg.backward)?;
        (loss, bundle.d_unary.clone(), Some(bundle))
    } else {
        let q = softmax_normalize(&scores)?;
        let loss = loss_nll_with(&q, &sample.labels, cfg.backward.loss)?;
        let dq = loss_grad_marginals_with(&q, &sample.labels, cfg.backward.loss)?;
        (loss, softmax_backward_field(&q, &dq), None)
    };
    let unary = provider.backward(cache, &d_unary)?;
    Ok(SampleGradients { loss, unary, crf })
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Mean over samples of the per-sample loss.
    pub loss: f64,
    pub counted_pixels: usize,
    /// Set when the update was skipped, with the reason.
    pub skipped: Option<String>,
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::ZeroProbability { .. })
}

/// Forward, backward and one optimizer update over a mini-batch.
///
/// Samples are processed concurrently; gradients are summed in batch order
/// and divided by the batch size, so results do not depend on the thread count.
pub fn train_step<P>(
    batch: &[Sample],
    provider: &mut P,
    model: &mut PairwiseModel,
    optimizer: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<StepReport>
where
    P: UnaryProvider + Sync,
{
    if batch.is_empty() {
        return Err(Error::Invalid("empty mini-batch".into()));
    }
    let results: Vec<Result<SampleGradients>> = {
        let provider = &*provider;
        let model = &*model;
        batch
            .par_iter()
            .map(|s| sample_gradients(s, provider, model, cfg))
            .collect()
    };
    let mut per_sample = Vec::with_capacity(batch.len());
    for r in results {
        match r {
            Ok(g) => per_sample.push(g),
            Err(e) if is_numeric_failure(&e) => {
                return Ok(StepReport {
                    loss: f64::NAN,
                    counted_pixels: 0,
                    skipped: Some(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        }
    }
    let b = batch.len() as f64;
    let loss = per_sample.iter().map(|g| g.loss.value).sum::<f64>() / b;
    let counted_pixels = per_sample.iter().map(|g| g.loss.counted_pixels).sum();

    let mut params = provider.params();
    let mut grads = sum_grads(per_sample.iter().map(|g| g.unary.clone()), b);
    let use_crf = cfg.crf_enabled && model.num_kernels() > 0;
    let crf_count = if use_crf {
        let crf_params = model.params();
        let crf_grads = sum_grads(
            per_sample
                .iter()
                .map(|g| g.crf.as_ref().expect("crf ran").param_grads()),
            b,
        );
        let n = crf_params.len();
        params.extend(crf_params);
        grads.extend(crf_grads);
        n
    } else {
        0
    };
    if let Err(e) = sgd_step(&mut params, &grads, optimizer) {
        return Ok(StepReport {
            loss,
            counted_pixels,
            skipped: Some(e.to_string()),
        });
    }
    let split = params.len() - crf_count;
    if use_crf {
        model.set_params(&params[split..])?;
    }
    provider.set_params(&params[..split])?;
    Ok(StepReport {
        loss,
        counted_pixels,
        skipped: None,
    })
}

fn sum_grads(items: impl Iterator<Item = Vec<Vec<f64>>>, count: f64) -> Vec<Vec<f64>> {
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for g in items {
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    for (p, q) in x.iter_mut().zip(y) {
                        *p += q;
                    }
                }
            }
        }
    }
    let mut acc = acc.unwrap_or_default();
    for v in acc.iter_mut().flatten() {
        *v /= count;
    }
    acc
}

/// Scores produced without any pairwise terms (used by the unary stage).
pub fn unary_scores<P: UnaryProvider>(provider: &P, image: &crate::image::RgbImage) -> Result<ScoreField> {
    Ok(provider.forward(image)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::{Compatibility, KernelEntry};
    use crate::filter::KernelSpec;
    use crate::image::RgbImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field_q(rows: &[f64], l: usize) -> MarginalField {
        MarginalField::new(Field::from_vec(1, rows.len() / l, l, rows.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let gt = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let q = field_q(&[1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(loss_nll(&q, &gt).unwrap().value, 0.0);
        let u = MarginalField::uniform(1, 2, 4);
        assert!((loss_nll(&u, &gt).unwrap().value - 4f64.ln()).abs() < 1e-15);
        let void = LabelMap::filled(1, 2, VOID_LABEL);
        assert_eq!(
            loss_nll(&u, &void).unwrap(),
            LossReport { value: 0.0, counted_pixels: 0 }
        );
        let sum = loss_nll_with(&u, &gt, LossMode::Sum).unwrap();
        assert!((sum.value - 2.0 * 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_names_the_pixel() {
        let gt = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let q = field_q(&[1.0, 0.0, 0.0, 1.0], 2);
        match loss_nll(&q, &gt) {
            Err(Error::ZeroProbability { x, y }) => assert_eq!((x, y), (1, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loss_gradient_examples() {
        let gt = LabelMap::new(1, 1, vec![1]).unwrap();
        let q = field_q(&[0.5, 0.5], 2);
        assert_eq!(loss_grad_marginals(&q, &gt).unwrap().data(), &[0.0, -2.0]);
        let gt2 = LabelMap::new(1, 2, vec![VOID_LABEL, 0]).unwrap();
        let q2 = field_q(&[0.3, 0.7, 1.0, 0.0], 2);
        assert_eq!(loss_grad_marginals(&q2, &gt2).unwrap().data(), &[0.0, 0.0, -1.0, 0.0]);
        let gt3 = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let q3 = field_q(&[1.0, 0.0, 1.0, 0.0], 2);
        assert_eq!(loss_grad_marginals(&q3, &gt3).unwrap().data(), &[-0.5, 0.0, -0.5, 0.0]);
    }

    #[test]
    fn softmax_backward_examples() {
        let q = [0.2, 0.3, 0.5];
        assert!(softmax_backward(&q, &[4.0, 4.0, 4.0]).iter().all(|v| v.abs() < 1e-15));
        assert!(softmax_backward(&[0.0, 1.0, 0.0], &[1.0, -2.0, 3.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..10 {
            let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let up: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |s: &[f64]| {
                let q = softmax_normalize(&Field::from_vec(1, 1, 5, s.to_vec()).unwrap()).unwrap();
                q.field().data().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
            };
            let q = softmax_normalize(&Field::from_vec(1, 1, 5, s.clone()).unwrap()).unwrap();
            let a = softmax_backward(q.pixel(0), &up);
            for k in 0..5 {
                let (mut p, mut m) = (s.clone(), s.clone());
                p[k] += 1e-6;
                m[k] -= 1e-6;
                let n = (f(&p) - f(&m)) / 2e-6;
                assert!((a[k] - n).abs() <= 1e-8 * a[k].abs().max(n.abs()).max(1e-2));
            }
        }
    }

    fn small_problem(
        rng: &mut ChaCha8Rng,
        weights: [f64; 2],
    ) -> (ScoreField, PairwiseModel, Vec<FilterPlan>, LabelMap) {
        let (h, w, l) = (4, 4, 3);
        let img = RgbImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let feats = build_features(&img, FeatureKind::Bilateral).unwrap();
        let model = PairwiseModel::new(
            vec![
                KernelEntry { spec: KernelSpec::spatial(1.5).unwrap(), weight: weights[0] },
                KernelEntry { spec: KernelSpec::bilateral(2.0, 70.0).unwrap(), weight: weights[1] },
            ],
            Compatibility::Potts,
        )
        .unwrap();
        let plans = model.build_plans(&feats, FilterMode::Brute).unwrap();
        let unary = Field::from_fn(h, w, l, |_, _| rng.gen_range(-1.0..1.0));
        let labels = (0..h * w)
            .map(|i| if i % 7 == 3 { VOID_LABEL } else { rng.gen_range(0..l as u8) })
            .collect();
        (unary, model, plans, LabelMap::new(h, w, labels).unwrap())
    }

    #[test]
    fn zero_weights_give_softmax_regression_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let (unary, model, plans, gt) = small_problem(&mut rng, [0.0, 0.0]);
        let cfg = MfConfig::new(3, UpdateMode::Parallel, FilterMode::Brute).unwrap();
        let traj = mf_infer(&unary, &model, &plans, &cfg).unwrap();
        let g = mf_backward(&traj, &model, &plans, &gt, &BackwardOptions::default()).unwrap();
        let q = softmax_normalize(&unary).unwrap();
        let count = counted(&gt) as f64;
        for i in 0..16 {
            for l in 0..3 {
                let y = gt.labels()[i];
                let expect = if y == VOID_LABEL {
                    0.0
                } else {
                    (q.get(i, l) - if y as usize == l { 1.0 } else { 0.0 }) / count
                };
                assert!((g.d_unary.get(i, l) - expect).abs() < 1e-14);
            }
        }
        assert!(g.d_sigma.iter().flatten().all(|&v| v == 0.0));
        assert!(g.d_weights.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn all_void_gives_zero_bundle() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let (unary, model, plans, _) = small_problem(&mut rng, [0.5, 1.0]);
        let gt = LabelMap::filled(4, 4, VOID_LABEL);
        let cfg = MfConfig::new(2, UpdateMode::Parallel, FilterMode::Brute).unwrap();
        let traj = mf_infer(&unary, &model, &plans, &cfg).unwrap();
        let g = mf_backward(&traj, &model, &plans, &gt, &BackwardOptions::default()).unwrap();
        assert!(g.d_unary.data().iter().all(|&v| v == 0.0));
        assert!(g.param_grads().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let (unary, model, plans, gt) = small_problem(&mut rng, [0.8, -1.2]);
        let cfg = MfConfig::new(3, UpdateMode::Parallel, FilterMode::Brute).unwrap();
        let loss_at = |u: &ScoreField, m: &PairwiseModel| {
            let feats = plans[1].features();
            let p = m.build_plans(feats, FilterMode::Brute).unwrap();
            let t = mf_infer(u, m, &p, &cfg).unwrap();
            loss_nll(t.last(), &gt).unwrap().value
        };
        let traj = mf_infer(&unary, &model, &plans, &cfg).unwrap();
        let g = mf_backward(&traj, &model, &plans, &gt, &BackwardOptions::default()).unwrap();
        let h = 1e-5;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-7 || (a - n).abs() <= 1e-4 * a.abs().max(n.abs());
        for k in 0..unary.data().len() {
            let (mut p, mut m) = (unary.clone(), unary.clone());
            p.data_mut()[k] += h;
            m.data_mut()[k] -= h;
            let n = (loss_at(&p, &model) - loss_at(&m, &model)) / (2.0 * h);
            assert!(close(g.d_unary.data()[k], n), "unary {k}");
        }
        let base = model.params();
        let analytic = g.param_grads();
        for (t, tensor) in base.iter().enumerate() {
            for k in 0..tensor.values.len() {
                let eval = |d: f64| {
                    let mut p = base.clone();
                    p[t].values[k] += d;
                    let mut mm = model.clone();
                    mm.set_params(&p).unwrap();
                    loss_at(&unary, &mm)
                };
                let n = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(close(analytic[t][k], n), "{} [{k}]: {} vs {n}", tensor.name, analytic[t][k]);
            }
        }
    }

    #[test]
    fn lattice_plans_need_finite_difference_or_frozen_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let (unary, model, plans, gt) = small_problem(&mut rng, [0.8, 1.2]);
        let lattice = model.build_plans(plans[1].features(), FilterMode::Lattice).unwrap();
        let cfg = MfConfig::new(2, UpdateMode::Parallel, FilterMode::Lattice).unwrap();
        let traj = mf_infer(&unary, &model, &lattice, &cfg).unwrap();
        let brute = BackwardOptions::default();
        assert!(matches!(
            mf_backward(&traj, &model, &lattice, &gt, &brute),
            Err(Error::UnsupportedMode { .. })
        ));
        let frozen = BackwardOptions { sigma_grad: SigmaGrad::Frozen, ..brute };
        let g = mf_backward(&traj, &model, &lattice, &gt, &frozen).unwrap();
        assert!(g.d_sigma.iter().flatten().all(|&v| v == 0.0));
        let fd = BackwardOptions { sigma_grad: SigmaGrad::FiniteDiff, ..brute };
        let g = mf_backward(&traj, &model, &lattice, &gt, &fd).unwrap();
        assert!(g.d_sigma.iter().flatten().all(|v| v.is_finite()));
        assert!(g.d_sigma.iter().flatten().any(|&v| v != 0.0));
    }

    #[test]
    fn finite_difference_sigma_tracks_exact_gradient_on_brute_plans() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let (unary, model, plans, gt) = small_problem(&mut rng, [0.8, 1.2]);
        let cfg = MfConfig::new(2, UpdateMode::Parallel, FilterMode::Brute).unwrap();
        let traj = mf_infer(&unary, &model, &plans, &cfg).unwrap();
        let exact = mf_backward(&traj, &model, &plans, &gt, &BackwardOptions::default()).unwrap();
        let opts = BackwardOptions { sigma_grad: SigmaGrad::FiniteDiff, ..Default::default() };
        let fd = mf_backward(&traj, &model, &plans, &gt, &opts).unwrap();
        for (a, b) in exact.d_sigma.iter().flatten().zip(fd.d_sigma.iter().flatten()) {
            assert!((a - b).abs() <= 1e-6 + 1e-4 * a.abs());
        }
    }

    #[test]
    fn sequential_trajectories_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (unary, model, plans, gt) = small_problem(&mut rng, [0.8, 1.2]);
        let cfg = MfConfig::new(2, UpdateMode::Sequential, FilterMode::Brute).unwrap();
        let traj = mf_infer(&unary, &model, &plans, &cfg).unwrap();
        assert!(mf_backward(&traj, &model, &plans, &gt, &BackwardOptions::default()).is_err());
    }
}
