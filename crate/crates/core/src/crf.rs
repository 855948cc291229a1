//! The dense pairwise model: a weighted mixture of Gaussian kernels scaled
//! by a label compatibility, `f_ij(l, l') = mu(l, l') sum_m w_m k_m(f_i, f_j)`.
//!
//! Scores are maximized, so a positive weight under Potts compatibility
//! rewards neighboring pixels that agree.

use crate::error::{Error, Result};
use crate::fields::{Field, MarginalField};
use crate::filter::{kernel_value, FeatureField, FilterMode, FilterPlan, KernelSpec};
use crate::optim::{ParamGroup, ParamTensor};

/// Largest instance accepted by the O(N^2) scalar routines.
pub const SCALAR_MAX_PIXELS: usize = 4096;

pub const WEIGHT_PARAM: &str = "crf.weight";
pub const SIGMA_PARAM: &str = "crf.sigma";
pub const COMPAT_PARAM: &str = "crf.compat";

/// `1` when the labels agree, else `0`.
#[inline]
pub fn potts(l: usize, l2: usize) -> f64 {
    if l == l2 {
        1.0
    } else {
        0.0
    }
}

/// Label compatibility `mu(l, l')`, shared by every kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum Compatibility {
    Potts,
    /// Symmetric `labels x labels` matrix, row-major.
    Full { labels: usize, matrix: Vec<f64> },
}

impl Compatibility {
    /// A full matrix; rejects asymmetric or non-finite input.
    pub fn full(labels: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != labels * labels {
            return Err(Error::shape(
                format!("{labels}x{labels} compatibility"),
                format!("{} values", matrix.len()),
            ));
        }
        for a in 0..labels {
            for b in 0..labels {
                let v = matrix[a * labels + b];
                if !v.is_finite() {
                    return Err(Error::Invalid(format!("compatibility ({a}, {b}) is {v}")));
                }
                if v != matrix[b * labels + a] {
                    return Err(Error::Invalid(format!(
                        "compatibility matrix is not symmetric at ({a}, {b})"
                    )));
                }
            }
        }
        Ok(Compatibility::Full { labels, matrix })
    }

    /// `scale * I` as a full matrix.
    pub fn scaled_identity(labels: usize, scale: f64) -> Self {
        let mut matrix = vec![0.0; labels * labels];
        for l in 0..labels {
            matrix[l * labels + l] = scale;
        }
        Compatibility::Full { labels, matrix }
    }

    #[inline]
    pub fn value(&self, l: usize, l2: usize) -> f64 {
        match self {
            Compatibility::Potts => potts(l, l2),
            Compatibility::Full { labels, matrix } => matrix[l * labels + l2],
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Compatibility::Full { .. })
    }

    pub fn check_labels(&self, num_labels: usize) -> Result<()> {
        match self {
            Compatibility::Full { labels, .. } if *labels != num_labels => Err(Error::shape(
                format!("{num_labels}x{num_labels} compatibility"),
                format!("{labels}x{labels}"),
            )),
            _ => Ok(()),
        }
    }

    /// `out_i(l) = sum_l' mu(l, l') v_i(l')`, or `mu^T` when `transpose`.
    pub(crate) fn mix(&self, v: &Field, transpose: bool) -> Field {
        match self {
            Compatibility::Potts => v.clone(),
            Compatibility::Full { labels, matrix } => {
                let c = *labels;
                let mut out = Field::zeros(v.height(), v.width(), c);
                for i in 0..v.num_pixels() {
                    let src = v.pixel(i);
                    let dst = out.pixel_mut(i);
                    for (l, d) in dst.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for (l2, &x) in src.iter().enumerate() {
                            let mu = if transpose {
                                matrix[l2 * c + l]
                            } else {
                                matrix[l * c + l2]
                            };
                            s += mu * x;
                        }
                        *d = s;
                    }
                }
                out
            }
        }
    }
}

/// One mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelEntry {
    pub spec: KernelSpec,
    pub weight: f64,
}

/// Kernel mixture plus shared compatibility.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseModel {
    kernels: Vec<KernelEntry>,
    compat: Compatibility,
}

impl PairwiseModel {
    pub fn new(kernels: Vec<KernelEntry>, compat: Compatibility) -> Result<Self> {
        if let Some(k) = kernels.iter().find(|k| !k.weight.is_finite()) {
            return Err(Error::Invalid(format!("kernel weight {} is not finite", k.weight)));
        }
        Ok(PairwiseModel { kernels, compat })
    }

    /// A model with no pairwise terms.
    pub fn empty() -> Self {
        PairwiseModel {
            kernels: Vec::new(),
            compat: Compatibility::Potts,
        }
    }

    pub fn num_kernels(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernels(&self) -> &[KernelEntry] {
        &self.kernels
    }

    pub fn weights(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.weight).collect()
    }

    pub fn set_weight(&mut self, m: usize, w: f64) {
        self.kernels[m].weight = w;
    }

    pub fn set_sigma(&mut self, m: usize, sigma: Vec<f64>) -> Result<()> {
        self.kernels[m].spec.set_sigma(sigma)
    }

    pub fn compat(&self) -> &Compatibility {
        &self.compat
    }

    pub fn set_compat(&mut self, compat: Compatibility) {
        self.compat = compat;
    }

    /// Mutable access to the full compatibility matrix, if any.
    pub fn compat_matrix_mut(&mut self) -> Option<&mut Vec<f64>> {
        match &mut self.compat {
            Compatibility::Full { matrix, .. } => Some(matrix),
            Compatibility::Potts => None,
        }
    }

    /// Learnable arrays: `crf.weight`, one `crf.sigma.<m>` per kernel and,
    /// for a full matrix, `crf.compat` holding the upper triangle `a <= b`
    /// row by row (each off-diagonal value sets both mirror entries).
    pub fn params(&self) -> Vec<ParamTensor> {
        let mut out = vec![ParamTensor::new(WEIGHT_PARAM, ParamGroup::CrfWeight, self.weights())];
        for (m, k) in self.kernels.iter().enumerate() {
            out.push(ParamTensor::new(
                format!("{SIGMA_PARAM}.{m}"),
                ParamGroup::CrfSigma,
                k.spec.sigma().to_vec(),
            ));
        }
        if let Compatibility::Full { matrix, .. } = &self.compat {
            let labels = self.num_labels_hint();
            out.push(ParamTensor::new(
                COMPAT_PARAM,
                ParamGroup::CrfCompat,
                upper_triangle(matrix, labels),
            ));
        }
        out
    }

    /// Inverse of `params`; validates layout, bandwidths and symmetry.
    pub fn set_params(&mut self, params: &[ParamTensor]) -> Result<()> {
        let mut current = self.params();
        crate::unary::assign_params(&mut current, params)?;
        let mut next = self.clone();
        let mut it = current.into_iter();
        let weights = it.next().expect("weights").values;
        for (m, w) in weights.into_iter().enumerate() {
            next.kernels[m].weight = w;
        }
        for m in 0..next.kernels.len() {
            next.kernels[m].spec.set_sigma(it.next().expect("sigma").values)?;
        }
        if let Some(t) = it.next() {
            let labels = self.num_labels_hint();
            next.compat = Compatibility::full(labels, from_upper_triangle(&t.values, labels))?;
        }
        *self = next;
        Ok(())
    }

    fn num_labels_hint(&self) -> usize {
        match &self.compat {
            Compatibility::Full { labels, .. } => *labels,
            Compatibility::Potts => 0,
        }
    }

    /// Every weight zero (or no kernels).
    pub fn is_inactive(&self) -> bool {
        self.kernels.iter().all(|k| k.weight == 0.0)
    }

    /// One filter plan per kernel over the given features.
    pub fn build_plans(&self, feats: &FeatureField, mode: FilterMode) -> Result<Vec<FilterPlan>> {
        self.kernels
            .iter()
            .map(|k| FilterPlan::new(feats, &k.spec, mode))
            .collect()
    }

    /// `sum_m w_m k_m(f_i, f_j)`, where each kernel reads a prefix of the features.
    pub fn mixture(&self, fi: &[f64], fj: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for k in &self.kernels {
            let d = k.spec.dim();
            if fi.len() < d || fj.len() < d {
                return Err(Error::shape(format!("{d} feature dimensions"), fi.len().min(fj.len())));
            }
            s += k.weight * kernel_value(&fi[..d], &fj[..d], &k.spec)?;
        }
        Ok(s)
    }

    pub(crate) fn check_plans(&self, plans: &[FilterPlan], q: &Field) -> Result<()> {
        if plans.len() != self.kernels.len() {
            return Err(Error::shape(
                format!("{} filter plans", self.kernels.len()),
                plans.len(),
            ));
        }
        for (p, k) in plans.iter().zip(&self.kernels) {
            if p.spec() != &k.spec {
                return Err(Error::Invalid(
                    "filter plan was built for a different kernel".into(),
                ));
            }
            if p.height() != q.height() || p.width() != q.width() {
                return Err(Error::shape(
                    format!("{}x{} grid", q.height(), q.width()),
                    format!("{}x{} plan", p.height(), p.width()),
                ));
            }
        }
        self.compat.check_labels(q.channels())
    }

    /// Per-kernel filter responses `K_m q`.
    pub(crate) fn responses(&self, q: &Field, plans: &[FilterPlan]) -> Result<Vec<Field>> {
        plans.iter().map(|p| p.apply(q)).collect()
    }

    /// `sum_m w_m (g_m - q)`: the self-excluded weighted message before mixing labels.
    pub(crate) fn combined_message(&self, q: &Field, responses: &[Field]) -> Field {
        let mut out = Field::zeros(q.height(), q.width(), q.channels());
        for (k, g) in self.kernels.iter().zip(responses) {
            let w = k.weight;
            for ((o, &gv), &qv) in out.data_mut().iter_mut().zip(g.data()).zip(q.data()) {
                *o += w * (gv - qv);
            }
        }
        out
    }
}

pub(crate) fn upper_triangle(matrix: &[f64], labels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(labels * (labels + 1) / 2);
    for a in 0..labels {
        out.extend_from_slice(&matrix[a * labels + a..(a + 1) * labels]);
    }
    out
}

fn from_upper_triangle(values: &[f64], labels: usize) -> Vec<f64> {
    let mut matrix = vec![0.0; labels * labels];
    let mut it = values.iter();
    for a in 0..labels {
        for b in a..labels {
            let v = *it.next().expect("triangle length checked by assign_params");
            matrix[a * labels + b] = v;
            matrix[b * labels + a] = v;
        }
    }
    matrix
}

/// `mu(l, l2) sum_m w_m k_m(fi, fj)`.
pub fn pairwise_value(
    l: usize,
    l2: usize,
    fi: &[f64],
    fj: &[f64],
    model: &PairwiseModel,
) -> Result<f64> {
    let mu = model.compat.value(l, l2);
    if mu == 0.0 {
        return Ok(0.0);
    }
    Ok(mu * model.mixture(fi, fj)?)
}

/// `p_i(l) = sum_m w_m sum_l' mu(l, l') ([K_m q]_i(l') - q_i(l'))`.
pub fn pairwise_message(
    q: &MarginalField,
    model: &PairwiseModel,
    plans: &[FilterPlan],
) -> Result<Field> {
    let q = q.field();
    model.check_plans(plans, q)?;
    let g = model.responses(q, plans)?;
    let c = model.combined_message(q, &g);
    Ok(model.compat.mix(&c, false))
}

pub(crate) fn check_scalar_size(n: usize) -> Result<()> {
    if n > SCALAR_MAX_PIXELS {
        return Err(Error::TooLarge(format!(
            "{n} pixels exceeds the {SCALAR_MAX_PIXELS}-pixel limit of the exact pairwise loop"
        )));
    }
    Ok(())
}

/// `sum_{i<j} sum_{l,l'} q_i(l) q_j(l') f_ij(l, l')` by direct double loop.
pub fn expected_pairwise_score(
    q: &MarginalField,
    model: &PairwiseModel,
    feats: &FeatureField,
) -> Result<f64> {
    let n = q.num_pixels();
    check_scalar_size(n)?;
    if feats.num_pixels() != n {
        return Err(Error::shape(format!("{n} feature rows"), feats.num_pixels()));
    }
    model.compat.check_labels(q.num_labels())?;
    let labels = q.num_labels();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let kappa = model.mixture(feats.pixel(i), feats.pixel(j))?;
            if kappa == 0.0 {
                continue;
            }
            let (qi, qj) = (q.pixel(i), q.pixel(j));
            let mut s = 0.0;
            for l in 0..labels {
                for l2 in 0..labels {
                    s += qi[l] * qj[l2] * model.compat.value(l, l2);
                }
            }
            total += kappa * s;
        }
    }
    Ok(total)
}
