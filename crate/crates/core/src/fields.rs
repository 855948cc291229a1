//! Label spaces and per-pixel label fields.
//!
//! All fields are stored pixel-major: the value for pixel `i = y * width + x`
//! and label `l` lives at `data[i * labels + l]`.

use crate::error::{Error, Result};

/// Label code marking pixels that are ignored by losses and metrics.
pub const VOID_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSpace {
    num_labels: usize,
    void_label: u8,
}

impl LabelSpace {
    pub fn new(num_labels: usize) -> Result<Self> {
        Self::with_void(num_labels, VOID_LABEL)
    }

    pub fn with_void(num_labels: usize, void_label: u8) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::Invalid(format!(
                "a label space needs at least 2 labels, got {num_labels}"
            )));
        }
        if (void_label as usize) < num_labels {
            return Err(Error::Invalid(format!(
                "void label {void_label} collides with the label range [0, {num_labels})"
            )));
        }
        Ok(LabelSpace {
            num_labels,
            void_label,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn void_label(&self) -> u8 {
        self.void_label
    }
}

/// A dense `height x width x channels` array of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Per-pixel, per-label real scores.
pub type ScoreField = Field;

impl Field {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Field {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{height}x{width}x{channels} = {} values", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(Field {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let n = height * width;
        let mut data = Vec::with_capacity(n * channels);
        for i in 0..n {
            for l in 0..channels {
                data.push(f(i, l));
            }
        }
        Field {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, pixel: usize, label: usize) -> f64 {
        self.data[pixel * self.channels + label]
    }

    #[inline]
    pub fn set(&mut self, pixel: usize, label: usize, value: f64) {
        self.data[pixel * self.channels + label] = value;
    }

    #[inline]
    pub fn pixel(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * self.channels..(pixel + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, pixel: usize) -> &mut [f64] {
        &mut self.data[pixel * self.channels..(pixel + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub(crate) fn check_same_shape(&self, other: &Field) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(self.shape_string(), other.shape_string()))
        }
    }

    /// Returns the first non-finite entry as an error.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(idx) => {
                let pixel = idx / self.channels;
                Err(Error::NonFinite {
                    x: pixel % self.width.max(1),
                    y: pixel / self.width.max(1),
                    label: idx % self.channels,
                    value: self.data[idx],
                })
            }
        }
    }

    pub fn dot(&self, other: &Field) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn add_assign(&mut self, other: &Field) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-pixel categorical distributions over labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField(Field);

/// Tolerance on the per-pixel sum of a marginal field.
pub const MARGINAL_SUM_TOL: f64 = 1e-9;

impl MarginalField {
    /// Wraps a field after checking nonnegativity and unit row sums.
    pub fn new(field: Field) -> Result<Self> {
        for i in 0..field.num_pixels() {
            let row = field.pixel(i);
            let mut sum = 0.0;
            for (l, &v) in row.iter().enumerate() {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Invalid(format!(
                        "marginal entry {v} at pixel {i}, label {l} is not a probability"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > MARGINAL_SUM_TOL {
                return Err(Error::Invalid(format!(
                    "marginals at pixel {i} sum to {sum}, not 1"
                )));
            }
        }
        Ok(MarginalField(field))
    }

    pub fn uniform(height: usize, width: usize, labels: usize) -> Self {
        let v = 1.0 / labels as f64;
        MarginalField(Field::from_fn(height, width, labels, |_, _| v))
    }

    /// One-hot marginals at the given labeling.
    pub fn one_hot(labels: &LabelMap, num_labels: usize) -> Result<Self> {
        let mut f = Field::zeros(labels.height(), labels.width(), num_labels);
        for (i, &l) in labels.labels().iter().enumerate() {
            if (l as usize) >= num_labels {
                return Err(Error::Invalid(format!("label {l} out of range at pixel {i}")));
            }
            f.set(i, l as usize, 1.0);
        }
        Ok(MarginalField(f))
    }

    pub(crate) fn from_field_unchecked(field: Field) -> Self {
        MarginalField(field)
    }

    pub fn field(&self) -> &Field {
        &self.0
    }

    pub fn into_field(self) -> Field {
        self.0
    }

    #[inline]
    pub fn get(&self, pixel: usize, label: usize) -> f64 {
        self.0.get(pixel, label)
    }

    #[inline]
    pub fn pixel(&self, pixel: usize) -> &[f64] {
        self.0.pixel(pixel)
    }

    pub fn num_pixels(&self) -> usize {
        self.0.num_pixels()
    }

    pub fn num_labels(&self) -> usize {
        self.0.channels()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn max_abs_diff(&self, other: &MarginalField) -> f64 {
        self.0
            .data()
            .iter()
            .zip(other.0.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Integer label per pixel; `VOID_LABEL` marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} labels"),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Checks every label is either in `[0, num_labels)` or void.
    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        for (i, &l) in self.labels.iter().enumerate() {
            if (l as usize) >= space.num_labels() && l != space.void_label() {
                return Err(Error::Invalid(format!(
                    "label {l} at pixel ({}, {}) is outside [0, {}) and not void",
                    i % self.width,
                    i / self.width,
                    space.num_labels()
                )));
            }
        }
        Ok(())
    }
}

/// A full configuration over a tiny instance, used by the enumeration oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment(Vec<usize>);

impl Assignment {
    pub fn new(labels: Vec<usize>, num_labels: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::Invalid(format!(
                "assignment label {bad} outside [0, {num_labels})"
            )));
        }
        Ok(Assignment(labels))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Softmax of one row in place, with max subtraction.
#[inline]
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Per-pixel softmax over labels.
pub fn softmax_normalize(scores: &ScoreField) -> Result<MarginalField> {
    scores.check_finite()?;
    let mut out = scores.clone();
    let channels = out.channels();
    if channels > 0 {
        for row in out.data_mut().chunks_mut(channels) {
            softmax_row(row);
        }
    }
    Ok(MarginalField(out))
}

/// Per-pixel argmax; ties go to the lowest label index.
pub fn argmax_labeling(q: &MarginalField) -> LabelMap {
    let labels = (0..q.num_pixels())
        .map(|i| argmax(q.pixel(i)) as u8)
        .collect();
    LabelMap {
        height: q.height(),
        width: q.width(),
        labels,
    }
}

#[inline]
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (l, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = l;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row_field(rows: &[&[f64]]) -> Field {
        let l = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Field::from_vec(1, rows.len(), l, data).unwrap()
    }

    #[test]
    fn label_space_rejects_bad_configs() {
        assert!(LabelSpace::new(1).is_err());
        assert!(LabelSpace::with_void(4, 2).is_err());
        let s = LabelSpace::new(21).unwrap();
        assert_eq!(s.void_label(), 255);
    }

    #[test]
    fn softmax_zero_scores_is_uniform() {
        let q = softmax_normalize(&Field::zeros(2, 2, 3)).unwrap();
        for v in q.field().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_constant_scores_is_uniform() {
        for c in [-1e4, -3.5, 0.0, 7.0, 1e4] {
            let q = softmax_normalize(&row_field(&[&[c, c, c]])).unwrap();
            for v in q.field().data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_hand_value() {
        let q = softmax_normalize(&row_field(&[&[2f64.ln(), 0.0, 0.0]])).unwrap();
        assert!((q.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((q.get(0, 1) - 0.25).abs() < 1e-15);
        assert!((q.get(0, 2) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite_with_pixel() {
        let mut f = Field::zeros(2, 3, 2);
        f.set(4, 1, f64::NAN);
        match softmax_normalize(&f) {
            Err(Error::NonFinite { x, y, label, .. }) => assert_eq!((x, y, label), (1, 1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_large_scores_do_not_overflow() {
        let q = softmax_normalize(&row_field(&[&[1e4, -1e4, 0.0]])).unwrap();
        assert_eq!(q.get(0, 0), 1.0);
        assert!(q.field().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn argmax_examples() {
        let q = MarginalField::new(row_field(&[&[0.2, 0.7, 0.1], &[0.5, 0.5, 0.0]])).unwrap();
        assert_eq!(argmax_labeling(&q).labels(), &[1, 0]);
        let lm = LabelMap::new(1, 3, vec![2, 0, 1]).unwrap();
        let hot = MarginalField::one_hot(&lm, 3).unwrap();
        assert_eq!(argmax_labeling(&hot), lm);
    }

    #[test]
    fn marginal_field_validation() {
        assert!(MarginalField::new(row_field(&[&[0.5, 0.6]])).is_err());
        assert!(MarginalField::new(row_field(&[&[1.5, -0.5]])).is_err());
        assert!(MarginalField::new(row_field(&[&[0.25, 0.75]])).is_ok());
    }

    #[test]
    fn label_map_validation() {
        let space = LabelSpace::new(3).unwrap();
        assert!(LabelMap::new(1, 3, vec![0, 2, 255]).unwrap().validate(&space).is_ok());
        assert!(LabelMap::new(1, 2, vec![0, 3]).unwrap().validate(&space).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            scores in proptest::collection::vec(-50.0f64..50.0, 12),
            shifts in proptest::collection::vec(-100.0f64..100.0, 3),
        ) {
            let f = Field::from_vec(1, 3, 4, scores.clone()).unwrap();
            let shifted = Field::from_fn(1, 3, 4, |i, l| scores[i * 4 + l] + shifts[i]);
            let q = softmax_normalize(&f).unwrap();
            let qs = softmax_normalize(&shifted).unwrap();
            for i in 0..3 {
                let s: f64 = q.pixel(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            prop_assert_eq!(argmax_labeling(&q), argmax_labeling(&qs));
            prop_assert!(q.max_abs_diff(&qs) < 1e-12);
        }
    }
}
