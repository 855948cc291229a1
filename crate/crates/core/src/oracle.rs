//! Exhaustive enumeration over every labeling of a tiny grid.

use crate::crf::{pairwise_value, PairwiseModel};
use crate::error::{Error, Result};
use crate::fields::{Assignment, Field, MarginalField, ScoreField};
use crate::filter::FeatureField;

/// Largest pixel count the oracle accepts.
pub const ORACLE_MAX_PIXELS: usize = 16;
/// Largest number of labelings `enumerate_distribution` visits.
pub const ORACLE_MAX_STATES: u64 = 1_000_000;

fn check_instance(n: usize, unary: &ScoreField, feats: &FeatureField) -> Result<()> {
    if n > ORACLE_MAX_PIXELS {
        return Err(Error::TooLarge(format!(
            "{n} pixels exceeds the {ORACLE_MAX_PIXELS}-pixel enumeration limit"
        )));
    }
    if unary.num_pixels() != n || feats.num_pixels() != n {
        return Err(Error::shape(
            format!("{n} pixels"),
            format!("{} unary, {} feature rows", unary.num_pixels(), feats.num_pixels()),
        ));
    }
    Ok(())
}

/// `sum_i f_i(y_i) + sum_{i<j} f_ij(y_i, y_j)` for one labeling.
pub fn global_score(
    assign: &Assignment,
    unary: &ScoreField,
    model: &PairwiseModel,
    feats: &FeatureField,
) -> Result<f64> {
    let n = assign.len();
    check_instance(n, unary, feats)?;
    if unary.channels() == 0 || assign.labels().iter().any(|&y| y >= unary.channels()) {
        return Err(Error::Invalid("assignment label outside the unary label range".into()));
    }
    pairwise_table(model, feats, unary.channels()).map(|t| score_with(assign.labels(), unary, &t))
}

/// `table[(i * n + j) * L^2 + a * L + b] = f_ij(a, b)` for `i < j`.
fn pairwise_table(model: &PairwiseModel, feats: &FeatureField, labels: usize) -> Result<Vec<f64>> {
    let n = feats.num_pixels();
    model.compat().check_labels(labels)?;
    let mut table = vec![0.0; n * n * labels * labels];
    for i in 0..n {
        for j in i + 1..n {
            for a in 0..labels {
                for b in 0..labels {
                    table[((i * n + j) * labels + a) * labels + b] =
                        pairwise_value(a, b, feats.pixel(i), feats.pixel(j), model)?;
                }
            }
        }
    }
    Ok(table)
}

fn score_with(labels: &[usize], unary: &ScoreField, table: &[f64]) -> f64 {
    let n = labels.len();
    let l = unary.channels();
    let mut s: f64 = labels.iter().enumerate().map(|(i, &y)| unary.get(i, y)).sum();
    for i in 0..n {
        for j in i + 1..n {
            s += table[((i * n + j) * l + labels[i]) * l + labels[j]];
        }
    }
    s
}

/// Exact marginals of `p(y) ~ exp(global_score(y))` and `log Z`.
pub fn enumerate_distribution(
    unary: &ScoreField,
    model: &PairwiseModel,
    feats: &FeatureField,
) -> Result<(MarginalField, f64)> {
    let n = unary.num_pixels();
    check_instance(n, unary, feats)?;
    unary.check_finite()?;
    let l = unary.channels();
    let states = (l as u64).checked_pow(n as u32).filter(|&s| s <= ORACLE_MAX_STATES);
    let Some(states) = states else {
        return Err(Error::TooLarge(format!(
            "{l}^{n} labelings exceeds the {ORACLE_MAX_STATES}-state enumeration limit"
        )));
    };
    let table = pairwise_table(model, feats, l)?;
    let mut labels = vec![0usize; n];
    let mut scores = Vec::with_capacity(states as usize);
    for _ in 0..states {
        scores.push(score_with(&labels, unary, &table));
        for y in labels.iter_mut() {
            *y += 1;
            if *y < l {
                break;
            }
            *y = 0;
        }
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut marg = Field::zeros(unary.height(), unary.width(), l);
    labels.iter_mut().for_each(|y| *y = 0);
    for &s in &scores {
        let p = (s - max).exp();
        z += p;
        for (i, &y) in labels.iter().enumerate() {
            marg.data_mut()[i * l + y] += p;
        }
        for y in labels.iter_mut() {
            *y += 1;
            if *y < l {
                break;
            }
            *y = 0;
        }
    }
    marg.scale(1.0 / z);
    Ok((MarginalField::from_field_unchecked(marg), max + z.ln()))
}
