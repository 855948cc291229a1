//! Exact O(N^2) Gaussian filtering over whitened features.

/// Above this many points the kernel matrix is recomputed on every apply
/// instead of being stored (2048^2 doubles is 32 MiB).
const DENSE_MAX_POINTS: usize = 2048;

#[derive(Debug, Clone)]
pub(crate) struct BruteKernel {
    dim: usize,
    num_points: usize,
    /// Features divided by their bandwidths, `num_points x dim`.
    whitened: Vec<f64>,
    /// Row-major kernel matrix, bitwise symmetric, when small enough.
    dense: Option<Vec<f64>>,
}

#[inline]
fn gaussian(a: &[f64], b: &[f64]) -> f64 {
    let mut d2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let t = x - y;
        d2 += t * t;
    }
    (-0.5 * d2).exp()
}

impl BruteKernel {
    pub(crate) fn new(whitened: Vec<f64>, dim: usize) -> Self {
        let n = whitened.len() / dim;
        let dense = (n <= DENSE_MAX_POINTS).then(|| {
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                k[i * n + i] = 1.0;
                let fi = &whitened[i * dim..(i + 1) * dim];
                for j in i + 1..n {
                    let v = gaussian(fi, &whitened[j * dim..(j + 1) * dim]);
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                }
            }
            k
        });
        BruteKernel {
            dim,
            num_points: n,
            whitened,
            dense,
        }
    }

    #[inline]
    fn point(&self, i: usize) -> &[f64] {
        &self.whitened[i * self.dim..(i + 1) * self.dim]
    }

    /// Kernel value between points `i` and `j`.
    #[inline]
    pub(crate) fn value(&self, i: usize, j: usize) -> f64 {
        match &self.dense {
            Some(k) => k[i * self.num_points + j],
            None if i == j => 1.0,
            None => gaussian(self.point(i), self.point(j)),
        }
    }

    pub(crate) fn apply(&self, values: &[f64], channels: usize) -> Vec<f64> {
        let n = self.num_points;
        let c = channels;
        let mut out = vec![0.0; n * c];
        match &self.dense {
            Some(k) => {
                for i in 0..n {
                    let row = &k[i * n..(i + 1) * n];
                    let dst = &mut out[i * c..(i + 1) * c];
                    for (j, &kij) in row.iter().enumerate() {
                        let src = &values[j * c..(j + 1) * c];
                        for ch in 0..c {
                            dst[ch] += kij * src[ch];
                        }
                    }
                }
            }
            None => {
                out.copy_from_slice(values);
                for i in 0..n {
                    let fi = self.point(i);
                    for j in i + 1..n {
                        let kij = gaussian(fi, self.point(j));
                        for ch in 0..c {
                            out[i * c + ch] += kij * values[j * c + ch];
                            out[j * c + ch] += kij * values[i * c + ch];
                        }
                    }
                }
            }
        }
        out
    }

    /// `out_i = sum_j k_ij (f_id - f_jd)^2 / sigma_d^3 v_j` for one feature
    /// dimension, given that dimension's bandwidth.
    pub(crate) fn apply_grad_sigma(
        &self,
        values: &[f64],
        channels: usize,
        dim: usize,
        sigma: f64,
    ) -> Vec<f64> {
        let n = self.num_points;
        let c = channels;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in i + 1..n {
                let delta = self.point(i)[dim] - self.point(j)[dim];
                let w = self.value(i, j) * delta * delta / sigma;
                for ch in 0..c {
                    out[i * c + ch] += w * values[j * c + ch];
                    out[j * c + ch] += w * values[i * c + ch];
                }
            }
        }
        out
    }

    /// `sum_{i,j} <r_i, v_j> k_ij (f_id - f_jd)^2 / sigma_d^3` for every
    /// dimension `d` at once.
    pub(crate) fn contract_grad_sigma(
        &self,
        r: &[f64],
        v: &[f64],
        channels: usize,
        sigma: &[f64],
    ) -> Vec<f64> {
        let n = self.num_points;
        let c = channels;
        let mut acc = vec![0.0; self.dim];
        for i in 0..n {
            let fi = self.point(i);
            let ri = &r[i * c..(i + 1) * c];
            let vi = &v[i * c..(i + 1) * c];
            for j in i + 1..n {
                let fj = self.point(j);
                let rj = &r[j * c..(j + 1) * c];
                let vj = &v[j * c..(j + 1) * c];
                let mut pair = 0.0;
                for ch in 0..c {
                    pair += ri[ch] * vj[ch] + rj[ch] * vi[ch];
                }
                let w = self.value(i, j) * pair;
                for d in 0..self.dim {
                    let delta = fi[d] - fj[d];
                    acc[d] += w * delta * delta;
                }
            }
        }
        for (a, s) in acc.iter_mut().zip(sigma) {
            *a /= s;
        }
        acc
    }
}
