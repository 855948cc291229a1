//! Gaussian filtering over per-pixel feature vectors.
//!
//! `filter_brute` evaluates `out_i = sum_j k(f_i, f_j) v_j` exactly;
//! `filter_lattice` approximates the same sum on a permutohedral lattice in
//! time linear in the number of pixels. Both sums include `j = i`.

mod brute;
pub mod lattice;

use brute::BruteKernel;
use lattice::Lattice;

use crate::error::{Error, Result};
use crate::fields::Field;
use crate::image::RgbImage;

/// Largest pixel count accepted by a brute-mode plan.
pub const BRUTE_MAX_PIXELS: usize = 192 * 192;

/// Which per-pixel features a kernel compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    /// `(col, row)`.
    Spatial,
    /// `(col, row, r, g, b)`.
    Bilateral,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Spatial => 2,
            FeatureKind::Bilateral => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Spatial => "spatial",
            FeatureKind::Bilateral => "bilateral",
        }
    }
}

/// Per-pixel feature vectors on an image grid, raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureField {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("feature dimension must be positive".into()));
        }
        if data.len() != height * width * dim {
            return Err(Error::shape(
                format!("{height}x{width}x{dim} features"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite feature value {v}")));
        }
        Ok(FeatureField {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The first `dim` features of every pixel.
    pub fn truncated(&self, dim: usize) -> Result<FeatureField> {
        if dim == 0 || dim > self.dim {
            return Err(Error::Invalid(format!(
                "cannot take {dim} of {} feature dimensions",
                self.dim
            )));
        }
        let data = self
            .data
            .chunks(self.dim)
            .flat_map(|p| p[..dim].iter().copied())
            .collect();
        Ok(FeatureField {
            height: self.height,
            width: self.width,
            dim,
            data,
        })
    }
}

/// Builds raw per-pixel features; spatial features are a prefix of bilateral ones.
pub fn build_features(image: &RgbImage, kind: FeatureKind) -> Result<FeatureField> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Err(Error::Invalid("cannot build features of an empty image".into()));
    }
    let dim = kind.dim();
    let mut data = Vec::with_capacity(w * h * dim);
    for y in 0..h {
        for x in 0..w {
            data.push(x as f64);
            data.push(y as f64);
            if kind == FeatureKind::Bilateral {
                data.extend(image.pixel(x, y).iter().map(|&c| c as f64));
            }
        }
    }
    Ok(FeatureField {
        height: h,
        width: w,
        dim,
        data,
    })
}

/// A Gaussian kernel with diagonal bandwidths over one feature kind.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    kind: FeatureKind,
    sigma: Vec<f64>,
}

fn check_sigma(kind: FeatureKind, sigma: &[f64]) -> Result<()> {
    if sigma.len() != kind.dim() {
        return Err(Error::shape(
            format!("{} bandwidths for a {} kernel", kind.dim(), kind.name()),
            format!("{}", sigma.len()),
        ));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::Invalid(format!("bandwidth {s} must be positive and finite")));
    }
    Ok(())
}

impl KernelSpec {
    pub fn new(kind: FeatureKind, sigma: Vec<f64>) -> Result<Self> {
        check_sigma(kind, &sigma)?;
        Ok(KernelSpec { kind, sigma })
    }

    /// Spatial kernel with the same bandwidth on both axes.
    pub fn spatial(sigma_xy: f64) -> Result<Self> {
        Self::new(FeatureKind::Spatial, vec![sigma_xy; 2])
    }

    /// Bilateral kernel with shared spatial and shared color bandwidths.
    pub fn bilateral(sigma_xy: f64, sigma_rgb: f64) -> Result<Self> {
        Self::new(
            FeatureKind::Bilateral,
            vec![sigma_xy, sigma_xy, sigma_rgb, sigma_rgb, sigma_rgb],
        )
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn set_sigma(&mut self, sigma: Vec<f64>) -> Result<()> {
        check_sigma(self.kind, &sigma)?;
        self.sigma = sigma;
        Ok(())
    }

    /// Features divided by bandwidths; uses the first `dim()` entries of each pixel.
    fn whiten(&self, feats: &FeatureField) -> Result<Vec<f64>> {
        let d = self.dim();
        if feats.dim() < d {
            return Err(Error::shape(
                format!("at least {d} feature dimensions"),
                feats.dim(),
            ));
        }
        let mut out = Vec::with_capacity(feats.num_pixels() * d);
        for p in feats.data().chunks(feats.dim()) {
            out.extend(p[..d].iter().zip(&self.sigma).map(|(f, s)| f / s));
        }
        Ok(out)
    }
}

/// `exp(-1/2 sum_d (fi_d - fj_d)^2 / sigma_d^2)`.
pub fn kernel_value(fi: &[f64], fj: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_sigma(spec.kind, &spec.sigma)?;
    if fi.len() != spec.dim() || fj.len() != spec.dim() {
        return Err(Error::shape(
            format!("{}-dimensional features", spec.dim()),
            format!("{} and {}", fi.len(), fj.len()),
        ));
    }
    let e: f64 = fi
        .iter()
        .zip(fj)
        .zip(&spec.sigma)
        .map(|((a, b), s)| {
            let t = (a - b) / s;
            t * t
        })
        .sum();
    Ok((-0.5 * e).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterMode {
    Brute,
    Lattice,
}

impl FilterMode {
    pub fn name(self) -> &'static str {
        match self {
            FilterMode::Brute => "brute",
            FilterMode::Lattice => "lattice",
        }
    }
}

#[derive(Debug, Clone)]
enum Engine {
    Brute(BruteKernel),
    Lattice(Lattice),
}

/// A filter precomputed for one kernel over one image.
#[derive(Debug, Clone)]
pub struct FilterPlan {
    height: usize,
    width: usize,
    spec: KernelSpec,
    features: FeatureField,
    engine: Engine,
}

impl FilterPlan {
    /// Builds a plan; `feats` may carry more dimensions than the kernel uses.
    pub fn new(feats: &FeatureField, spec: &KernelSpec, mode: FilterMode) -> Result<Self> {
        let features = feats.truncated(spec.dim())?;
        Self::from_owned(features, spec.clone(), mode)
    }

    fn from_owned(features: FeatureField, spec: KernelSpec, mode: FilterMode) -> Result<Self> {
        let n = features.num_pixels();
        let whitened = spec.whiten(&features)?;
        let engine = match mode {
            FilterMode::Brute => {
                if n > BRUTE_MAX_PIXELS {
                    return Err(Error::TooLarge(format!(
                        "brute filtering is limited to {BRUTE_MAX_PIXELS} pixels, got {n}"
                    )));
                }
                Engine::Brute(BruteKernel::new(whitened, spec.dim()))
            }
            FilterMode::Lattice => Engine::Lattice(Lattice::build(&whitened, spec.dim())),
        };
        Ok(FilterPlan {
            height: features.height(),
            width: features.width(),
            spec,
            features,
            engine,
        })
    }

    /// The same plan rebuilt with new bandwidths.
    pub fn with_sigma(&self, sigma: Vec<f64>) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.set_sigma(sigma)?;
        Self::from_owned(self.features.clone(), spec, self.mode())
    }

    pub fn mode(&self) -> FilterMode {
        match self.engine {
            Engine::Brute(_) => FilterMode::Brute,
            Engine::Lattice(_) => FilterMode::Lattice,
        }
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn features(&self) -> &FeatureField {
        &self.features
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Lattice vertex count, if lattice mode.
    pub fn lattice_vertices(&self) -> Option<usize> {
        match &self.engine {
            Engine::Lattice(l) => Some(l.num_vertices()),
            Engine::Brute(_) => None,
        }
    }

    /// Kernel value between two pixels of the plan's grid (exact).
    pub fn kernel(&self, i: usize, j: usize) -> f64 {
        match &self.engine {
            Engine::Brute(b) => b.value(i, j),
            Engine::Lattice(_) => {
                kernel_value(self.features.pixel(i), self.features.pixel(j), &self.spec)
                    .expect("plan spec is validated")
            }
        }
    }

    fn check_grid(&self, values: &Field) -> Result<()> {
        if values.height() != self.height || values.width() != self.width {
            return Err(Error::shape(
                format!("{}x{} grid", self.height, self.width),
                format!("{}x{} grid", values.height(), values.width()),
            ));
        }
        Ok(())
    }

    /// Filters with whichever engine the plan was built for.
    pub fn apply(&self, values: &Field) -> Result<Field> {
        self.check_grid(values)?;
        let c = values.channels();
        let out = match &self.engine {
            Engine::Brute(b) => b.apply(values.data(), c),
            Engine::Lattice(l) => l.apply(values.data(), c),
        };
        Field::from_vec(self.height, self.width, c, out)
    }

    pub(crate) fn brute(&self, what: &str) -> Result<&BruteKernel> {
        match &self.engine {
            Engine::Brute(b) => Ok(b),
            Engine::Lattice(_) => Err(Error::UnsupportedMode {
                mode: "lattice",
                what: what.to_string(),
            }),
        }
    }

    /// `sum_{i,j} <r_i, v_j> dk_ij/dsigma_d` for every bandwidth `d` (brute only).
    pub(crate) fn contract_grad_sigma(&self, r: &Field, v: &Field) -> Result<Vec<f64>> {
        self.check_grid(r)?;
        r.check_same_shape(v)?;
        let b = self.brute("bandwidth gradients")?;
        Ok(b.contract_grad_sigma(r.data(), v.data(), r.channels(), self.spec.sigma()))
    }
}

/// Exact filtering; requires a brute-mode plan.
pub fn filter_brute(plan: &FilterPlan, values: &Field) -> Result<Field> {
    plan.brute("filter_brute")?;
    plan.apply(values)
}

/// Approximate filtering; requires a lattice-mode plan.
pub fn filter_lattice(plan: &FilterPlan, values: &Field) -> Result<Field> {
    if plan.mode() != FilterMode::Lattice {
        return Err(Error::UnsupportedMode {
            mode: "brute",
            what: "filter_lattice".into(),
        });
    }
    plan.apply(values)
}

/// Derivative of `filter_brute(plan, values)` with respect to bandwidth `dim`.
pub fn filter_grad_sigma(plan: &FilterPlan, values: &Field, dim: usize) -> Result<Field> {
    plan.check_grid(values)?;
    let b = plan.brute("bandwidth derivative filtering")?;
    if dim >= plan.spec.dim() {
        return Err(Error::Invalid(format!(
            "feature index {dim} out of range for a {}-dimensional kernel",
            plan.spec.dim()
        )));
    }
    let c = values.channels();
    let out = b.apply_grad_sigma(values.data(), c, dim, plan.spec.sigma()[dim]);
    Field::from_vec(plan.height, plan.width, c, out)
}
