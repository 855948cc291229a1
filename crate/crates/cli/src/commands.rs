//! Inference, evaluation, gradient checking, filter benchmarking and
//! synthetic data generation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcrf::data::{
    read_ppm, synth_dataset, write_atomic, write_pgm, write_ppm, Manifest, Sample, Split,
    SynthConfig,
};
use dcrf::gradcheck::{gradcheck, worst_per_group, GradCheckOptions, GradCheckRow};
use dcrf::learning::{predict, SigmaGrad};
use dcrf::{
    argmax_labeling, build_features, iou_per_class, mean_iou, FeatureKind, FilterMode,
    FilterPlan, KernelSpec, LabelMap, RgbImage, VOID_LABEL,
};

use crate::checkpoint::Checkpoint;
use crate::config::{FilterModeConfig, RunConfig, SigmaGradConfig};
use crate::error::{CliError, CliResult};
use crate::train::evaluate;

/// Fixed 256-entry label palette: the bit-interleaved colormap common in
/// segmentation benchmarks (0 black, 1 dark red, 2 dark green, ...).
pub fn palette(label: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = label;
    for shift in (0..8).rev() {
        for (k, ch) in rgb.iter_mut().enumerate() {
            *ch |= ((c >> k) & 1) << shift;
        }
        c >>= 3;
    }
    rgb
}

/// Paths written by `cmd_infer`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferOutputs {
    pub labels: PathBuf,
    pub confidence: PathBuf,
    pub overlay: PathBuf,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes the argmax labeling, the winning marginal scaled to 0..255 and a
/// half-transparent palette overlay.
pub fn cmd_infer(ckpt_path: &Path, image_path: &Path, prefix: &Path) -> CliResult<InferOutputs> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let image = read_ppm(image_path)?;
    let cfg = ckpt.config.train_config(ckpt.uses_crf());
    let q = predict(&image, &ckpt.unary, &ckpt.model, &cfg)?;
    let labels = argmax_labeling(&q);
    let (h, w) = (image.height(), image.width());
    let confidence = LabelMap::new(
        h,
        w,
        (0..h * w)
            .map(|i| {
                let p = q.pixel(i).iter().cloned().fold(0.0, f64::max);
                (p * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect(),
    )?;
    let overlay = RgbImage::from_fn(w, h, |x, y| {
        let c = palette(labels.get(x, y));
        let p = image.pixel(x, y);
        std::array::from_fn(|k| ((p[k] as u16 + c[k] as u16 + 1) / 2) as u8)
    });
    let out = InferOutputs {
        labels: with_suffix(prefix, "_labels.pgm"),
        confidence: with_suffix(prefix, "_confidence.pgm"),
        overlay: with_suffix(prefix, "_overlay.ppm"),
    };
    write_pgm(&out.labels, &labels)?;
    write_pgm(&out.confidence, &confidence)?;
    write_ppm(&out.overlay, &overlay)?;
    Ok(out)
}

/// Per-class IoU CSV over a manifest, with a final mean row.
pub fn cmd_eval(ckpt_path: &Path, manifest: &Path) -> CliResult<String> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let samples = Manifest::load(manifest, Split::Val)?.load_all()?;
    let cfg = ckpt.config.train_config(ckpt.uses_crf());
    let (_, cm) = evaluate(&samples, &ckpt.unary, &ckpt.model, &cfg, ckpt.config.labels)?;
    let mut csv = String::from("class_id,class_name,iou\n");
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.6}"));
    for (c, iou) in iou_per_class(&cm).into_iter().enumerate() {
        writeln!(csv, "{c},{},{}", ckpt.config.class_name(c), fmt(iou)).expect("string write");
    }
    writeln!(csv, "mean,,{}", fmt(mean_iou(&cm))).expect("string write");
    Ok(csv)
}

/// Outcome of `cmd_gradcheck`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub options: GradCheckOptions,
}

impl GradCheckReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.passes(&self.options)).count()
    }

    pub fn max_abs_err(&self) -> f64 {
        self.rows.iter().map(GradCheckRow::abs_err).fold(0.0, f64::max)
    }

    /// Largest relative error among coordinates whose absolute error
    /// exceeds the floor.
    pub fn max_rel_err(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.abs_err() > self.options.abs_floor)
            .map(GradCheckRow::rel_err)
            .fold(0.0, f64::max)
    }

    /// One line per parameter group with its worst coordinate.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:<16} {:>6} {:>14} {:>14} {:>10} {:>6}\n",
            "group", "parameter", "index", "analytic", "numeric", "rel_err", "kinks"
        );
        for w in worst_per_group(&self.rows) {
            let kinks = self.rows.iter().filter(|r| r.group == w.group && r.kink).count();
            writeln!(
                out,
                "{:<10} {:<16} {:>6} {:>14.6e} {:>14.6e} {:>10.2e} {:>6}",
                w.group.name(),
                w.name,
                w.index,
                w.analytic,
                w.reference(),
                w.rel_err(),
                kinks
            )
            .expect("string write");
        }
        writeln!(
            out,
            "{} coordinates, {} failures, max absolute error {:.2e}, max relative error above the {:.0e} floor {:.2e}",
            self.rows.len(),
            self.failures(),
            self.max_abs_err(),
            self.options.abs_floor,
            self.max_rel_err()
        )
        .expect("string write");
        out
    }
}

/// A random 8x8 instance under the configured model; filtering is exact
/// and bandwidth gradients analytic so every parameter is covered.
pub fn cmd_gradcheck(config: &RunConfig, seed: u64, stride: usize) -> CliResult<GradCheckReport> {
    let mut cfg = config.clone();
    cfg.crf.filter_mode = FilterModeConfig::Brute;
    cfg.crf.sigma_grad = SigmaGradConfig::Brute;
    cfg.training.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = RgbImage::from_fn(8, 8, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
    let labels = (0..64)
        .map(|_| {
            if rng.gen_bool(0.1) {
                VOID_LABEL
            } else {
                rng.gen_range(0..cfg.labels as u8)
            }
        })
        .collect();
    let sample = Sample::new(image, LabelMap::new(8, 8, labels)?)?;
    let mut unary = cfg.build_unary();
    if let dcrf::AnyUnary::Linear(lin) = &mut unary {
        lin.fit_standardization([&sample.image])?;
    }
    let model = cfg.build_model()?;
    let train_cfg = cfg.train_config(true);
    debug_assert_eq!(train_cfg.backward.sigma_grad, SigmaGrad::Brute);
    let options = GradCheckOptions {
        stride: stride.max(1),
        ..Default::default()
    };
    let rows = gradcheck(&sample, &unary, &model, &train_cfg, &options)?;
    Ok(GradCheckReport { rows, options })
}

/// Timing of one filter mode at one image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub mode: FilterMode,
    pub build_seconds: f64,
    pub apply_seconds: f64,
}

impl BenchRow {
    pub fn total(&self) -> f64 {
        self.build_seconds + self.apply_seconds
    }
}

pub const BENCH_HEADER: &str = "size,pixels,mode,build_seconds,apply_seconds,total_seconds";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6}",
            self.size,
            self.size * self.size,
            self.mode.name(),
            self.build_seconds,
            self.apply_seconds,
            self.total()
        )
    }
}

/// Bilateral kernel the benchmark filters with.
pub fn bench_kernel() -> KernelSpec {
    KernelSpec::bilateral(10.0, 20.0).expect("valid bandwidths")
}

/// Synthetic image and 4-label field used by the benchmark.
pub fn bench_instance(size: usize) -> CliResult<(RgbImage, dcrf::Field)> {
    let cfg = SynthConfig {
        count: 1,
        size,
        num_labels: 4,
        noise_sd: 10.0,
        seed: size as u64,
    };
    let sample = dcrf::data::synth_sample(&cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values = dcrf::Field::from_fn(size, size, 4, |_, _| rng.gen::<f64>());
    Ok((sample.image, values))
}

/// Best of `reps` runs of plan construction and one filtering pass.
pub fn bench_filter(size: usize, mode: FilterMode, reps: usize) -> CliResult<BenchRow> {
    let (image, values) = bench_instance(size)?;
    let feats = build_features(&image, FeatureKind::Bilateral)?;
    let spec = bench_kernel();
    let (mut build, mut apply) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let plan = FilterPlan::new(&feats, &spec, mode)?;
        let b = t.elapsed().as_secs_f64();
        let t = Instant::now();
        std::hint::black_box(plan.apply(&values)?);
        let a = t.elapsed().as_secs_f64();
        if b + a < build + apply {
            (build, apply) = (b, a);
        }
    }
    Ok(BenchRow {
        size,
        mode,
        build_seconds: build,
        apply_seconds: apply,
    })
}

pub fn cmd_bench_filter(sizes: &[usize], reps: usize) -> CliResult<Vec<BenchRow>> {
    if sizes.is_empty() {
        return Err(CliError::Usage("bench-filter needs at least one size".into()));
    }
    let mut rows = Vec::new();
    for &s in sizes {
        if s < 4 {
            return Err(CliError::Usage(format!("size {s} is below 4")));
        }
        for mode in [FilterMode::Brute, FilterMode::Lattice] {
            rows.push(bench_filter(s, mode, reps)?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthArgs {
    pub train: usize,
    pub val: usize,
    pub size: usize,
    pub labels: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Offset between the training and validation seeds.
const VAL_SEED_OFFSET: u64 = 1_000_003;

/// Writes `train.tsv` and, when requested, `val.tsv` with their images.
pub fn cmd_synth(out: &Path, args: &SynthArgs) -> CliResult<Vec<Manifest>> {
    let mut manifests = Vec::new();
    for (split, count, seed) in [
        (Split::Train, args.train, args.seed),
        (Split::Val, args.val, args.seed.wrapping_add(VAL_SEED_OFFSET)),
    ] {
        if count == 0 {
            continue;
        }
        let cfg = SynthConfig {
            count,
            size: args.size,
            num_labels: args.labels,
            noise_sd: args.noise_sd,
            seed,
        };
        manifests.push(synth_dataset(out, split, &cfg)?);
    }
    if manifests.is_empty() {
        return Err(CliError::Usage("nothing to generate: both counts are zero".into()));
    }
    Ok(manifests)
}

/// Writes `text` atomically, or prints it when no path is given.
pub fn emit(text: &str, path: Option<&Path>) -> CliResult<()> {
    match path {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
