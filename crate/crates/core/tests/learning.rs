use std::time::Instant;

use dcrf::data::Sample;
use dcrf::gradcheck::{gradcheck, sample_loss, GradCheckOptions};
use dcrf::learning::{mf_backward, sample_gradients, softmax_backward, BackwardOptions};
use dcrf::{
    build_features, mf_infer, train_step, Compatibility, ConvNetUnary, FeatureKind, Field,
    FilterMode, KernelEntry, KernelSpec, LabelMap, LinearUnary, LossMode, MfConfig, OptimConfig,
    OptimState, PairwiseModel, RgbImage, SigmaGrad, TrainConfig, UnaryProvider, UpdateMode,
    VOID_LABEL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sample(rng: &mut ChaCha8Rng, h: usize, w: usize, labels: u8) -> Sample {
    let image = RgbImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
    let gt = (0..h * w)
        .map(|_| if rng.gen_bool(0.1) { VOID_LABEL } else { rng.gen_range(0..labels) })
        .collect();
    Sample::new(image, LabelMap::new(h, w, gt).unwrap()).unwrap()
}

fn full_model(rng: &mut ChaCha8Rng, labels: usize) -> PairwiseModel {
    let mut mu = vec![0.0; labels * labels];
    for a in 0..labels {
        for b in a..labels {
            let v = if a == b { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3);
            mu[a * labels + b] = v;
            mu[b * labels + a] = v;
        }
    }
    PairwiseModel::new(
        vec![
            KernelEntry { spec: KernelSpec::spatial(2.0).unwrap(), weight: rng.gen_range(0.5..1.5) },
            KernelEntry {
                spec: KernelSpec::bilateral(3.0, 60.0).unwrap(),
                weight: rng.gen_range(0.5..1.5),
            },
        ],
        Compatibility::full(labels, mu).unwrap(),
    )
    .unwrap()
}

fn joint_cfg(t: usize) -> TrainConfig {
    TrainConfig {
        mf: MfConfig::new(t, UpdateMode::Parallel, FilterMode::Brute).unwrap(),
        crf_enabled: true,
        backward: BackwardOptions::default(),
    }
}

fn randomize_biases(net: &mut ConvNetUnary, rng: &mut ChaCha8Rng) {
    let mut p = net.params();
    for t in &mut p {
        if t.name.ends_with("bias") {
            t.values.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
        }
    }
    net.set_params(&p).unwrap();
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let sample = random_sample(&mut rng, 8, 8, 3);
    let mut net = ConvNetUnary::new(3, 17);
    randomize_biases(&mut net, &mut rng);
    let model = full_model(&mut rng, 3);
    let opts = GradCheckOptions { stride: 5, ..Default::default() };
    let rows = gradcheck(&sample, &net, &model, &joint_cfg(3), &opts).unwrap();
    let names: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r.name.split('.').next().unwrap()).collect();
    assert!(names.contains("conv1") && names.contains("conv4") && names.contains("crf"));
    for r in &rows {
        assert!(r.passes(&opts), "{} [{}]: {} vs {}", r.name, r.index, r.analytic, r.numeric);
    }
}

#[test]
fn sum_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sample = random_sample(&mut rng, 6, 5, 3);
    let mut lin = LinearUnary::new(3, 3);
    lin.fit_standardization([&sample.image]).unwrap();
    let model = full_model(&mut rng, 3);
    let mut cfg = joint_cfg(2);
    cfg.backward.loss = LossMode::Sum;
    let opts = GradCheckOptions::default();
    for r in gradcheck(&sample, &lin, &model, &cfg, &opts).unwrap() {
        assert!(r.passes(&opts), "{} [{}]: {} vs {}", r.name, r.index, r.analytic, r.numeric);
    }
}

/// Without the CRF the unary gradient is `(softmax(s) - onehot(y)) / count`.
#[test]
fn disabled_crf_gives_softmax_regression_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sample = random_sample(&mut rng, 5, 6, 4);
    let lin = LinearUnary::new(4, 4);
    let cfg = TrainConfig { crf_enabled: false, ..joint_cfg(5) };
    let g = sample_gradients(&sample, &lin, &full_model(&mut rng, 4), &cfg).unwrap();
    assert!(g.crf.is_none());

    let (scores, _) = lin.forward(&sample.image).unwrap();
    let count = sample.labels.labels().iter().filter(|&&y| y != VOID_LABEL).count() as f64;
    let mut d = vec![0.0; 6 * 4];
    let mut loss = 0.0;
    for (i, &y) in sample.labels.labels().iter().enumerate() {
        if y == VOID_LABEL {
            continue;
        }
        let row = scores.pixel(i);
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|s| (s - m).exp()).sum();
        loss += -(row[y as usize] - m - z.ln()) / count;
        let x = i % 6;
        let yy = i / 6;
        let feats = [
            x as f64,
            yy as f64,
            sample.image.pixel(x, yy)[0] as f64,
            sample.image.pixel(x, yy)[1] as f64,
            sample.image.pixel(x, yy)[2] as f64,
            1.0,
        ];
        for l in 0..4 {
            let p = (row[l] - m).exp() / z;
            let r = (p - if l == y as usize { 1.0 } else { 0.0 }) / count;
            for (k, f) in feats.iter().enumerate() {
                d[k * 4 + l] += f * r;
            }
        }
    }
    assert!((g.loss.value - loss).abs() < 1e-10);
    for (a, b) in g.unary[0].iter().zip(&d) {
        assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn zero_iterations_give_the_unary_only_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let sample = random_sample(&mut rng, 5, 5, 3);
    let lin = LinearUnary::new(3, 2);
    let model = full_model(&mut rng, 3);
    let g0 = sample_gradients(&sample, &lin, &model, &joint_cfg(0)).unwrap();
    let off = TrainConfig { crf_enabled: false, ..joint_cfg(0) };
    let reference = sample_gradients(&sample, &lin, &model, &off).unwrap();
    assert_eq!(g0.loss.value, reference.loss.value);
    assert_eq!(g0.unary, reference.unary);
    let crf = g0.crf.expect("CRF gradients");
    assert!(crf.param_grads().iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch: Vec<Sample> = (0..3).map(|_| random_sample(&mut rng, 6, 6, 3)).collect();
    let mut net = ConvNetUnary::new(3, 1);
    let mut model = full_model(&mut rng, 3);
    let (net0, model0) = (net.clone(), model.clone());
    let mut opt = OptimState::new(OptimConfig {
        lr_top: 0.0,
        lr_body: 0.0,
        lr_crf: 0.0,
        ..Default::default()
    })
    .unwrap();
    let report = train_step(&batch, &mut net, &mut model, &mut opt, &joint_cfg(2)).unwrap();
    assert!(report.skipped.is_none());
    assert!(report.loss.is_finite() && report.loss > 0.0);
    assert_eq!(net, net0);
    assert_eq!(model, model0);
}

#[test]
fn repeated_steps_on_one_sample_descend() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sample = random_sample(&mut rng, 8, 8, 3);
    let mut net = ConvNetUnary::new(3, 2);
    let mut model = full_model(&mut rng, 3);
    let mut opt = OptimState::new(OptimConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        lr_top: 0.0002,
        lr_body: 0.0002,
        lr_crf: 0.0002,
        decay_crf: false,
    })
    .unwrap();
    let cfg = joint_cfg(3);
    let batch = [sample];
    let mut losses = Vec::new();
    for _ in 0..51 {
        losses.push(train_step(&batch, &mut net, &mut model, &mut opt, &cfg).unwrap().loss);
    }
    let decreasing = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(decreasing >= 48, "{decreasing} of 50 steps decreased: {losses:?}");
}

#[test]
fn batch_gradient_is_the_mean_of_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch: Vec<Sample> = (0..4).map(|_| random_sample(&mut rng, 5, 5, 3)).collect();
    let net = LinearUnary::new(3, 5);
    let model = full_model(&mut rng, 3);
    let cfg = joint_cfg(2);
    let cfg_opt = OptimConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        lr_top: 1.0,
        lr_body: 1.0,
        lr_crf: 1.0,
        decay_crf: false,
    };
    let (mut n2, mut m2) = (net.clone(), model.clone());
    let mut opt = OptimState::new(cfg_opt).unwrap();
    train_step(&batch, &mut n2, &mut m2, &mut opt, &cfg).unwrap();
    let mut mean = vec![0.0; net.params()[0].values.len()];
    for s in &batch {
        let g = sample_gradients(s, &net, &model, &cfg).unwrap();
        for (a, b) in mean.iter_mut().zip(&g.unary[0]) {
            *a += b / 4.0;
        }
    }
    for ((old, new), g) in net.params()[0].values.iter().zip(&n2.params()[0].values).zip(&mean) {
        assert!((old - g - new).abs() < 1e-12);
    }
}

#[test]
fn training_is_independent_of_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batch: Vec<Sample> = (0..5).map(|_| random_sample(&mut rng, 6, 6, 3)).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut net = ConvNetUnary::new(3, 3);
            let mut model = full_model(&mut ChaCha8Rng::seed_from_u64(1), 3);
            let mut opt = OptimState::new(OptimConfig::default()).unwrap();
            for _ in 0..3 {
                train_step(&batch, &mut net, &mut model, &mut opt, &joint_cfg(2)).unwrap();
            }
            (net, model)
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn non_finite_gradients_skip_the_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sample = random_sample(&mut rng, 4, 4, 2);
    let mut lin = LinearUnary::zeros(2);
    // Saturate label 1 everywhere so the ground truth gets probability zero.
    let w = lin.weight_mut();
    w[5 * 2] = -1e6;
    w[5 * 2 + 1] = 1e6;
    let before = lin.clone();
    let mut model = PairwiseModel::empty();
    let mut opt = OptimState::new(OptimConfig::default()).unwrap();
    let cfg = TrainConfig { crf_enabled: false, ..joint_cfg(1) };
    let mut gt = sample.labels.clone();
    gt.labels_mut().iter_mut().for_each(|l| *l = 0);
    let s = Sample::new(sample.image, gt).unwrap();
    let r = train_step(&[s], &mut lin, &mut model, &mut opt, &cfg).unwrap();
    assert!(r.skipped.is_some());
    assert_eq!(lin, before);
}

#[test]
fn unreachable_coordinates_have_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let sample = random_sample(&mut rng, 5, 5, 3);
    let feats = build_features(&sample.image, FeatureKind::Bilateral).unwrap();
    let mut model = full_model(&mut rng, 3);
    model.set_compat(Compatibility::Potts);
    let plans = model.build_plans(&feats, FilterMode::Brute).unwrap();
    let cfg = MfConfig::new(3, UpdateMode::Parallel, FilterMode::Brute).unwrap();

    let void = LabelMap::filled(5, 5, VOID_LABEL);
    let unary = Field::from_fn(5, 5, 3, |_, _| rng.gen_range(-1.0..1.0));
    let traj = mf_infer(&unary, &model, &plans, &cfg).unwrap();
    let g = mf_backward(&traj, &model, &plans, &void, &BackwardOptions::default()).unwrap();
    assert!(g.d_unary.data().iter().chain(g.param_grads().iter().flatten()).all(|&v| v == 0.0));

    // Labels 1 and 2 carry identical scores and never appear in the ground
    // truth, so moving score mass between them cannot change the loss.
    let unary = Field::from_fn(5, 5, 3, |i, l| if l == 0 { 0.3 * i as f64 % 1.0 } else { -0.2 });
    let gt = LabelMap::new(5, 5, (0..25).map(|i| if i % 4 == 0 { VOID_LABEL } else { 0 }).collect()).unwrap();
    let traj = mf_infer(&unary, &model, &plans, &cfg).unwrap();
    let g = mf_backward(&traj, &model, &plans, &gt, &BackwardOptions::default()).unwrap();
    let loss_at = |u: &Field| {
        let t = mf_infer(u, &model, &plans, &cfg).unwrap();
        dcrf::loss_nll(t.last(), &gt).unwrap().value
    };
    for i in 0..25 {
        assert!((g.d_unary.get(i, 1) - g.d_unary.get(i, 2)).abs() < 1e-9);
        let (mut p, mut m) = (unary.clone(), unary.clone());
        p.set(i, 1, p.get(i, 1) + 1e-5);
        p.set(i, 2, p.get(i, 2) - 1e-5);
        m.set(i, 1, m.get(i, 1) - 1e-5);
        m.set(i, 2, m.get(i, 2) + 1e-5);
        assert!(((loss_at(&p) - loss_at(&m)) / 2e-5).abs() < 1e-9);
    }
}

/// Backtracking costs about one extra inference, while finite differences
/// need two inferences per parameter.
#[test]
fn backward_cost_does_not_scale_with_parameter_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let sample = random_sample(&mut rng, 32, 32, 3);
    let model = full_model(&mut rng, 3);
    let feats = build_features(&sample.image, FeatureKind::Bilateral).unwrap();
    let plans = model.build_plans(&feats, FilterMode::Brute).unwrap();
    let cfg = joint_cfg(5);
    let unary = Field::from_fn(32, 32, 3, |_, _| rng.gen_range(-1.0..1.0));
    let lin = LinearUnary::zeros(3);

    let start = Instant::now();
    let traj = mf_infer(&unary, &model, &plans, &cfg.mf).unwrap();
    let opts = BackwardOptions { sigma_grad: SigmaGrad::Frozen, ..Default::default() };
    mf_backward(&traj, &model, &plans, &sample.labels, &opts).unwrap();
    let analytic = start.elapsed();

    let start = Instant::now();
    let base = model.params();
    let coords: Vec<(usize, usize)> = base
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.values.len()).map(move |k| (t, k)))
        .take(9)
        .collect();
    assert_eq!(coords.len(), 9);
    for &(t, k) in &coords {
        for d in [1e-5, -1e-5] {
            let mut p = base.clone();
            p[t].values[k] += d;
            let mut m = model.clone();
            m.set_params(&p).unwrap();
            sample_loss(&sample, &lin, &m, &cfg).unwrap();
        }
    }
    let numeric = start.elapsed();
    assert!(
        numeric.as_secs_f64() >= 5.0 * analytic.as_secs_f64(),
        "analytic {analytic:?}, 9-parameter sweep {numeric:?}"
    );
}

#[test]
fn softmax_backward_is_shift_invariant() {
    let q = [0.1, 0.6, 0.3];
    let up = [0.4, -1.0, 2.0];
    let shifted: Vec<f64> = up.iter().map(|u| u + 3.5).collect();
    for (a, b) in softmax_backward(&q, &up).iter().zip(softmax_backward(&q, &shifted)) {
        assert!((a - b).abs() < 1e-15);
    }
}
