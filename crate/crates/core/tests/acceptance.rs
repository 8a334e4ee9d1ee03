//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovrs_core::autodiff::{Tape, Tensor, Var};
use ovrs_core::backbone::{MockTextEncoder, MockVisionEncoder, PromptTemplate, TextEncoder, VisionEncoder};
use ovrs_core::data::synth::{generate_scenes, SynthConfig};
use ovrs_core::decoder::DecoderStage;
use ovrs_core::grid::{Grid, ImageGrid, LabelMask};
use ovrs_core::metrics::ConfusionMatrix;
use ovrs_core::nn::{Ctx, ParamStore};
use ovrs_core::refine::{RefineBlock, RefineConfig};
use ovrs_core::rotsim::compute_orientation_similarities;
use ovrs_core::train::{cross_entropy_loss, train_loop};
use ovrs_core::{
    BackboneSpec, LoadedSample, Model, ModelConfig, Orientation, OrientationConfig, TrainConfig, Trainer,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

/// Counter-clockwise quarter turn of an `n x n` grid with `c` channels.
fn quarter_turn<T: Copy>(data: &[T], n: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..n {
        for col in 0..n {
            let (sr, sc) = (col, n - 1 - r);
            out.extend_from_slice(&data[(sr * n + sc) * c..][..c]);
        }
    }
    out
}

fn turns<T: Copy>(data: &[T], n: usize, c: usize, t: u8) -> Vec<T> {
    (0..t).fold(data.to_vec(), |d, _| quarter_turn(&d, n, c))
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> ImageGrid {
    let data = (0..side * side * 3).map(|_| rng.random::<f32>()).collect();
    ImageGrid::from_rgb(side, side, data).unwrap()
}

fn c1_rotation_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    let mut oracle_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=48);
        let c = rng.random_range(1..=5);
        let data: Vec<f32> = (0..n * n * c).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        let grid = Grid::new(n, n, c, data.clone()).unwrap();
        let t = Orientation::new(rng.random_range(0..4)).unwrap();
        let rotated = grid.rotate(t).unwrap();
        if rotated.data() != turns(&data, n, c, t.quarter_turns()).as_slice() {
            oracle_mismatch += 1;
        }
        let back = rotated.rotate(t.inverse()).unwrap();
        if back.data().iter().zip(&data).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && oracle_mismatch == 0 && within(elapsed, 5),
        format!("{failures} round-trip failures, {oracle_mismatch} oracle mismatches over 1000 grids in {elapsed:.2?}"),
    )
}

fn c2_alignment_invariant() -> Outcome {
    let start = Instant::now();
    let spec = BackboneSpec::default();
    let vision = MockVisionEncoder::new(spec.clone(), 42).unwrap();
    let text = MockTextEncoder::new(spec.embed_dim, 42).unwrap();
    let names: Vec<String> = ["ship", "harbor", "tree", "road", "water"].map(String::from).to_vec();
    let classes = text.encode_all(&PromptTemplate::default(), &names).unwrap();
    let class_data: Vec<f64> = classes.iter().flat_map(|c| c.vector().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0f64;
    for _ in 0..20 {
        let image = random_image(&mut rng, 384);
        let tape = Tape::new();
        let class_var = tape.constant(Tensor::new(&[names.len(), spec.embed_dim], class_data.clone()).unwrap());
        let feats: Vec<Var> = (0..4u8)
            .map(|t| {
                let view = image.rotate(Orientation::new(t).unwrap()).unwrap();
                let deepest = vision.encode_image_multilevel(&view).unwrap().pop().unwrap();
                let (h, w, d) = (deepest.height(), deepest.width(), deepest.channels());
                let data = deepest.data().iter().map(|&v| f64::from(v)).collect();
                tape.constant(Tensor::new(&[h, w, d], data).unwrap())
            })
            .collect();
        let sims = compute_orientation_similarities(&feats, &class_var).unwrap().value();
        let s = sims.shape().to_vec();
        let (n_c, h) = (s[1], s[2]);
        let plane = h * h;
        let data = sims.data();
        for k in 0..4u8 {
            for c in 0..n_c {
                let slice = &data[(k as usize * n_c + c) * plane..][..plane];
                let zero = &data[c * plane..][..plane];
                let back = turns(slice, h, 1, (4 - k) % 4);
                for (a, b) in back.iter().zip(zero) {
                    worst = worst.max((*a as f32 - *b as f32).abs() as f64);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-5 && within(elapsed, 30),
        format!("max |delta| {worst:.3e} over 20 images, N_A=4, in {elapsed:.2?}"),
    )
}

fn c3_permutation_equivariance() -> Outcome {
    let start = Instant::now();
    let model = Model::new(ModelConfig::default()).unwrap();
    let names: Vec<String> = ["ship", "harbor", "tree", "road", "water", "building", "car", "bridge"]
        .map(String::from)
        .to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for _ in 0..10 {
        let image = random_image(&mut rng, 128);
        let mut perm: Vec<usize> = (0..names.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<String> = perm.iter().map(|&i| names[i].clone()).collect();
        let a = model.forward(&image, &names).unwrap();
        let b = model.forward(&image, &permuted).unwrap();
        let n = names.len();
        for (pa, pb) in a.data().chunks(n).zip(b.data().chunks(n)) {
            for (j, &src) in perm.iter().enumerate() {
                worst = worst.max((pb[j] as f32 - pa[src] as f32).abs() as f64);
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-5 && within(elapsed, 60),
        format!("max |delta| {worst:.3e} over 10 permutations of 8 categories in {elapsed:.2?}"),
    )
}

struct Oracle {
    miou: f64,
    fwiou: f64,
    macc: f64,
}

/// Direct pixel counting, independent of the confusion matrix.
fn brute_force(pred: &[u8], gt: &[u8], classes: u8, ignore: u8) -> Oracle {
    let valid: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != ignore).collect();
    let (mut ious, mut accs, mut weighted) = (Vec::new(), Vec::new(), 0.0);
    for c in 0..classes {
        let tp = valid.iter().filter(|&&i| gt[i] == c && pred[i] == c).count();
        let g = valid.iter().filter(|&&i| gt[i] == c).count();
        let p = valid.iter().filter(|&&i| pred[i] == c).count();
        let union = g + p - tp;
        if union > 0 {
            let iou = tp as f64 / union as f64;
            ious.push(iou);
            weighted += g as f64 * iou;
        }
        if g > 0 {
            accs.push(tp as f64 / g as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Oracle {
        miou: mean(&ious),
        fwiou: weighted / valid.len() as f64,
        macc: mean(&accs),
    }
}

fn c4_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0f64;
    for _ in 0..100 {
        let gt: Vec<u8> = (0..256)
            .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..5) })
            .collect();
        let pred: Vec<u8> = (0..256).map(|_| rng.random_range(0..5)).collect();
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(
            &LabelMask::new(16, 16, 1, pred.clone()).unwrap(),
            &LabelMask::new(16, 16, 1, gt.clone()).unwrap(),
            255,
        )
        .unwrap();
        let o = brute_force(&pred, &gt, 5, 255);
        for (a, b) in [(cm.miou().unwrap(), o.miou), (cm.fwiou().unwrap(), o.fwiou), (cm.macc().unwrap(), o.macc)] {
            worst = worst.max((a - b).abs());
        }
    }
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(
        &LabelMask::new(2, 2, 1, vec![0, 1, 1, 1]).unwrap(),
        &LabelMask::new(2, 2, 1, vec![0, 0, 1, 1]).unwrap(),
        255,
    )
    .unwrap();
    let worked = (cm.miou().unwrap(), cm.fwiou().unwrap(), cm.macc().unwrap());
    let exact = worked == (7.0 / 12.0, 7.0 / 12.0, 3.0 / 4.0);
    outcome(
        worst < 1e-12 && exact,
        format!("max |delta| vs counting oracle {worst:.3e} over 100 pairs; worked example (mIoU, fwIoU, mACC) = {worked:?}"),
    )
}

fn c5_loss_identities() -> Outcome {
    let mut worst_uniform = 0f64;
    for n in [2usize, 5, 15] {
        let tape = Tape::new();
        let logits = tape.variable(Tensor::zeros(&[4, 4, n]));
        let target = LabelMask::new(4, 4, 1, (0..16).map(|i| (i % n) as u8).collect()).unwrap();
        let l = cross_entropy_loss(&logits, &target, 255, None).unwrap().loss.value().item();
        worst_uniform = worst_uniform.max((l - (n as f64).ln()).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w, n) = (6, 5, 4);
    let vals: Vec<f64> = (0..h * w * n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels: Vec<u8> = (0..h * w)
        .map(|_| if rng.random_bool(0.25) { 255 } else { rng.random_range(0..n as u8) })
        .collect();
    let valid = labels.iter().filter(|&&l| l != 255).count() as f64;
    let tape = Tape::new();
    let logits = tape.variable(Tensor::new(&[h, w, n], vals.clone()).unwrap());
    let target = LabelMask::new(h, w, 1, labels.clone()).unwrap();
    let loss = cross_entropy_loss(&logits, &target, 255, None).unwrap().loss;
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(logits).unwrap().data().to_vec();
    let (mut worst_grad, mut ignored_nonzero) = (0f64, 0usize);
    for (px, &label) in labels.iter().enumerate() {
        let row = &vals[px * n..][..n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for c in 0..n {
            let got = g[px * n + c];
            if label == 255 {
                ignored_nonzero += usize::from(got != 0.0);
            } else {
                let onehot = if usize::from(label) == c { 1.0 } else { 0.0 };
                let want = ((row[c] - m).exp() / z - onehot) / valid;
                worst_grad = worst_grad.max((got - want).abs());
            }
        }
    }
    outcome(
        worst_uniform < 1e-6 && worst_grad < 1e-6 && ignored_nonzero == 0,
        format!(
            "uniform-logit error {worst_uniform:.1e}, softmax-minus-onehot error {worst_grad:.1e}, {ignored_nonzero} nonzero ignored-pixel gradients"
        ),
    )
}

/// Largest `|a - n| / max(|a|, |n|, 1e-6)` between analytic and central
/// difference gradients over every parameter entry in `store`.
/// Relative error per parameter tensor, `|a - n| / max(|a|, |n|)` in the
/// Euclidean norm; returns the worst tensor, the worst single-entry absolute
/// gap and the number of entries checked.
fn grad_check(
    store: &mut ParamStore,
    loss: &dyn Fn(&Ctx) -> f64,
    analytic: &dyn Fn(&ParamStore) -> Vec<(String, Tensor)>,
) -> (f64, f64, usize) {
    const EPS: f64 = 1e-5;
    let grads = analytic(store);
    let names: Vec<String> = store.names().map(String::from).collect();
    let (mut worst, mut worst_abs, mut count) = (0f64, 0f64, 0usize);
    for name in names {
        let base = store.value(&name).unwrap().clone();
        let a = grads
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, g)| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; base.numel()]);
        let (mut diff, mut a_norm, mut n_norm) = (0f64, 0f64, 0f64);
        for i in 0..base.numel() {
            let mut eval = |delta: f64| {
                let mut v = base.to_vec();
                v[i] += delta;
                store.set(&name, Tensor::new(base.shape(), v).unwrap()).unwrap();
                let tape = Tape::new();
                let cx = Ctx::new(&tape, store);
                loss(&cx)
            };
            let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            diff += (a[i] - numeric).powi(2);
            a_norm += a[i].powi(2);
            n_norm += numeric.powi(2);
            worst_abs = worst_abs.max((a[i] - numeric).abs());
            count += 1;
        }
        let rel = diff.sqrt() / a_norm.sqrt().max(n_norm.sqrt()).max(1e-12);
        worst = worst.max(rel);
        store.set(&name, base).unwrap();
    }
    (worst, worst_abs, count)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn refine_loss<'t>(cx: &Ctx<'t>, block: &RefineBlock, m: &Tensor, probe: &Tensor) -> Var<'t> {
    let out = block.forward(cx, cx.constant(m.clone())).unwrap();
    out.mul(&cx.constant(probe.clone())).unwrap().sum_all().unwrap()
}

fn stage_loss<'t>(cx: &Ctx<'t>, stage: &DecoderStage, m: &Tensor, level: &Tensor, probe: &Tensor) -> Var<'t> {
    let out = stage
        .forward(cx, cx.constant(m.clone()), cx.constant(level.clone()))
        .unwrap();
    out.mul(&cx.constant(probe.clone())).unwrap().sum_all().unwrap()
}

fn c6_gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n_c, h, d_f) = (3, 8, 16);
    let m = random_tensor(&mut rng, &[n_c, h, h, d_f]);

    let mut store = ParamStore::new(6);
    let cfg = RefineConfig {
        repeats: 1,
        window_size: 4,
        heads: 2,
    };
    let block = RefineBlock::new(&mut store, d_f, &cfg).unwrap();
    let probe = random_tensor(&mut rng, &[n_c, h, h, d_f]);
    let (refine_err, refine_abs, refine_n) = grad_check(
        &mut store,
        &|cx| refine_loss(cx, &block, &m, &probe).value().item(),
        &|s| {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, s);
            let g = tape.backward(refine_loss(&cx, &block, &m, &probe)).unwrap();
            cx.param_grads(&g)
        },
    );

    let feat_dim = 12;
    let mut store = ParamStore::new(7);
    let stage = DecoderStage::new(&mut store, "decoder.stage0", feat_dim, d_f).unwrap();
    let level = random_tensor(&mut rng, &[h, h, feat_dim]);
    let probe = random_tensor(&mut rng, &[n_c, 2 * h, 2 * h, d_f]);
    let (stage_err, stage_abs, stage_n) = grad_check(
        &mut store,
        &|cx| stage_loss(cx, &stage, &m, &level, &probe).value().item(),
        &|s| {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, s);
            let g = tape.backward(stage_loss(&cx, &stage, &m, &level, &probe)).unwrap();
            cx.param_grads(&g)
        },
    );
    let elapsed = start.elapsed();
    outcome(
        refine_err < 1e-3 && stage_err < 1e-3 && within(elapsed, 300),
        format!(
            "max per-parameter relative error: refine block {refine_err:.2e} ({refine_n} entries, worst entry gap {refine_abs:.1e}), decoder stage {stage_err:.2e} ({stage_n} entries, worst entry gap {stage_abs:.1e}), in {elapsed:.2?}"
        ),
    )
}

fn samples(cfg: &SynthConfig) -> Vec<LoadedSample> {
    generate_scenes(cfg)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| LoadedSample {
            id: format!("{i:04}"),
            image: s.image,
            mask: s.mask,
        })
        .collect()
}

struct OverfitRun {
    losses: Vec<f64>,
    metrics: (f64, f64, f64),
    iterations: u64,
    elapsed: Duration,
}

/// 8 synthetic images, 3 categories, defaults except d_F = 32, at most 800
/// iterations, stopping once train mIoU reaches 0.90.
fn overfit_run() -> OverfitRun {
    let start = Instant::now();
    let synth = SynthConfig {
        num_images: 8,
        num_categories: 3,
        scale_range: [0.3, 0.6],
        ..SynthConfig::default()
    };
    let train = samples(&synth);
    let model = Model::new(ModelConfig {
        d_f: 32,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        max_iterations: 800,
        eval_every: 50,
        stop_at_train_miou: Some(0.90),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg, synth.category_names()).unwrap();
    let out = train_loop(&mut trainer, &train, &[], None, &mut |_| {}).unwrap();
    let cm = trainer.evaluate(&train).unwrap();
    OverfitRun {
        losses: out.losses(),
        metrics: (cm.miou().unwrap(), cm.fwiou().unwrap(), cm.macc().unwrap()),
        iterations: trainer.iteration,
        elapsed: start.elapsed(),
    }
}

fn c7_overfit(run: &OverfitRun) -> Outcome {
    outcome(
        run.metrics.0 >= 0.90 && run.iterations <= 800 && within(run.elapsed, 600),
        format!(
            "train mIoU {:.4} after {} iterations in {:.1?}",
            run.metrics.0, run.iterations, run.elapsed
        ),
    )
}

/// 8 synthetic images at 128 px, 4 categories; every model is trained for
/// 600 iterations so both orientation settings fit the train split.
fn c8_orientation_trend() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig {
        num_images: 8,
        image_side: 128,
        num_categories: 4,
        scale_range: [0.3, 0.6],
        ..SynthConfig::default()
    };
    let train = samples(&synth);
    let quarter = Orientation::new(1).unwrap();
    let val: Vec<LoadedSample> = train
        .iter()
        .map(|s| LoadedSample {
            id: format!("{}_r1", s.id),
            image: s.image.rotate(quarter).unwrap(),
            mask: s.mask.rotate(quarter).unwrap(),
        })
        .collect();
    let (mut means, mut fits) = (Vec::new(), Vec::new());
    for orientations in [OrientationConfig::default(), OrientationConfig::single()] {
        let (mut total, mut fit) = (0.0, 0.0);
        for seed in 0..3u64 {
            let model = Model::new(ModelConfig {
                d_f: 32,
                orientations: orientations.clone(),
                seed,
                ..ModelConfig::default()
            })
            .unwrap();
            let cfg = TrainConfig {
                max_iterations: 600,
                image_side: 128,
                eval_every: 1000,
                seed,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(model, cfg, synth.category_names()).unwrap();
            train_loop(&mut trainer, &train, &[], None, &mut |_| {}).unwrap();
            total += trainer.evaluate(&val).unwrap().miou().unwrap();
            fit += trainer.evaluate(&train).unwrap().miou().unwrap();
        }
        means.push(total / 3.0);
        fits.push(fit / 3.0);
    }
    let elapsed = start.elapsed();
    outcome(
        means[0] >= means[1] && within(elapsed, 1800),
        format!(
            "mean rotated-eval mIoU over 3 seeds: N_A=4 {:.4}, N_A=1 {:.4} (train mIoU {:.4} and {:.4}), in {elapsed:.1?}",
            means[0], means[1], fits[0], fits[1]
        ),
    )
}

fn c9_determinism(a: &OverfitRun, b: &OverfitRun) -> Outcome {
    let same_losses = a.losses.len() == b.losses.len()
        && a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits());
    let same_metrics = a.metrics == b.metrics;
    outcome(
        same_losses && same_metrics,
        format!(
            "{} logged losses identical: {same_losses}; final metrics identical: {same_metrics}",
            a.losses.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |n: u8, name: &'static str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "rotation round-trip", c1_rotation_round_trip());
    report(2, "mock alignment invariant", c2_alignment_invariant());
    report(3, "category permutation equivariance", c3_permutation_equivariance());
    report(4, "metric oracle equivalence", c4_metric_oracle());
    report(5, "loss identities", c5_loss_identities());
    report(6, "finite-difference gradients", c6_gradient_checks());
    let first = overfit_run();
    report(7, "overfit smoke test", c7_overfit(&first));
    report(8, "orientation trend", c8_orientation_trend());
    let second = overfit_run();
    report(9, "determinism", c9_determinism(&first, &second));
    let failed: Vec<u8> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
