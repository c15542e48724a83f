//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//! They share a lock so the timed ones never compete for the CPU.

use std::fs;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use milfcn::data::pnm::{decode_pgm, decode_ppm, dequantize, encode_pgm, encode_ppm, quantize};
use milfcn::data::{generate_dataset, load_split, DatasetSpec, Sample};
use milfcn::gradcheck::{check_network, sample_instance, LossKind};
use milfcn::mil::{infer_mask, mil_loss_from_scores, LabelBag};
use milfcn::train::checkpoint::{decode_checkpoint, encode_checkpoint};
use milfcn::train::loops::{
    background_fraction, evaluate, pretrain_classifier, train, train_mil, Objective, TrainOptions,
};
use milfcn::train::{load_checkpoint, mean_iu, save_checkpoint, MetricsWriter, OptimHyper, OptimState};
use milfcn::{build_network, transfer_classifier_weights, Graph, NetworkConfig, SegmentationMask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_INSTANCES: u64 = 20;
const GRADCHECK_SIZE: usize = 8;
const GRADCHECK_STEP: f64 = 1e-4;
const GRADCHECK_TOLERANCE: f64 = 1e-5;
const GRADCHECK_MARGIN: f64 = 1e-3;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);

const LN2_TOLERANCE: f64 = 1e-12;
const LOCALITY_INSTANCES: u64 = 100;
const IU_PAIRS: usize = 1000;

const PRETRAIN_ITERS: usize = 2000;
const PRETRAIN_LR: f64 = 0.01;
const MIL_ITERS: usize = 10_000;
const MIL_LR: f64 = 1e-4;
const SUPERVISED_ITERS: usize = 3000;
const SUPERVISED_LR: f64 = 0.03;
const MIN_GAIN: f64 = 1.5;
const EXPERIMENT_BUDGET: Duration = Duration::from_secs(20 * 60);

const COLLAPSE_ITERS: usize = 2000;
const COLLAPSE_LR: f64 = 1e-4;
const COLLAPSE_MIN_BACKGROUND: f64 = 0.9;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(criterion: u32, name: &str, pass: bool, detail: String) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} {name}: {word} ({detail})");
    assert!(pass, "criterion {criterion} {name} failed: {detail}");
}

fn hyper(lr: f64, iterations: usize) -> OptimHyper {
    OptimHyper {
        lr,
        iterations,
        ..OptimHyper::default()
    }
}

/// Default spec written to disk once and read back.
fn default_dataset() -> &'static (Vec<Sample>, Vec<Sample>) {
    static DATA: OnceLock<(Vec<Sample>, Vec<Sample>)> = OnceLock::new();
    DATA.get_or_init(|| {
        let spec = DatasetSpec::default();
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&spec, dir.path()).unwrap();
        let train = load_split(&dir.path().join("train"), spec.num_fg_classes).unwrap();
        let val = load_split(&dir.path().join("val"), spec.num_fg_classes).unwrap();
        (train, val)
    })
}

#[test]
fn criterion_1_network_gradients_match_finite_differences() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for seed in 0..GRADCHECK_INSTANCES {
        let inst = sample_instance(seed, GRADCHECK_SIZE, GRADCHECK_MARGIN, 500).unwrap();
        for kind in [LossKind::Mil, LossKind::ImageLabel] {
            let report = check_network(&inst, kind, GRADCHECK_STEP, GRADCHECK_TOLERANCE).unwrap();
            worst = worst.max(report.overall_max());
            if !report.pass {
                failures.push(format!("seed {seed} {kind:?} at {:?}", report.worst));
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "gradient check",
        failures.is_empty() && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} instances x 2 losses, max relative error {worst:.2e}, {:.1}s, failures {failures:?}",
            GRADCHECK_INSTANCES,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_loss_oracles() {
    let _guard = serial();
    let mut g = Graph::new();
    let s = g.leaf(Tensor::full(&[2, 3, 3], 0.7));
    let bag = LabelBag::new([0, 1], 1).unwrap();
    let loss = mil_loss_from_scores(&mut g, s, &bag).unwrap().loss;
    let ln2_err = (g.value(loss).data()[0] - std::f64::consts::LN_2).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut leaks = 0usize;
    for _ in 0..LOCALITY_INSTANCES {
        let (c, h, w) = (rng.gen_range(2..=5), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let scores = Tensor::uniform(&[c, h, w], -4.0, 4.0, &mut rng);
        let fg: Vec<usize> = (1..c).filter(|_| rng.gen_bool(0.5)).collect();
        let bag = LabelBag::with_foreground(fg, c - 1).unwrap();
        let mut g = Graph::new();
        let s = g.leaf(scores);
        let out = mil_loss_from_scores(&mut g, s, &bag).unwrap();
        let grad = g.backward_scalar(out.loss).unwrap().get(s);
        let selected: Vec<usize> = out.points.values().map(|p| p.y * w + p.x).collect();
        for pix in (0..h * w).filter(|p| !selected.contains(p)) {
            leaks += (0..c).filter(|&k| grad.data()[k * h * w + pix] != 0.0).count();
        }
    }
    verdict(
        2,
        "loss oracles",
        ln2_err <= LN2_TOLERANCE && leaks == 0,
        format!("|loss - ln 2| = {ln2_err:.1e}, nonzero off-point gradients {leaks} over {LOCALITY_INSTANCES} instances"),
    );
}

fn brute_mean_iu(preds: &[SegmentationMask], truths: &[SegmentationMask], classes: u8) -> f64 {
    let mut ratios = Vec::new();
    for c in 0..classes {
        let (mut inter, mut union) = (0u64, 0u64);
        for (p, t) in preds.iter().zip(truths) {
            for (&a, &b) in p.labels().iter().zip(t.labels()) {
                inter += (a == c && b == c) as u64;
                union += (a == c || b == c) as u64;
            }
        }
        if union > 0 {
            ratios.push(inter as f64 / union as f64);
        }
    }
    if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }
}

#[test]
fn criterion_3_mean_iu_oracle() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..IU_PAIRS {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let classes = rng.gen_range(1..=5u8);
        let mut mask = || {
            let labels = (0..h * w).map(|_| rng.gen_range(0..classes)).collect();
            SegmentationMask::new(h, w, labels).unwrap()
        };
        let (p, t) = (vec![mask()], vec![mask()]);
        let got = mean_iu(&p, &t, classes as usize).unwrap().mean;
        mismatches += (got.to_bits() != brute_mean_iu(&p, &t, classes).to_bits()) as usize;
    }
    let gt = SegmentationMask::new(2, 2, vec![0, 1, 0, 1]).unwrap();
    let pred = SegmentationMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let hand = mean_iu(&[pred], &[gt], 2).unwrap();
    let third = 1.0 / 3.0;
    let hand_ok = hand.per_class == [Some(third), Some(third)] && hand.mean == third;
    verdict(
        3,
        "mean IU oracle",
        mismatches == 0 && hand_ok,
        format!("{mismatches} mismatches in {IU_PAIRS} pairs, hand case {:?} mean {}", hand.per_class, hand.mean),
    );
}

#[test]
fn criterion_4_mil_beats_baseline_and_trails_supervised() {
    let _guard = serial();
    let start = Instant::now();
    let (train_set, val) = default_dataset();
    let net = build_network(NetworkConfig::default(), 0).unwrap();

    let pre = pretrain_classifier(net.clone(), train_set, &hyper(PRETRAIN_LR, PRETRAIN_ITERS), 0, None).unwrap();
    let tail = &pre.losses[PRETRAIN_ITERS - 50..];
    let pre_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    let transferred = transfer_classifier_weights(&net, &pre.net).unwrap();
    let baseline = evaluate(&transferred, val).unwrap().mean;

    let options = |lr, iters| TrainOptions {
        hyper: hyper(lr, iters),
        seed: 1,
        val_every: 0,
    };
    let mil = train_mil(transferred.clone(), train_set, val, &options(MIL_LR, MIL_ITERS), None).unwrap();
    let mil_iu = evaluate(&mil.net, val).unwrap().mean;

    let state = OptimState::for_network(&transferred);
    let sup = train(
        transferred,
        state,
        train_set,
        val,
        Objective::Supervised,
        &options(SUPERVISED_LR, SUPERVISED_ITERS),
        None,
    )
    .unwrap();
    let sup_iu = evaluate(&sup.net, val).unwrap().mean;
    let elapsed = start.elapsed();

    let pass = sup_iu > mil_iu
        && mil_iu > baseline
        && mil_iu >= MIN_GAIN * baseline
        && pre_loss < std::f64::consts::LN_2
        && elapsed < EXPERIMENT_BUDGET;
    verdict(
        4,
        "desk-scale experiment",
        pass,
        format!(
            "pretrain tail loss {pre_loss:.4}, baseline {baseline:.4}, MIL {mil_iu:.4} ({:.2}x), supervised {sup_iu:.4}, {:.0}s",
            mil_iu / baseline,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_5_cold_start_mil_collapses_to_background() {
    let _guard = serial();
    let (train_set, val) = default_dataset();
    let net = build_network(NetworkConfig::default(), 0).unwrap();
    let options = TrainOptions {
        hyper: hyper(COLLAPSE_LR, COLLAPSE_ITERS),
        seed: 1,
        val_every: 0,
    };
    let out = train_mil(net, train_set, val, &options, None).unwrap();
    let bg = background_fraction(&out.net, val).unwrap();
    verdict(
        5,
        "cold-start collapse",
        bg >= COLLAPSE_MIN_BACKGROUND,
        format!("{:.1}% of val pixels background", 100.0 * bg),
    );
}

#[test]
fn criterion_6_any_input_size() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = build_network(NetworkConfig::default(), 6).unwrap();
    save_checkpoint(&net, &OptimState::for_network(&net), &path).unwrap();
    let (net, _) = load_checkpoint(&path).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut shapes = Vec::new();
    let mut pass = true;
    for (h, w) in [(64, 64), (96, 64), (128, 128)] {
        let image = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let scores = net.predict(&image).unwrap();
        let mask = infer_mask(&scores, h, w).unwrap();
        pass &= scores.coarse_dims() == (h / 4, w / 4) && (mask.height(), mask.width()) == (h, w);
        shapes.push(format!("{h}x{w} -> {:?} -> {}x{}", scores.coarse_dims(), mask.height(), mask.width()));
    }
    verdict(6, "any-size forward", pass, shapes.join(", "));
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Dataset, short pretrain and MIL runs with checkpoints and CSVs.
fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let spec = DatasetSpec::default();
    let data = root.join("data");
    generate_dataset(&spec, &data).unwrap();
    let train_set = load_split(&data.join("train"), spec.num_fg_classes).unwrap();
    let val = load_split(&data.join("val"), spec.num_fg_classes).unwrap();
    let run = root.join("run");
    fs::create_dir_all(&run).unwrap();

    let net = build_network(NetworkConfig::default(), 7).unwrap();
    let mut m = MetricsWriter::create(&run.join("pretrain.csv")).unwrap();
    let pre = pretrain_classifier(net.clone(), &train_set, &hyper(0.01, 30), 7, Some(&mut m)).unwrap();
    save_checkpoint(&pre.net, &pre.state, &run.join("pretrain.ckpt")).unwrap();

    let transferred = transfer_classifier_weights(&net, &pre.net).unwrap();
    let options = TrainOptions {
        hyper: hyper(1e-3, 30),
        seed: 7,
        val_every: 10,
    };
    let mut m = MetricsWriter::create(&run.join("mil.csv")).unwrap();
    let mil = train_mil(transferred, &train_set, &val[..10], &options, Some(&mut m)).unwrap();
    save_checkpoint(&mil.net, &mil.state, &run.join("mil.ckpt")).unwrap();
    tree(root)
}

#[test]
fn criterion_7_determinism_and_formats() {
    let _guard = serial();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ta, tb) = (artifacts(a.path()), artifacts(b.path()));
    let identical = ta == tb;

    let (net, state) = load_checkpoint(&a.path().join("run/mil.ckpt")).unwrap();
    let ckpt_ok = decode_checkpoint(&encode_checkpoint(&net, &state).unwrap())
        .map(|(n, s)| n.params() == net.params() && s == state)
        .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let image = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
    let decoded = decode_ppm(&encode_ppm(&image).unwrap()).unwrap();
    let ppm_ok = image
        .data()
        .iter()
        .zip(decoded.data())
        .all(|(&v, &d)| d == dequantize(quantize(v)));
    let mask = SegmentationMask::new(64, 64, (0..4096).map(|_| rng.gen_range(0..5)).collect()).unwrap();
    let pgm_ok = decode_pgm(&encode_pgm(&mask)).unwrap() == mask;

    verdict(
        7,
        "determinism and formats",
        identical && ckpt_ok && ppm_ok && pgm_ok,
        format!(
            "{} files byte-identical: {identical}, checkpoint roundtrip {ckpt_ok}, ppm {ppm_ok}, pgm {pgm_ok}",
            ta.len()
        ),
    );
}
