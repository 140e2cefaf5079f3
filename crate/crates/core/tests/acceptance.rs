//! One line per acceptance criterion. Training-scale criteria need the real
//! CIFAR-10 binaries under `LABNN_DATA_DIR` and run only with `--ignored`
//! or `--include-ignored`.

mod common;

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use labnn::analysis::{
    count_ops, endsim, layer_uniqueness, pairwise_dissimilarity, ssim, uniqueness_eta, write_distribution_csv,
    write_uniqueness_csv, DistributionAccumulator,
};
use labnn::binarize::{binarize, sign_ste_forward, BinarizerKind};
use labnn::bitconv::{binconv, BinConvLayer};
use labnn::nets::sweep::placement_sweep;
use labnn::tensor::conv::conv2d;
use labnn::train::data::{synthetic, Split};
use labnn::train::{evaluate, load_dataset, quantize_lab, train};
use labnn::{
    unpack, BinarizerChoice, BitTensor, Dataset, DatasetKind, LabParams, Mode, Model, ModelSpec, Padding, Real,
    TrainConfig,
};
use rand::Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

use Outcome::{Fail, NotRun, Pass};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

const PADDINGS: [Padding; 4] = [Padding::Valid, Padding::SAME_MINUS_ONE, Padding::SAME_ZERO, Padding::Same(1.0)];

fn same_value(p: Padding) -> Option<i32> {
    match p {
        Padding::Valid => None,
        Padding::Same(v) => Some(v as i32),
    }
}

fn kernel_equivalence() -> Outcome {
    let mut r = rng(1);
    let cases = 240;
    let mut worst: Real = 0.0;
    let mut naive_mismatch = 0;
    for case in 0..cases {
        let k = [1, 2, 3, 3, 5][r.random_range(0..5)];
        let c_in = if case % 8 == 0 { r.random_range(60..140) } else { r.random_range(1..12) };
        let c_out = r.random_range(1..5);
        let (h, w) = (r.random_range(k..k + 9), r.random_range(k..k + 70));
        let stride = r.random_range(1..4);
        let pad = PADDINGS[case % 4];
        let a = random_bits(shape(r.random_range(1..3), c_in, h, w), &mut r);
        let wt = random_bits(shape(c_out, c_in, k, k), &mut r);
        let layer = BinConvLayer::new(wt.clone(), stride, pad).unwrap();
        let got = binconv(&a, &layer).unwrap();
        let want = conv2d(&unpack(&a), &unpack(&wt), stride, pad).unwrap();
        if got.shape() != want.shape() {
            return Fail(format!("case {case}: shape {} vs {}", got.shape(), want.shape()));
        }
        worst = worst.max(got.max_abs_diff(&want));
        let (ns, nd) = naive_pm1_conv(&a, &wt, stride, same_value(pad));
        if ns != got.shape() || nd.iter().zip(got.data()).any(|(&n, &g)| n as Real != g) {
            naive_mismatch += 1;
        }
    }
    verdict(
        worst == 0.0 && naive_mismatch == 0,
        format!("{cases} cases, max |binconv − conv2d| = {worst}, {naive_mismatch} loop-oracle mismatches"),
    )
}

fn gradient_suite() -> Outcome {
    let mut failures = Vec::new();
    let mut worst: Real = 0.0;
    let mut checked = 0;
    for (name, e) in op_gradient_suite() {
        worst = worst.max(e.max_rel);
        checked += e.checked;
        if e.max_rel > OP_TOLERANCE {
            failures.push(format!("{name} {:.2e}", e.max_rel));
        }
    }
    for (i, pad) in [Padding::SAME_ZERO, Padding::Valid, Padding::SAME_MINUS_ONE].into_iter().enumerate() {
        let e = lab_surrogate_check(i as u64 + 1, pad);
        worst = worst.max(e.max_rel);
        checked += e.checked;
        if e.max_rel > OP_TOLERANCE {
            failures.push(format!("lab surrogate {pad:?} {:.2e}", e.max_rel));
        }
    }
    let mut e2e: Real = 0.0;
    for choice in [BinarizerChoice::Sign, BinarizerChoice::Lab] {
        let e = end_to_end_check(tiny_spec(choice, 2, 3), 7);
        e2e = e2e.max(e.max_rel);
        checked += e.checked;
        if e.max_rel > END_TO_END_TOLERANCE {
            failures.push(format!("end-to-end {choice} {:.2e}", e.max_rel));
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{checked} partials, worst op {worst:.2e} (tol {OP_TOLERANCE:e}), end-to-end {e2e:.2e} (tol {END_TO_END_TOLERANCE:e}){}",
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

/// Counts distinct sign-binarized outputs of every ±1 `k × k` kernel with
/// plain integer loops.
fn brute_force_distinct(a: &BitTensor, k: usize, pad: Padding) -> usize {
    let mut seen = BTreeSet::new();
    for i in 0..1u64 << (k * k) {
        let w = BitTensor::from_fn(shape(1, 1, k, k), |_, _, y, x| (i >> (y * k + x)) & 1 == 1);
        let (_, d) = naive_pm1_conv(a, &w, 1, same_value(pad));
        seen.insert(d.iter().map(|&v| v > 0).collect::<Vec<bool>>());
    }
    seen.len()
}

fn uniqueness_oracle() -> Outcome {
    let mut r = rng(3);
    let mut cases = 0;
    let mut mismatches = Vec::new();
    let mut k1_eta = BTreeSet::new();
    for m in 0..24 {
        let (h, w) = (r.random_range(3..9), r.random_range(3..9));
        let a = random_bits(shape(1, 1, h, w), &mut r);
        for k in 1..=3 {
            for pad in [Padding::Valid, Padding::SAME_MINUS_ONE] {
                let rep = uniqueness_eta(&a, k, &BinarizerKind::SignSte, pad).unwrap();
                let want = brute_force_distinct(&a, k, pad);
                cases += 1;
                if rep.n_c != want as u64 || rep.n_t != 1 << (k * k) {
                    mismatches.push(format!("map {m} k{k} {pad:?}: {} vs {want}", rep.n_c));
                }
                if k == 1 {
                    k1_eta.insert(rep.eta.to_bits());
                }
            }
        }
    }
    let k1_ok = k1_eta.len() == 1 && k1_eta.contains(&1.0f64.to_bits());
    verdict(
        mismatches.is_empty() && k1_ok,
        format!(
            "{cases} (map, k, padding) cases, {} mismatches, k=1 η always 1.0: {k1_ok}{}",
            mismatches.len(),
            mismatches.first().map(|m| format!("; first: {m}")).unwrap_or_default()
        ),
    )
}

fn metric_identities() -> Outcome {
    let mut r = rng(4);
    let mut worst: Real = 0.0;
    for _ in 0..50 {
        let n = 2 * r.random_range(2..100);
        let real: Vec<Real> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let pm: Vec<Real> = (0..n).map(|_| if r.random() { 1.0 } else { -1.0 }).collect();
        let inv: Vec<Real> = pm.iter().map(|v| -v).collect();
        let half: Vec<Real> = pm.iter().enumerate().map(|(i, &v)| if i < n / 2 { -v } else { v }).collect();
        for dev in [
            ssim(&real, &real).unwrap() - 1.0,
            ssim(&pm, &pm).unwrap() - 1.0,
            endsim(&pm, &pm).unwrap() - 2.0,
            endsim(&pm, &inv).unwrap() - 2.0,
            endsim(&pm, &half).unwrap() - 2f64.sqrt(),
        ] {
            worst = worst.max(dev.abs());
        }
    }
    verdict(worst <= 1e-9, format!("max deviation {worst:.2e} over 50 random maps (tol 1e-9)"))
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    ((got - want) / want).abs() <= tol
}

fn ops_accounting() -> Outcome {
    let fp = Model::new(ModelSpec::resnet18_imagenet(true), 0).unwrap();
    let flops = count_ops(fp.describe()).flops() as f64;
    drop(fp);
    let bin = Model::new(ModelSpec::resnet18_imagenet(false), 0).unwrap();
    let bops = count_ops(bin.describe()).bops() as f64;
    drop(bin);
    let lab = Model::new(ModelSpec::resnet18_imagenet(false).with_binarizer(BinarizerChoice::Lab), 0).unwrap();
    let lab_dw = count_ops(lab.describe()).flops_in("lab_depthwise") as f64;
    let ok = [within(flops, 18.1e8, 0.03), within(bops, 1.68e9, 0.02), within(lab_dw, 30.3e6, 0.15)];
    verdict(
        ok.iter().all(|&b| b),
        format!(
            "FLOPs {:.3e} vs 1.81e9 ±3% [{}], BOPs {:.3e} vs 1.68e9 ±2% [{}], LAB depthwise {:.3e} vs 3.03e7 ±15% [{}]",
            flops, ok[0], bops, ok[1], lab_dw, ok[2]
        ),
    )
}

fn degeneracy_identity() -> Outcome {
    let mut r = rng(6);
    let mut tensor_mismatch = 0;
    for i in 0..100 {
        let c = r.random_range(1..6);
        let mut x = uniform(shape(r.random_range(1..3), c, r.random_range(1..9), r.random_range(1..9)), -2.0, 2.0, &mut r);
        if i % 5 == 0 {
            for v in x.data_mut().iter_mut().step_by(3) {
                *v = 0.0;
            }
        }
        let lab = BinarizerKind::Lab(LabParams::identity(c, 3).unwrap());
        if binarize(&x, &lab, Padding::SAME_ZERO).unwrap() != sign_ste_forward(&x) {
            tensor_mismatch += 1;
        }
    }
    let sign_model = Model::new(ModelSpec::cifar10(), 9).unwrap();
    let mut lab_model = Model::new(ModelSpec::cifar10().with_binarizer(BinarizerChoice::Lab), 9).unwrap();
    for p in sign_model.params() {
        let i = lab_model.param_index(&p.name).expect("shared parameter");
        lab_model.params_mut()[i].value = p.value.clone();
    }
    for layer in lab_model.lab_layers() {
        let c = lab_model.lab_params(layer).unwrap().channels();
        lab_model.set_lab_params(layer, &LabParams::identity(c, 3).unwrap()).unwrap();
    }
    let x = uniform(ModelSpec::cifar10().input.with_n(4), -2.0, 2.0, &mut r);
    let mut max_diff: Real = 0.0;
    for mode in [Mode::Infer, Mode::Train] {
        let a = sign_model.forward(&x, mode).unwrap();
        let b = lab_model.forward(&x, mode).unwrap();
        max_diff = max_diff.max(a.max_abs_diff(&b));
    }
    verdict(
        tensor_mismatch == 0 && max_diff == 0.0,
        format!("{tensor_mismatch}/100 tensor mismatches, network logit difference {max_diff} (infer and train)"),
    )
}

fn cifar_root() -> Option<PathBuf> {
    std::env::var_os("LABNN_DATA_DIR").map(PathBuf::from)
}

fn real_cifar() -> Result<(Dataset, Dataset), String> {
    let root = cifar_root().ok_or("LABNN_DATA_DIR is not set")?;
    let tr = load_dataset(&root, DatasetKind::Cifar10, Split::Train).map_err(|e| e.to_string())?;
    let te = load_dataset(&root, DatasetKind::Cifar10, Split::Test).map_err(|e| e.to_string())?;
    if tr.len() != 50_000 || te.len() != 10_000 {
        return Err(format!("expected the full CIFAR-10 splits, found {} / {}", tr.len(), te.len()));
    }
    Ok((tr, te))
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Trained LAB models from the training criterion, reused for quantization.
#[derive(Default)]
struct Heavy {
    lab_models: Vec<Model>,
}

fn train_cifar(choice: BinarizerChoice, seed: u64, tr: &Dataset, te: &Dataset) -> (Model, Real) {
    let mut model = Model::new(ModelSpec::cifar10().with_binarizer(choice), seed).unwrap();
    let cfg = TrainConfig {
        augment: true,
        eval_every_epoch: false,
        ..TrainConfig::new(64, 30, seed)
    };
    train(&mut model, tr, None, &cfg).unwrap();
    let top1 = evaluate(&model, te, 100).unwrap().top1;
    (model, top1)
}

fn lab_vs_sign(heavy: &mut Heavy) -> Outcome {
    let (tr, te) = match real_cifar() {
        Ok(d) => d,
        Err(e) => return NotRun(e),
    };
    let mut means = [0.0; 2];
    for (i, choice) in [BinarizerChoice::Sign, BinarizerChoice::Lab].into_iter().enumerate() {
        for seed in SEEDS {
            let (model, top1) = train_cifar(choice, seed, &tr, &te);
            means[i] += top1 / SEEDS.len() as Real;
            if choice == BinarizerChoice::Lab {
                heavy.lab_models.push(model);
            }
        }
    }
    let [sign, lab] = means;
    verdict(
        lab >= sign - 0.005 && sign > 0.6 && lab > 0.6,
        format!("mean top-1 sign {:.2}%, LAB {:.2}% over {} seeds", 100.0 * sign, 100.0 * lab, SEEDS.len()),
    )
}

fn quantized_lab(heavy: &mut Heavy) -> Outcome {
    let (tr, te) = match real_cifar() {
        Ok(d) => d,
        Err(e) => return NotRun(e),
    };
    if heavy.lab_models.is_empty() {
        heavy.lab_models.push(train_cifar(BinarizerChoice::Lab, SEEDS[0], &tr, &te).0);
    }
    let model = &heavy.lab_models[0];
    let base = evaluate(model, &te, 100).unwrap().top1;
    let q8 = evaluate(&quantize_lab(model, 8).unwrap(), &te, 100).unwrap().top1;
    let q4 = evaluate(&quantize_lab(model, 4).unwrap(), &te, 100).unwrap().top1;
    verdict(
        base - q8 <= 0.005 && base - q4 <= 0.03,
        format!("top-1 fp {:.2}%, INT8 {:.2}%, INT4 {:.2}%", 100.0 * base, 100.0 * q8, 100.0 * q4),
    )
}

fn synthetic_cifar(train_n: usize, test_n: usize, seed: u64) -> (Dataset, Dataset) {
    let recs = synthetic::records(DatasetKind::Cifar10, train_n + test_n, 60, seed);
    let (tr, te) = recs.split_at(train_n);
    let make = |r: &[(u8, Vec<u8>)], split| {
        let labels = r.iter().map(|(l, _)| *l).collect();
        let pixels = r.iter().flat_map(|(_, p)| p.iter().copied()).collect();
        Dataset::from_raw(DatasetKind::Cifar10, split, pixels, labels).unwrap()
    };
    (make(tr, Split::Train), make(te, Split::Test))
}

/// LAB parameters the default spec adds when every stage uses LAB, from the
/// stage widths alone: each site serves the width entering its layer.
fn expected_lab_params(spec: &ModelSpec) -> usize {
    let k2 = spec.lab_kernel * spec.lab_kernel;
    let mut c_in = spec.blocks[0].channels;
    let mut total = 0;
    for b in &spec.blocks {
        for _ in 0..b.layers {
            total += 2 * c_in * k2 + 2 * c_in + 1;
            c_in = b.channels;
        }
    }
    total
}

fn placement_sweep_check() -> Outcome {
    let (tr, te) = synthetic_cifar(128, 64, 21);
    let spec = ModelSpec::cifar10();
    let cfg = TrainConfig {
        eval_every_epoch: false,
        ..TrainConfig::new(32, 3, 5)
    };
    let table = placement_sweep(&spec, &tr, &te, &cfg, 1).unwrap();
    let mut csv = Vec::new();
    table.write_csv(&mut csv, true).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let mut bytes = [0usize; 16];
    let mut counts = [0usize; 16];
    let mut seen = 0u32;
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let mask: usize = cols[0].parse().unwrap();
        let stages: usize = (0..4).filter(|&s| cols[1 + s] == "lab").map(|s| 1 << s).sum();
        if stages != mask {
            return Fail(format!("row {mask} lists stages {stages}"));
        }
        counts[mask] = cols[7].parse().unwrap();
        bytes[mask] = cols[8].parse().unwrap();
        seen |= 1 << mask;
    }
    if seen != 0xffff {
        return Fail(format!("masks present: {seen:#06x}"));
    }
    let mut violations = 0;
    let mut pairs = 0;
    for a in 0..16 {
        for b in 0..16 {
            if a != b && a & b == a {
                pairs += 1;
                if bytes[a] >= bytes[b] {
                    violations += 1;
                }
            }
        }
    }
    let want = expected_lab_params(&spec);
    let count_diff = counts[15] - counts[0];
    let byte_diff = bytes[15] - bytes[0];
    verdict(
        violations == 0 && count_diff == want && byte_diff == 4 * want,
        format!(
            "16 masks trained; {violations}/{pairs} subset pairs violate size order; all-LAB − no-LAB = {count_diff} params / {byte_diff} B, formula {want} / {} B",
            4 * want
        ),
    )
}

/// Every artifact of one small pipeline run, as bytes.
fn pipeline_artifacts(seed: u64) -> Vec<(&'static str, Vec<u8>)> {
    let (tr, te) = synthetic_cifar(40, 20, 8);
    let spec = ModelSpec::staged(DatasetKind::Cifar10.image_shape(), 10, 4, 1).with_lab_mask(0b0101);
    let cfg = TrainConfig {
        augment: true,
        ..TrainConfig::new(10, 2, seed)
    };
    let mut model = Model::new(spec.clone(), seed).unwrap();
    let log = train(&mut model, &tr, Some(&te), &cfg).unwrap();
    let mut out = vec![("checkpoint", model.to_checkpoint().to_bytes())];
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    out.push(("train log", buf));

    let sweep_cfg = TrainConfig {
        eval_every_epoch: false,
        ..TrainConfig::new(10, 1, seed)
    };
    let table = placement_sweep(&spec, &tr, &te, &sweep_cfg, 0).unwrap();
    let mut buf = Vec::new();
    table.write_csv(&mut buf, false).unwrap();
    out.push(("sweep", buf));

    let mut buf = Vec::new();
    count_ops(model.describe()).write_csv(&mut buf).unwrap();
    out.push(("ops", buf));

    let (x, _) = te.batch(&(0..6).collect::<Vec<_>>()).unwrap();
    let mut traces = Vec::new();
    model.pass(&x, Mode::Infer, Some(&mut traces), None).unwrap();
    let rows = layer_uniqueness(&traces, &model.binarizers(), 3, Padding::Valid, Some(2)).unwrap();
    let mut buf = Vec::new();
    write_uniqueness_csv(&rows, &mut buf).unwrap();
    out.push(("uniqueness", buf));
    let mut buf = Vec::new();
    pairwise_dissimilarity(&traces).unwrap().write_csv(&mut buf).unwrap();
    out.push(("similarity", buf));
    let mut acc = DistributionAccumulator::default();
    acc.add(&traces);
    let mut buf = Vec::new();
    write_distribution_csv(&acc.finish(), &mut buf).unwrap();
    out.push(("distribution", buf));
    out
}

fn determinism() -> Outcome {
    let a = pipeline_artifacts(13);
    let b = pipeline_artifacts(13);
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
    let c = pipeline_artifacts(14);
    let seed_matters = a[0].1 != c[0].1;
    verdict(
        differing.is_empty() && seed_matters,
        format!(
            "{} artifacts compared ({}); differing: {:?}; another seed changes the checkpoint: {seed_matters}",
            a.len(),
            a.iter().map(|x| x.0).collect::<Vec<_>>().join(", "),
            differing
        ),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let heavy_enabled = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let heavy = RefCell::new(Heavy::default());
    type Criterion<'a> = (&'static str, Box<dyn FnMut() -> Outcome + 'a>, bool);
    let criteria: Vec<Criterion> = vec![
        ("1 bit-exact binary convolution", Box::new(kernel_equivalence), false),
        ("2 gradient suite", Box::new(gradient_suite), false),
        ("3 uniqueness oracle", Box::new(uniqueness_oracle), false),
        ("4 metric identities", Box::new(metric_identities), false),
        ("5 ops accounting", Box::new(ops_accounting), false),
        ("6 degeneracy identity", Box::new(degeneracy_identity), false),
        ("7 CIFAR-10 LAB vs sign", Box::new(|| lab_vs_sign(&mut heavy.borrow_mut())), true),
        ("8 quantized LAB", Box::new(|| quantized_lab(&mut heavy.borrow_mut())), true),
        ("9 block-placement sweep", Box::new(placement_sweep_check), false),
        ("10 determinism", Box::new(determinism), false),
    ];
    let mut failed = 0;
    for (name, mut run, needs_heavy) in criteria {
        let start = Instant::now();
        let outcome = if needs_heavy && !heavy_enabled {
            NotRun("training-scale; pass --include-ignored with LABNN_DATA_DIR set to CIFAR-10".into())
        } else {
            match panic::catch_unwind(AssertUnwindSafe(&mut run)) {
                Ok(o) => o,
                Err(e) => Fail(format!(
                    "panicked: {}",
                    e.downcast_ref::<String>()
                        .cloned()
                        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default()
                )),
            }
        };
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            NotRun(d) => ("NOT RUN", d),
        };
        println!("[{tag}] {name} ({secs:.1}s): {detail}");
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
