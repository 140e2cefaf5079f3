use std::path::{Path, PathBuf};

use labnn::analysis::{
    count_ops as count_model_ops, layer_uniqueness, pairwise_dissimilarity, save_pgm, write_distribution_csv,
    write_uniqueness_csv, DistributionAccumulator,
};
use labnn::bench::bench_model;
use labnn::config::{Overrides, RunConfig};
use labnn::nets::sweep::placement_sweep;
use labnn::nets::LayerTrace;
use labnn::tensor::checkpoint::Checkpoint;
use labnn::train::{evaluate, load_dataset, train as train_model, Split};
use labnn::{Dataset, Error, Mode, Model, Result};
use serde_json::json;

use crate::{Common, Which};

const DATA_ENV: &str = "LABNN_DATA_DIR";
const CHECKPOINT: &str = "model.ckpt";

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        threads: c.threads,
        images: c.images,
        data_dir: None,
    }
}

/// The explicit `--config`, or `config.ini` next to the checkpoint.
fn load_config(c: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let path = match (&c.config, checkpoint) {
        (Some(p), _) => p.clone(),
        (None, Some(ck)) => {
            let sibling = ck.parent().unwrap_or(Path::new(".")).join("config.ini");
            if !sibling.exists() {
                return Err(Error::InvalidArgument(format!(
                    "no --config given and {} does not exist",
                    sibling.display()
                )));
            }
            sibling
        }
        (None, None) => return Err(Error::InvalidArgument("--config is required".into())),
    };
    let mut cfg = RunConfig::load(&path)?;
    cfg.apply(&overrides(c));
    Ok(cfg)
}

fn data_root(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(dir) = &cfg.data()?.data_dir {
        return Ok(dir.clone());
    }
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::InvalidArgument(format!("no dataset directory: set train.data_dir or {DATA_ENV}")))
}

fn dataset(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let d = cfg.data()?;
    let ds = load_dataset(&data_root(cfg)?, d.dataset, split)?;
    let img = ds.image_shape();
    let inp = cfg.net.input;
    if (img.c, img.h, img.w) != (inp.c, inp.h, inp.w) {
        return Err(Error::DatasetMismatch(format!(
            "{} images are {}x{}x{} but net.input is {}x{}x{}",
            d.dataset, img.c, img.h, img.w, inp.c, inp.h, inp.w
        )));
    }
    if cfg.net.classes < labnn::train::data::CLASSES {
        return Err(Error::DatasetMismatch(format!(
            "{} has {} classes but the classifier has {}",
            d.dataset,
            labnn::train::data::CLASSES,
            cfg.net.classes
        )));
    }
    let limit = match split {
        Split::Train => d.train_limit,
        Split::Test => d.test_limit,
    };
    Ok(match limit {
        Some(n) => ds.truncated(n),
        None => ds,
    })
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => Model::from_checkpoint(cfg.net.clone(), &Checkpoint::load(p)?),
        None => Model::new(cfg.net.clone(), cfg.train.seed),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn train(c: &Common) -> Result<()> {
    let cfg = load_config(c, None)?;
    let train_set = dataset(&cfg, Split::Train)?;
    let test_set = dataset(&cfg, Split::Test)?;
    cfg.echo(&c.out)?;
    let mut model = Model::new(cfg.net.clone(), cfg.train.seed)?;
    let log = train_model(&mut model, &train_set, Some(&test_set), &cfg.train)?;
    log.save_csv(&c.out.join("train_log.csv"))?;
    model.to_checkpoint().save(c.out.join(CHECKPOINT))?;
    let acc = log.final_accuracy().expect("final epoch evaluates");
    write_json(
        &c.out.join("metrics.json"),
        &json!({
            "top1": acc.top1,
            "top5": acc.top5,
            "test_images": test_set.len(),
            "train_images": train_set.len(),
            "steps": log.step_losses.len(),
            "param_count": model.param_count(),
            "param_bytes": model.param_bytes(),
            "prelu_after_add": cfg.net.prelu_after_add,
            "betas": model.betas(),
        }),
    )?;
    println!("top1 {} top5 {}", acc.top1, acc.top5);
    Ok(())
}

pub fn eval(c: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(c, Some(checkpoint))?;
    let test_set = dataset(&cfg, Split::Test)?;
    let model = load_model(&cfg, Some(checkpoint))?;
    let acc = evaluate(&model, &test_set, 100)?;
    std::fs::create_dir_all(&c.out)?;
    write_json(&c.out.join("eval.json"), &acc)?;
    println!("top1 {} top5 {}", acc.top1, acc.top5);
    Ok(())
}

pub fn sweep(c: &Common) -> Result<()> {
    let cfg = load_config(c, None)?;
    let train_set = dataset(&cfg, Split::Train)?;
    let test_set = dataset(&cfg, Split::Test)?;
    cfg.echo(&c.out)?;
    let table = placement_sweep(&cfg.net, &train_set, &test_set, &cfg.train, cfg.bench.runs)?;
    table.save_csv(&c.out.join("sweep.csv"), true)?;
    write_json(&c.out.join("sweep.json"), &table)?;
    for r in &table.rows {
        println!("mask {:2} top1 {:.4} bytes {}", r.mask, r.top1, r.param_bytes);
    }
    Ok(())
}

/// Inference traces of the first `n` test images, in batches.
fn traces(model: &Model, data: &Dataset, n: usize, mut each: impl FnMut(&[LayerTrace]) -> Result<()>) -> Result<()> {
    const BATCH: usize = 50;
    let n = n.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(BATCH) {
        let (x, _) = data.batch(chunk)?;
        let mut t = Vec::new();
        model.pass(&x, Mode::Infer, Some(&mut t), None)?;
        each(&t)?;
    }
    Ok(())
}

fn dump_first_maps(dir: &Path, traces: &[LayerTrace]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in traces {
        save_pgm(&dir.join(format!("{}.pgm", t.layer)), &t.post, 0, 0)?;
    }
    Ok(())
}

pub fn analyze(c: &Common, checkpoint: Option<&Path>, which: Which) -> Result<()> {
    let cfg = load_config(c, checkpoint)?;
    let data = dataset(&cfg, Split::Test)?;
    let model = load_model(&cfg, checkpoint)?;
    cfg.echo(&c.out)?;
    let out = &c.out;
    let maps = out.join("maps");
    match which {
        Which::Uniqueness => {
            let n = cfg.analyze.images.unwrap_or(20);
            let binarizers = model.binarizers();
            let mut first = None;
            let mut sums: Vec<labnn::analysis::LayerUniqueness> = Vec::new();
            traces(&model, &data, n, |t| {
                if first.is_none() {
                    dump_first_maps(&maps, t)?;
                    first = Some(());
                }
                let rows = layer_uniqueness(t, &binarizers, cfg.analyze.k, cfg.analyze.padding, cfg.analyze.max_channels)?;
                for r in rows {
                    match sums.iter_mut().find(|s| s.layer == r.layer) {
                        Some(s) => {
                            let total = s.maps + r.maps;
                            s.mean_eta = (s.mean_eta * s.maps as f64 + r.mean_eta * r.maps as f64) / total as f64;
                            s.min_eta = s.min_eta.min(r.min_eta);
                            s.max_eta = s.max_eta.max(r.max_eta);
                            s.maps = total;
                        }
                        None => sums.push(r),
                    }
                }
                Ok(())
            })?;
            write_uniqueness_csv(&sums, create(&out.join("uniqueness.csv"))?)?;
            write_json(&out.join("uniqueness.json"), &json!({ "images": n.min(data.len()), "layers": sums }))?;
        }
        Which::Similarity => {
            let n = cfg.analyze.images.unwrap_or(10).min(data.len());
            let idx: Vec<usize> = (0..n).collect();
            let (x, _) = data.batch(&idx)?;
            let mut t = Vec::new();
            model.pass(&x, Mode::Infer, Some(&mut t), None)?;
            dump_first_maps(&maps, &t)?;
            let report = pairwise_dissimilarity(&t)?;
            report.write_csv(create(&out.join("similarity.csv"))?)?;
            write_json(&out.join("similarity.json"), &report)?;
        }
        Which::Distribution => {
            let n = cfg.analyze.images.unwrap_or(1000);
            let mut acc = DistributionAccumulator::default();
            let mut first = true;
            traces(&model, &data, n, |t| {
                if first {
                    dump_first_maps(&maps, t)?;
                    first = false;
                }
                acc.add(t);
                Ok(())
            })?;
            let layers = acc.finish();
            write_distribution_csv(&layers, create(&out.join("distribution.csv"))?)?;
            write_json(&out.join("distribution.json"), &json!({ "images": n.min(data.len()), "layers": layers }))?;
        }
    }
    Ok(())
}

pub fn count_ops(c: &Common) -> Result<()> {
    let cfg = load_config(c, None)?;
    let model = Model::new(cfg.net.clone(), 0)?;
    let budget = count_model_ops(model.describe());
    cfg.echo(&c.out)?;
    budget.write_csv(create(&c.out.join("ops.csv"))?)?;
    write_json(
        &c.out.join("ops.json"),
        &json!({
            "bops": budget.bops(),
            "flops": budget.flops(),
            "ops": budget.ops(),
            "layers": budget.layers.iter().map(|l| json!({
                "layer": l.layer, "category": l.category, "bops": l.bops, "flops": l.flops, "ops": l.ops(),
            })).collect::<Vec<_>>(),
        }),
    )?;
    println!("bops {} flops {} ops {}", budget.bops(), budget.flops(), budget.ops());
    Ok(())
}

pub fn bench(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(c, checkpoint)?;
    let model = load_model(&cfg, checkpoint)?;
    cfg.echo(&c.out)?;
    let input = cfg.net.input.with_n(cfg.bench.batch.max(1));
    let report = bench_model(&model, input, cfg.bench.runs, cfg.bench.warmup, cfg.bench.threads)?;
    report.save(&c.out.join("bench.csv"), &c.out.join("bench.json"))?;
    println!("mean {:.1} us over {} runs", report.end_to_end.mean_us, report.runs);
    Ok(())
}

pub fn dump_maps(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(c, checkpoint)?;
    let data = dataset(&cfg, Split::Test)?;
    let model = load_model(&cfg, checkpoint)?;
    cfg.echo(&c.out)?;
    let dir = c.out.join("maps");
    std::fs::create_dir_all(&dir)?;
    let n = cfg.analyze.images.unwrap_or(1);
    let mut offset = 0;
    traces(&model, &data, n, |t| {
        for tr in t {
            let s = tr.post.shape();
            let channels = cfg.analyze.max_channels.map_or(s.c, |m| m.min(s.c));
            for img in 0..s.n {
                for ch in 0..channels {
                    let name = format!("{}_img{}_c{}.pgm", tr.layer, offset + img, ch);
                    save_pgm(&dir.join(name), &tr.post, img, ch)?;
                }
            }
        }
        offset += t.first().map_or(0, |tr| tr.post.shape().n);
        Ok(())
    })
}
