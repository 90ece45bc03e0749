//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use fusionnet_core::data::{
    self, conform, load_and_preprocess, split, synthesize, synthesize_quadrants, Dataset, DatasetManifest, SplitSpec,
};
use fusionnet_core::eval::{argmax_rows, confusion, emit_report, grad_cam, predict, prf1, roc_auc, EvalReport};
use fusionnet_core::fdsfm::{plan_pool, PoolChoice};
use fusionnet_core::gradcheck::grad_check;
use fusionnet_core::graph::{verify_against_expected, ExpectedRow};
use fusionnet_core::models::{build_model, input_shape, BuiltModel, FusionConfig, Scale, Variant};
use fusionnet_core::params::ParamStore;
use fusionnet_core::train::{self, TrainConfig};
use fusionnet_core::{summarize, Tensor};

use crate::config::{seed_or_env, DataSource, PartialConfig, RunConfig, CONFIG_FILE};
use crate::{TrainArgs, Usage, VerificationFailed};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn build(variant: Variant, scale: Scale, classes: usize, dropout: f64) -> anyhow::Result<BuiltModel> {
    let mut cfg = match scale {
        Scale::Full => FusionConfig::default(),
        Scale::Toy => FusionConfig::toy(classes),
    };
    cfg.classes = classes;
    cfg.dropout = dropout;
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(build_model(variant, scale, &cfg)?)
}

pub fn summary(variant: Variant, scale: Scale, classes: usize, json: bool) -> anyhow::Result<()> {
    let m = build(variant, scale, classes, 0.3)?;
    let s = summarize(&m.graph);
    if json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        println!("{s}");
    }
    Ok(())
}

pub fn verify_table(
    variant: Variant,
    scale: Scale,
    classes: usize,
    ledger: Option<&Path>,
    json: bool,
) -> anyhow::Result<()> {
    let start = Instant::now();
    let expected = match ledger {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExpectedRow::parse_csv(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        }
        None if variant == Variant::M4 && scale == Scale::Full && classes == 3 => ExpectedRow::m4_reference(),
        None => bail!(Usage(format!(
            "no built-in ledger for {variant} at {scale} scale with {classes} classes; pass --ledger FILE"
        ))),
    };
    let m = build(variant, scale, classes, 0.3)?;
    let report = verify_against_expected(&summarize(&m.graph), &expected);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
        println!("runtime: {:.1} ms", start.elapsed().as_secs_f64() * 1e3);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(VerificationFailed.into())
    }
}

pub fn plan_fdsfm(target: usize, sources: &[usize]) -> anyhow::Result<()> {
    for &w in sources {
        match plan_pool(w, target).map_err(|e| Usage(e.to_string()))? {
            PoolChoice::Identity => println!("{w} -> {target}: identity"),
            PoolChoice::Pool { f, s } => {
                println!("{w} -> {target}: pool {f}x{f} stride {s}  (floor(({w}-{f})/{s})+1 = {target}, {s}*({target}-1)+{f} = {w})")
            }
        }
    }
    Ok(())
}

pub fn synth_data(n_per_class: usize, seed: Option<u64>, quadrants: bool, out: &Path) -> anyhow::Result<()> {
    if n_per_class == 0 {
        bail!(Usage("--n-per-class must be at least 1".into()));
    }
    let seed = seed_or_env(seed)?;
    let (d, quads) = if quadrants {
        let (d, q) = synthesize_quadrants(n_per_class, seed);
        (d, Some(q))
    } else {
        (synthesize(n_per_class, seed), None)
    };
    let manifest = d.write_pngs(out)?;
    manifest.write_csv(&out.join("manifest.csv"))?;
    if let Some(q) = quads {
        let mut text = String::from("path,quadrant\n");
        for (s, q) in manifest.samples.iter().zip(q) {
            let rel = s.path.strip_prefix(out).unwrap_or(&s.path);
            let _ = writeln!(text, "{},{q}", rel.display());
        }
        fs::write(out.join("quadrants.csv"), text)?;
    }
    println!(
        "wrote {} images in {} classes to {}",
        d.len(),
        d.classes.len(),
        out.display()
    );
    Ok(())
}

/// Seeds for the three synthetic splits, spread apart by a Weyl increment.
fn split_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn conform_all(d: Dataset, target: &[usize]) -> anyhow::Result<Dataset> {
    if d.images.first().is_some_and(|i| i.dims() == target) {
        return Ok(d);
    }
    let images = d
        .images
        .iter()
        .map(|i| conform(i, target))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::new(d.classes, images, d.labels)?)
}

/// Train, validation and test sets of a run.
fn load_data(cfg: &RunConfig) -> anyhow::Result<(Dataset, Dataset, Dataset)> {
    let target = input_shape(cfg.scale).dims().to_vec();
    match &cfg.data {
        DataSource::Synth { n_per_class } => {
            let n = *n_per_class;
            let mk = |count: usize, k| conform_all(synthesize(count.max(1), split_seed(cfg.seed, k)), &target);
            Ok((mk(n, 1)?, mk(n / 4, 2)?, mk(n / 2, 3)?))
        }
        DataSource::Dir { path } => {
            let manifest = DatasetManifest::scan(path, &cfg.classes)?;
            let spec = SplitSpec {
                seed: cfg.seed,
                ..SplitSpec::default()
            };
            let (tr, va, te) = split(&manifest.labels(), cfg.classes.len(), &spec)?;
            let all = manifest.load(&target)?;
            Ok((all.subset(&tr), all.subset(&va), all.subset(&te)))
        }
    }
}

fn evaluate(m: &BuiltModel, params: &ParamStore, data: &Dataset, batch_size: usize) -> anyhow::Result<EvalReport> {
    let probs = predict(&m.graph, params, &data.images, batch_size)?;
    let pred = argmax_rows(&probs);
    let cm = confusion(&pred, &data.labels, data.classes.len())?;
    let metrics = prf1(&cm);
    let roc = roc_auc(&probs, &data.labels)?;
    let mut report = EvalReport::new(data.classes.clone(), cm, metrics, roc);
    report
        .metadata
        .insert("generator".into(), format!("fusionnet {}", env!("CARGO_PKG_VERSION")));
    report.metadata.insert("variant".into(), m.variant.to_string());
    report.metadata.insert("scale".into(), m.scale.to_string());
    report.metadata.insert("samples".into(), data.len().to_string());
    Ok(report)
}

fn print_metrics(report: &EvalReport) {
    let m = &report.metrics;
    println!(
        "accuracy {:.4}  macro P {:.4}  R {:.4}  F1 {:.4}",
        m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
    );
    for (name, c) in report.classes.iter().zip(&m.per_class) {
        println!(
            "  {name:<12} P {:.4}  R {:.4}  F1 {:.4}  support {}",
            c.precision, c.recall, c.f1, c.support
        );
    }
    if let Some(auc) = report.roc.macro_auc {
        println!("macro AUC {auc:.4}");
    }
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let file = match &args.config {
        Some(p) => PartialConfig::from_file(p)?,
        None => PartialConfig::default(),
    };
    let flags = PartialConfig {
        variant: args.variant,
        scale: args.scale,
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        dropout: args.dropout,
        seed: args.seed,
        augment: args.augment.then_some(true),
        classes: args.classes,
        data: match (args.synth, args.data) {
            (Some(n), _) => Some(DataSource::Synth { n_per_class: n }),
            (None, Some(path)) => Some(DataSource::Dir { path }),
            (None, None) => None,
        },
        out: args.out,
    };
    let cfg = file.overlay(flags).resolve()?;
    if cfg.scale == Scale::Full && !args.allow_untrained_full {
        bail!(Usage(
            "full-scale backbones have no pretrained weights here; pass --allow-untrained-full to train them from random initialization".into()
        ));
    }
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_json())?;

    let (tr, va, te) = load_data(&cfg)?;
    println!("data: {} train, {} val, {} test", tr.len(), va.len(), te.len());
    let m = build(cfg.variant, cfg.scale, cfg.classes.len(), cfg.dropout)?;
    let params = ParamStore::init(&m.graph, cfg.seed);
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: cfg.seed,
        augment: cfg.augment,
    };
    let start = Instant::now();
    let outcome = train::train(&m.graph, params, &tr, &va, &tcfg, |r| {
        println!(
            "epoch {:>3}/{}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}  ({:.1} s)",
            r.epoch,
            tcfg.epochs,
            r.train_loss,
            r.train_accuracy,
            r.val_loss,
            r.val_accuracy,
            start.elapsed().as_secs_f64()
        )
    })?;
    outcome.best.save(&cfg.out.join(CHECKPOINT_FILE))?;

    let mut report = evaluate(&m, &outcome.best, &te, cfg.batch_size)?;
    report.metadata.insert("split".into(), "test".into());
    report
        .metadata
        .insert("best_epoch".into(), outcome.best_epoch.to_string());
    report.history = outcome.history;
    emit_report(&report, &cfg.out)?;
    println!("best epoch {}; test set:", outcome.best_epoch);
    print_metrics(&report);
    Ok(())
}

fn load_run(run: &Path) -> anyhow::Result<(RunConfig, BuiltModel, ParamStore)> {
    let cfg = RunConfig::load(run)?;
    let m = build(cfg.variant, cfg.scale, cfg.classes.len(), cfg.dropout)?;
    let path = run.join(CHECKPOINT_FILE);
    let params = ParamStore::load(&path).with_context(|| format!("loading {}", path.display()))?;
    params
        .check_against(&m.graph)
        .with_context(|| format!("{} does not fit the configured model", path.display()))?;
    Ok((cfg, m, params))
}

pub fn eval(run: &Path, data_dir: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let (cfg, m, params) = load_run(run)?;
    let (data, split_name) = match data_dir {
        Some(dir) => {
            let target = input_shape(cfg.scale).dims().to_vec();
            (DatasetManifest::scan(dir, &cfg.classes)?.load(&target)?, "all")
        }
        None => (load_data(&cfg)?.2, "test"),
    };
    let mut report = evaluate(&m, &params, &data, cfg.batch_size)?;
    report.metadata.insert("split".into(), split_name.into());
    emit_report(&report, out)?;
    print_metrics(&report);
    Ok(())
}

fn heatmap_svg(map: &Tensor) -> String {
    let (h, w) = (map.dims()[0], map.dims()[1]);
    let cell = 24;
    let mut body = String::new();
    for y in 0..h {
        for x in 0..w {
            let v = (map.data()[y * w + x] * 255.0).round() as u8;
            let _ = writeln!(
                body,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({v},{v},{v})"/>"#,
                x * cell,
                y * cell
            );
        }
    }
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\">\n{body}</svg>\n",
        w * cell,
        h * cell
    )
}

pub fn gradcam(run: &Path, image: &Path, class: Option<usize>, layer: Option<&str>, out: &Path) -> anyhow::Result<()> {
    let (cfg, m, params) = load_run(run)?;
    let img = load_and_preprocess(image, input_shape(cfg.scale).dims())?;
    let probs = predict(&m.graph, &params, std::slice::from_ref(&img), 1)?;
    let pred = argmax_rows(&probs)[0];
    let k = cfg.classes.len();
    let class = class.unwrap_or(pred);
    if class >= k {
        bail!(Usage(format!("class {class} out of range for {k} classes")));
    }
    let cam_name = m.graph.node(m.cam_node).name.clone();
    let layer = layer.unwrap_or(&cam_name);
    let map = grad_cam(&m.graph, &params, &img, class, layer)?;
    fs::create_dir_all(out)?;
    let (h, w) = (map.dims()[0], map.dims()[1]);
    let csv: String = map
        .data()
        .chunks_exact(w)
        .map(|row| row.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(out.join("heatmap.csv"), csv)?;
    fs::write(out.join("heatmap.svg"), heatmap_svg(&map))?;
    let peak = map
        .data()
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > map.data()[best] { i } else { best });
    println!(
        "predicted {} (p = {:.4}); heatmap for {} at `{layer}` ({h}x{w}), peak at row {}, col {} (quadrant {})",
        cfg.classes[pred],
        probs.data()[pred],
        cfg.classes[class],
        peak / w,
        peak % w,
        data::quadrant_of(h, w, peak / w, peak % w)
    );
    Ok(())
}

pub fn gradcheck(variant: Variant, seed: Option<u64>, batch: usize, step: f64, tolerance: f64) -> anyhow::Result<()> {
    if batch < 2 {
        bail!(Usage(
            "--batch must be at least 2 (batch statistics need two samples)".into()
        ));
    }
    let seed = seed_or_env(seed)?;
    let m = build(variant, Scale::Toy, 3, 0.3)?;
    let params = ParamStore::init(&m.graph, seed);
    let d = synthesize(batch.div_ceil(3), seed);
    let idx: Vec<usize> = (0..batch).collect();
    let (x, labels) = d.batch(&idx)?;
    let start = Instant::now();
    let r = grad_check(&m.graph, &params, &x, &labels, step)?;
    let (name, i) = r.worst.clone().unwrap_or_default();
    println!(
        "{variant} toy: {} coordinates, max relative error {:.3e} at {name}[{i}] (analytic {:.6e}, numeric {:.6e}); {} refined near kinks, {} unresolved; {:.1} s",
        r.checked,
        r.max_rel_error,
        r.analytic,
        r.numeric,
        r.refined,
        r.unresolved,
        start.elapsed().as_secs_f64()
    );
    if r.max_rel_error < tolerance {
        println!("PASS (< {tolerance:e})");
        Ok(())
    } else {
        println!("FAIL (>= {tolerance:e})");
        Err(VerificationFailed.into())
    }
}
