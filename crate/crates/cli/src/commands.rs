//! Subcommand implementations. Each returns a JSON summary; a `text` field,
//! when present, is what the human-readable mode prints.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use regen::bench::{self, BenchOptions, BenchReport, StudentTarget, TeacherTarget};
use regen::config::{PipelineConfig, TeacherConfig};
use regen::data::{self, DatasetManifest, DomainTag, LoadOptions};
use regen::error::RegenError;
use regen::export::{self, ExportedModel};
use regen::features::{self, extract_features, list_images};
use regen::imageio;
use regen::metrics::{compare_features, KidOptions, MetricsReport};
use regen::onnx::Precision;
use regen::patch::{self, SearchBackend};
use regen::student::{self, checkpoint, TrainConfig, TrainOptions, Validation};
use regen::synth;
use regen::teacher::{self, OracleParams, OracleTeacher};
use regen::{Student32, Tensor32};
use serde_json::{json, Value};

use crate::{Cli, Command, GlobalOpts};

/// `WxH`, e.g. `960x512`.
pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err("resolution sides must be positive".into());
    }
    Ok((w, h))
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse()
}

fn load_config(g: &GlobalOpts) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn out_or(g: &GlobalOpts, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_options(g: &GlobalOpts) -> LoadOptions {
    LoadOptions { strict: g.strict }
}

/// A dataset manifest, or a plain directory of images indexed on the fly.
fn load_dataset(g: &GlobalOpts, path: &Path, tag: DomainTag) -> Result<DatasetManifest> {
    if path.is_dir() {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(data::scan_directory(path, &name, tag)?);
    }
    Ok(data::load_manifest(path, load_options(g))?)
}

pub fn run(cli: Cli) -> Result<Value> {
    let cfg = load_config(&cli.global)?;
    let g = &cli.global;
    match cli.command {
        Command::Patches(a) => patches(g, cfg, a),
        Command::Pairs(a) => pairs(g, cfg, a),
        Command::Train(a) => train(g, cfg, a),
        Command::Eval(a) => eval(g, cfg, a),
        Command::Export(a) => export_cmd(g, cfg, a),
        Command::Bench(a) => bench_cmd(g, cfg, a),
        Command::Report(a) => report(g, a),
    }
}

#[derive(Args, Debug)]
pub struct PatchesArgs {
    /// Source (game) dataset manifest or image directory.
    #[arg(long)]
    source: PathBuf,
    /// Target (real-world) dataset manifest or image directory.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    per_image: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Minimum cosine similarity, in [-1, 1].
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    #[arg(long)]
    extractor: Option<String>,
    /// Use the inverted-file index instead of the exhaustive scan.
    #[arg(long)]
    approximate: bool,
}

fn patches(g: &GlobalOpts, cfg: PipelineConfig, a: PatchesArgs) -> Result<Value> {
    let mut p = cfg.patches.clone();
    p.patch_size = a.patch_size.unwrap_or(p.patch_size);
    p.per_image = a.per_image.unwrap_or(p.per_image);
    p.k = a.k.unwrap_or(p.k);
    p.threshold = a.threshold.unwrap_or(p.threshold);
    p.extractor = a.extractor.unwrap_or(p.extractor);
    p.approximate |= a.approximate;
    let checked = PipelineConfig {
        patches: p.clone(),
        ..cfg.clone()
    };
    checked.validate()?;
    let source = load_dataset(g, &a.source, DomainTag::SourceGame)?;
    let target = load_dataset(g, &a.target, DomainTag::TargetReal)?;
    let ex = features::extractor::<f32>(&p.extractor, &cfg.metrics.extractor_paths())?;
    let sp = patch::sample_patches(&source, p.patch_size, p.per_image, p.seed, ex.as_ref(), g.strict)?;
    let tp = patch::sample_patches(&target, p.patch_size, p.per_image, p.seed ^ 1, ex.as_ref(), g.strict)?;
    let backend = if p.approximate {
        SearchBackend::ivf_for(tp.len(), p.seed)
    } else {
        SearchBackend::Exact
    };
    let table = patch::match_patches(&sp, &tp, p.k, p.threshold, backend)?;
    let out = out_or(g, "matches.json");
    table.save(&out)?;
    let matched = table.entries.iter().filter(|e| !e.neighbors.is_empty()).count();
    Ok(json!({
        "matches": out,
        "source_patches": sp.len(),
        "target_patches": tp.len(),
        "matched_source_patches": matched,
        "text": format!(
            "{} source and {} target patches; {matched} sources matched; wrote {}\n",
            sp.len(), tp.len(), out.display()
        ),
    }))
}

#[derive(Args, Debug)]
pub struct PairsArgs {
    /// Source (game) dataset manifest or image directory.
    #[arg(long)]
    source: PathBuf,
    /// `oracle` enhances with the synthetic teacher; `external` pairs with `--enhanced-dir`.
    #[arg(long, default_value = "oracle")]
    teacher: String,
    /// Directory of externally enhanced frames named by source id.
    #[arg(long)]
    enhanced_dir: Option<PathBuf>,
    /// Resolution every pair is brought to by the trainer.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
}

fn pairs(g: &GlobalOpts, cfg: PipelineConfig, a: PairsArgs) -> Result<Value> {
    let source = load_dataset(g, &a.source, DomainTag::SourceGame)?;
    let out = out_or(g, "pairs");
    let manifest = match a.teacher.as_str() {
        "oracle" => {
            let params = match &cfg.teacher {
                TeacherConfig::Oracle { params } => params.clone(),
                TeacherConfig::External { .. } => {
                    let mut p = OracleParams::photoreal_grade();
                    p.seed = cfg.seed.unwrap_or(p.seed);
                    p
                }
            };
            let t = OracleTeacher::new(params)?;
            teacher::generate_pairs::<f32>(&t, &source, &out.join("enhanced"), a.resolution)?
        }
        "external" => {
            let dir = a
                .enhanced_dir
                .clone()
                .or(match &cfg.teacher {
                    TeacherConfig::External { enhanced_dir } => Some(enhanced_dir.clone()),
                    _ => None,
                })
                .ok_or_else(|| RegenError::config("teacher.enhanced_dir", "external teacher needs --enhanced-dir"))?;
            teacher::ingest_enhanced(&source, &dir, a.resolution)?
        }
        other => {
            return Err(RegenError::config("teacher", format!("unknown teacher {other:?}; use oracle or external")).into())
        }
    };
    let path = out.join("pairs.json");
    data::save_pairs(&manifest, &path)?;
    Ok(json!({
        "pairs": path,
        "count": manifest.len(),
        "text": format!("{} pairs; wrote {}\n", manifest.len(), path.display()),
    }))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Held-out pairs scored after every epoch.
    #[arg(long)]
    val_pairs: Option<PathBuf>,
    /// Start from the desk-scale configuration (128x128, width 16, 2 scales).
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

fn train_config(cfg: &PipelineConfig, a: &TrainArgs) -> Result<TrainConfig> {
    let mut t = if a.tiny {
        TrainConfig {
            seed: cfg.train.seed,
            ..TrainConfig::tiny()
        }
    } else {
        cfg.train.clone()
    };
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.resolution = a.resolution.unwrap_or(t.resolution);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.validate().map_err(|e| match e {
        RegenError::Config { field, message } => RegenError::config(format!("train.{field}"), message),
        other => other,
    })?;
    Ok(t)
}

fn train(g: &GlobalOpts, cfg: PipelineConfig, a: TrainArgs) -> Result<Value> {
    let tc = train_config(&cfg, &a)?;
    let pairs = data::load_pairs(&a.pairs)?;
    let val_pairs = a.val_pairs.as_deref().map(data::load_pairs).transpose()?;
    let ex = match &val_pairs {
        Some(_) => Some(features::extractor::<f32>(&cfg.metrics.extractor, &cfg.metrics.extractor_paths())?),
        None => None,
    };
    let out = out_or(g, "ckpt");
    let model = student::build_student::<f32>(&tc)?;
    let opts = TrainOptions {
        validation: val_pairs.as_ref().map(|p| Validation {
            pairs: p,
            extractor: ex.as_deref(),
        }),
        out_dir: Some(out.clone()),
    };
    let (_, log) = student::train_student(model, &pairs, &opts)?;
    let iterations = log.iterations().count();
    Ok(json!({
        "checkpoint": out.join("final.ckpt"),
        "log": out.join("train_log.jsonl"),
        "epochs": tc.epochs,
        "iterations": iterations,
        "text": format!(
            "trained {} epochs ({iterations} iterations); wrote {}\n",
            tc.epochs,
            out.join("final.ckpt").display()
        ),
    }))
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Generated images; written here first when `--checkpoint` is given.
    #[arg(long)]
    generated: PathBuf,
    /// Reference images.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    extractor: Option<String>,
    #[arg(long)]
    kid_subset_size: Option<usize>,
    #[arg(long)]
    kid_num_subsets: Option<usize>,
    /// Enhance every image of `--source` with this student before evaluating.
    #[arg(long, requires = "source")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
}

fn enhance_dir(model: &Student32, src: &Path, dst: &Path) -> Result<usize> {
    let files = list_images(src)?;
    std::fs::create_dir_all(dst).with_context(|| format!("creating {}", dst.display()))?;
    for f in &files {
        let img: Tensor32 = imageio::read_image(f)?;
        let out = model.infer(&img)?;
        let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        imageio::write_png(&dst.join(format!("{name}.png")), &out)?;
    }
    Ok(files.len())
}

fn eval(g: &GlobalOpts, cfg: PipelineConfig, a: EvalArgs) -> Result<Value> {
    let mut m = cfg.metrics.clone();
    m.extractor = a.extractor.unwrap_or(m.extractor);
    m.kid_subset_size = a.kid_subset_size.or(m.kid_subset_size);
    m.kid_num_subsets = a.kid_num_subsets.unwrap_or(m.kid_num_subsets);
    PipelineConfig {
        metrics: m.clone(),
        ..cfg.clone()
    }
    .validate()?;
    if let (Some(ckpt), Some(src)) = (&a.checkpoint, &a.source) {
        let (model, _) = checkpoint::load::<f32>(ckpt)?;
        let n = enhance_dir(&model, src, &a.generated)?;
        log::info!("enhanced {n} frames into {}", a.generated.display());
    }
    let ex = features::extractor::<f32>(&m.extractor, &m.extractor_paths())?;
    let gen = extract_features(&list_images(&a.generated)?, ex.as_ref())?;
    let reference = extract_features(&list_images(&a.reference)?, ex.as_ref())?;
    let report = compare_features(
        &gen,
        &reference,
        KidOptions {
            subset_size: m.kid_subset_size,
            num_subsets: m.kid_num_subsets,
            seed: m.seed,
        },
    )?;
    let out = out_or(g, "metrics.json");
    write_json(&out, &report)?;
    let mut v = serde_json::to_value(&report)?;
    v["metrics"] = json!(out);
    v["text"] = json!(format!(
        "FID {:.4}  KID×100 {:.4} ± {:.4}  ({} vs {} images, {}); wrote {}\n",
        report.fid,
        report.kid_x100_mean,
        report.kid_x100_std,
        report.n_generated,
        report.n_reference,
        report.extractor,
        out.display()
    ));
    Ok(v)
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "fp32", value_parser = parse_precision)]
    precision: Precision,
    /// Fixed input resolution (default: the training resolution).
    #[arg(long, value_parser = parse_resolution, conflicts_with = "dynamic")]
    resolution: Option<(usize, usize)>,
    /// Leave the spatial dimensions symbolic.
    #[arg(long)]
    dynamic: bool,
    /// Number of parity probe frames.
    #[arg(long, default_value_t = 10)]
    probes: usize,
    /// Directory of probe images (default: synthetic scenes).
    #[arg(long)]
    probe_dir: Option<PathBuf>,
    /// Max-abs parity tolerance (default 1e-4 for fp32, 2e-2 for fp16).
    #[arg(long)]
    tolerance: Option<f64>,
}

fn export_cmd(g: &GlobalOpts, cfg: PipelineConfig, a: ExportArgs) -> Result<Value> {
    let (model, _) = checkpoint::load::<f32>(&a.checkpoint)?;
    let probe_res = a.resolution.unwrap_or(model.config.resolution);
    let fixed = if a.dynamic { None } else { Some(probe_res) };
    let out = out_or(g, "model.onnx");
    let exported = export::export_model(&model, &out, a.precision, fixed)?;
    let seed = cfg.seed.unwrap_or(model.config.seed);
    let probes: Vec<Tensor32> = match &a.probe_dir {
        Some(dir) => list_images(dir)?
            .iter()
            .take(a.probes)
            .map(|p| Ok(imageio::resize_bilinear(&imageio::read_image::<f32>(p)?, probe_res.0, probe_res.1)))
            .collect::<Result<_>>()?,
        None => (0..a.probes as u64)
            .map(|i| synth::render_scene(probe_res.0, probe_res.1, seed.wrapping_add(i)))
            .collect(),
    };
    let tolerance = a.tolerance.unwrap_or(match a.precision {
        Precision::Fp32 => 1e-4,
        Precision::Fp16 => 2e-2,
    });
    let parity = export::parity_check(&model, &exported, &probes, tolerance)?;
    let parity_path = out.with_extension("parity.json");
    write_json(&parity_path, &parity)?;
    let summary = json!({
        "model": out,
        "spec": export::spec_path(&out),
        "parity": parity_path,
        "max_abs_diff": parity.worst(),
        "passed": parity.passed,
        "text": format!(
            "exported {} ({}); parity max |diff| {:.3e} over {} probes, tolerance {tolerance:.0e}: {}\n",
            out.display(),
            a.precision.as_str(),
            parity.worst(),
            parity.max_abs_diff.len(),
            if parity.passed { "pass" } else { "FAIL" }
        ),
    });
    if !parity.passed {
        bail!(
            "parity check failed: max |diff| {:.3e} exceeds {tolerance:.0e} (report in {})",
            parity.worst(),
            parity_path.display()
        );
    }
    Ok(summary)
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Exported ONNX graph (with its `.spec.json` sidecar).
    #[arg(long, group = "target")]
    model: Option<PathBuf>,
    /// Student checkpoint, run in-framework.
    #[arg(long, group = "target")]
    checkpoint: Option<PathBuf>,
    /// Benchmark a teacher instead; only `oracle` runs in-process.
    #[arg(long, group = "target")]
    teacher: Option<String>,
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Row name in the comparison table.
    #[arg(long)]
    name: Option<String>,
    /// metrics.json whose FID/KID are attached to the report.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Free text appended to the environment descriptor.
    #[arg(long)]
    note: Option<String>,
}

fn bench_cmd(g: &GlobalOpts, cfg: PipelineConfig, a: BenchArgs) -> Result<Value> {
    let metrics: Option<MetricsReport> = match &a.metrics {
        Some(p) => Some(serde_json::from_str(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => None,
    };
    let opts = BenchOptions {
        method_name: a.name.clone().unwrap_or_default(),
        resolution: a.resolution.unwrap_or(cfg.bench.resolution),
        warmup: a.warmup.unwrap_or(cfg.bench.warmup),
        iters: a.iters.unwrap_or(cfg.bench.iters),
        seed: cfg.seed.unwrap_or(0),
        kid_x100: metrics.as_ref().map(|m| m.kid_x100_mean),
        fid: metrics.as_ref().map(|m| m.fid),
        environment_note: a.note.clone(),
    };
    opts.validate()?;
    let (default_name, report) = if let Some(path) = &a.model {
        let exported = ExportedModel::open(path)?;
        let mut session = exported.session(opts.resolution)?;
        let note = format!("onnx {} via tract", exported.spec.precision.as_str());
        let mut o = opts.clone();
        o.environment_note = Some(o.environment_note.map_or(note.clone(), |n| format!("{note}; {n}")));
        ("student-onnx", bench::bench(&mut session, &o)?)
    } else if let Some(ckpt) = &a.checkpoint {
        let (model, _) = checkpoint::load::<f32>(ckpt)?;
        ("student", bench::bench(&mut StudentTarget(&model), &opts)?)
    } else if let Some(t) = &a.teacher {
        if t != "oracle" {
            return Err(RegenError::config("teacher", format!("only the oracle teacher can be benchmarked, got {t:?}")).into());
        }
        let params = match &cfg.teacher {
            TeacherConfig::Oracle { params } => params.clone(),
            TeacherConfig::External { .. } => OracleParams::photoreal_grade(),
        };
        let teacher = OracleTeacher::new(params)?;
        ("oracle-teacher", bench::bench(&mut TeacherTarget(&teacher), &opts)?)
    } else {
        bail!("bench needs one of --model, --checkpoint or --teacher");
    };
    let report = BenchReport {
        method_name: a.name.unwrap_or_else(|| default_name.to_string()),
        ..report
    };
    let out = out_or(g, "bench.json");
    report.save(&out)?;
    let mut v = serde_json::to_value(&report)?;
    v["report"] = json!(out);
    v["text"] = json!(format!(
        "{}: median {:.3} ms/iter, p99 {:.3} ms, {:.2} fps at {}x{}; wrote {}\n",
        report.method_name,
        report.ms_per_iter,
        report.ms_p99,
        report.fps,
        report.resolution.0,
        report.resolution.1,
        out.display()
    ));
    Ok(v)
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// BenchReport JSON files, one row each.
    #[arg(required = true)]
    bench: Vec<PathBuf>,
    /// `NAME=metrics.json`: attach FID/KID to the named row.
    #[arg(long = "metrics", value_name = "NAME=FILE")]
    metrics: Vec<String>,
    /// `SLOW:FAST`: emit the speedup of FAST over SLOW.
    #[arg(long = "speedup", value_name = "SLOW:FAST")]
    speedup: Vec<String>,
}

fn report(g: &GlobalOpts, a: ReportArgs) -> Result<Value> {
    let mut reports = a
        .bench
        .iter()
        .map(|p| BenchReport::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    for spec in &a.metrics {
        let (name, file) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--metrics expects NAME=FILE, got {spec:?}"))?;
        let m: MetricsReport = serde_json::from_str(&std::fs::read_to_string(file).with_context(|| format!("reading {file}"))?)?;
        let row = reports
            .iter_mut()
            .find(|r| r.method_name == name)
            .ok_or_else(|| anyhow!("no bench report named {name:?}"))?;
        row.kid_x100 = Some(m.kid_x100_mean);
        row.fid = Some(m.fid);
    }
    let pairs = a
        .speedup
        .iter()
        .map(|s| {
            s.split_once(':')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| anyhow!("--speedup expects SLOW:FAST, got {s:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = bench::compare_table(&reports, &pairs)?;
    if let Some(out) = &g.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(out, &table.text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(json!({
        "rows": reports,
        "speedups": table.speedups.iter().map(|(s, f, r)| json!({"slow": s, "fast": f, "ratio": r})).collect::<Vec<_>>(),
        "text": table.text,
    }))
}
