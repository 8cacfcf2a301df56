use std::fs;
use std::path::{Path, PathBuf};

use pass_core::bench::io::{load_domain, load_mask, manifest_digest, save_domain, save_mask};
use pass_core::bench::{
    default_benchmark, generate_domain, mean_std, predict_masks, pretrain_source, AugmentConfig, BenchmarkSpec,
    Dataset, LabeledSample, Mask, MetricResult, PretrainConfig,
};
use pass_core::nn::{Checkpoint, ModelConfig};
use pass_core::prompts::viz::{export_bank_templates, export_decorator_maps};
use pass_core::prompts::{init_prompts, PassModel};
use pass_core::selfcheck::{gradient_suite, invariant_suite};
use pass_core::shape::{correlation_report, TargetShapes};
use pass_core::tensor::Tensor;
use pass_core::tta::{adapt_offline, adapt_online, baseline_adapt, AdaptReport, Baseline, LossContext, RunManifest};

use crate::config::{Method, Mode, RunConfig};
use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.toml";
pub const BENCHMARK: &str = "benchmark.toml";
pub const CHECKPOINT: &str = "model.ckpt";
const RUN_MANIFEST: &str = "manifest.json";
const VIZ_IMAGES: usize = 4;
const VIZ_TEMPLATES: usize = 16;

fn output_root() -> PathBuf {
    std::env::var_os("PASS_OUTPUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn out_dir(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| output_root().join(default))
}

fn data_root(cfg: &RunConfig) -> PathBuf {
    cfg.data.clone().unwrap_or_else(|| output_root().join("data"))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| output_root().join("pretrain").join(CHECKPOINT))
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if !force && dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(CliError::Refused(dir.to_path_buf()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Outputs may not land inside an input directory.
fn guard_inputs(out: &Path, inputs: &[&Path]) -> CliResult<()> {
    let abs = |p: &Path| fs::canonicalize(p).ok();
    let Some(o) = abs(out).or_else(|| std::path::absolute(out).ok()) else {
        return Ok(());
    };
    for i in inputs {
        if let Some(i) = abs(i) {
            if i.is_dir() && o.starts_with(&i) {
                return Err(CliError::Config(format!(
                    "output {} lies inside input {}",
                    out.display(),
                    i.display()
                )));
            }
        }
    }
    Ok(())
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::missing(path, e))
}

fn echo(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    fs::write(dir.join(CONFIG_ECHO), cfg.to_toml()?)?;
    Ok(())
}

fn load_benchmark(data: &Path) -> CliResult<BenchmarkSpec> {
    Ok(BenchmarkSpec::from_toml(&read(&data.join(BENCHMARK))?)?)
}

fn load(data: &Path, name: &str) -> CliResult<Dataset> {
    let dir = data.join(name);
    if !dir.is_dir() {
        return Err(CliError::missing(&dir, std::io::ErrorKind::NotFound.into()));
    }
    Ok(load_domain(&dir)?)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::missing(path, std::io::ErrorKind::NotFound.into()));
    }
    Ok(Checkpoint::load(path)?)
}

fn target_names(cfg: &RunConfig, data: &Path) -> CliResult<Vec<String>> {
    if !cfg.domains.is_empty() {
        return Ok(cfg.domains.clone());
    }
    Ok(load_benchmark(data)?.targets.into_iter().map(|t| t.spec.name).collect())
}

fn stream(samples: &[LabeledSample]) -> CliResult<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| {
            let (h, w) = s.size();
            Ok(s.image.reshape(&[1, s.image.shape()[0], h, w])?)
        })
        .collect()
}

fn truth(samples: &[LabeledSample]) -> Vec<Vec<Mask>> {
    samples.iter().map(|s| s.masks.clone()).collect()
}

pub fn gen(cfg: &RunConfig, force: bool) -> CliResult<()> {
    let bench = match &cfg.spec {
        Some(p) => BenchmarkSpec::from_toml(&read(p)?)?,
        None => default_benchmark(cfg.seed),
    };
    bench.validate()?;
    let out = out_dir(cfg, "data");
    prepare_out(&out, force)?;
    for spec in bench.domains() {
        let dir = out.join(&spec.name);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let data = generate_domain(spec)?;
        save_domain(&out, &data)?;
        println!(
            "{:<16} train {:>3}  test {:>3}  manifest {}",
            spec.name,
            data.train.len(),
            data.test.len(),
            manifest_digest(&dir)?
        );
    }
    fs::write(out.join(BENCHMARK), bench.to_toml()?)?;
    echo(cfg, &out)
}

pub fn pretrain(cfg: &RunConfig, force: bool) -> CliResult<()> {
    let data = data_root(cfg);
    let bench = load_benchmark(&data)?;
    let source = load(&data, &bench.source.name)?;
    let out = out_dir(cfg, "pretrain");
    guard_inputs(&out, &[&data])?;
    prepare_out(&out, force)?;
    echo(cfg, &out)?;
    let model_config = ModelConfig {
        in_channels: source.train.first().map_or(1, |s| s.image.shape()[0]),
        num_classes: bench.source.num_classes,
        image_size: bench.source.image_size,
        ..ModelConfig::default()
    };
    let pc = PretrainConfig {
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        lr: cfg.pretrain.lr,
        seed: cfg.seed,
        augment: if cfg.pretrain.augment {
            AugmentConfig::default()
        } else {
            AugmentConfig::none()
        },
    };
    let outcome = pretrain_source(model_config, &source.train, &pc)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT))?;
    let mut w = csv::Writer::from_path(out.join("train_log.csv"))?;
    w.write_record(["epoch", "loss"])?;
    for e in &outcome.log {
        w.write_record([e.epoch.to_string(), format!("{:.8}", e.loss)])?;
    }
    w.flush()?;
    let held_out = source_only_metrics(&outcome.checkpoint, &source.test)?;
    write_table(
        &out.join("source_eval.csv"),
        &[(bench.source.name.clone(), held_out.clone())],
    )?;
    println!(
        "pretrained {} epochs, final loss {:.4}, source test dice {:.4}, checkpoint {}",
        pc.epochs,
        outcome.log.last().map_or(f64::NAN, |e| e.loss),
        held_out.mean_dice(),
        out.join(CHECKPOINT).display()
    );
    Ok(())
}

fn source_only_metrics(ck: &Checkpoint, samples: &[LabeledSample]) -> CliResult<MetricResult> {
    let model = ck.to_model()?;
    // one image at a time, as the adaptation runs predict
    let preds = predict_masks(samples, 1, |x| model.predict(x, None))?;
    Ok(MetricResult::evaluate(&preds, &truth(samples))?)
}

fn run_method(cfg: &RunConfig, ck: &Checkpoint, xs: &[Tensor]) -> CliResult<AdaptReport> {
    let backbone = ck.to_model()?;
    let lc = LossContext {
        source_stats: ck.source_stats()?,
        class_priors: ck.meta.class_priors.clone(),
    };
    let report = match cfg.adapt.method {
        Method::Pass => {
            let m = &backbone.config;
            let pc = cfg.prompt_config(m.bottleneck, m.bottleneck_extent(), m.in_channels)?;
            let model = PassModel::new(backbone, init_prompts(cfg.seed, &pc)?);
            match cfg.adapt.mode {
                Mode::Online => adapt_online(&model, xs, &cfg.online(), &lc)?,
                Mode::Offline => adapt_offline(&model, xs, &cfg.offline(), &lc)?,
            }
        }
        Method::SourceOnly => baseline_adapt(Baseline::SourceOnly, &backbone, xs, &cfg.baseline())?,
        Method::Ptbn => baseline_adapt(Baseline::Ptbn, &backbone, xs, &cfg.baseline())?,
        Method::Tent => baseline_adapt(Baseline::Tent, &backbone, xs, &cfg.baseline())?,
    };
    Ok(report)
}

fn export_viz(model: &PassModel, xs: &[Tensor], dir: &Path) -> CliResult<()> {
    if let Some(dec) = &model.prompts.decorator {
        let first: Vec<&Tensor> = xs.iter().take(VIZ_IMAGES).collect();
        export_decorator_maps(dec, &Tensor::stack_batch(&first)?, dir)?;
    }
    if let Some(capm) = &model.prompts.capm {
        let n = capm.bank.size().min(VIZ_TEMPLATES);
        export_bank_templates(capm, &(0..n).collect::<Vec<_>>(), dir)?;
    }
    Ok(())
}

pub fn adapt(cfg: &RunConfig, force: bool, viz: bool) -> CliResult<()> {
    let data = data_root(cfg);
    let ck_path = checkpoint_path(cfg);
    let ck = load_checkpoint(&ck_path)?;
    let names = target_names(cfg, &data)?;
    let out = out_dir(cfg, &format!("adapt-{}", cfg.label()));
    guard_inputs(&out, &[&data])?;
    prepare_out(&out, force)?;
    echo(cfg, &out)?;
    let digest = ck.digest()?;
    for name in &names {
        let d = load(&data, name)?;
        let xs = stream(&d.test)?;
        let report = run_method(cfg, &ck, &xs)?;
        let dir = out.join(name);
        let preds_dir = dir.join("predictions");
        fs::create_dir_all(&preds_dir)?;

        let ids: Vec<String> = d.test.iter().map(LabeledSample::id).collect();
        let gts = truth(&d.test);
        let per_item: Vec<Vec<Vec<Mask>>> = gts.iter().map(|g| vec![g.clone()]).collect();
        report.write_csv_file(&dir.join("report.csv"), &ids, Some(&per_item))?;
        report.write_timing_csv(&dir.join("timing.csv"))?;
        if !report.step_losses.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("step_losses.csv"))?;
            w.write_record(["step", "loss"])?;
            for (i, l) in report.step_losses.iter().enumerate() {
                w.write_record([i.to_string(), format!("{l:.8}")])?;
            }
            w.flush()?;
        }
        for (id, pred) in ids.iter().zip(report.predictions()) {
            for (k, m) in pred.iter().enumerate() {
                save_mask(&preds_dir.join(format!("{id}_c{k}.png")), m)?;
            }
        }
        let metrics = report.evaluate(&gts)?;
        fs::write(dir.join("metrics.json"), serde_json::to_string(&metrics)?)?;
        RunManifest {
            config: serde_json::to_value(cfg)?,
            seed: cfg.seed,
            checkpoint_sha256: digest.clone(),
            domain: name.clone(),
            samples: xs.len(),
        }
        .write(&dir.join(RUN_MANIFEST))?;
        if viz {
            if let Some(model) = &report.final_model {
                export_viz(model, &xs, &dir.join("viz"))?;
            }
        }
        println!("{:<16} {:<24} dice {:.4}", name, cfg.label(), metrics.mean_dice());
    }
    Ok(())
}

/// Reads the predicted masks a run saved for `samples`.
fn load_predictions(dir: &Path, samples: &[LabeledSample]) -> CliResult<Vec<Vec<Mask>>> {
    samples
        .iter()
        .map(|s| {
            (0..s.masks.len())
                .map(|k| {
                    let p = dir.join(format!("{}_c{k}.png", s.id()));
                    if !p.is_file() {
                        return Err(CliError::missing(&p, std::io::ErrorKind::NotFound.into()));
                    }
                    Ok(load_mask(&p)?)
                })
                .collect()
        })
        .collect()
}

fn run_domains(run: &Path) -> CliResult<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(run).map_err(|e| CliError::missing(run, e))? {
        let p = entry?.path();
        if p.join(RUN_MANIFEST).is_file() {
            let m: RunManifest = serde_json::from_str(&read(&p.join(RUN_MANIFEST))?)?;
            names.push(m.domain);
        }
    }
    names.sort();
    Ok(names)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// `domain,class,n,dice_mean,dice_std,hd95_mean,hd95_std,hd95_inf`
fn write_table(path: &Path, rows: &[(String, MetricResult)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "domain",
        "class",
        "n",
        "dice_mean",
        "dice_std",
        "hd95_mean",
        "hd95_std",
        "hd95_inf",
    ])?;
    for (name, m) in rows {
        for c in 0..m.dice.len() {
            let (dm, ds) = m.dice_summary(c);
            let (hm, hs, inf) = m.hd95_summary(c);
            w.write_record([
                name.clone(),
                c.to_string(),
                m.num_samples().to_string(),
                fmt(dm),
                fmt(ds),
                fmt(hm),
                fmt(hs),
                inf.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn print_table(rows: &[(String, MetricResult)]) {
    println!("{:<16} {:>5} {:>17} {:>17}", "domain", "class", "dice", "hd95");
    for (name, m) in rows {
        for c in 0..m.dice.len() {
            let (dm, ds) = m.dice_summary(c);
            let (hm, hs, inf) = m.hd95_summary(c);
            let inf = if inf > 0 {
                format!(" ({inf} empty)")
            } else {
                String::new()
            };
            println!("{name:<16} {c:>5} {dm:>8.4}±{ds:<8.4} {hm:>8.2}±{hs:<8.2}{inf}");
        }
    }
}

pub fn eval(cfg: &RunConfig, run: Option<&Path>, force: bool) -> CliResult<()> {
    let data = data_root(cfg);
    let mut rows = Vec::new();
    let out = out_dir(cfg, "eval");
    match run {
        Some(run) => {
            let names = if cfg.domains.is_empty() {
                let present = run_domains(run)?;
                // benchmark order first, anything else after
                let mut ordered: Vec<String> = match load_benchmark(&data) {
                    Ok(b) => b
                        .targets
                        .into_iter()
                        .map(|t| t.spec.name)
                        .filter(|n| present.contains(n))
                        .collect(),
                    Err(_) => Vec::new(),
                };
                ordered.extend(present.into_iter().filter(|n| !ordered.contains(n)).collect::<Vec<_>>());
                ordered
            } else {
                cfg.domains.clone()
            };
            guard_inputs(&out, &[&data, run])?;
            for name in names {
                let d = load(&data, &name)?;
                let preds = load_predictions(&run.join(&name).join("predictions"), &d.test)?;
                rows.push((name, MetricResult::evaluate(&preds, &truth(&d.test))?));
            }
        }
        None => {
            let ck = load_checkpoint(&checkpoint_path(cfg))?;
            guard_inputs(&out, &[&data])?;
            for name in target_names(cfg, &data)? {
                let d = load(&data, &name)?;
                rows.push((name, source_only_metrics(&ck, &d.test)?));
            }
        }
    }
    prepare_out(&out, force)?;
    echo(cfg, &out)?;
    write_table(&out.join("eval.csv"), &rows)?;
    print_table(&rows);
    Ok(())
}

pub fn report(cfg: &RunConfig, runs: &[PathBuf], force: bool) -> CliResult<()> {
    let out = out_dir(cfg, "report");
    let mut inputs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
    let data = data_root(cfg);
    inputs.push(&data);
    guard_inputs(&out, &inputs)?;
    prepare_out(&out, force)?;
    echo(cfg, &out)?;

    let mut w = csv::Writer::from_path(out.join("methods.csv"))?;
    w.write_record([
        "run",
        "method",
        "domain",
        "n",
        "dice_mean",
        "dice_std",
        "hd95_mean",
        "hd95_std",
    ])?;
    for run in runs {
        let rc = RunConfig::load(&run.join(CONFIG_ECHO))?;
        let label = rc.label();
        let mut all = Vec::new();
        for name in run_domains(run)? {
            let m: MetricResult = serde_json::from_str(&read(&run.join(&name).join("metrics.json"))?)?;
            let per_sample: Vec<f64> = (0..m.num_samples()).map(|i| m.sample_dice(i)).collect();
            let hd: Vec<f64> = m.hd95.iter().flatten().copied().filter(|v| v.is_finite()).collect();
            let (dm, ds) = mean_std(&per_sample);
            let (hm, hs) = mean_std(&hd);
            w.write_record([
                run.display().to_string(),
                label.clone(),
                name.clone(),
                per_sample.len().to_string(),
                fmt(dm),
                fmt(ds),
                fmt(hm),
                fmt(hs),
            ])?;
            println!("{label:<28} {name:<16} dice {dm:.4}±{ds:.4}");
            all.extend(per_sample);
        }
        let (dm, ds) = mean_std(&all);
        w.write_record([
            run.display().to_string(),
            label.clone(),
            "all".into(),
            all.len().to_string(),
            fmt(dm),
            fmt(ds),
            String::new(),
            String::new(),
        ])?;
    }
    w.flush()?;

    let ck_path = checkpoint_path(cfg);
    if !ck_path.is_file() || !data.join(BENCHMARK).is_file() {
        println!("no checkpoint or benchmark data found; skipping similarity table");
        return Ok(());
    }
    let ck = load_checkpoint(&ck_path)?;
    let bench = load_benchmark(&data)?;
    let source = load(&data, &bench.source.name)?;
    let mut targets = Vec::new();
    for t in &bench.targets {
        let d = load(&data, &t.spec.name)?;
        let dice = source_only_metrics(&ck, &d.test)?.mean_dice();
        targets.push((t.spec.name.clone(), truth(&d.test), dice));
    }
    let shapes: Vec<TargetShapes> = targets
        .iter()
        .map(|(name, masks, dice)| TargetShapes {
            name,
            masks,
            dice: *dice,
        })
        .collect();
    let sim = correlation_report(&bench.source.name, &truth(&source.train), &shapes)?;
    sim.write_csv(&out.join("similarity.csv"))?;
    sim.write_json(&out.join("similarity.json"))?;
    println!("shape similarity vs source-only dice: spearman {:.3}", sim.spearman);
    Ok(())
}

fn finish_checks(failed: Vec<String>, what: &str) -> CliResult<()> {
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("{what} failed: {}", failed.join(", "))))
    }
}

pub fn gradcheck(out: Option<&Path>) -> CliResult<()> {
    let results = gradient_suite()?;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<28} {:>10.3e} < {:.0e} {:>5} coords {verdict}",
            r.name, r.max_rel_error, r.tol, r.checked
        );
    }
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&results)?)?;
    }
    finish_checks(
        results.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect(),
        "gradient check",
    )
}

pub fn selftest(out: Option<&Path>) -> CliResult<()> {
    let results = invariant_suite()?;
    for r in &results {
        println!(
            "{:<28} {:<4} {}",
            r.name,
            if r.passed { "ok" } else { "FAIL" },
            r.detail
        );
    }
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&results)?)?;
    }
    finish_checks(
        results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.to_string())
            .collect(),
        "self test",
    )
}
