//! Subcommand implementations. Every stage reads its inputs from the fixed
//! tree under the output root, writes complete self-contained outputs back
//! into it, and never mutates its inputs; identical inputs and seeds give
//! byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cloudpatch::baseline::interpolate_image;
use cloudpatch::eval::{evaluate_model, fmt6, write_report, BandMetrics, EvalError};
use cloudpatch::indices::{
    compare_series, series_mean_index, IndexKind, IndexSeries, SeriesComparison,
};
use cloudpatch::maskgen::{apply_mask, mask_series_with, MaskError};
use cloudpatch::models::{load_model, save_model, ModelSpec};
use cloudpatch::raster::{load_series, write_series, SeriesBundle};
use cloudpatch::synth::{generate_scene, SynthError};
use cloudpatch::train::{impute_series, multi_run, train_model, RunRecord, TrainError};
use cloudpatch::{CloudMask, MultibandImage};

use crate::config::{self, FileConfig, Method};
use crate::render;
use crate::{CliError, Common};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

struct Ctx {
    cfg: FileConfig,
    out: PathBuf,
}

fn ctx(common: &Common) -> Result<Ctx, CliError> {
    let cfg = config::load_config(common.config.as_deref())?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Ctx { cfg, out })
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn synth_err(e: SynthError) -> CliError {
    match &e {
        SynthError::BadConfig { .. } => user(&e),
        _ => internal(&e),
    }
}

fn mask_err(e: MaskError) -> CliError {
    match &e {
        MaskError::BadRatio(_) | MaskError::BadCovariance { .. } | MaskError::EmptyGrid { .. } => {
            user(&e)
        }
        _ => internal(&e),
    }
}

fn train_err(e: TrainError) -> CliError {
    match &e {
        TrainError::BadConfig { .. }
        | TrainError::TooFewImages { .. }
        | TrainError::EmptyMask { .. } => user(&e),
        _ => internal(&e),
    }
}

fn eval_err(e: EvalError) -> CliError {
    match &e {
        EvalError::Io { .. } => internal(&e),
        _ => user(&e),
    }
}

/// Load a manifest-backed series, turning a missing file into a user error
/// with a hint about the pipeline stage that produces it.
fn load_bundle(manifest: &Path, hint: &str) -> Result<SeriesBundle, CliError> {
    if !manifest.is_file() {
        return Err(CliError::User(format!(
            "{} not found; {hint}",
            manifest.display()
        )));
    }
    load_series(manifest).map_err(user)
}

/// The per-date masks, which every stage past `mask` requires.
fn require_masks(bundle: &SeriesBundle) -> Result<Vec<CloudMask>, CliError> {
    bundle
        .series
        .images()
        .iter()
        .zip(&bundle.masks)
        .map(|(img, m)| {
            m.clone().ok_or_else(|| {
                CliError::User(format!("date {} has no mask; run `mask` first", img.date))
            })
        })
        .collect()
}

/// Resolve the method selection: explicit `--model` flags win, otherwise the
/// configured list. Duplicates collapse, order is preserved.
fn methods(flags: &[String], cfg: &FileConfig) -> Result<Vec<Method>, CliError> {
    let names: &[String] = if flags.is_empty() {
        &cfg.train.models
    } else {
        flags
    };
    if names.is_empty() {
        return Err(CliError::User(
            "no models selected: set [train] models in the config or pass --model".into(),
        ));
    }
    let mut out = Vec::new();
    for name in names {
        let method = Method::parse(name)?;
        if !out.contains(&method) {
            out.push(method);
        }
    }
    Ok(out)
}

fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Internal(format!("creating {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn synth(common: &Common, seed: Option<u64>) -> Result<(), CliError> {
    let ctx = ctx(common)?;
    let mut scene_cfg = ctx.cfg.scene.to_scene_config();
    if let Some(s) = seed {
        scene_cfg.seed = s;
    }
    let series = generate_scene(&scene_cfg).map_err(synth_err)?;
    let manifest =
        write_series(ctx.out.join("scene"), &series, &vec![None; series.len()]).map_err(internal)?;
    eprintln!(
        "synth: seed {} -> {} dates of {}x{}x{}, manifest {}",
        scene_cfg.seed,
        series.len(),
        series.height(),
        series.width(),
        series.images()[0].bands(),
        manifest.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// mask
// ---------------------------------------------------------------------------

pub fn mask(common: &Common, seed: Option<u64>, ratio: Option<f64>) -> Result<(), CliError> {
    let ctx = ctx(common)?;
    let input = ctx
        .cfg
        .paths
        .manifest
        .clone()
        .unwrap_or_else(|| ctx.out.join("scene").join("manifest.txt"));
    let bundle = load_bundle(&input, "run `synth` first or set [paths] manifest")?;
    let ratio = ratio.unwrap_or(ctx.cfg.mask.ratio);
    let seed = seed.unwrap_or(ctx.cfg.mask.seed);
    let masks =
        mask_series_with(&bundle.series, ratio, seed, ctx.cfg.mask.grf_config()).map_err(mask_err)?;
    let per_date = masks.first().map_or(0, CloudMask::count_masked);
    let wrapped: Vec<Option<CloudMask>> = masks.into_iter().map(Some).collect();
    let manifest =
        write_series(ctx.out.join("masks"), &bundle.series, &wrapped).map_err(internal)?;
    eprintln!(
        "mask: seed {seed}, ratio {ratio} -> {per_date} cells per date over {} dates, manifest {}",
        bundle.series.len(),
        manifest.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Deterministic model selection: lowest best-validation loss wins, ties go
/// to the smallest seed. Runs without a validation loss rank last.
fn select_run(runs: &[RunRecord]) -> Option<&RunRecord> {
    runs.iter().min_by(|a, b| {
        let ka = a.best_val_loss().unwrap_or(f64::INFINITY);
        let kb = b.best_val_loss().unwrap_or(f64::INFINITY);
        ka.partial_cmp(&kb)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.seed.cmp(&b.seed))
    })
}

pub fn train(
    common: &Common,
    model_flags: &[String],
    runs: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let ctx = ctx(common)?;
    let bundle = load_bundle(&ctx.out.join("masks").join("manifest.txt"), "run `mask` first")?;
    let masks = require_masks(&bundle)?;
    let selection = methods(model_flags, &ctx.cfg)?;
    let mut train_cfg = ctx.cfg.train.to_train_config();
    if let Some(r) = runs {
        train_cfg.n_runs = r;
    }
    if let Some(s) = seed {
        train_cfg.base_seed = s;
    }

    let kinds: Vec<_> = selection
        .iter()
        .filter_map(|m| match m {
            Method::Baseline => {
                eprintln!("train: baseline needs no training; skipping");
                None
            }
            Method::Kind(k) => Some(*k),
        })
        .collect();
    if kinds.is_empty() {
        eprintln!("train: nothing to do");
        return Ok(());
    }

    let reports = ctx.out.join("reports");
    ensure_dir(&reports)?;
    let models_dir = ctx.out.join("models");
    ensure_dir(&models_dir)?;

    let mut runs_csv = String::from("model,seed,epoch,train_loss,val_loss\n");
    let mut summary = String::from("[\n");

    for (ki, kind) in kinds.iter().enumerate() {
        let spec =
            ModelSpec::new(*kind, bundle.series.height(), bundle.series.width()).map_err(user)?;
        eprintln!(
            "train: {} for {} runs from base seed {}",
            kind.name(),
            train_cfg.n_runs,
            train_cfg.base_seed
        );
        let result = multi_run(&spec, &bundle.series, &masks, &train_cfg).map_err(train_err)?;
        for warn_seed in &result.diverged_seeds {
            eprintln!("train: warning: {} run with seed {warn_seed} diverged", kind.name());
        }
        for run in &result.runs {
            for (i, &train_loss) in run.train_history.iter().enumerate() {
                let val = run.val_history.get(i).map(|v| fmt6(*v)).unwrap_or_default();
                let _ = writeln!(
                    runs_csv,
                    "{},{},{},{},{}",
                    kind.name(),
                    run.seed,
                    i + 1,
                    fmt6(train_loss),
                    val
                );
            }
        }
        let best = select_run(&result.runs).ok_or_else(|| {
            CliError::Internal(format!("every {} training run diverged", kind.name()))
        })?;

        let (params, _) =
            train_model(&spec, &bundle.series, &masks, &train_cfg, best.seed).map_err(train_err)?;
        let checkpoint = models_dir.join(format!("{}.prm1", kind.name()));
        save_model(&checkpoint, &spec, &params).map_err(internal)?;
        eprintln!(
            "train: {} selected run seed {} (best val loss {}), checkpoint {}",
            kind.name(),
            best.seed,
            best.best_val_loss().map(fmt6).unwrap_or_else(|| "n/a".into()),
            checkpoint.display()
        );

        if ki > 0 {
            summary.push_str(",\n");
        }
        let diverged = result
            .diverged_seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        let _ = write!(
            summary,
            "  {{\n    \"model\": \"{}\",\n    \"n_runs\": {},\n    \"base_seed\": {},\n    \
             \"diverged_seeds\": [{}],\n    \"selected_seed\": {},\n    \
             \"selected_val_loss\": {},\n    \"selected_epoch\": {},\n    \"aggregate\": [\n",
            kind.name(),
            train_cfg.n_runs,
            train_cfg.base_seed,
            diverged,
            best.seed,
            best.best_val_loss().map(fmt6).unwrap_or_else(|| "null".into()),
            best.best_epoch
        );
        for (i, agg) in result.aggregate.iter().enumerate() {
            let _ = writeln!(
                summary,
                "      {{\"band\": {}, \"rmse_mean\": {}, \"rmse_std\": {}, \"r_mean\": {}, \
                 \"r_std\": {}}}{}",
                agg.band,
                fmt6(agg.rmse_mean),
                fmt6(agg.rmse_std),
                fmt6(agg.r_mean),
                fmt6(agg.r_std),
                if i + 1 < result.aggregate.len() { "," } else { "" }
            );
        }
        summary.push_str("    ]\n  }");
    }
    summary.push_str("\n]\n");

    write_text(&reports.join("train_runs.csv"), &runs_csv)?;
    write_text(&reports.join("train_summary.txt"), &summary)?;
    eprintln!("train: wrote {} and train_summary.txt", reports.join("train_runs.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// impute
// ---------------------------------------------------------------------------

pub fn impute(common: &Common, model_flags: &[String]) -> Result<(), CliError> {
    let ctx = ctx(common)?;
    let bundle = load_bundle(&ctx.out.join("masks").join("manifest.txt"), "run `mask` first")?;
    let masks = require_masks(&bundle)?;
    let selection = methods(model_flags, &ctx.cfg)?;

    for method in &selection {
        let imputed: Vec<MultibandImage> = match method {
            Method::Baseline => bundle
                .series
                .images()
                .iter()
                .zip(&masks)
                .map(|(img, m)| {
                    let gapped = apply_mask(img, m).map_err(internal)?;
                    interpolate_image(&gapped).map_err(user)
                })
                .collect::<Result<_, _>>()?,
            Method::Kind(kind) => {
                let checkpoint = ctx.out.join("models").join(format!("{}.prm1", kind.name()));
                if !checkpoint.is_file() {
                    return Err(CliError::User(format!(
                        "{} not found; run `train --model {}` first",
                        checkpoint.display(),
                        kind.name()
                    )));
                }
                let (spec, params) = load_model(&checkpoint).map_err(user)?;
                impute_series(&spec, &params, bundle.series.images(), &masks).map_err(train_err)?
            }
        };
        let series = bundle.series.with_images(imputed).map_err(internal)?;
        let manifest = write_series(
            ctx.out.join("imputed").join(method.name()),
            &series,
            &vec![None; series.len()],
        )
        .map_err(internal)?;
        eprintln!("impute: {} -> {}", method.name(), manifest.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn evaluate(common: &Common, model_flags: &[String]) -> Result<(), CliError> {
    let ctx = ctx(common)?;
    let bundle = load_bundle(&ctx.out.join("masks").join("manifest.txt"), "run `mask` first")?;
    let masks = require_masks(&bundle)?;
    let selection = methods(model_flags, &ctx.cfg)?;

    let mut by_model: BTreeMap<String, Vec<Vec<BandMetrics>>> = BTreeMap::new();
    for method in &selection {
        let manifest = ctx
            .out
            .join("imputed")
            .join(method.name())
            .join("manifest.txt");
        let imputed = load_bundle(&manifest, "run `impute` first")?;
        let metrics = evaluate_model(bundle.series.images(), imputed.series.images(), &masks)
            .map_err(eval_err)?;
        let n = metrics.len() as f64;
        let mean_rmse = metrics.iter().map(|m| m.rmse).sum::<f64>() / n;
        let mean_r = metrics.iter().map(|m| m.pearson_r).sum::<f64>() / n;
        eprintln!(
            "evaluate: {} mean RMSE {}, mean R {} over {} bands",
            method.name(),
            fmt6(mean_rmse),
            fmt6(mean_r),
            metrics.len()
        );
        by_model.insert(method.name().to_string(), vec![metrics]);
    }

    let reports = ctx.out.join("reports");
    ensure_dir(&reports)?;
    let path = reports.join("evaluation.csv");
    write_report(&path, &by_model).map_err(internal)?;
    eprintln!("evaluate: wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// indices
// ---------------------------------------------------------------------------

fn index_csv(series: &IndexSeries, comparison: Option<&SeriesComparison>) -> String {
    let mut text = String::from("date,index_kind,mean_value,category\n");
    for day in &series.days {
        let category = day.category.as_ref().map(|c| c.name()).unwrap_or("");
        let _ = writeln!(
            text,
            "{},{},{},{}",
            day.date,
            series.kind.name(),
            fmt6(day.mean),
            category
        );
    }
    if !series.dropped.is_empty() {
        let dates: Vec<String> = series.dropped.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(text, "# dropped_dates,{}", dates.join(";"));
    }
    if let Some(c) = comparison {
        text.push('\n');
        text.push_str("# summary\n");
        let _ = writeln!(text, "# pearson_r,{}", fmt6(c.pearson_r));
        let _ = writeln!(text, "# rmse,{}", fmt6(c.rmse));
        let _ = writeln!(
            text,
            "# observed_fractions,{},{},{}",
            fmt6(c.observed_fractions[0]),
            fmt6(c.observed_fractions[1]),
            fmt6(c.observed_fractions[2])
        );
        let _ = writeln!(
            text,
            "# imputed_fractions,{},{},{}",
            fmt6(c.imputed_fractions[0]),
            fmt6(c.imputed_fractions[1]),
            fmt6(c.imputed_fractions[2])
        );
    }
    text
}

pub fn indices(common: &Common, orientation_flag: Option<&str>) -> Result<(), CliError> {
    let ctx = ctx(common)?;
    let kind = config::parse_index_kind(&ctx.cfg.indices.kind)?;
    let orientation =
        config::parse_orientation(orientation_flag.unwrap_or(&ctx.cfg.indices.orientation))?;
    let bundle = load_bundle(&ctx.out.join("masks").join("manifest.txt"), "run `mask` first")?;
    let observed = series_mean_index(&bundle.series, kind, orientation).map_err(user)?;

    let reports = ctx.out.join("reports");
    ensure_dir(&reports)?;
    write_text(&reports.join("indices_observed.csv"), &index_csv(&observed, None))?;

    let selection = methods(&[], &ctx.cfg)?;
    let mut comparison_csv = String::from(
        "model,pearson_r,rmse,observed_low,observed_moderate_high,observed_bloom_risk,\
         imputed_low,imputed_moderate_high,imputed_bloom_risk\n",
    );
    let mut compared = false;
    for method in &selection {
        let manifest = ctx
            .out
            .join("imputed")
            .join(method.name())
            .join("manifest.txt");
        let imputed_bundle = load_bundle(&manifest, "run `impute` first")?;
        let imputed = series_mean_index(&imputed_bundle.series, kind, orientation).map_err(user)?;
        let comparison = if kind == IndexKind::Ndci {
            let c = compare_series(&observed, &imputed).map_err(internal)?;
            let _ = writeln!(
                comparison_csv,
                "{},{},{},{},{},{},{},{},{}",
                method.name(),
                fmt6(c.pearson_r),
                fmt6(c.rmse),
                fmt6(c.observed_fractions[0]),
                fmt6(c.observed_fractions[1]),
                fmt6(c.observed_fractions[2]),
                fmt6(c.imputed_fractions[0]),
                fmt6(c.imputed_fractions[1]),
                fmt6(c.imputed_fractions[2])
            );
            eprintln!(
                "indices: {} vs observed: R {}, RMSE {}",
                method.name(),
                fmt6(c.pearson_r),
                fmt6(c.rmse)
            );
            compared = true;
            Some(c)
        } else {
            None
        };
        write_text(
            &reports.join(format!("indices_{}.csv", method.name())),
            &index_csv(&imputed, comparison.as_ref()),
        )?;
    }
    if compared {
        write_text(&reports.join("index_comparison.csv"), &comparison_csv)?;
    }
    eprintln!(
        "indices: wrote {} series under {}",
        selection.len() + 1,
        reports.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn report(common: &Common, png: bool) -> Result<(), CliError> {
    let ctx = ctx(common)?;
    let reports = ctx.out.join("reports");
    if !reports.is_dir() {
        return Err(CliError::User(format!(
            "{} not found; run the pipeline stages first",
            reports.display()
        )));
    }

    let mut sections: Vec<(String, PathBuf)> = vec![
        ("evaluation".into(), reports.join("evaluation.csv")),
        ("training summary".into(), reports.join("train_summary.txt")),
        ("index comparison".into(), reports.join("index_comparison.csv")),
        ("indices: observed".into(), reports.join("indices_observed.csv")),
    ];
    let selection = methods(&[], &ctx.cfg)?;
    for method in &selection {
        sections.push((
            format!("indices: {}", method.name()),
            reports.join(format!("indices_{}.csv", method.name())),
        ));
    }

    let mut text = String::new();
    for (title, path) in &sections {
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        match std::fs::read_to_string(path) {
            Ok(body) => {
                let _ = writeln!(text, "== {title} ({name}) ==");
                text.push_str(body.trim_end());
                text.push_str("\n\n");
            }
            Err(_) => {
                let _ = writeln!(text, "== {title} ({name}) ==\n(missing)\n");
            }
        }
    }
    let summary_path = reports.join("summary.txt");
    write_text(&summary_path, &text)?;
    eprintln!("report: wrote {}", summary_path.display());

    if png {
        let eval_csv = reports.join("evaluation.csv");
        if eval_csv.is_file() {
            render::evaluation_png(&eval_csv, &reports.join("evaluation.png"))?;
            eprintln!("report: wrote {}", reports.join("evaluation.png").display());
        } else {
            eprintln!("report: skipping evaluation.png (no evaluation.csv)");
        }
        let mut index_files = vec![("observed".to_string(), reports.join("indices_observed.csv"))];
        for method in &selection {
            index_files.push((
                method.name().to_string(),
                reports.join(format!("indices_{}.csv", method.name())),
            ));
        }
        index_files.retain(|(_, p)| p.is_file());
        if index_files.is_empty() {
            eprintln!("report: skipping indices.png (no index series)");
        } else {
            render::indices_png(&index_files, &reports.join("indices.png"))?;
            eprintln!("report: wrote {}", reports.join("indices.png").display());
        }
    }
    Ok(())
}
