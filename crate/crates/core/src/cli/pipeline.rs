use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::analyze::cost_report;
use crate::graph::{build_with, BuildOptions, ModelGraph};
use crate::surgery;
use crate::train;

use super::output::{json_bytes, load_model, model_files, publish_dir, write_files, OutputLock};
use super::{
    convert_report, dataset_for, factor_files, fuse_checked, human, prune_graph, run_training, train_config, CliError,
    Cost, PipelineArgs, TrainSettings, CUTOFF_NOTE,
};

const STAGE_REPORT: &str = "stage.json";

/// Runs one stage into `out/<name>`, or reuses it when resuming. Each stage
/// directory holds the model and the stage's report so a resumed run can
/// rebuild the full pipeline report.
fn stage(
    out: &Path,
    name: &'static str,
    resume: bool,
    extra: &mut Vec<(String, Vec<u8>)>,
    f: impl FnOnce() -> Result<(ModelGraph, Value, Vec<(String, Vec<u8>)>), CliError>,
) -> Result<(ModelGraph, Value), CliError> {
    let dir = out.join(name);
    if resume && dir.join(STAGE_REPORT).is_file() {
        let g = load_model(&dir).map_err(|e| e.in_stage(name))?;
        let raw = fs::read(dir.join(STAGE_REPORT)).map_err(|e| CliError::io(dir.join(STAGE_REPORT), e))?;
        let report: Value = serde_json::from_slice(&raw)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", dir.join(STAGE_REPORT).display())))?;
        for file in extra_names(name) {
            if let Ok(bytes) = fs::read(dir.join(file)) {
                extra.push((file.to_string(), bytes));
            }
        }
        println!("[{name}] reused {}", dir.display());
        return Ok((g, report));
    }
    let (g, report, files) = f().map_err(|e| e.in_stage(name))?;
    let mut all = model_files(&g)?;
    all.push((STAGE_REPORT.to_string(), json_bytes(&report)));
    all.extend(files.iter().cloned());
    publish_dir(&dir, &all)?;
    extra.extend(files);
    Ok((g, report))
}

/// Per-stage files that are also copied to the report directory.
fn extra_names(stage: &str) -> &'static [&'static str] {
    match stage {
        "sparse" => &["sparse-history.csv", "factors.csv", "factors.svg"],
        "retrained" => &["retrain-history.csv"],
        _ => &[],
    }
}

pub(super) fn run(a: &PipelineArgs) -> Result<(), CliError> {
    if a.arch.is_counting_only() {
        return Err(CliError::Invalid(format!("{} is counting-only and cannot be trained", a.arch)));
    }
    if !(a.retrain_cutoff.is_finite() && (0.0..=100.0).contains(&a.retrain_cutoff)) {
        return Err(CliError::Usage(format!("--retrain-cutoff must lie in [0, 100], got {}", a.retrain_cutoff)));
    }
    let threshold = match (a.threshold, a.rate) {
        (None, None) => Some(0.01),
        (t, _) => t,
    };
    let seed = a.common.seed;
    let out = a.out.as_path();
    let report_dir = a.common.report_dir.clone().unwrap_or_else(|| out.join("reports"));
    let _lock = OutputLock::acquire(out)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();

    let shape = [1, a.data.image_size, a.data.image_size];
    let (base, base_report) = stage(out, "base", a.resume, &mut files, || {
        let opts = BuildOptions {
            seed,
            input_shape: Some(shape.to_vec()),
            classes: Some(a.data.classes),
        };
        let g = build_with(a.arch, &opts)?;
        let cost = cost_report(&g)?;
        Ok((g, json!({ "arch": a.arch.to_string(), "seed": seed, "cost": Cost::from(&cost) }), vec![]))
    })?;
    let data = dataset_for(&base, &a.data).map_err(|e| e.in_stage("data"))?;
    println!("[base] {} flops {} params {}", a.arch, human(cost_report(&base)?.flops), human(cost_report(&base)?.params));

    let (converted, converted_report) = stage(out, "converted", a.resume, &mut files, || {
        let c = surgery::convert_to_resconv(&base)?;
        let r = convert_report(&base, &c)?;
        Ok((c, r, vec![]))
    })?;
    println!("[converted] {} ResConv blocks", converted.resconv_indices().len());

    let sparse_cfg = train_config(&a.optim, seed, false);
    let (sparse, sparse_report) = stage(out, "sparse", a.resume, &mut files, || {
        let t = run_training(&converted, &data, &sparse_cfg)?;
        let mut extra = vec![("sparse-history.csv".to_string(), t.history_csv.into_bytes())];
        extra.extend(factor_files(&t.graph, 10, "layer scaling factors |m| after sparse training"));
        Ok((t.graph, t.report, extra))
    })?;
    println!("[sparse] lambda {} test accuracy {:.2}%", sparse_cfg.lambda, sparse_report["test_acc"].as_f64().unwrap_or(f64::NAN));

    let (pruned, pruned_report) = stage(out, "pruned", a.resume, &mut files, || {
        let (p, r) = prune_graph(&sparse, threshold, a.rate)?;
        let acc = train::test_accuracy(&p, &data)?;
        let mut v = serde_json::to_value(&r).expect("prune report serializes");
        v["test_acc"] = json!(acc);
        Ok((p, v, vec![]))
    })?;
    let reduction = pruned_report["flops_reduction_pct"].as_f64().unwrap_or(0.0);
    for w in pruned_report["warnings"].as_array().into_iter().flatten() {
        eprintln!("warning: {}", w.as_str().unwrap_or_default());
    }
    println!(
        "[pruned] FLOPs -{reduction:.2}%, test accuracy {:.2}%",
        pruned_report["test_acc"].as_f64().unwrap_or(f64::NAN)
    );

    let retrain = reduction >= a.retrain_cutoff;
    println!(
        "note: retrain cutoff {}% FLOPs reduction is an {CUTOFF_NOTE} (--retrain-cutoff)",
        a.retrain_cutoff
    );
    let (last, retrained_report) = if retrain {
        let mut optim = a.optim.clone();
        optim.epochs = a.retrain_epochs.unwrap_or(a.optim.epochs);
        let cfg = train_config(&optim, seed, true);
        let (g, r) = stage(out, "retrained", a.resume, &mut files, || {
            let t = run_training(&pruned, &data, &cfg)?;
            Ok((t.graph, t.report, vec![("retrain-history.csv".to_string(), t.history_csv.into_bytes())]))
        })?;
        println!("[retrained] test accuracy {:.2}%", r["test_acc"].as_f64().unwrap_or(f64::NAN));
        (g, r)
    } else {
        let stale = out.join("retrained");
        if stale.join(STAGE_REPORT).is_file() {
            let _ = fs::remove_dir_all(&stale);
        }
        println!("[retrained] skipped: FLOPs reduction {reduction:.2}% is below the {}% cutoff", a.retrain_cutoff);
        (pruned.clone(), Value::Null)
    };

    let (fused, fused_report) = stage(out, "fused", a.resume, &mut files, || {
        let (f, mut r) = fuse_checked(&last, seed)?;
        r["test_acc"] = json!(train::test_accuracy(&f, &data)?);
        Ok((f, r, vec![]))
    })?;
    let final_cost = cost_report(&fused)?;
    let base_cost = cost_report(&base)?;
    let reduction_final = final_cost.reduction_from(&base_cost);
    println!(
        "[fused] flops {} params {} (-{:.2}% / -{:.2}%), test accuracy {:.2}%",
        human(final_cost.flops),
        human(final_cost.params),
        reduction_final.flops_pct,
        reduction_final.params_pct,
        fused_report["test_acc"].as_f64().unwrap_or(f64::NAN)
    );

    let summary = json!({
        "arch": a.arch.to_string(),
        "seed": seed,
        "data": {
            "classes": a.data.classes,
            "per_class": a.data.per_class,
            "image_size": a.data.image_size,
            "data_seed": a.data.data_seed,
        },
        "sparse_training": TrainSettings::from(&sparse_cfg),
        "prune": match a.rate {
            Some(r) => json!({ "rate": r }),
            None => json!({ "threshold": threshold }),
        },
        "retrain": {
            "performed": retrain,
            "flops_reduction_pct": reduction,
            "cutoff_pct": a.retrain_cutoff,
            "cutoff_source": CUTOFF_NOTE,
        },
        "final": {
            "flops": final_cost.flops,
            "params": final_cost.params,
            "reduction_from_base": reduction_final,
        },
        "stages": {
            "base": base_report,
            "converted": converted_report,
            "sparse": sparse_report,
            "pruned": pruned_report,
            "retrained": retrained_report,
            "fused": fused_report,
        },
    });
    files.push(("pipeline.json".to_string(), json_bytes(&summary)));
    let same_tree = report_dir.starts_with(out);
    let _report_lock = if same_tree { None } else { Some(OutputLock::acquire(&report_dir)?) };
    write_files(&report_dir, &files)?;
    println!("reports -> {}", report_dir.display());
    Ok(())
}
