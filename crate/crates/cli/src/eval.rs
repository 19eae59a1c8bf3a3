use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Args;
use ndarray::Array3;
use pipofan::datamodel::ClassMap;
use pipofan::evaluation::{evaluate, write_report, Case};
use pipofan::io::{read_volume, spacing_zyx};

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of predicted label volumes.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label volumes with matching file names.
    #[arg(long)]
    truth: PathBuf,
    /// Comma-separated class names in label order, background first.
    #[arg(long, default_value = "background,liver,kidney,spleen")]
    classes: String,
    /// Metrics report to write (CSV).
    #[arg(long)]
    report: PathBuf,
}

fn volumes_by_case(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(id) = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")) {
            out.insert(id.to_string(), path.clone());
        }
    }
    Ok(out)
}

pub fn run(args: &EvalArgs) -> anyhow::Result<ExitCode> {
    let classes = ClassMap::new(args.classes.split(',').map(str::trim))?;
    let preds = volumes_by_case(&args.pred)?;
    let truths = volumes_by_case(&args.truth)?;
    let mut skipped: Vec<String> = preds.keys().filter(|k| !truths.contains_key(*k)).cloned().collect();
    skipped.extend(truths.keys().filter(|k| !preds.contains_key(*k)).cloned());
    let mut loaded: Vec<(String, Array3<u8>, Array3<u8>, [f64; 3])> = Vec::new();
    for (id, pred_path) in &preds {
        let Some(truth_path) = truths.get(id) else {
            continue;
        };
        let (pred, _) = read_volume::<u8>(pred_path)?;
        let (truth, header) = read_volume::<u8>(truth_path)?;
        if pred.dim() != truth.dim() {
            log::error!("case `{id}`: prediction shape {:?} differs from truth {:?}", pred.dim(), truth.dim());
            skipped.push(id.clone());
            continue;
        }
        loaded.push((id.clone(), pred, truth, spacing_zyx(&header)));
    }
    if loaded.is_empty() {
        bail!("no case ids match between {} and {}", args.pred.display(), args.truth.display());
    }
    let cases: Vec<Case<'_>> = loaded
        .iter()
        .map(|(id, pred, truth, spacing)| Case {
            id,
            pred,
            truth,
            spacing: *spacing,
        })
        .collect();
    let rows = evaluate(&cases, &classes)?;
    write_report(&args.report, &rows)?;
    log::info!("scored {} cases into {}", cases.len(), args.report.display());
    if !skipped.is_empty() {
        skipped.sort();
        log::error!("skipped unmatched cases: {}", skipped.join(", "));
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
