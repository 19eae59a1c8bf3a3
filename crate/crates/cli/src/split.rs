use std::path::Path;
use std::process::ExitCode;

use anyhow::Context;
use pipofan::datamodel::DatasetManifest;
use pipofan::evaluation::make_folds;

pub fn run(manifest: &Path, k: usize, seed: u64, out: &Path) -> anyhow::Result<ExitCode> {
    let manifest = DatasetManifest::load(manifest)?;
    let ids: Vec<&str> = manifest.volumes.iter().map(|v| v.id.as_str()).collect();
    let plan = make_folds(&ids, k, seed)?;
    std::fs::write(out, plan.to_json()).with_context(|| format!("writing {}", out.display()))?;
    log::info!("wrote {k} folds of sizes {:?} to {}", plan.sizes(), out.display());
    Ok(ExitCode::SUCCESS)
}
