use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context};
use pipofan::checkpoint::{self, reference_count_mismatch, SaveOptions, Saveable};
use pipofan::config::ExperimentConfig;
use pipofan::trainer::Trainer;

pub const FINAL_CHECKPOINT: &str = "last.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

pub fn run(config_path: &Path, resume: Option<&Path>) -> anyhow::Result<ExitCode> {
    let config = ExperimentConfig::load(config_path)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = config.to_toml();
    std::fs::write(out.join(RESOLVED_CONFIG), &resolved)?;

    let sets = config.load_training_sets()?;
    for s in &sets {
        log::info!("dataset `{}`: {} volumes", s.descriptor.name(), s.volumes.len());
    }
    let trainer = Trainer::new(config.train.clone(), config.preprocess.clone(), config.loss.clone(), sets)?;
    let mut state = match resume {
        Some(path) => {
            let (state, meta) = checkpoint::load_state(path)?;
            if meta.network != config.network {
                bail!("checkpoint {} was trained with a different network config", path.display());
            }
            log::info!("resuming from step {}", state.step);
            state
        }
        None => trainer.init_state_with(config.network.clone(), config.fusion, config.seed)?,
    };
    if let Some((ours, reference)) = reference_count_mismatch(&state.model) {
        log::warn!("network has {ours} parameters; the reference count is {reference}");
    }

    let options = SaveOptions {
        classes: Some(config.classes.clone()),
        preprocess: Some(config.preprocess.clone()),
        experiment: Some(resolved),
    };
    let log_path = out.join(LOG_FILE);
    let mut log_file = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    for record in &state.history {
        writeln!(log_file, "{}", serde_json::to_string(record)?)?;
    }
    log::info!(
        "training {} steps ({} per epoch) from step {}",
        trainer.total_steps(),
        trainer.steps_per_epoch(),
        state.step
    );
    let every = config.train.checkpoint_every;
    trainer.run(&mut state, |state, record| {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(log_file, "{line}").map_err(|e| pipofan::Error::Checkpoint(e.to_string()))?;
        if record.step % 50 == 0 {
            log::info!("step {} epoch {} {:?} loss {:.5}", record.step, record.epoch, record.phase, record.loss);
        }
        if every.is_some_and(|n| state.step % n == 0) {
            let path = out.join(format!("step_{:07}.safetensors", state.step));
            checkpoint::save(&path, Saveable::State(state), &options)?;
        }
        Ok(())
    })?;
    log_file.flush()?;
    let last = out.join(FINAL_CHECKPOINT);
    checkpoint::save(&last, Saveable::State(&state), &options)?;
    log::info!("wrote {}", last.display());
    Ok(ExitCode::SUCCESS)
}
