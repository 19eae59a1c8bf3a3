use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::Args;
use pipofan::checkpoint::{load_model, sha256_file, CheckpointMeta};
use pipofan::datamodel::{ClassMap, DatasetDescriptor, VolumeSample};
use pipofan::inference::{
    argmax_labels, ensemble_soft, ensemble_vote, postprocess_components, predict_probabilities, prepare_for_inference,
    restore_labels, CheckpointRef, EnsembleMode, InferenceRecord, PostprocessRules, ShapePolicy,
};
use pipofan::io::{read_volume, spacing_zyx, write_volume};
use pipofan::model::Model;
use pipofan::preprocess::PreprocessConfig;

use crate::Global;

#[derive(Args)]
pub struct InferArgs {
    /// Model checkpoint; repeat for an ensemble.
    #[arg(long = "checkpoint", alias = "checkpoints", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    /// Input NIfTI volumes, or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Directory for label volumes and their metadata.
    #[arg(long)]
    output: PathBuf,
    /// Combine several checkpoints by majority vote or probability averaging.
    #[arg(long, num_args = 0..=1, default_missing_value = "vote", value_parser = parse_ensemble)]
    ensemble: Option<EnsembleMode>,
    /// Component budgets as JSON, e.g. {"budgets": {"1": 1, "2": 2}}.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Keep every connected component.
    #[arg(long)]
    no_postprocess: bool,
    #[arg(long, default_value = "pad", value_parser = parse_policy)]
    policy: ShapePolicy,
}

fn parse_ensemble(s: &str) -> Result<EnsembleMode, String> {
    match s {
        "vote" => Ok(EnsembleMode::Vote),
        "soft" => Ok(EnsembleMode::Soft),
        _ => Err(format!("unknown ensemble mode `{s}` (vote, soft)")),
    }
}

fn parse_policy(s: &str) -> Result<ShapePolicy, String> {
    match s {
        "pad" => Ok(ShapePolicy::Pad),
        "strict" => Ok(ShapePolicy::Strict),
        _ => Err(format!("unknown policy `{s}` (pad, strict)")),
    }
}

fn is_nifti(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

pub fn collect_inputs(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| is_nifti(p))
                .collect();
            entries.sort();
            out.extend(entries);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

struct Loaded {
    model: Model<f32>,
    reference: CheckpointRef,
}

struct Setup {
    models: Vec<Loaded>,
    preprocess: PreprocessConfig,
    descriptor: Arc<DatasetDescriptor>,
    rules: Option<PostprocessRules>,
}

fn setup(args: &InferArgs) -> anyhow::Result<Setup> {
    if args.checkpoints.len() > 1 && args.ensemble.is_none() {
        bail!("{} checkpoints given; pass --ensemble to combine them", args.checkpoints.len());
    }
    let mut models = Vec::new();
    let mut first_meta: Option<CheckpointMeta> = None;
    for path in &args.checkpoints {
        let (model, meta) = load_model(path)?;
        let reference = CheckpointRef {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        };
        if let Some(m) = &first_meta {
            if m.network.class_count != meta.network.class_count || m.preprocess != meta.preprocess {
                bail!("checkpoint {} is incompatible with {}", path.display(), args.checkpoints[0].display());
            }
        } else {
            first_meta = Some(meta);
        }
        models.push(Loaded { model, reference });
    }
    let meta = first_meta.expect("at least one checkpoint");
    let class_count = meta.network.class_count;
    let classes = match meta.classes {
        Some(c) => c,
        None if class_count == ClassMap::default().len() => ClassMap::default(),
        None => bail!("checkpoint stores no class names and has {class_count} classes"),
    };
    let rules = if args.no_postprocess {
        None
    } else {
        let rules = match &args.rules {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => PostprocessRules::for_classes(&classes),
        };
        rules
            .validate(class_count)
            .context("postprocess rules do not fit the checkpoint")?;
        Some(rules)
    };
    let descriptor = Arc::new(DatasetDescriptor::new("inference", classes.foreground(), vec![], &classes)?);
    Ok(Setup {
        models,
        preprocess: meta.preprocess.unwrap_or_default(),
        descriptor,
        rules,
    })
}

fn output_name(input: &Path) -> String {
    input.file_name().and_then(|n| n.to_str()).unwrap_or("volume.nii.gz").to_string()
}

fn case_id(file_name: &str) -> &str {
    file_name
        .strip_suffix(".nii.gz")
        .or_else(|| file_name.strip_suffix(".nii"))
        .unwrap_or(file_name)
}

fn process(input: &Path, args: &InferArgs, setup: &Setup) -> anyhow::Result<PathBuf> {
    let (image, header) = read_volume::<f32>(input)?;
    let name = output_name(input);
    let sample = VolumeSample {
        id: case_id(&name).to_string(),
        image,
        spacing: spacing_zyx(&header),
        labels: None,
        source: setup.descriptor.clone(),
    };
    let scales = setup.models[0].model.config().scales;
    let prepared = prepare_for_inference(&sample, &setup.preprocess, scales, args.policy)?;
    let per_model = setup
        .models
        .iter()
        .map(|m| predict_probabilities(&m.model, &prepared.image, prepared.stack_depth))
        .collect::<pipofan::Result<Vec<_>>>()?;
    let labels = match args.ensemble {
        Some(EnsembleMode::Soft) => restore_labels(&argmax_labels(&ensemble_soft(&per_model)?), &prepared),
        _ => {
            let votes: Vec<_> = per_model
                .iter()
                .map(|p| restore_labels(&argmax_labels(p), &prepared))
                .collect();
            ensemble_vote(&votes)?
        }
    };
    let labels = match &setup.rules {
        Some(r) => postprocess_components(&labels, r),
        None => labels,
    };
    let out = args.output.join(&name);
    write_volume(&out, &labels, &header)?;
    let record = InferenceRecord {
        input: input.display().to_string(),
        output: out.display().to_string(),
        checkpoints: setup.models.iter().map(|m| m.reference.clone()).collect(),
        ensemble: args.ensemble,
        rules: setup.rules.clone().unwrap_or(PostprocessRules {
            budgets: Default::default(),
        }),
        policy: args.policy,
        padding: prepared.padding,
    };
    let sidecar = args.output.join(format!("{}.json", case_id(&name)));
    std::fs::write(&sidecar, serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(out)
}

pub fn run(args: &InferArgs, global: Global) -> anyhow::Result<ExitCode> {
    let setup = setup(args)?;
    let inputs = collect_inputs(&args.input)?;
    if inputs.is_empty() {
        bail!("no input volumes found");
    }
    std::fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let workers = global.workers().min(inputs.len());
    let mut results: Vec<Option<anyhow::Result<PathBuf>>> = (0..inputs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = inputs.len().div_ceil(workers);
        for (paths, slots) in inputs.chunks(chunk).zip(results.chunks_mut(chunk)) {
            let setup = &setup;
            scope.spawn(move || {
                for (p, slot) in paths.iter().zip(slots) {
                    *slot = Some(process(p, args, setup));
                }
            });
        }
    });
    let mut failures = 0;
    for (input, result) in inputs.iter().zip(results) {
        match result.expect("every input processed") {
            Ok(out) => log::info!("{} -> {}", input.display(), out.display()),
            Err(e) => {
                failures += 1;
                log::error!("{}: {e:#}", input.display());
            }
        }
    }
    if failures > 0 {
        log::error!("{failures} of {} volumes failed", inputs.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
