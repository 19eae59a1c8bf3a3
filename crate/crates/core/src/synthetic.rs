//! Synthetic two-organ images for smoke tests and the desk-scale overfit
//! check: every image holds one disk ("liver") and one square ("kidney").

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{ClassMap, DatasetDescriptor, VolumeSample};
use crate::error::Result;
use crate::evaluation::DiceCounts;
use crate::inference::{argmax_labels, predict_probabilities};
use crate::losses::LossConfig;
use crate::model::Model;
use crate::network::NetworkConfig;
use crate::nn::BlockKind;
use crate::preprocess::{prepare_volume, PreprocessConfig};
use crate::trainer::{TrainConfig, Trainer, TrainingSet};

pub const DISK_CLASS: u8 = 1;
pub const SQUARE_CLASS: u8 = 2;

#[derive(Clone, Debug)]
pub struct ShapesConfig {
    pub images: usize,
    pub size: usize,
    pub background_hu: f32,
    pub disk_hu: f32,
    pub square_hu: f32,
    pub noise_hu: f32,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            images: 16,
            size: 96,
            background_hu: -120.0,
            disk_hu: 60.0,
            square_hu: 150.0,
            noise_hu: 15.0,
        }
    }
}

/// One generated image with its complete label map.
#[derive(Clone, Debug)]
pub struct ShapesImage {
    pub image: Array2<f32>,
    pub labels: Array2<u8>,
}

pub fn generate_shapes(config: &ShapesConfig, seed: u64) -> Vec<ShapesImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, config.noise_hu).expect("finite noise");
    let n = config.size as i64;
    (0..config.images)
        .map(|_| loop {
            let r = rng.random_range(n / 10..=n / 6);
            let (cy, cx) = (rng.random_range(r + 2..n - r - 2), rng.random_range(r + 2..n - r - 2));
            let side = rng.random_range(n / 6..=n / 4);
            let (sy, sx) = (rng.random_range(2..n - side - 2), rng.random_range(2..n - side - 2));
            // Keep a gap between the shapes.
            let nearest_y = cy.clamp(sy, sy + side);
            let nearest_x = cx.clamp(sx, sx + side);
            let gap = (((cy - nearest_y).pow(2) + (cx - nearest_x).pow(2)) as f64).sqrt();
            if gap < r as f64 + 4.0 {
                continue;
            }
            let mut labels = Array2::<u8>::zeros((config.size, config.size));
            for ((y, x), l) in labels.indexed_iter_mut() {
                let (y, x) = (y as i64, x as i64);
                if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                    *l = DISK_CLASS;
                } else if (sy..sy + side).contains(&y) && (sx..sx + side).contains(&x) {
                    *l = SQUARE_CLASS;
                }
            }
            let image = labels.mapv(|l| match l {
                DISK_CLASS => config.disk_hu,
                SQUARE_CLASS => config.square_hu,
                _ => config.background_hu,
            }) + Array2::from_shape_simple_fn((config.size, config.size), || noise.sample(&mut rng));
            break ShapesImage { image, labels };
        })
        .collect()
}

/// Splits generated images into two partially labeled datasets: the first
/// half annotates only disks, the second half only squares. Volumes have a
/// single slice.
pub fn partial_label_datasets(images: &[ShapesImage], class_map: &ClassMap) -> Result<Vec<(Arc<DatasetDescriptor>, Vec<VolumeSample>)>> {
    let half = images.len() / 2;
    let spec = [("disks", DISK_CLASS, 0..half), ("squares", SQUARE_CLASS, half..images.len())];
    spec.into_iter()
        .map(|(name, class, range)| {
            let desc = Arc::new(DatasetDescriptor::new(name, [class], vec![], class_map)?);
            let volumes = range
                .map(|i| {
                    let im = &images[i];
                    let labels = im.labels.mapv(|l| if l == class { class } else { 0 });
                    VolumeSample {
                        id: format!("{name}_{i:02}"),
                        image: im.image.clone().insert_axis(ndarray::Axis(0)),
                        spacing: [1.0; 3],
                        labels: Some(labels.insert_axis(ndarray::Axis(0))),
                        source: desc.clone(),
                    }
                })
                .collect();
            Ok((desc, volumes))
        })
        .collect()
}

/// Full ground truth of every image as single-slice volumes.
pub fn full_labels(images: &[ShapesImage]) -> Vec<Array3<u8>> {
    images
        .iter()
        .map(|im| im.labels.clone().insert_axis(ndarray::Axis(0)))
        .collect()
}

/// Reduced widths for the five-scale desk network.
pub const DESK_WIDTHS: [usize; 9] = [16, 32, 64, 128, 128, 128, 64, 32, 16];

/// A small end-to-end problem: two partially labeled datasets of shapes,
/// trained with a five-scale network at desk scale.
pub struct DeskProblem {
    pub images: Vec<ShapesImage>,
    pub trainer: Trainer,
    pub network: NetworkConfig,
}

pub fn desk_problem(image_seed: u64, max_steps: usize) -> Result<DeskProblem> {
    let images = generate_shapes(&ShapesConfig::default(), image_seed);
    let preprocess = PreprocessConfig {
        resize_to: 96,
        crop_size: 96,
        ..Default::default()
    };
    let sets = partial_label_datasets(&images, &ClassMap::abdominal())?
        .into_iter()
        .map(|(descriptor, raw)| {
            let volumes = raw.iter().map(|v| prepare_volume(v, &preprocess)).collect::<Result<_>>()?;
            Ok(TrainingSet { descriptor, volumes })
        })
        .collect::<Result<Vec<_>>>()?;
    let train = TrainConfig {
        lr0: 2e-3,
        max_epochs: 1000,
        dps_epochs: 40,
        batch_size: 2,
        max_steps: Some(max_steps),
        ..TrainConfig::multi_organ()
    };
    let network = NetworkConfig {
        scales: 5,
        channels: DESK_WIDTHS.to_vec(),
        block_type: BlockKind::Plain,
        class_count: 4,
        input_channels: 3,
    };
    let trainer = Trainer::new(train, preprocess, LossConfig::default(), sets)?;
    Ok(DeskProblem {
        images,
        trainer,
        network,
    })
}

/// Fused-output Dice of disks and squares against the complete labels of
/// every training image: `(pooled, per-image mean)` per class.
pub fn training_dice(model: &Model<f32>, problem: &DeskProblem) -> Result<[(f64, f64); 2]> {
    let truth = full_labels(&problem.images);
    let mut pooled = [DiceCounts::default(); 2];
    let mut per_case = [0.0; 2];
    let mut n = 0;
    for set in problem.trainer.sets() {
        for v in &set.volumes {
            let index: usize = v.id.rsplit('_').next().and_then(|s| s.parse().ok()).expect("generated id");
            let pred = argmax_labels(&predict_probabilities(model, &v.image, 3)?);
            for (k, class) in [DISK_CLASS, SQUARE_CLASS].into_iter().enumerate() {
                let c = DiceCounts::of(&pred, &truth[index], class)?;
                pooled[k] = pooled[k] + c;
                per_case[k] += c.dice();
            }
            n += 1;
        }
    }
    Ok([0, 1].map(|k| (pooled[k].dice(), per_case[k] / n as f64)))
}
