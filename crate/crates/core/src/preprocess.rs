//! Intensity windowing, resizing, normalization, 2.5D stack sampling and
//! label pyramids.

use ndarray::{s, Array, Array2, Array3, Array4, Axis, Dimension};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{check_divisible, ScalePyramid, VolumeSample};
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, resize_nearest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub hu_window: (f32, f32),
    pub resize_to: usize,
    pub crop_size: usize,
    pub stack_depth: usize,
    pub scales: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            hu_window: (-200.0, 200.0),
            resize_to: 256,
            crop_size: 224,
            stack_depth: 3,
            scales: 5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.hu_window;
        if !(lo < hi) {
            return Err(Error::Config(format!("hu_window low {lo} must be below high {hi}")));
        }
        if self.crop_size > self.resize_to {
            return Err(Error::Config(format!(
                "crop_size {} exceeds resize_to {}",
                self.crop_size, self.resize_to
            )));
        }
        if self.stack_depth.is_multiple_of(2) {
            return Err(Error::Config(format!("stack_depth {} must be odd", self.stack_depth)));
        }
        check_divisible(self.crop_size, self.crop_size, self.scales)
    }
}

pub fn window_hu<D: Dimension>(volume: &Array<f32, D>, window: (f32, f32)) -> Array<f32, D> {
    let (lo, hi) = window;
    volume.mapv(|v| v.max(lo).min(hi))
}

/// Per-volume zero mean, unit variance. A constant volume maps to zeros.
pub fn normalize_zscore<D: Dimension>(volume: &Array<f32, D>) -> Array<f32, D> {
    let n = volume.len().max(1) as f64;
    let mean = volume.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = volume.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    volume.mapv(|v| ((v as f64 - mean) / std) as f32)
}

/// Resizes every axial slice to `target x target`: bilinear for the image,
/// nearest neighbor for labels.
pub fn resize_slices(
    volume: &Array3<f32>,
    labels: Option<&Array3<u8>>,
    target: usize,
) -> Result<(Array3<f32>, Option<Array3<u8>>)> {
    let (z, h, w) = volume.dim();
    if h != w {
        return Err(Error::Contract(format!("in-plane size {h}x{w} is not square")));
    }
    if let Some(l) = labels {
        if l.dim() != volume.dim() {
            return Err(Error::Contract(format!(
                "label shape {:?} differs from image shape {:?}",
                l.shape(),
                volume.shape()
            )));
        }
    }
    let batched = volume.view().insert_axis(Axis(0)).to_owned();
    let image = resize_bilinear(&batched, target, target).index_axis_move(Axis(0), 0);
    let labels = labels.map(|l| {
        let mut out = Array3::<u8>::zeros((z, target, target));
        for (k, plane) in l.axis_iter(Axis(0)).enumerate() {
            out.index_axis_mut(Axis(0), k)
                .assign(&resize_nearest(plane, target, target));
        }
        out
    });
    Ok((image, labels))
}

/// Window, resize, then normalize a volume.
pub fn prepare_volume(sample: &VolumeSample, config: &PreprocessConfig) -> Result<VolumeSample> {
    let windowed = window_hu(&sample.image, config.hu_window);
    let (resized, labels) = resize_slices(&windowed, sample.labels.as_ref(), config.resize_to)?;
    let (_, h, _) = sample.image.dim();
    let f = h as f64 / config.resize_to as f64;
    Ok(VolumeSample {
        id: sample.id.clone(),
        image: normalize_zscore(&resized),
        spacing: [sample.spacing[0], sample.spacing[1] * f, sample.spacing[2] * f],
        labels,
        source: sample.source.clone(),
    })
}

/// A sampled training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    /// `(stack_depth, crop, crop)`.
    pub input: Array3<f32>,
    /// Label of the center slice, `(crop, crop)`.
    pub label: Array2<u8>,
    pub slices: Vec<usize>,
    pub origin: (usize, usize),
}

/// Indices of the `depth` slices centred on `center`, replicating the edge
/// slice past either end of the volume.
pub fn stack_indices(center: usize, depth: usize, len: usize) -> Vec<usize> {
    let r = depth / 2;
    (0..depth)
        .map(|k| (center + k).saturating_sub(r).min(len - 1))
        .collect()
}

/// Slices whose labels contain at least one voxel of the source dataset's
/// labeled classes.
pub fn target_slices(sample: &VolumeSample) -> Vec<usize> {
    let Some(labels) = &sample.labels else {
        return Vec::new();
    };
    let ck = sample.source.labeled_classes();
    labels
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, plane)| plane.iter().any(|v| ck.contains(v)))
        .map(|(z, _)| z)
        .collect()
}

pub fn sample_stack<R: Rng + ?Sized>(
    sample: &VolumeSample,
    config: &PreprocessConfig,
    rng: &mut R,
) -> Result<Stack> {
    let labels = sample.labels.as_ref().ok_or_else(|| Error::Sampling {
        volume: sample.id.clone(),
    })?;
    let centers = target_slices(sample);
    if centers.is_empty() {
        return Err(Error::Sampling {
            volume: sample.id.clone(),
        });
    }
    let (z, h, w) = sample.image.dim();
    let crop = config.crop_size;
    if crop > h || crop > w {
        return Err(Error::Config(format!(
            "crop_size {crop} exceeds slice size {h}x{w} of `{}`",
            sample.id
        )));
    }
    let center = centers[rng.random_range(0..centers.len())];
    let oy = rng.random_range(0..=h - crop);
    let ox = rng.random_range(0..=w - crop);
    let slices = stack_indices(center, config.stack_depth, z);
    let mut input = Array3::<f32>::zeros((slices.len(), crop, crop));
    for (c, &k) in slices.iter().enumerate() {
        input
            .index_axis_mut(Axis(0), c)
            .assign(&sample.image.slice(s![k, oy..oy + crop, ox..ox + crop]));
    }
    let label = labels.slice(s![center, oy..oy + crop, ox..ox + crop]).to_owned();
    Ok(Stack {
        input,
        label,
        slices,
        origin: (oy, ox),
    })
}

/// Level `s + 1` takes the top-left element of every 2x2 block of level `s`.
pub fn build_label_pyramid(label: &Array2<u8>, scales: usize) -> Result<ScalePyramid<Array2<u8>>> {
    let (h, w) = label.dim();
    check_divisible(h, w, scales)?;
    let mut levels = vec![label.clone()];
    for _ in 1..scales {
        let next = levels.last().unwrap().slice(s![..;2, ..;2]).to_owned();
        levels.push(next);
    }
    ScalePyramid::new(levels)
}

/// Batched form of [`build_label_pyramid`] over `(N, H, W)`.
pub fn build_label_pyramid_batch(labels: &Array3<u8>, scales: usize) -> Result<ScalePyramid<Array3<u8>>> {
    let (_, h, w) = labels.dim();
    check_divisible(h, w, scales)?;
    let mut levels = vec![labels.clone()];
    for _ in 1..scales {
        let next = levels.last().unwrap().slice(s![.., ..;2, ..;2]).to_owned();
        levels.push(next);
    }
    ScalePyramid::new(levels)
}

/// Stacks samples into an `(N, D, H, W)` batch and `(N, H, W)` labels.
pub fn collate(stacks: &[Stack]) -> (Array4<f32>, Array3<u8>) {
    let (d, h, w) = stacks[0].input.dim();
    let mut x = Array4::zeros((stacks.len(), d, h, w));
    let mut y = Array3::zeros((stacks.len(), h, w));
    for (i, st) in stacks.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&st.input);
        y.index_axis_mut(Axis(0), i).assign(&st.label);
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ClassMap, DatasetDescriptor};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn volume_with_labels(labels: Array3<u8>) -> VolumeSample {
        let d = DatasetDescriptor::new("d", [1], vec![], &ClassMap::abdominal()).unwrap();
        let image = Array3::from_shape_fn(labels.dim(), |(z, y, x)| (z * 1000 + y * 10 + x) as f32);
        VolumeSample {
            id: "vol".into(),
            image,
            spacing: [1.0; 3],
            labels: Some(labels),
            source: Arc::new(d),
        }
    }

    fn cfg(crop: usize) -> PreprocessConfig {
        PreprocessConfig {
            crop_size: crop,
            resize_to: crop,
            scales: 2,
            ..Default::default()
        }
    }

    #[test]
    fn window_clamps_to_bounds() {
        let v = array![300.0f32, -500.0, 50.0];
        assert_eq!(window_hu(&v, (-200.0, 200.0)), array![200.0, -200.0, 50.0]);
    }

    #[test]
    fn zscore_examples() {
        assert_eq!(normalize_zscore(&array![-1.0f32, 1.0]), array![-1.0, 1.0]);
        assert_eq!(normalize_zscore(&array![0.0f32, 2.0]), array![-1.0, 1.0]);
        assert!(normalize_zscore(&Array3::from_elem((2, 2, 2), 200.0f32)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_halves_and_keeps_label_values() {
        let img = Array3::from_shape_fn((1, 512, 512), |(_, y, x)| (x + y) as f32);
        let lab = Array3::from_shape_fn((1, 512, 512), |(_, y, x)| ((x / 7 + y / 5) % 2) as u8);
        let (ri, rl) = resize_slices(&img, Some(&lab), 256).unwrap();
        assert_eq!(ri.dim(), (1, 256, 256));
        assert!(rl.unwrap().iter().all(|&v| v <= 1));
        let (same, _) = resize_slices(&img, None, 512).unwrap();
        assert_eq!(same, img);
    }

    #[test]
    fn only_labeled_slice_is_centre() {
        let mut labels = Array3::<u8>::zeros((12, 8, 8));
        labels[[7, 3, 3]] = 1;
        let v = volume_with_labels(labels);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let st = sample_stack(&v, &cfg(4), &mut rng).unwrap();
            assert_eq!(st.slices, vec![6, 7, 8]);
            assert_eq!(st.input.dim(), (3, 4, 4));
            assert_eq!(st.label.dim(), (4, 4));
        }
    }

    #[test]
    fn boundary_slice_replicates_edge() {
        let mut labels = Array3::<u8>::zeros((5, 4, 4));
        labels[[0, 0, 0]] = 1;
        let v = volume_with_labels(labels);
        let st = sample_stack(&v, &cfg(4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(st.slices, vec![0, 0, 1]);
        assert_eq!(st.input.index_axis(Axis(0), 0), st.input.index_axis(Axis(0), 1));
        assert_eq!(stack_indices(4, 3, 5), vec![3, 4, 4]);
    }

    #[test]
    fn unlabeled_volume_is_sampling_error() {
        let v = volume_with_labels(Array3::zeros((3, 4, 4)));
        let err = sample_stack(&v, &cfg(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Sampling { ref volume } if volume == "vol"));
    }

    #[test]
    fn crop_matches_image_and_label() {
        let labels = Array3::from_elem((3, 8, 8), 1u8);
        let v = volume_with_labels(labels);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = sample_stack(&v, &cfg(4), &mut rng).unwrap();
        let (oy, ox) = st.origin;
        let centre = st.slices[1];
        assert_eq!(st.input[[1, 0, 0]], v.image[[centre, oy, ox]]);
    }

    #[test]
    fn label_pyramid_examples() {
        let p = build_label_pyramid(&array![[1u8, 1], [0, 1]], 2).unwrap();
        assert_eq!(p.level(1), &array![[1u8]]);
        let p = build_label_pyramid(&Array2::from_elem((8, 8), 2u8), 4).unwrap();
        assert!(p.levels().iter().all(|l| l.iter().all(|&v| v == 2)));
        assert_eq!(build_label_pyramid(&Array2::zeros((6, 6)), 1).unwrap().scales(), 1);
        assert!(matches!(build_label_pyramid(&Array2::zeros((6, 6)), 3), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(PreprocessConfig::default().validate().is_ok());
        let bad = PreprocessConfig { stack_depth: 2, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PreprocessConfig { crop_size: 300, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PreprocessConfig { crop_size: 100, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
