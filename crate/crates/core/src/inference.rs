//! Slice-by-slice volume segmentation, connected-component cleanup and
//! ensembling.

use std::collections::{BTreeMap, VecDeque};

use ndarray::{s, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::{check_divisible, ClassMap, VolumeSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{resize_nearest, Mode};
use crate::preprocess::{prepare_volume, stack_indices, PreprocessConfig};

/// What to do when slice sizes do not suit the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapePolicy {
    /// Pad to a usable size, segment, then remove the padding again.
    #[default]
    Pad,
    /// Refuse with a configuration error.
    Strict,
}

/// Padding applied during inference, as `(before, after)` per in-plane axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub native: [(usize, usize); 2],
    pub resized: [(usize, usize); 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessRules {
    /// Foreground class index to the number of largest components kept.
    pub budgets: BTreeMap<u8, usize>,
}

impl PostprocessRules {
    /// One component for every organ except the kidneys, which keep two.
    pub fn for_classes(classes: &ClassMap) -> Self {
        let budgets = classes
            .foreground()
            .map(|c| (c, if classes.name(c) == Some("kidney") { 2 } else { 1 }))
            .collect();
        Self { budgets }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        for (&c, &k) in &self.budgets {
            if c == 0 || c as usize >= class_count {
                return Err(Error::Config(format!(
                    "postprocess rule for class {c} outside foreground classes 1..{class_count}"
                )));
            }
            if k == 0 {
                return Err(Error::Config(format!("component budget for class {c} must be at least 1")));
            }
        }
        Ok(())
    }
}

impl Default for PostprocessRules {
    fn default() -> Self {
        Self::for_classes(&ClassMap::default())
    }
}

fn pad_edge(image: &Array3<f32>, pad: [(usize, usize); 2], value: Option<f32>) -> Array3<f32> {
    let (z, h, w) = image.dim();
    let (hh, ww) = (h + pad[0].0 + pad[0].1, w + pad[1].0 + pad[1].1);
    let mut out = Array3::from_elem((z, hh, ww), value.unwrap_or(0.0));
    out.slice_mut(s![.., pad[0].0..pad[0].0 + h, pad[1].0..pad[1].0 + w])
        .assign(image);
    out
}

fn split(total: usize) -> (usize, usize) {
    (total / 2, total - total / 2)
}

fn argmax_lowest(probs: &Array4<f32>) -> Array2<u8> {
    let (_, c, h, w) = probs.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if probs[[0, k, y, x]] > probs[[0, best, y, x]] {
                best = k;
            }
        }
        best as u8
    })
}

/// Fused class probabilities `(C, Z, H, W)` of a preprocessed volume. Each
/// slice is predicted from the stack centred on it.
pub fn predict_probabilities(model: &Model<f32>, image: &Array3<f32>, stack_depth: usize) -> Result<Array4<f32>> {
    let (z, h, w) = image.dim();
    let c = model.config().class_count;
    let mut out = Array4::<f32>::zeros((c, z, h, w));
    for k in 0..z {
        let idx = stack_indices(k, stack_depth, z);
        let x = image.select(Axis(0), &idx).insert_axis(Axis(0));
        let seg = model.segment(&x, Mode::Eval)?;
        out.slice_mut(s![.., k, .., ..])
            .assign(&seg.fused_probs.index_axis(Axis(0), 0));
    }
    Ok(out)
}

/// Per-voxel label of the most probable class, the lowest index on ties.
pub fn argmax_labels(probs: &Array4<f32>) -> Array3<u8> {
    let (_, z, h, w) = probs.dim();
    let mut out = Array3::<u8>::zeros((z, h, w));
    for k in 0..z {
        let p = probs.slice(s![.., k..k + 1, .., ..]).permuted_axes([1, 0, 2, 3]).to_owned();
        out.index_axis_mut(Axis(0), k).assign(&argmax_lowest(&p));
    }
    out
}

/// A volume prepared for prediction, with what is needed to map results
/// back to the native grid.
#[derive(Clone, Debug)]
pub struct PreparedVolume {
    pub image: Array3<f32>,
    pub native_shape: (usize, usize, usize),
    pub padding: Padding,
    pub stack_depth: usize,
}

pub fn prepare_for_inference(
    volume: &VolumeSample,
    preprocess: &PreprocessConfig,
    scales: usize,
    policy: ShapePolicy,
) -> Result<PreparedVolume> {
    let (z, h, w) = volume.image.dim();
    let mut padding = Padding::default();
    let mut native = volume.clone();
    native.labels = None;
    if h != w {
        if policy == ShapePolicy::Strict {
            return Err(Error::Config(format!("slice size {h}x{w} of `{}` is not square", volume.id)));
        }
        let side = h.max(w);
        padding.native = [split(side - h), split(side - w)];
        native.image = pad_edge(&volume.image, padding.native, Some(preprocess.hu_window.0));
    }
    let prepared = prepare_volume(&native, preprocess)?;
    let mut image = prepared.image;
    let r = preprocess.resize_to;
    if check_divisible(r, r, scales).is_err() {
        if policy == ShapePolicy::Strict {
            return Err(Error::Config(format!(
                "resized slice size {r} is not divisible by 2^{}",
                scales - 1
            )));
        }
        let m = 1usize << (scales - 1);
        let target = r.div_ceil(m) * m;
        padding.resized = [split(target - r), split(target - r)];
        image = pad_edge(&image, padding.resized, None);
    }
    Ok(PreparedVolume {
        image,
        native_shape: (z, h, w),
        padding,
        stack_depth: preprocess.stack_depth,
    })
}

/// Undoes the padding and resizing applied by [`prepare_for_inference`].
pub fn restore_labels(labels: &Array3<u8>, prepared: &PreparedVolume) -> Array3<u8> {
    let (z, h, w) = prepared.native_shape;
    let [(ry0, ry1), (rx0, rx1)] = prepared.padding.resized;
    let [(ny0, ny1), (nx0, nx1)] = prepared.padding.native;
    let (_, ph, pw) = labels.dim();
    let inner = labels.slice(s![.., ry0..ph - ry1, rx0..pw - rx1]);
    let (sh, sw) = (h + ny0 + ny1, w + nx0 + nx1);
    let mut out = Array3::<u8>::zeros((z, h, w));
    for k in 0..z {
        let full = resize_nearest(inner.index_axis(Axis(0), k), sh, sw);
        out.index_axis_mut(Axis(0), k)
            .assign(&full.slice(s![ny0..ny0 + h, nx0..nx0 + w]));
    }
    out
}

/// Segments a raw volume and returns labels on its native grid together
/// with the padding that was applied.
pub fn segment_volume(
    model: &Model<f32>,
    volume: &VolumeSample,
    preprocess: &PreprocessConfig,
    policy: ShapePolicy,
) -> Result<(Array3<u8>, Padding)> {
    let prepared = prepare_for_inference(volume, preprocess, model.config().scales, policy)?;
    let probs = predict_probabilities(model, &prepared.image, prepared.stack_depth)?;
    Ok((restore_labels(&argmax_labels(&probs), &prepared), prepared.padding))
}

const NEIGHBORS_26: [(isize, isize, isize); 26] = {
    let mut out = [(0, 0, 0); 26];
    let mut i = 0;
    let mut d = 0;
    while d < 27 {
        let (a, b, c) = ((d / 9) as isize - 1, ((d / 3) % 3) as isize - 1, (d % 3) as isize - 1);
        if !(a == 0 && b == 0 && c == 0) {
            out[i] = (a, b, c);
            i += 1;
        }
        d += 1;
    }
    out
};

/// 26-connected components of `mask`, numbered from 1 in scan order of
/// their first voxel, with their sizes.
pub fn connected_components(mask: &Array3<bool>) -> (Array3<u32>, Vec<usize>) {
    let (zd, hd, wd) = mask.dim();
    let mut ids = Array3::<u32>::zeros(mask.raw_dim());
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for ((z, y, x), &m) in mask.indexed_iter() {
        if !m || ids[[z, y, x]] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[[z, y, x]] = id;
        queue.push_back((z, y, x));
        let mut size = 0;
        while let Some((cz, cy, cx)) = queue.pop_front() {
            size += 1;
            for (dz, dy, dx) in NEIGHBORS_26 {
                let (nz, ny, nx) = (cz as isize + dz, cy as isize + dy, cx as isize + dx);
                if nz < 0 || ny < 0 || nx < 0 || nz >= zd as isize || ny >= hd as isize || nx >= wd as isize {
                    continue;
                }
                let n = [nz as usize, ny as usize, nx as usize];
                if mask[n] && ids[n] == 0 {
                    ids[n] = id;
                    queue.push_back((n[0], n[1], n[2]));
                }
            }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Keeps the largest components of each budgeted class and relabels the
/// rest as background. Equal sizes favor the component met first in scan
/// order.
pub fn postprocess_components(labels: &Array3<u8>, rules: &PostprocessRules) -> Array3<u8> {
    let mut out = labels.clone();
    for (&class, &budget) in &rules.budgets {
        let mask = labels.mapv(|l| l == class);
        let (ids, sizes) = connected_components(&mask);
        if sizes.len() <= budget {
            continue;
        }
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
        let mut keep = vec![false; sizes.len() + 1];
        for &i in &order[..budget] {
            keep[i + 1] = true;
        }
        ndarray::Zip::from(&mut out).and(&ids).for_each(|l, &id| {
            if id != 0 && !keep[id as usize] {
                *l = 0;
            }
        });
    }
    out
}

fn check_same_shapes<D: ndarray::Dimension>(items: &[ndarray::Array<impl Clone, D>]) -> Result<()> {
    let first = items
        .first()
        .ok_or_else(|| Error::Contract("ensemble needs at least one prediction".into()))?;
    if let Some((i, p)) = items.iter().enumerate().find(|(_, p)| p.shape() != first.shape()) {
        return Err(Error::Contract(format!(
            "prediction {i} has shape {:?}, expected {:?}",
            p.shape(),
            first.shape()
        )));
    }
    Ok(())
}

/// Per-voxel majority vote; ties go to the lowest class index.
pub fn ensemble_vote(predictions: &[Array3<u8>]) -> Result<Array3<u8>> {
    check_same_shapes(predictions)?;
    let mut out = Array3::<u8>::zeros(predictions[0].raw_dim());
    let mut counts = [0u32; 256];
    for (idx, o) in out.indexed_iter_mut() {
        counts.fill(0);
        for p in predictions {
            counts[p[idx] as usize] += 1;
        }
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        *o = best as u8;
    }
    Ok(out)
}

/// Averages class probabilities `(C, Z, H, W)` across models.
pub fn ensemble_soft(probabilities: &[Array4<f32>]) -> Result<Array4<f32>> {
    check_same_shapes(probabilities)?;
    let mut sum = Array4::<f32>::zeros(probabilities[0].raw_dim());
    for p in probabilities {
        sum += p;
    }
    Ok(sum / probabilities.len() as f32)
}

/// How several checkpoints are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    #[default]
    Vote,
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: String,
    pub sha256: String,
}

/// Sidecar record written next to each predicted label volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub input: String,
    pub output: String,
    pub checkpoints: Vec<CheckpointRef>,
    pub ensemble: Option<EnsembleMode>,
    pub rules: PostprocessRules,
    pub policy: ShapePolicy,
    pub padding: Padding,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::nn::BlockKind;
    use rand::SeedableRng;

    fn cube(l: &mut Array3<u8>, at: (usize, usize, usize), side: (usize, usize, usize), v: u8) {
        l.slice_mut(s![at.0..at.0 + side.0, at.1..at.1 + side.1, at.2..at.2 + side.2])
            .fill(v);
    }

    fn count(l: &Array3<u8>, v: u8) -> usize {
        l.iter().filter(|&&x| x == v).count()
    }

    #[test]
    fn liver_keeps_only_largest_blob() {
        let mut l = Array3::<u8>::zeros((6, 12, 12));
        cube(&mut l, (0, 0, 0), (1, 2, 5), 1);
        cube(&mut l, (4, 8, 8), (1, 1, 3), 1);
        let out = postprocess_components(&l, &PostprocessRules::default());
        assert_eq!(count(&out, 1), 10);
        assert_eq!(out[[4, 8, 8]], 0);
    }

    #[test]
    fn kidney_keeps_two_largest() {
        let mut l = Array3::<u8>::zeros((8, 12, 12));
        cube(&mut l, (0, 0, 0), (1, 3, 3), 2);
        cube(&mut l, (3, 0, 0), (1, 1, 7), 2);
        cube(&mut l, (6, 6, 6), (1, 1, 2), 2);
        let out = postprocess_components(&l, &PostprocessRules::default());
        assert_eq!(count(&out, 2), 16);
        assert_eq!(out[[6, 6, 6]], 0);
    }

    #[test]
    fn diagonal_voxels_are_connected() {
        let mut l = Array3::<u8>::zeros((3, 3, 3));
        l[[0, 0, 0]] = 1;
        l[[1, 1, 1]] = 1;
        l[[2, 2, 2]] = 1;
        assert_eq!(connected_components(&l.mapv(|v| v == 1)).1, vec![3]);
    }

    #[test]
    fn equal_sizes_keep_first_in_scan_order() {
        let mut l = Array3::<u8>::zeros((5, 5, 5));
        cube(&mut l, (0, 0, 0), (1, 1, 2), 3);
        cube(&mut l, (4, 4, 3), (1, 1, 2), 3);
        let out = postprocess_components(&l, &PostprocessRules::default());
        assert_eq!(out[[0, 0, 0]], 3);
        assert_eq!(out[[4, 4, 3]], 0);
    }

    #[test]
    fn vote_examples() {
        let vol = |v: u8| Array3::from_elem((1, 1, 1), v);
        let votes: Vec<_> = [1, 1, 0, 0, 1].into_iter().map(vol).collect();
        assert_eq!(ensemble_vote(&votes).unwrap()[[0, 0, 0]], 1);
        assert_eq!(ensemble_vote(&[vol(1), vol(2)]).unwrap()[[0, 0, 0]], 1);
        assert_eq!(ensemble_vote(&[vol(2), vol(1)]).unwrap()[[0, 0, 0]], 1);
        let single = Array3::from_shape_fn((2, 3, 4), |(a, b, c)| ((a + b + c) % 4) as u8);
        assert_eq!(ensemble_vote(std::slice::from_ref(&single)).unwrap(), single);
        assert!(ensemble_vote(&[vol(1), Array3::zeros((2, 1, 1))]).is_err());
        assert!(ensemble_vote(&[]).is_err());
    }

    fn tiny_model() -> Model<f32> {
        let mut m = Model::new(NetworkConfig {
            scales: 2,
            channels: vec![4, 4, 4],
            block_type: BlockKind::Plain,
            class_count: 4,
            input_channels: 3,
        })
        .unwrap();
        m.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        m
    }

    fn volume(z: usize, h: usize, w: usize) -> VolumeSample {
        let desc = std::sync::Arc::new(
            crate::datamodel::DatasetDescriptor::new("v", [1u8], vec![], &ClassMap::default()).unwrap(),
        );
        VolumeSample {
            id: "v".into(),
            image: Array3::from_shape_fn((z, h, w), |(a, b, c)| ((a * 7 + b * 3 + c) % 50) as f32 * 4.0),
            spacing: [1.0; 3],
            labels: None,
            source: desc,
        }
    }

    #[test]
    fn zeroed_model_predicts_background() {
        let mut m = tiny_model();
        m.network.zero_heads();
        let pre = PreprocessConfig {
            resize_to: 8,
            crop_size: 8,
            scales: 2,
            ..Default::default()
        };
        let (labels, _) = segment_volume(&m, &volume(3, 10, 10), &pre, ShapePolicy::Pad).unwrap();
        assert_eq!(labels.dim(), (3, 10, 10));
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn padding_is_inverted_and_strict_refuses() {
        let m = tiny_model();
        let pre = PreprocessConfig {
            resize_to: 7,
            crop_size: 6,
            scales: 2,
            ..Default::default()
        };
        let v = volume(2, 9, 6);
        let (labels, pad) = segment_volume(&m, &v, &pre, ShapePolicy::Pad).unwrap();
        assert_eq!(labels.dim(), (2, 9, 6));
        assert_eq!(pad.native, [(0, 0), (1, 2)]);
        assert_eq!(pad.resized, [(0, 1), (0, 1)]);
        assert!(matches!(segment_volume(&m, &v, &pre, ShapePolicy::Strict), Err(Error::Config(_))));
    }

    #[test]
    fn identical_slices_get_identical_labels() {
        let m = tiny_model();
        let mut v = volume(3, 8, 8);
        let plane = v.image.index_axis(Axis(0), 0).to_owned();
        for k in 0..3 {
            v.image.index_axis_mut(Axis(0), k).assign(&plane);
        }
        let pre = PreprocessConfig {
            resize_to: 8,
            crop_size: 8,
            scales: 2,
            ..Default::default()
        };
        let (labels, _) = segment_volume(&m, &v, &pre, ShapePolicy::Strict).unwrap();
        assert_eq!(labels.index_axis(Axis(0), 0), labels.index_axis(Axis(0), 1));
        assert_eq!(labels.index_axis(Axis(0), 0), labels.index_axis(Axis(0), 2));
        let (again, _) = segment_volume(&m, &v, &pre, ShapePolicy::Strict).unwrap();
        assert_eq!(labels, again);
    }
}
