//! Shared domain types: the global class space, dataset descriptors, volume
//! samples, scale pyramids and segmentation outputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array, Array2, Array3, Array4, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: &str = "background";

/// Global class index space. Index 0 is always background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "class map needs background plus at least one organ, got {names:?}"
            )));
        }
        if names.len() > 256 {
            return Err(Error::Config(format!("class map has {} classes; at most 256 fit in u8 labels", names.len())));
        }
        if names[0] != BACKGROUND {
            return Err(Error::Config(format!(
                "class 0 must be `{BACKGROUND}`, got `{}`",
                names[0]
            )));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// Background, liver, kidney, spleen.
    pub fn abdominal() -> Self {
        Self::new([BACKGROUND, "liver", "kidney", "spleen"]).expect("valid default")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: u8) -> Option<&str> {
        self.names.get(index as usize).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn foreground(&self) -> impl Iterator<Item = u8> + '_ {
        (1..self.names.len()).map(|i| i as u8)
    }
}

impl Default for ClassMap {
    fn default() -> Self {
        Self::abdominal()
    }
}

impl TryFrom<Vec<String>> for ClassMap {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ClassMap> for Vec<String> {
    fn from(map: ClassMap) -> Self {
        map.names
    }
}

/// Image file, optional label file and a stable case identifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeRef {
    pub id: String,
    pub image: PathBuf,
    #[serde(default)]
    pub label: Option<PathBuf>,
}

/// A dataset's volumes and the subset `C_k` of global classes it annotates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetDescriptor {
    name: String,
    labeled_classes: BTreeSet<u8>,
    volume_refs: Vec<VolumeRef>,
    split_assignments: Option<Vec<usize>>,
    remap: LabelRemap,
}

impl DatasetDescriptor {
    pub fn new(
        name: impl Into<String>,
        labeled_classes: impl IntoIterator<Item = u8>,
        volume_refs: Vec<VolumeRef>,
        class_map: &ClassMap,
    ) -> Result<Self> {
        let name = name.into();
        let labeled_classes: BTreeSet<u8> = labeled_classes.into_iter().collect();
        if labeled_classes.is_empty() {
            return Err(Error::Config(format!("dataset `{name}` labels no classes")));
        }
        if let Some(bad) = labeled_classes
            .iter()
            .find(|&&c| c == 0 || c as usize >= class_map.len())
        {
            return Err(Error::Config(format!(
                "dataset `{name}` lists class {bad}, outside 1..{}",
                class_map.len() - 1
            )));
        }
        let remap = LabelRemap::identity(class_map);
        Ok(Self {
            name,
            labeled_classes,
            volume_refs,
            split_assignments: None,
            remap,
        })
    }

    pub fn with_remap(mut self, remap: LabelRemap) -> Self {
        self.remap = remap;
        self
    }

    pub fn with_split_assignments(mut self, folds: Vec<usize>) -> Result<Self> {
        if folds.len() != self.volume_refs.len() {
            return Err(Error::Config(format!(
                "dataset `{}`: {} fold indices for {} volumes",
                self.name,
                folds.len(),
                self.volume_refs.len()
            )));
        }
        self.split_assignments = Some(folds);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labeled_classes(&self) -> &BTreeSet<u8> {
        &self.labeled_classes
    }

    pub fn volume_refs(&self) -> &[VolumeRef] {
        &self.volume_refs
    }

    pub fn split_assignments(&self) -> Option<&[usize]> {
        self.split_assignments.as_deref()
    }

    pub fn remap(&self) -> &LabelRemap {
        &self.remap
    }

    /// `C_k ∪ {0}`.
    pub fn allows(&self, label: u8) -> bool {
        label == 0 || self.labeled_classes.contains(&label)
    }
}

/// What to do with a dataset class name that the remap table and the class
/// map both fail to resolve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmappedPolicy {
    #[default]
    Error,
    Background,
}

/// Lookup table from dataset-local label values to global class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRemap {
    table: Vec<u8>,
}

impl LabelRemap {
    pub fn identity(class_map: &ClassMap) -> Self {
        Self {
            table: (0..class_map.len()).map(|i| i as u8).collect(),
        }
    }

    /// Resolves each local class name (position = local label value) through
    /// `aliases` first, then by name in `class_map`. Several local names may
    /// map to one global class.
    pub fn resolve(
        local_names: &[String],
        aliases: &BTreeMap<String, String>,
        class_map: &ClassMap,
        unmapped: UnmappedPolicy,
    ) -> Result<Self> {
        if local_names.is_empty() {
            return Err(Error::Config("dataset declares no local classes".into()));
        }
        let mut table = Vec::with_capacity(local_names.len());
        for (value, local) in local_names.iter().enumerate() {
            let target = aliases.get(local).map(String::as_str).unwrap_or(local);
            let global = match (class_map.index_of(target), unmapped) {
                (Some(g), _) => g,
                (None, UnmappedPolicy::Background) => 0,
                (None, UnmappedPolicy::Error) => {
                    return Err(Error::Config(format!(
                        "class `{local}` (local value {value}) does not resolve in the class map {:?}",
                        class_map.names()
                    )))
                }
            };
            if value == 0 && global != 0 {
                return Err(Error::Config(format!(
                    "local value 0 (`{local}`) must map to background"
                )));
            }
            table.push(global);
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &[u8] {
        &self.table
    }

    /// Global classes reachable from a nonzero local value.
    pub fn foreground_targets(&self) -> BTreeSet<u8> {
        self.table.iter().skip(1).copied().filter(|&g| g != 0).collect()
    }
}

/// Maps local label values to the global class space.
pub fn remap_labels<D: Dimension>(labels: &Array<u8, D>, remap: &LabelRemap) -> Result<Array<u8, D>> {
    let table = remap.table();
    if let Some(&bad) = labels.iter().find(|&&v| v as usize >= table.len()) {
        return Err(Error::Contract(format!(
            "label value {bad} has no entry in the {}-class remap table",
            table.len()
        )));
    }
    Ok(labels.mapv(|v| table[v as usize]))
}

/// One CT volume indexed `(z, y, x)`, with spacing in millimetres per axis in
/// the same order.
#[derive(Clone, Debug)]
pub struct VolumeSample {
    pub id: String,
    pub image: Array3<f32>,
    pub spacing: [f64; 3],
    pub labels: Option<Array3<u8>>,
    pub source: Arc<DatasetDescriptor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    ShapeMismatch { image: Vec<usize>, labels: Vec<usize> },
    LabelOutsideSet { value: u8, voxels: usize },
    NonPositiveSpacing { axis: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ShapeMismatch { image, labels } => {
                write!(f, "shape mismatch: image {image:?} vs labels {labels:?}")
            }
            Violation::LabelOutsideSet { value, voxels } => {
                write!(f, "label outside C_k: value {value} on {voxels} voxels")
            }
            Violation::NonPositiveSpacing { axis, value } => {
                write!(f, "non-positive spacing {value} on axis {axis}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

pub fn validate_sample(sample: &VolumeSample, descriptor: &DatasetDescriptor) -> ValidationReport {
    let mut violations = Vec::new();
    for (axis, &value) in sample.spacing.iter().enumerate() {
        if !(value > 0.0) {
            violations.push(Violation::NonPositiveSpacing { axis, value });
        }
    }
    if let Some(labels) = &sample.labels {
        if labels.shape() != sample.image.shape() {
            violations.push(Violation::ShapeMismatch {
                image: sample.image.shape().to_vec(),
                labels: labels.shape().to_vec(),
            });
        }
        let mut counts = [0usize; 256];
        labels.iter().for_each(|&v| counts[v as usize] += 1);
        for (value, &voxels) in counts.iter().enumerate() {
            if voxels > 0 && !descriptor.allows(value as u8) {
                violations.push(Violation::LabelOutsideSet {
                    value: value as u8,
                    voxels,
                });
            }
        }
    }
    ValidationReport { violations }
}

/// Anything with a trailing `(H, W)` spatial extent.
pub trait Spatial {
    fn spatial(&self) -> (usize, usize);
}

impl<T> Spatial for Array2<T> {
    fn spatial(&self) -> (usize, usize) {
        self.dim()
    }
}

impl<T> Spatial for Array3<T> {
    fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.dim();
        (h, w)
    }
}

impl<T> Spatial for Array4<T> {
    fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.dim();
        (h, w)
    }
}

/// `S` levels, each exactly half the spatial size of the previous one.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid<A> {
    levels: Vec<A>,
}

impl<A: Spatial> ScalePyramid<A> {
    pub fn new(levels: Vec<A>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::EmptyPyramid);
        }
        for s in 1..levels.len() {
            let (h, w) = levels[s - 1].spatial();
            let (hn, wn) = levels[s].spatial();
            if h % 2 != 0 || w % 2 != 0 || (hn, wn) != (h / 2, w / 2) {
                return Err(Error::Contract(format!(
                    "pyramid level {} is {hn}x{wn}, expected half of {h}x{w}",
                    s + 1
                )));
            }
        }
        Ok(Self { levels })
    }
}

impl<A> ScalePyramid<A> {
    pub fn scales(&self) -> usize {
        self.levels.len()
    }

    /// Level `s` counted from zero (full resolution).
    pub fn level(&self, s: usize) -> &A {
        &self.levels[s]
    }

    pub fn levels(&self) -> &[A] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<A> {
        self.levels
    }
}

/// Checks that `(h, w)` survives `scales - 1` halvings.
pub fn check_divisible(h: usize, w: usize, scales: usize) -> Result<()> {
    let f = 1usize << scales.saturating_sub(1);
    if scales == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "spatial size {h}x{w} is not divisible by 2^(S-1) = {f} for S = {scales}"
        )));
    }
    Ok(())
}

/// Per-scale logits, fusion weights and fused probabilities for a batch.
///
/// `fusion_weights` is `(N, S)`: one simplex vector per sample.
#[derive(Clone, Debug)]
pub struct SegmentationOutput<F> {
    pub score_pyramid: ScalePyramid<Array4<F>>,
    pub fusion_weights: Array2<F>,
    pub fused_probs: Array4<F>,
}

/// Dataset manifest as written on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// Local class names in label-value order; entry 0 is background.
    pub classes: Vec<String>,
    /// Global class names annotated by this dataset. Defaults to every class
    /// reachable through the remap.
    #[serde(default)]
    pub labeled: Option<Vec<String>>,
    /// Local name to global name, for many-to-one merges.
    #[serde(default)]
    pub remap: BTreeMap<String, String>,
    #[serde(default)]
    pub unmapped: UnmappedPolicy,
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    pub volumes: Vec<VolumeRef>,
}

impl DatasetManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            for v in &mut manifest.volumes {
                v.image = dir.join(&v.image);
                v.label = v.label.as_ref().map(|l| dir.join(l));
            }
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn descriptor(&self, class_map: &ClassMap) -> Result<DatasetDescriptor> {
        let remap = LabelRemap::resolve(&self.classes, &self.remap, class_map, self.unmapped)?;
        let labeled: BTreeSet<u8> = match &self.labeled {
            Some(names) => names
                .iter()
                .map(|n| {
                    class_map.index_of(n).ok_or_else(|| {
                        Error::Config(format!("dataset `{}`: unknown labeled class `{n}`", self.name))
                    })
                })
                .collect::<Result<_>>()?,
            None => remap.foreground_targets(),
        };
        let mut ids = HashMap::new();
        for v in &self.volumes {
            if ids.insert(v.id.as_str(), ()).is_some() {
                return Err(Error::Config(format!(
                    "dataset `{}`: duplicate volume id `{}`",
                    self.name, v.id
                )));
            }
        }
        let desc = DatasetDescriptor::new(&self.name, labeled, self.volumes.clone(), class_map)?
            .with_remap(remap);
        match &self.folds {
            Some(f) => desc.with_split_assignments(f.clone()),
            None => Ok(desc),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn desc(labeled: &[u8]) -> Arc<DatasetDescriptor> {
        Arc::new(DatasetDescriptor::new("d", labeled.iter().copied(), vec![], &ClassMap::abdominal()).unwrap())
    }

    fn sample(image: (usize, usize, usize), labels: Array3<u8>, d: &Arc<DatasetDescriptor>) -> VolumeSample {
        VolumeSample {
            id: "v".into(),
            image: Array3::zeros(image),
            spacing: [1.0, 1.0, 1.0],
            labels: Some(labels),
            source: d.clone(),
        }
    }

    #[test]
    fn class_map_rejects_bad_layouts() {
        assert!(ClassMap::new(["background"]).is_err());
        assert!(ClassMap::new(["liver", "background"]).is_err());
        assert!(ClassMap::new(["background", "liver", "liver"]).is_err());
        assert_eq!(ClassMap::abdominal().index_of("spleen"), Some(3));
    }

    #[test]
    fn valid_sample_has_empty_report() {
        let d = desc(&[1]);
        let mut labels = Array3::zeros((2, 4, 4));
        labels[[1, 2, 2]] = 1;
        assert!(validate_sample(&sample((2, 4, 4), labels, &d), &d).is_valid());
    }

    #[test]
    fn out_of_set_label_is_reported() {
        let d = desc(&[1]);
        let mut labels = Array3::zeros((2, 4, 4));
        labels[[0, 0, 0]] = 2;
        let report = validate_sample(&sample((2, 4, 4), labels, &d), &d);
        assert_eq!(report.violations, vec![Violation::LabelOutsideSet { value: 2, voxels: 1 }]);
        assert!(report.to_string().contains("label outside C_k"));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let d = desc(&[1]);
        let report = validate_sample(&sample((12, 8, 8), Array3::zeros((10, 8, 8)), &d), &d);
        assert!(report.to_string().contains("shape mismatch"));
    }

    #[test]
    fn nonpositive_spacing_is_reported() {
        let d = desc(&[1]);
        let mut s = sample((1, 2, 2), Array3::zeros((1, 2, 2)), &d);
        s.spacing = [1.0, 0.0, -2.0];
        assert_eq!(validate_sample(&s, &d).violations.len(), 2);
    }

    #[test]
    fn left_and_right_kidney_merge() {
        let cm = ClassMap::abdominal();
        let local: Vec<String> = ["background", "left_kidney", "right_kidney"].map(String::from).to_vec();
        let aliases = BTreeMap::from([
            ("left_kidney".to_string(), "kidney".to_string()),
            ("right_kidney".to_string(), "kidney".to_string()),
        ]);
        let remap = LabelRemap::resolve(&local, &aliases, &cm, UnmappedPolicy::Error).unwrap();
        let out = remap_labels(&array![[0u8, 1, 2]], &remap).unwrap();
        assert_eq!(out, array![[0u8, 2, 2]]);
    }

    #[test]
    fn unresolvable_name_is_config_error() {
        let cm = ClassMap::abdominal();
        let local: Vec<String> = ["background", "pancreas"].map(String::from).to_vec();
        let err = LabelRemap::resolve(&local, &BTreeMap::new(), &cm, UnmappedPolicy::Error).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let dropped = LabelRemap::resolve(&local, &BTreeMap::new(), &cm, UnmappedPolicy::Background).unwrap();
        assert_eq!(dropped.table(), &[0, 0]);
    }

    #[test]
    fn identity_remap_and_all_zero() {
        let cm = ClassMap::abdominal();
        let id = LabelRemap::resolve(cm.names(), &BTreeMap::new(), &cm, UnmappedPolicy::Error).unwrap();
        let labels = array![[0u8, 1], [2, 3]];
        assert_eq!(remap_labels(&labels, &id).unwrap(), labels);
        let zeros = Array2::<u8>::zeros((3, 3));
        assert_eq!(remap_labels(&zeros, &id).unwrap(), zeros);
    }

    #[test]
    fn pyramid_requires_halving() {
        let ok = ScalePyramid::new(vec![Array2::<u8>::zeros((8, 8)), Array2::zeros((4, 4))]);
        assert!(ok.is_ok());
        let bad = ScalePyramid::new(vec![Array2::<u8>::zeros((8, 8)), Array2::zeros((3, 4))]);
        assert!(bad.is_err());
        assert!(matches!(ScalePyramid::<Array2<u8>>::new(vec![]), Err(Error::EmptyPyramid)));
    }

    #[test]
    fn manifest_round_trips_and_builds_descriptor() {
        let text = r#"
name = "btcv"
classes = ["background", "liver", "left_kidney", "right_kidney", "spleen", "aorta"]
unmapped = "background"

[remap]
left_kidney = "kidney"
right_kidney = "kidney"

[[volumes]]
id = "case01"
image = "img/case01.nii.gz"
label = "lab/case01.nii.gz"
"#;
        let m = DatasetManifest::from_toml(text).unwrap();
        assert_eq!(DatasetManifest::from_toml(&m.to_toml()).unwrap(), m);
        let d = m.descriptor(&ClassMap::abdominal()).unwrap();
        assert_eq!(d.labeled_classes(), &BTreeSet::from([1, 2, 3]));
        assert_eq!(d.remap().table(), &[0, 1, 2, 2, 3, 0]);
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let text = "name = \"x\"\nclasses = [\"background\", \"liver\"]\nvolumes = []\nlr = 1\n";
        assert!(DatasetManifest::from_toml(text).is_err());
    }
}
