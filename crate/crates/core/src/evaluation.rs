//! Overlap and surface metrics, fold plans and metric reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array, Array3, ArrayView1, ArrayViewMut1, Axis, Dimension, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::ClassMap;
use crate::error::{Error, Result};
use crate::trainer::SeedStreams;

/// Voxel counts behind one Dice score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

impl DiceCounts {
    pub fn of<D: Dimension>(pred: &Array<u8, D>, truth: &Array<u8, D>, class: u8) -> Result<Self> {
        if pred.shape() != truth.shape() {
            return Err(Error::Contract(format!(
                "prediction shape {:?} differs from truth shape {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        let mut c = Self::default();
        Zip::from(pred).and(truth).for_each(|&p, &t| {
            let (p, t) = (p == class, t == class);
            c.intersection += (p && t) as u64;
            c.pred += p as u64;
            c.truth += t as u64;
        });
        Ok(c)
    }

    /// `2|P n T| / (|P| + |T|)`, and 1 when both are empty.
    pub fn dice(&self) -> f64 {
        let denom = self.pred + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

impl std::ops::Add for DiceCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            intersection: self.intersection + o.intersection,
            pred: self.pred + o.pred,
            truth: self.truth + o.truth,
        }
    }
}

pub fn dice_per_case<D: Dimension>(pred: &Array<u8, D>, truth: &Array<u8, D>, class: u8) -> Result<f64> {
    Ok(DiceCounts::of(pred, truth, class)?.dice())
}

/// Dice of voxel counts pooled over all cases.
pub fn dice_global<D: Dimension>(preds: &[Array<u8, D>], truths: &[Array<u8, D>], class: u8) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Contract(format!(
            "global Dice needs equally many predictions and truths, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    let mut total = DiceCounts::default();
    for (p, t) in preds.iter().zip(truths) {
        total = total + DiceCounts::of(p, t, class)?;
    }
    Ok(total.dice())
}

/// Foreground voxels with at least one background 6-neighbor. Voxels on the
/// volume boundary count as bordering background.
pub fn surface(mask: &Array3<bool>) -> Array3<bool> {
    let (zd, hd, wd) = mask.dim();
    Array3::from_shape_fn(mask.raw_dim(), |(z, y, x)| {
        if !mask[[z, y, x]] {
            return false;
        }
        let at = |dz: isize, dy: isize, dx: isize| {
            let (a, b, c) = (z as isize + dz, y as isize + dy, x as isize + dx);
            a >= 0
                && b >= 0
                && c >= 0
                && (a as usize) < zd
                && (b as usize) < hd
                && (c as usize) < wd
                && mask[[a as usize, b as usize, c as usize]]
        };
        !(at(-1, 0, 0) && at(1, 0, 0) && at(0, -1, 0) && at(0, 1, 0) && at(0, 0, -1) && at(0, 0, 1))
    })
}

/// Lower envelope of parabolas along one line, with sample spacing `step`.
fn edt_line(f: ArrayView1<f64>, mut out: ArrayViewMut1<f64>, step: f64) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !started {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        out[q] = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance in millimeters from every voxel to the
/// nearest `true` voxel of `seeds`.
pub fn squared_distance_transform(seeds: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = seeds.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    for (axis, &step) in spacing.iter().enumerate() {
        let input = d.clone();
        for (src, dst) in input.lanes(Axis(axis)).into_iter().zip(d.lanes_mut(Axis(axis))) {
            edt_line(src, dst, step);
        }
    }
    d
}

/// Average and maximum symmetric surface distance in millimeters. The
/// average pools the distances of both surfaces.
pub fn surface_distances(pred: &Array3<bool>, truth: &Array3<bool>, spacing: [f64; 3]) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() {
        return Err(Error::Contract(format!(
            "prediction shape {:?} differs from truth shape {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if !pred.iter().any(|&v| v) || !truth.iter().any(|&v| v) {
        return Err(Error::MetricUndefined("surface distance of an empty mask".into()));
    }
    let (sp, st) = (surface(pred), surface(truth));
    let (dp, dt) = (squared_distance_transform(&sp, spacing), squared_distance_transform(&st, spacing));
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut max: f64 = 0.0;
    for (surf, other) in [(&sp, &dt), (&st, &dp)] {
        Zip::from(surf).and(other).for_each(|&s, &d2| {
            if s {
                let d = d2.sqrt();
                sum += d;
                count += 1;
                max = max.max(d);
            }
        });
    }
    Ok((sum / count as f64, max))
}

/// Assignment of volume ids to cross-validation folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold(&self, index: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == index)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k).map(|i| self.fold(i).len()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold plan serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Shuffles the ids with the seed's fold stream and deals them out in turn,
/// so fold sizes differ by at most one.
pub fn make_folds<S: AsRef<str>>(ids: &[S], k: usize, seed: u64) -> Result<FoldPlan> {
    let unique: BTreeSet<&str> = ids.iter().map(AsRef::as_ref).collect();
    if unique.len() != ids.len() {
        return Err(Error::Config("volume ids must be unique".into()));
    }
    if k == 0 || k > ids.len() {
        return Err(Error::Config(format!("cannot split {} volumes into {k} folds", ids.len())));
    }
    let mut order: Vec<&str> = unique.into_iter().collect();
    order.shuffle(&mut SeedStreams::stream(seed, SeedStreams::FOLDS));
    let assignments = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldPlan { k, seed, assignments })
}

/// One row of a metrics report. Missing distances are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub organ: String,
    pub case: String,
    pub dice: f64,
    pub assd: Option<f64>,
    pub mssd: Option<f64>,
}

/// A case to score: id, predicted labels, true labels, spacing `(z, y, x)`.
pub struct Case<'a> {
    pub id: &'a str,
    pub pred: &'a Array3<u8>,
    pub truth: &'a Array3<u8>,
    pub spacing: [f64; 3],
}

/// Per-case rows for every foreground organ, then per organ the per-case
/// mean (`mean`) and pooled (`global`) rows, then `all` macro averages.
pub fn evaluate(cases: &[Case<'_>], classes: &ClassMap) -> Result<Vec<MetricRow>> {
    if cases.is_empty() {
        return Err(Error::Contract("no cases to evaluate".into()));
    }
    let mut rows = Vec::new();
    let mut macro_dice = Vec::new();
    let mut macro_global = Vec::new();
    for c in classes.foreground() {
        let organ = classes.name(c).unwrap_or_default().to_string();
        let mut total = DiceCounts::default();
        let mut dices = Vec::new();
        let (mut assds, mut mssds) = (Vec::new(), Vec::new());
        for case in cases {
            let counts = DiceCounts::of(case.pred, case.truth, c)?;
            total = total + counts;
            let distances = surface_distances(&case.pred.mapv(|v| v == c), &case.truth.mapv(|v| v == c), case.spacing);
            let (assd, mssd) = match distances {
                Ok((a, m)) => (Some(a), Some(m)),
                Err(Error::MetricUndefined(_)) => (None, None),
                Err(e) => return Err(e),
            };
            assds.extend(assd);
            mssds.extend(mssd);
            dices.push(counts.dice());
            rows.push(MetricRow {
                organ: organ.clone(),
                case: case.id.to_string(),
                dice: counts.dice(),
                assd,
                mssd,
            });
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let mean_dice = mean(&dices).expect("at least one case");
        macro_dice.push(mean_dice);
        macro_global.push(total.dice());
        rows.push(MetricRow {
            organ: organ.clone(),
            case: "mean".into(),
            dice: mean_dice,
            assd: mean(&assds),
            mssd: mean(&mssds),
        });
        rows.push(MetricRow {
            organ,
            case: "global".into(),
            dice: total.dice(),
            assd: None,
            mssd: None,
        });
    }
    let n = macro_dice.len() as f64;
    rows.push(MetricRow {
        organ: "all".into(),
        case: "mean".into(),
        dice: macro_dice.iter().sum::<f64>() / n,
        assd: None,
        mssd: None,
    });
    rows.push(MetricRow {
        organ: "all".into(),
        case: "global".into(),
        dice: macro_global.iter().sum::<f64>() / n,
        assd: None,
        mssd: None,
    });
    Ok(rows)
}

pub fn write_report(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dice_examples() {
        let a = array![[1u8, 1, 0, 0]];
        assert_eq!(dice_per_case(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice_per_case(&a, &array![[0u8, 0, 1, 1]], 1).unwrap(), 0.0);
        assert_eq!(dice_per_case(&a, &array![[0u8, 1, 1, 0]], 1).unwrap(), 0.5);
        assert_eq!(dice_per_case(&array![[0u8]], &array![[0u8]], 1).unwrap(), 1.0);
        assert!(dice_per_case(&a, &array![[1u8]], 1).is_err());
    }

    #[test]
    fn global_dice_pools_counts() {
        let big = Array3::<u8>::from_elem((1, 10, 10), 1);
        let one = Array3::<u8>::from_elem((1, 1, 1), 1);
        let none = Array3::<u8>::zeros((1, 1, 1));
        let g = dice_global(&[big.clone(), none.clone()], &[big.clone(), one.clone()], 1).unwrap();
        assert!((g - 200.0 / 201.0).abs() < 1e-15);
        assert_eq!(dice_global(&[big.clone()], &[big.clone()], 1).unwrap(), 1.0);
        assert_eq!(dice_global(&[none.clone()], &[none], 1).unwrap(), 1.0);
        assert!(dice_global::<ndarray::Ix3>(&[], &[], 1).is_err());
    }

    #[test]
    fn surface_distance_examples() {
        let mut a = Array3::from_elem((1, 1, 7), false);
        let mut b = a.clone();
        a[[0, 0, 1]] = true;
        b[[0, 0, 4]] = true;
        assert_eq!(surface_distances(&a, &b, [1.0; 3]).unwrap(), (3.0, 3.0));
        assert_eq!(surface_distances(&a, &a, [1.0; 3]).unwrap(), (0.0, 0.0));
        assert_eq!(surface_distances(&a, &b, [2.0; 3]).unwrap(), (6.0, 6.0));
        let empty = Array3::from_elem((1, 1, 7), false);
        assert!(matches!(surface_distances(&a, &empty, [1.0; 3]), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn fold_examples() {
        let ids: Vec<String> = (0..131).map(|i| format!("v{i:03}")).collect();
        let plan = make_folds(&ids, 5, 7).unwrap();
        assert_eq!(plan.sizes(), vec![27, 26, 26, 26, 26]);
        assert_eq!(plan, make_folds(&ids, 5, 7).unwrap());
        assert_ne!(plan.assignments, make_folds(&ids, 5, 8).unwrap().assignments);
        assert_eq!(make_folds(&ids, 1, 0).unwrap().sizes(), vec![131]);
        assert!(matches!(make_folds(&ids[..3], 4, 0), Err(Error::Config(_))));
        let back: FoldPlan = serde_json::from_str(&plan.to_json()).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn report_marks_missing_distances() {
        let truth = Array3::<u8>::from_shape_fn((2, 4, 4), |(_, y, _)| if y < 2 { 1 } else { 0 });
        let pred = Array3::<u8>::zeros((2, 4, 4));
        let cases = [Case {
            id: "c0",
            pred: &pred,
            truth: &truth,
            spacing: [1.0; 3],
        }];
        let rows = evaluate(&cases, &ClassMap::default()).unwrap();
        let liver = &rows[0];
        assert_eq!((liver.organ.as_str(), liver.dice, liver.assd), ("liver", 0.0, None));
        let kidney = rows.iter().find(|r| r.organ == "kidney" && r.case == "c0").unwrap();
        assert_eq!(kidney.dice, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_report(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("organ,case,dice,assd,mssd\nliver,c0,0.0,,\n"));
    }
}
