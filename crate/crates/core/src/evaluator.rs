//! Instance matching at an IoU threshold and the resulting AP scores.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, InstanceMask};
use crate::error::{Error, Result};
use crate::net::{predict, Params};
use crate::segmenter::{segment, HeadConfig};

pub const IOU_THRESHOLD: f64 = 0.5;

/// `N_gt x N_pred` IoU matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct IouMatrix {
    pub n_gt: usize,
    pub n_pred: usize,
    pub iou: Vec<f64>,
}

impl IouMatrix {
    pub fn at(&self, g: usize, p: usize) -> f64 {
        self.iou[g * self.n_pred + p]
    }
}

pub fn iou_matrix(gt: &InstanceMask, pred: &InstanceMask) -> Result<IouMatrix> {
    if gt.shape() != pred.shape() {
        return Err(Error::Contract(format!(
            "ground truth {:?} and prediction {:?} differ in shape",
            gt.shape(),
            pred.shape()
        )));
    }
    let (ng, np) = (gt.n_instances() as usize, pred.n_instances() as usize);
    let mut inter = vec![0u64; ng * np];
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        if g > 0 && p > 0 {
            inter[(g as usize - 1) * np + p as usize - 1] += 1;
        }
    }
    let (ag, ap) = (gt.areas(), pred.areas());
    let iou = inter
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let union = (ag[k / np.max(1)] + ap[k % np.max(1)]) as u64 - i;
            i as f64 / union as f64
        })
        .collect();
    Ok(IouMatrix {
        n_gt: ng,
        n_pred: np,
        iou,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// `TP / (TP + FP + FN)`, 1 when there is nothing to find and nothing found.
    pub fn ap(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Greedy one-to-one matching over IoU entries in descending order, ties
/// by `(gt, pred)` ascending.
pub fn greedy_matches(m: &IouMatrix, thr: f64) -> Vec<(usize, usize)> {
    let mut entries: Vec<(usize, usize, f64)> = (0..m.n_gt)
        .flat_map(|g| (0..m.n_pred).map(move |p| (g, p)))
        .map(|(g, p)| (g, p, m.at(g, p)))
        .filter(|&(_, _, v)| v >= thr && v > 0.0)
        .collect();
    entries.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut used_g = vec![false; m.n_gt];
    let mut used_p = vec![false; m.n_pred];
    let mut out = Vec::new();
    for (g, p, _) in entries {
        if !used_g[g] && !used_p[p] {
            used_g[g] = true;
            used_p[p] = true;
            out.push((g, p));
        }
    }
    out
}

pub fn match_and_score(gt: &InstanceMask, pred: &InstanceMask, thr: f64) -> Result<Counts> {
    let m = iou_matrix(gt, pred)?;
    let tp = greedy_matches(&m, thr).len();
    Ok(Counts {
        tp,
        fp: m.n_pred - tp,
        fn_: m.n_gt - tp,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    #[serde(flatten)]
    pub counts: Counts,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub mean_ap: f64,
    pub pooled_ap: f64,
}

impl EvalReport {
    /// Scores predicted masks against ground truth, pairwise.
    pub fn from_masks(gt: &[&InstanceMask], pred: &[InstanceMask]) -> Result<Self> {
        if gt.is_empty() {
            return Err(Error::Contract("cannot evaluate an empty dataset".into()));
        }
        if gt.len() != pred.len() {
            return Err(Error::Contract(format!("{} ground truths vs {} predictions", gt.len(), pred.len())));
        }
        let mut pooled = Counts::default();
        let mut per_image = Vec::with_capacity(gt.len());
        for (i, (g, p)) in gt.iter().zip(pred).enumerate() {
            let c = match_and_score(g, p, IOU_THRESHOLD)?;
            pooled.add(c);
            per_image.push(ImageScore {
                image_id: i,
                n_gt: g.n_instances() as usize,
                n_pred: p.n_instances() as usize,
                counts: c,
                ap: c.ap(),
            });
        }
        let mean_ap = per_image.iter().map(|s| s.ap).sum::<f64>() / per_image.len() as f64;
        Ok(EvalReport {
            per_image,
            mean_ap,
            pooled_ap: pooled.ap(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,n_gt,n_pred,tp,fp,fn,ap\n");
        for s in &self.per_image {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6}",
                s.image_id, s.n_gt, s.n_pred, s.counts.tp, s.counts.fp, s.counts.fn_, s.ap
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Predicted masks for every image of `ds`.
pub fn predict_masks(params: &Params<f32>, ds: &Dataset, head: &HeadConfig) -> Result<Vec<InstanceMask>> {
    use rayon::prelude::*;
    ds.items
        .par_iter()
        .map(|s| segment(&predict(params, &s.image)?, head))
        .collect()
}

pub fn evaluate_dataset(params: &Params<f32>, ds: &Dataset, head: &HeadConfig) -> Result<EvalReport> {
    if ds.items.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let pred = predict_masks(params, ds, head)?;
    let gt: Vec<&InstanceMask> = ds.items.iter().map(|s| &s.mask).collect();
    EvalReport::from_masks(&gt, &pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, rects: &[(usize, usize, usize, usize)]) -> InstanceMask {
        let mut raw = vec![0u32; h * w];
        for (k, &(y0, x0, rh, rw)) in rects.iter().enumerate() {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    raw[y * w + x] = k as u32 + 1;
                }
            }
        }
        InstanceMask::from_raw(h, w, raw).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = mask(16, 16, &[(2, 2, 8, 8)]);
        assert_eq!(iou_matrix(&a, &a).unwrap().iou, vec![1.0]);
        let b = mask(16, 16, &[(2, 6, 8, 8)]);
        assert!((iou_matrix(&a, &b).unwrap().at(0, 0) - 1.0 / 3.0).abs() < 1e-12);
        let c = mask(16, 16, &[(12, 12, 3, 3)]);
        assert_eq!(iou_matrix(&a, &c).unwrap().iou, vec![0.0]);
        assert!(matches!(iou_matrix(&a, &mask(8, 8, &[])), Err(Error::Contract(_))));
    }

    #[test]
    fn score_examples() {
        let gt = mask(20, 20, &[(1, 1, 5, 5), (10, 10, 6, 6)]);
        let c = match_and_score(&gt, &gt, 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.ap()), (2, 0, 0, 1.0));
        let empty = InstanceMask::empty(20, 20);
        assert_eq!(match_and_score(&gt, &empty, 0.5).unwrap().ap(), 0.0);
        assert_eq!(match_and_score(&empty, &gt, 0.5).unwrap().ap(), 0.0);
        assert_eq!(match_and_score(&empty, &empty, 0.5).unwrap().ap(), 1.0);
    }

    #[test]
    fn one_good_match_among_two_gives_a_third() {
        let m = IouMatrix {
            n_gt: 2,
            n_pred: 2,
            iou: vec![0.6, 0.3, 0.3, 0.3],
        };
        let tp = greedy_matches(&m, 0.5).len();
        let c = Counts { tp, fp: 2 - tp, fn_: 2 - tp };
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 1));
        assert!((c.ap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn relabeling_does_not_change_scores() {
        let gt = mask(20, 20, &[(1, 1, 5, 5), (10, 10, 6, 6), (1, 12, 4, 6)]);
        let pred = mask(20, 20, &[(10, 11, 6, 6), (2, 1, 5, 5)]);
        let swapped = mask(20, 20, &[(2, 1, 5, 5), (10, 11, 6, 6)]);
        let a = match_and_score(&gt, &pred, 0.5).unwrap();
        assert_eq!(a, match_and_score(&gt, &swapped, 0.5).unwrap());
        assert_eq!((a.tp, a.fp, a.fn_), (2, 0, 1));
    }

    #[test]
    fn report_aggregates_and_writes_csv() {
        let gt = mask(20, 20, &[(1, 1, 5, 5), (10, 10, 6, 6)]);
        let empty = InstanceMask::empty(20, 20);
        let r = EvalReport::from_masks(&[&gt, &gt], &[gt.clone(), empty]).unwrap();
        assert_eq!(r.mean_ap, 0.5);
        assert_eq!(r.pooled_ap, 0.5);
        let csv = r.to_csv();
        assert_eq!(csv.lines().next(), Some("image_id,n_gt,n_pred,tp,fp,fn,ap"));
        assert_eq!(csv.lines().nth(2), Some("1,2,0,0,0,2,0.000000"));
        assert!(EvalReport::from_masks(&[], &[]).is_err());
    }
}
