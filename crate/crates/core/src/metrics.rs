//! Segmentation evaluation: per-region overlap metrics, boundary F1 and
//! dataset aggregates. Lesion and background are scored as separate regions;
//! background simply swaps the roles of positives and negatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities at or above this are lesion.
pub const THRESHOLD: f32 = 0.5;
/// Boundary match tolerance as a fraction of the image diagonal.
pub const BF_TOLERANCE_FRACTION: f64 = 0.0075;

pub fn binarize(probs: &Tensor<f32>) -> Tensor<f32> {
    probs.map(|p| if p >= THRESHOLD { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with the background as the positive class.
    pub fn inverted(&self) -> Self {
        ConfusionCounts { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }
    }

    pub fn merge(&self, o: &Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

fn check_binary(name: &str, v: &[f32]) -> Result<()> {
    match v.iter().find(|&&x| x != 0.0 && x != 1.0) {
        None => Ok(()),
        Some(x) => Err(Error::Validation(format!("{name} mask contains non-binary value {x}"))),
    }
}

/// Pixel tallies of a binary prediction against a binary target.
pub fn confusion(pred: &[f32], target: &[f32]) -> Result<ConfusionCounts> {
    if pred.len() != target.len() {
        return Err(Error::dim("confusion", format!("{} vs {} pixels", pred.len(), target.len())));
    }
    check_binary("predicted", pred)?;
    check_binary("target", target)?;
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.iter().zip(target) {
        match (p == 1.0, y == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dsc: f64,
    pub accuracy: f64,
    pub iou: f64,
    pub recall: f64,
}

/// DSC, accuracy, IoU and recall. A region absent from both prediction and
/// target scores 1 for DSC, IoU and recall.
pub fn region_metrics(cc: &ConfusionCounts) -> Result<RegionMetrics> {
    let total = cc.total();
    if total == 0 {
        return Err(Error::Validation("region metrics need at least one pixel".into()));
    }
    let ratio = |num: u64, den: u64, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
    let dsc = ratio(2 * cc.tp, 2 * cc.tp + cc.fp + cc.fn_, 1.0);
    let iou = ratio(cc.tp, cc.tp + cc.fp + cc.fn_, 1.0);
    let accuracy = ratio(cc.tp + cc.tn, total, 1.0);
    let recall = ratio(cc.tp, cc.tp + cc.fn_, if cc.fp == 0 { 1.0 } else { 0.0 });
    Ok(RegionMetrics { dsc, accuracy, iou, recall })
}

/// Foreground pixels with a 4-neighbour inside the image that is background.
pub fn boundary(mask: &[f32], h: usize, w: usize) -> Vec<bool> {
    let at = |y: usize, x: usize| mask[y * w + x] == 1.0;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            out[y * w + x] = (y > 0 && !at(y - 1, x))
                || (y + 1 < h && !at(y + 1, x))
                || (x > 0 && !at(y, x - 1))
                || (x + 1 < w && !at(y, x + 1));
        }
    }
    out
}

/// Match tolerance in pixels for an `h x w` image.
pub fn bf_tolerance(h: usize, w: usize) -> f64 {
    (BF_TOLERANCE_FRACTION * ((h * h + w * w) as f64).sqrt()).ceil()
}

/// Fraction of `from` boundary pixels within `tol` of some `to` pixel.
fn matched(from: &[bool], to: &[bool], h: usize, w: usize, tol: f64) -> (usize, usize) {
    let r = tol.floor() as isize;
    let tol2 = tol * tol;
    let (mut hit, mut count) = (0, 0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !from[y as usize * w + x as usize] {
                continue;
            }
            count += 1;
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if ((dy * dy + dx * dx) as f64) <= tol2 && to[yy as usize * w + xx as usize] {
                        hit += 1;
                        break 'search;
                    }
                }
            }
        }
    }
    (hit, count)
}

/// Boundary F1 between two boundary maps with Euclidean tolerance `tol`.
pub fn bf_score(pred_boundary: &[bool], target_boundary: &[bool], h: usize, w: usize, tol: f64) -> f64 {
    let (tp_p, np) = matched(pred_boundary, target_boundary, h, w, tol);
    let (tp_t, nt) = matched(target_boundary, pred_boundary, h, w, tol);
    match (np, nt) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => {
            let p = tp_p as f64 / np as f64;
            let r = tp_t as f64 / nt as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    }
}

/// Per-image evaluation result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub counts: ConfusionCounts,
    pub bf_lesion: f64,
    pub bf_background: f64,
}

/// Score one binary prediction against its target, both `(1, 1, H, W)`.
pub fn evaluate_image(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<ImageEval> {
    let (ps, ts) = (pred.shape(), target.shape());
    if ps != ts || ps.n() * ps.c() != 1 {
        return Err(Error::dim("evaluate_image", format!("pred {ps:?} vs target {ts:?}")));
    }
    let counts = confusion(pred.data(), target.data())?;
    let (h, w) = (ps.h(), ps.w());
    let tol = bf_tolerance(h, w);
    let inv = |m: &[f32]| m.iter().map(|&v| 1.0 - v).collect::<Vec<f32>>();
    let bf_lesion = bf_score(&boundary(pred.data(), h, w), &boundary(target.data(), h, w), h, w, tol);
    let bf_background = bf_score(
        &boundary(&inv(pred.data()), h, w),
        &boundary(&inv(target.data()), h, w),
        h,
        w,
        tol,
    );
    Ok(ImageEval { counts, bf_lesion, bf_background })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: String,
    pub dsc: f64,
    pub accuracy: f64,
    pub iou: f64,
    pub bf_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub regions: Vec<RegionRow>,
    pub global_acc: f64,
    pub mean_acc: f64,
    pub mean_iou: f64,
    pub weighted_iou: f64,
    pub mean_bf: f64,
    pub confusion: ConfusionCounts,
}

pub const CSV_HEADER: &str = "region,dsc,accuracy,iou,bf_score";

/// Dataset-level report. Overlap metrics come from summed confusion counts;
/// BF scores are averaged over images.
pub fn aggregate(images: &[ImageEval]) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::Validation("cannot aggregate zero images".into()));
    }
    let counts = images.iter().fold(ConfusionCounts::default(), |a, e| a.merge(&e.counts));
    let lesion = region_metrics(&counts)?;
    let background = region_metrics(&counts.inverted())?;
    let n = images.len() as f64;
    let bf_l = images.iter().map(|e| e.bf_lesion).sum::<f64>() / n;
    let bf_b = images.iter().map(|e| e.bf_background).sum::<f64>() / n;
    let total = counts.total() as f64;
    let share_l = (counts.tp + counts.fn_) as f64 / total;
    let row = |name: &str, m: &RegionMetrics, bf: f64| RegionRow {
        region: name.to_string(),
        dsc: m.dsc,
        accuracy: m.accuracy,
        iou: m.iou,
        bf_score: bf,
    };
    Ok(MetricsReport {
        images: images.len(),
        regions: vec![row("lesion", &lesion, bf_l), row("background", &background, bf_b)],
        global_acc: (counts.tp + counts.tn) as f64 / total,
        mean_acc: (lesion.recall + background.recall) / 2.0,
        mean_iou: (lesion.iou + background.iou) / 2.0,
        weighted_iou: share_l * lesion.iou + (1.0 - share_l) * background.iou,
        mean_bf: (bf_l + bf_b) / 2.0,
        confusion: counts,
    })
}

impl MetricsReport {
    pub fn lesion(&self) -> &RegionRow {
        &self.regions[0]
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.regions {
            s.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6}\n", r.region, r.dsc, r.accuracy, r.iou, r.bf_score));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Row-normalised 2x2 table; rows are the true class, columns the
    /// predicted class, lesion first.
    pub fn confusion_table(&self) -> [[f64; 2]; 2] {
        let c = &self.confusion;
        let norm = |a: u64, b: u64| {
            let t = (a + b) as f64;
            if t == 0.0 {
                [0.0, 0.0]
            } else {
                [a as f64 / t, b as f64 / t]
            }
        };
        [norm(c.tp, c.fn_), norm(c.fp, c.tn)]
    }

    pub fn confusion_csv(&self) -> String {
        let t = self.confusion_table();
        format!(
            "actual,lesion,background\nlesion,{:.6},{:.6}\nbackground,{:.6},{:.6}\n",
            t[0][0], t[0][1], t[1][0], t[1][1]
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_confusion_and_metrics() {
        let c = confusion(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let m = region_metrics(&c).unwrap();
        assert_eq!(m.dsc, 0.5);
        assert_eq!(m.accuracy, 0.5);
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn inversion_and_identity() {
        let t = [1.0, 0.0, 1.0, 1.0, 0.0];
        let inv: Vec<f32> = t.iter().map(|v| 1.0 - v).collect();
        let c = confusion(&inv, &t).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let c = confusion(&t, &t).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, fp: 0, fn_: 0, tn: 2 });
        let m = region_metrics(&c).unwrap();
        assert_eq!((m.dsc, m.accuracy, m.iou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn errors() {
        assert!(confusion(&[0.5], &[1.0]).is_err());
        assert!(confusion(&[1.0], &[1.0, 0.0]).is_err());
        assert!(region_metrics(&ConfusionCounts::default()).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn boundary_of_square_excludes_interior_and_border() {
        let (h, w) = (6, 6);
        let mut m = vec![0.0; 36];
        for y in 1..5 {
            for x in 1..5 {
                m[y * w + x] = 1.0;
            }
        }
        let b = boundary(&m, h, w);
        assert_eq!(b.iter().filter(|&&v| v).count(), 12);
        assert!(!b[2 * w + 2]);
        assert!(boundary(&[1.0; 36], h, w).iter().all(|&v| !v));
    }

    #[test]
    fn bf_cases() {
        let (h, w) = (16, 16);
        let square = |off: usize| {
            let mut m = vec![0.0f32; h * w];
            for y in 4..10 {
                for x in (4 + off)..(10 + off) {
                    m[y * w + x] = 1.0;
                }
            }
            m
        };
        let a = boundary(&square(0), h, w);
        let b = boundary(&square(1), h, w);
        assert_eq!(bf_score(&a, &a, h, w, 1.0), 1.0);
        assert_eq!(bf_score(&a, &b, h, w, 1.5), 1.0);
        assert!(bf_score(&a, &b, h, w, 0.5) < 1.0);
        let empty = vec![false; h * w];
        assert_eq!(bf_score(&empty, &empty, h, w, 1.0), 1.0);
        assert_eq!(bf_score(&a, &empty, h, w, 1.0), 0.0);
    }

    #[test]
    fn tolerance_rounds_up() {
        assert_eq!(bf_tolerance(256, 256), 3.0);
        assert_eq!(bf_tolerance(64, 64), 1.0);
    }

    #[test]
    fn report_formats() {
        let img = Tensor::from_vec(crate::tensor::Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let e = evaluate_image(&img, &img).unwrap();
        let r = aggregate(&[e]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("region,dsc,accuracy,iou,bf_score\nlesion,"));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(r.confusion_table(), [[1.0, 0.0], [0.0, 1.0]]);
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
