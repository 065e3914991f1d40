//! COCO-style instance segmentation metrics.
//!
//! Conventions, fixed for reproducibility:
//!
//! * Ground truth instances are the objects with at least one visible pixel.
//!   Detections are the instances of a [`Segmentation`], scored by their
//!   mean seed probability.
//! * Detections are ranked by score, descending. Ties go to the detection
//!   whose smallest pixel index is lower, so numbering never matters. Across
//!   images, equal scores keep image order.
//! * Matching is greedy in rank order: a detection takes the unmatched ground
//!   truth with the highest IoU that is at least the threshold, preferring the
//!   lowest index on equal IoU and non-ignored over ignored ground truth.
//! * Within a bin, ground truth outside the bin is ignored: it neither counts
//!   toward recall nor makes a detection matched to it a false positive. For
//!   size bins an unmatched detection is ignored when its own bounding-box
//!   area lies outside the bin. Occlusion bins only produce recall.
//! * Size is the bounding-box pixel area `(rows)·(cols)` of the visible mask.
//!   Bins are half-open `[lo, hi)`; the last occlusion bin is closed.
//! * Precision at rank `k` is `tp/(tp+fp)` over non-ignored detections. It is
//!   made monotone from the right and sampled at recall `0.00, 0.01, …, 1.00`,
//!   taking the first rank whose recall reaches each level, 0 if none does.
//!   AP averages these 101 samples over every IoU threshold.
//! * AR at `n` detections averages over thresholds the recall reached by the
//!   top `n` detections of every image.
//! * A bin without ground truth yields NaN.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::Segmentation;
use crate::grid::Grid;
use crate::scenegen::FrameBundle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("segmentation is {got_h}x{got_w} but the frame is {want_h}x{want_w}")]
    ShapeMismatch {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("detection score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("instance map references object {label} but only {objects} occlusion scores exist")]
    MissingOcclusion { label: u32, objects: usize },
    #[error("the dataset is empty")]
    EmptyDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Bounding-box area ranges in px² for small, medium, large.
    pub size_bins: [[f64; 2]; 3],
    /// Occlusion-score ranges for heavy, medium, little occlusion.
    pub occlusion_bins: [[f64; 2]; 3],
    /// Detection budgets for AR1, AR10 and AR/AP.
    pub max_dets: [usize; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            size_bins: [
                [0.0, 32.0 * 32.0],
                [32.0 * 32.0, 96.0 * 96.0],
                [96.0 * 96.0, 100000.0 * 100000.0],
            ],
            occlusion_bins: [[0.0, 0.3], [0.3, 0.75], [0.75, 1.0]],
            max_dets: [1, 10, 100],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let t = &self.iou_thresholds;
        if t.is_empty()
            || t.iter().any(|v| !(*v > 0.0 && *v <= 1.0))
            || t.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(EvalError::InvalidConfig(
                "IoU thresholds must be strictly ascending within (0, 1]".into(),
            ));
        }
        for (name, bins) in [
            ("size", &self.size_bins),
            ("occlusion", &self.occlusion_bins),
        ] {
            if bins.iter().any(|b| !(b[0] < b[1])) || bins.windows(2).any(|w| w[0][1] != w[1][0]) {
                return Err(EvalError::InvalidConfig(format!(
                    "{name} bins must be non-empty and contiguous"
                )));
            }
        }
        if self.max_dets.contains(&0) || self.max_dets.windows(2).any(|w| w[0] > w[1]) {
            return Err(EvalError::InvalidConfig(
                "max_dets must be positive and ascending".into(),
            ));
        }
        Ok(())
    }
}

/// A ground-truth object: sorted visible pixel indices plus its bin keys.
#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub mask: Vec<usize>,
    pub bbox_area: f64,
    pub occlusion: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Sorted pixel indices.
    pub mask: Vec<usize>,
    pub score: f64,
    pub bbox_area: f64,
}

/// Everything needed to score one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub gts: Vec<GtObject>,
    pub dets: Vec<Detection>,
}

/// Bounding-box pixel area of a set of row-major indices.
pub fn bbox_area(mask: &[usize], width: usize) -> f64 {
    if mask.is_empty() || width == 0 {
        return 0.0;
    }
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for &i in mask {
        let (r, c) = (i / width, i % width);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64
}

/// `|a∩b| / |a∪b|` of two binary masks; 0 when both are empty.
pub fn mask_iou(a: &Grid<u8>, b: &Grid<u8>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "masks must share dimensions");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += usize::from(x != 0 && y != 0);
        union += usize::from(x != 0 || y != 0);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of two sorted index lists.
pub fn sorted_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

impl ImageRecord {
    /// Pairs a segmentation with the modal labels and occlusion scores it is judged against.
    pub fn new(
        seg: &Segmentation,
        instance_map: &Grid<u32>,
        occlusion_scores: &[f64],
    ) -> Result<Self, EvalError> {
        if !seg.labels.same_size(instance_map) {
            return Err(EvalError::ShapeMismatch {
                got_h: seg.labels.height(),
                got_w: seg.labels.width(),
                want_h: instance_map.height(),
                want_w: instance_map.width(),
            });
        }
        let w = instance_map.width();
        let mut gt_masks: Vec<Vec<usize>> = vec![Vec::new(); occlusion_scores.len()];
        for (i, &l) in instance_map.as_slice().iter().enumerate() {
            if l > 0 {
                gt_masks
                    .get_mut(l as usize - 1)
                    .ok_or(EvalError::MissingOcclusion {
                        label: l,
                        objects: occlusion_scores.len(),
                    })?
                    .push(i);
            }
        }
        let gts = gt_masks
            .into_iter()
            .zip(occlusion_scores)
            .filter(|(m, _)| !m.is_empty())
            .map(|(mask, &occlusion)| GtObject {
                bbox_area: bbox_area(&mask, w),
                mask,
                occlusion,
            })
            .collect();
        let mut dets = Vec::with_capacity(seg.num_instances());
        for (mask, &score) in seg.members().into_iter().zip(&seg.scores) {
            if !score.is_finite() {
                return Err(EvalError::NonFiniteScore(score));
            }
            if !mask.is_empty() {
                dets.push(Detection {
                    bbox_area: bbox_area(&mask, w),
                    mask,
                    score,
                });
            }
        }
        Ok(Self { gts, dets })
    }

    pub fn from_frame(seg: &Segmentation, frame: &FrameBundle) -> Result<Self, EvalError> {
        Self::new(seg, &frame.instance_map, &frame.occlusion_scores)
    }
}

/// Outcome of greedy matching at one threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Matched ground-truth index per detection, in the given detection order.
    pub det_match: Vec<Option<usize>>,
    /// Matched detection index per ground truth.
    pub gt_match: Vec<Option<usize>>,
}

/// Greedy matching of `ious[d][g]` for detections already in rank order.
///
/// Ground truth flagged in `gt_ignore` is only taken when no non-ignored
/// ground truth qualifies.
pub fn match_detections(
    ious: &[Vec<f64>],
    n_gt: usize,
    gt_ignore: &[bool],
    threshold: f64,
    max_det: usize,
) -> MatchResult {
    let mut order: Vec<usize> = (0..n_gt).collect();
    order.sort_by_key(|&g| gt_ignore.get(g).copied().unwrap_or(false));
    let mut det_match = vec![None; ious.len().min(max_det)];
    let mut gt_match = vec![None; n_gt];
    for (d, row) in ious.iter().take(max_det).enumerate() {
        let mut best: Option<usize> = None;
        let mut best_iou = threshold;
        for &g in &order {
            if gt_match[g].is_some() {
                continue;
            }
            let ig = gt_ignore.get(g).copied().unwrap_or(false);
            if let Some(b) = best {
                if !gt_ignore.get(b).copied().unwrap_or(false) && ig {
                    break;
                }
            }
            let iou = row[g];
            if iou < best_iou || (best.is_some() && iou == best_iou) {
                continue;
            }
            best_iou = iou;
            best = Some(g);
        }
        if let Some(g) = best {
            det_match[d] = Some(g);
            gt_match[g] = Some(d);
        }
    }
    MatchResult {
        det_match,
        gt_match,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bin {
    All,
    Size(f64, f64),
    Occlusion(f64, f64, bool),
}

impl Bin {
    fn ignores_gt(self, g: &GtObject) -> bool {
        match self {
            Bin::All => false,
            Bin::Size(lo, hi) => !(g.bbox_area >= lo && g.bbox_area < hi),
            Bin::Occlusion(lo, hi, closed) => {
                !(g.occlusion >= lo && (g.occlusion < hi || (closed && g.occlusion <= hi)))
            }
        }
    }

    fn ignores_unmatched(self, d: &Detection) -> bool {
        match self {
            Bin::Size(lo, hi) => !(d.bbox_area >= lo && d.bbox_area < hi),
            _ => false,
        }
    }
}

/// One image matched within one bin, detections in rank order.
struct BinMatch {
    scores: Vec<f64>,
    /// `[threshold][detection]`
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    n_gt: usize,
}

fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].mask.first().cmp(&dets[b].mask.first()))
    });
    order
}

fn match_in_bin(
    img: &ImageRecord,
    ious: &[Vec<f64>],
    rank: &[usize],
    bin: Bin,
    cfg: &EvalConfig,
) -> BinMatch {
    let max_det = cfg.max_dets[2];
    let gt_ignore: Vec<bool> = img.gts.iter().map(|g| bin.ignores_gt(g)).collect();
    let kept: Vec<usize> = rank.iter().copied().take(max_det).collect();
    let mut matched = Vec::with_capacity(cfg.iou_thresholds.len());
    let mut ignored = Vec::with_capacity(cfg.iou_thresholds.len());
    for &t in &cfg.iou_thresholds {
        let m = match_detections(ious, img.gts.len(), &gt_ignore, t, max_det);
        matched.push(m.det_match.iter().map(Option::is_some).collect());
        ignored.push(
            m.det_match
                .iter()
                .zip(&kept)
                .map(|(g, &d)| match g {
                    Some(g) => gt_ignore[*g],
                    None => bin.ignores_unmatched(&img.dets[d]),
                })
                .collect(),
        );
    }
    BinMatch {
        scores: kept.iter().map(|&d| img.dets[d].score).collect(),
        matched,
        ignored,
        n_gt: gt_ignore.iter().filter(|&&i| !i).count(),
    }
}

/// `(AP over all thresholds, AP per threshold, recall per threshold)`; NaN without ground truth.
fn accumulate(per_image: &[&BinMatch], max_det: usize, n_thr: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let n_gt: usize = per_image.iter().map(|b| b.n_gt).sum();
    if n_gt == 0 {
        return (f64::NAN, vec![f64::NAN; n_thr], vec![f64::NAN; n_thr]);
    }
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (i, b) in per_image.iter().enumerate() {
        for d in 0..b.scores.len().min(max_det) {
            entries.push((b.scores[d], i, d));
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut q_sum = 0.0;
    let mut ap_t = Vec::with_capacity(n_thr);
    let mut recall = Vec::with_capacity(n_thr);
    for t in 0..n_thr {
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut rc = Vec::with_capacity(entries.len());
        let mut pr = Vec::with_capacity(entries.len());
        for &(_, i, d) in &entries {
            let b = per_image[i];
            if !b.ignored[t][d] {
                if b.matched[t][d] {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            rc.push(tp as f64 / n_gt as f64);
            pr.push(if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            });
        }
        recall.push(rc.last().copied().unwrap_or(0.0));
        for k in (1..pr.len()).rev() {
            if pr[k] > pr[k - 1] {
                pr[k - 1] = pr[k];
            }
        }
        let mut sum_t = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let k = rc.partition_point(|&v| v < level);
            let q = if k < pr.len() { pr[k] } else { 0.0 };
            sum_t += q;
            q_sum += q;
        }
        ap_t.push(sum_t / 101.0);
    }
    (q_sum / (101 * n_thr) as f64, ap_t, recall)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Table column order.
pub const METRIC_NAMES: [&str; 15] = [
    "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "AR", "AR1", "AR10", "AR_S", "AR_M", "AR_L",
    "AR_HO", "AR_MO", "AR_LO",
];

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Metric values in `[0, 1]`, NaN for empty bins (`null` in JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(with = "nan_as_null")]
    pub ap: f64,
    #[serde(with = "nan_as_null")]
    pub ap50: f64,
    #[serde(with = "nan_as_null")]
    pub ap75: f64,
    #[serde(with = "nan_as_null")]
    pub ap_s: f64,
    #[serde(with = "nan_as_null")]
    pub ap_m: f64,
    #[serde(with = "nan_as_null")]
    pub ap_l: f64,
    #[serde(with = "nan_as_null")]
    pub ar: f64,
    #[serde(with = "nan_as_null")]
    pub ar1: f64,
    #[serde(with = "nan_as_null")]
    pub ar10: f64,
    #[serde(with = "nan_as_null")]
    pub ar_s: f64,
    #[serde(with = "nan_as_null")]
    pub ar_m: f64,
    #[serde(with = "nan_as_null")]
    pub ar_l: f64,
    #[serde(with = "nan_as_null")]
    pub ar_ho: f64,
    #[serde(with = "nan_as_null")]
    pub ar_mo: f64,
    #[serde(with = "nan_as_null")]
    pub ar_lo: f64,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_detections: usize,
}

impl PartialEq for EvalResult {
    /// Bitwise comparison, so NaN equals NaN.
    fn eq(&self, other: &Self) -> bool {
        self.values()
            .iter()
            .zip(other.values())
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && (self.num_images, self.num_gt, self.num_detections)
                == (other.num_images, other.num_gt, other.num_detections)
    }
}

impl EvalResult {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 15] {
        [
            self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l, self.ar, self.ar1,
            self.ar10, self.ar_s, self.ar_m, self.ar_l, self.ar_ho, self.ar_mo, self.ar_lo,
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Aligned two-line table in percent, `-` for empty bins.
    pub fn to_table(&self) -> String {
        let cells: Vec<String> = self
            .values()
            .iter()
            .map(|v| {
                if v.is_nan() {
                    "-".to_string()
                } else {
                    format!("{:.1}", 100.0 * v)
                }
            })
            .collect();
        let widths: Vec<usize> = METRIC_NAMES
            .iter()
            .zip(&cells)
            .map(|(n, c)| n.len().max(c.len()))
            .collect();
        let row = |items: Vec<&str>| {
            items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!(
            "{}\n{}\n",
            row(METRIC_NAMES.to_vec()),
            row(cells.iter().map(String::as_str).collect())
        )
    }
}

fn threshold_index(cfg: &EvalConfig, t: f64) -> Option<usize> {
    cfg.iou_thresholds
        .iter()
        .position(|&v| (v - t).abs() < 1e-12)
}

/// Scores a dataset of images.
pub fn compute_metrics(images: &[ImageRecord], cfg: &EvalConfig) -> Result<EvalResult, EvalError> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let [s, m, l] = cfg.size_bins;
    let [ho, mo, lo] = cfg.occlusion_bins;
    let bins = [
        Bin::All,
        Bin::Size(s[0], s[1]),
        Bin::Size(m[0], m[1]),
        Bin::Size(l[0], l[1]),
        Bin::Occlusion(ho[0], ho[1], false),
        Bin::Occlusion(mo[0], mo[1], false),
        Bin::Occlusion(lo[0], lo[1], true),
    ];
    let per_image: Vec<Vec<BinMatch>> = images
        .par_iter()
        .map(|img| {
            let rank = ranked(&img.dets);
            let ious: Vec<Vec<f64>> = rank
                .iter()
                .map(|&d| {
                    img.gts
                        .iter()
                        .map(|g| sorted_iou(&img.dets[d].mask, &g.mask))
                        .collect()
                })
                .collect();
            bins.iter()
                .map(|&b| match_in_bin(img, &ious, &rank, b, cfg))
                .collect()
        })
        .collect();

    let n_thr = cfg.iou_thresholds.len();
    let [d1, d10, d100] = cfg.max_dets;
    let bin = |k: usize, max_det: usize| {
        let refs: Vec<&BinMatch> = per_image.iter().map(|b| &b[k]).collect();
        accumulate(&refs, max_det, n_thr)
    };
    let (ap, ap_t, rec) = bin(0, d100);
    let at = |t: f64| threshold_index(cfg, t).map_or(f64::NAN, |i| ap_t[i]);
    let ar_of = |k: usize, max_det: usize| mean(&bin(k, max_det).2);
    Ok(EvalResult {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        ap_s: bin(1, d100).0,
        ap_m: bin(2, d100).0,
        ap_l: bin(3, d100).0,
        ar: mean(&rec),
        ar1: ar_of(0, d1),
        ar10: ar_of(0, d10),
        ar_s: ar_of(1, d100),
        ar_m: ar_of(2, d100),
        ar_l: ar_of(3, d100),
        ar_ho: ar_of(4, d100),
        ar_mo: ar_of(5, d100),
        ar_lo: ar_of(6, d100),
        num_images: images.len(),
        num_gt: images.iter().map(|i| i.gts.len()).sum(),
        num_detections: images.iter().map(|i| i.dets.len()).sum(),
    })
}

/// Reference AP over all sizes, computed by re-matching every score-ordered
/// prefix from scratch and interpolating precision as the best precision at
/// any prefix with sufficient recall. Quadratic; meant for tiny cases.
pub fn brute_force_ap(images: &[ImageRecord], thresholds: &[f64]) -> f64 {
    let n_gt: usize = images.iter().map(|i| i.gts.len()).sum();
    if n_gt == 0 {
        return f64::NAN;
    }
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for (d, det) in img.dets.iter().enumerate() {
            all.push((det.score, i, d));
        }
    }
    all.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(
            images[a.1].dets[a.2]
                .mask
                .first()
                .cmp(&images[b.1].dets[b.2].mask.first()),
        )
    });

    let mut total = 0.0;
    for &t in thresholds {
        let mut points = Vec::new();
        for k in 1..=all.len() {
            let mut tp = 0usize;
            for (i, img) in images.iter().enumerate() {
                let mut taken = vec![false; img.gts.len()];
                for &(_, _, d) in all[..k].iter().filter(|e| e.1 == i) {
                    let mut pick: Option<(usize, f64)> = None;
                    for (g, gt) in img.gts.iter().enumerate() {
                        let iou = sorted_iou(&img.dets[d].mask, &gt.mask);
                        if !taken[g] && iou >= t && pick.is_none_or(|(_, best)| iou > best) {
                            pick = Some((g, iou));
                        }
                    }
                    if let Some((g, _)) = pick {
                        taken[g] = true;
                        tp += 1;
                    }
                }
            }
            points.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
        }
        let mut sum = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            sum += points
                .iter()
                .filter(|(rc, _)| *rc >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
        }
        total += sum / 101.0;
    }
    total / thresholds.len() as f64
}
