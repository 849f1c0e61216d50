//! Detection metrics: per-class AP, mAP, instance-weighted WmAP, per-domain
//! accuracy and WADA.
//!
//! AP uses all-point interpolation. Predictions are matched greedily in
//! descending score order (ties broken by prediction id) to the unmatched
//! ground truth of the same image with the highest IoU at or above the
//! threshold. Predictions sharing a score form one point on the
//! precision-recall curve, which makes AP independent of their input order.
//!
//! Domain accuracy follows the wheat-head benchmark convention: per image,
//! `TP / (TP + FP + FN)` at IoU 0.5 over predictions scoring at least 0.5
//! (1 for an image with neither predictions nor ground truth), averaged over
//! the domain's images.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::detect;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::toydata::DomainDataset;
use crate::types::{iou, BoundingBox, ClassLabel};

pub const DEFAULT_IOU: f64 = 0.5;
pub const ACCURACY_SCORE_THRESHOLD: f64 = 0.5;
pub const ACCURACY_DEFINITION: &str =
    "per-image TP/(TP+FP+FN) at IoU 0.5 with predictions scoring >= 0.5, averaged over the domain's images";

/// One scored box, also the prediction interchange record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub class: usize,
    pub score: f64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Prediction {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.x, self.y, self.w, self.h)
    }
}

/// Single-class prediction for [`average_precision`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox<'a> {
    pub id: usize,
    pub image: &'a str,
    pub score: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth<'a> {
    pub image: &'a str,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Prediction indices in evaluation order.
    pub order: Vec<usize>,
    /// True-positive flag per prediction (input order).
    pub true_positive: Vec<bool>,
    pub false_negatives: usize,
    pub num_ground_truth: usize,
}

pub fn match_predictions(preds: &[ScoredBox], gts: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then(preds[a].id.cmp(&preds[b].id))
    });
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(j);
    }
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for &i in &order {
        let Some(cands) = by_image.get(preds[i].image) else { continue };
        let mut best: Option<(usize, f64)> = None;
        for &j in cands {
            if used[j] {
                continue;
            }
            let v = iou(&preds[i].bbox, &gts[j].bbox);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp[i] = true;
        }
    }
    let matched = used.iter().filter(|&&u| u).count();
    MatchResult {
        order,
        true_positive: tp,
        false_negatives: gts.len() - matched,
        num_ground_truth: gts.len(),
    }
}

/// All-point interpolated AP for one class. `None` when there is no ground
/// truth.
pub fn average_precision(preds: &[ScoredBox], gts: &[GroundTruth], iou_threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let m = match_predictions(preds, gts, iou_threshold);
    let g = gts.len() as f64;
    // one (recall, precision) point per distinct score
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in m.order.iter().enumerate() {
        if m.true_positive[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = m.order.get(k + 1).map_or(true, |&n| preds[n].score != preds[i].score);
        if last_of_group {
            points.push((tp as f64 / g, tp as f64 / (tp + fp) as f64));
        }
    }
    Some(interpolated_area(&points))
}

/// Area under the precision envelope of `(recall, precision)` points given in
/// non-decreasing recall order.
pub(crate) fn interpolated_area(points: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut run = 0.0f64;
    for i in (0..points.len()).rev() {
        run = run.max(points[i].1);
        envelope[i] = run;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    ap
}

/// Unweighted mean AP over present classes and the instance-weighted WmAP.
pub fn summarize(per_class_ap: &[Option<f64>], instance_counts: &[usize]) -> Result<(f64, f64)> {
    if per_class_ap.len() != instance_counts.len() {
        return Err(Error::Dimension(format!(
            "{} APs for {} instance counts",
            per_class_ap.len(),
            instance_counts.len()
        )));
    }
    let present: Vec<(f64, usize)> = per_class_ap
        .iter()
        .zip(instance_counts)
        .filter_map(|(ap, &n)| ap.filter(|_| n > 0).map(|a| (a, n)))
        .collect();
    if present.is_empty() {
        return Err(Error::Empty("every class is absent from the ground truth"));
    }
    let mean = present.iter().map(|p| p.0).sum::<f64>() / present.len() as f64;
    let total: usize = present.iter().map(|p| p.1).sum();
    let wmap = present.iter().map(|&(a, n)| n as f64 * a).sum::<f64>() / total as f64;
    Ok((mean, wmap))
}

/// Image-count-weighted mean of per-domain accuracies.
pub fn wada(per_domain_accuracy: &[f64], image_counts: &[usize]) -> Result<f64> {
    if per_domain_accuracy.is_empty() {
        return Err(Error::Empty("no domains to average"));
    }
    if per_domain_accuracy.len() != image_counts.len() {
        return Err(Error::Dimension(format!(
            "{} accuracies for {} image counts",
            per_domain_accuracy.len(),
            image_counts.len()
        )));
    }
    let total: usize = image_counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no images in any domain"));
    }
    Ok(per_domain_accuracy
        .iter()
        .zip(image_counts)
        .map(|(a, &n)| a * n as f64)
        .sum::<f64>()
        / total as f64)
}

/// `TP / (TP + FP + FN)` for one image, class-aware.
pub fn image_accuracy(preds: &[(usize, f64, BoundingBox)], gts: &[(usize, BoundingBox)], iou_threshold: f64) -> f64 {
    let kept: Vec<&(usize, f64, BoundingBox)> = preds.iter().filter(|p| p.1 >= ACCURACY_SCORE_THRESHOLD).collect();
    if kept.is_empty() && gts.is_empty() {
        return 1.0;
    }
    let mut tp = 0;
    let classes: std::collections::BTreeSet<usize> = kept.iter().map(|p| p.0).chain(gts.iter().map(|g| g.0)).collect();
    for c in classes {
        let sb: Vec<ScoredBox> = kept
            .iter()
            .enumerate()
            .filter(|(_, p)| p.0 == c)
            .map(|(i, p)| ScoredBox {
                id: i,
                image: "",
                score: p.1,
                bbox: p.2,
            })
            .collect();
        let gb: Vec<GroundTruth> = gts
            .iter()
            .filter(|g| g.0 == c)
            .map(|g| GroundTruth { image: "", bbox: g.1 })
            .collect();
        tp += match_predictions(&sb, &gb, iou_threshold)
            .true_positive
            .iter()
            .filter(|&&t| t)
            .count();
    }
    let fp = kept.len() - tp;
    let fn_ = gts.len() - tp;
    tp as f64 / (tp + fp + fn_) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou_threshold: f64,
    pub class_names: Vec<String>,
    /// `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub instance_counts: Vec<usize>,
    pub map: f64,
    pub wmap: f64,
    pub domain_names: Vec<String>,
    pub domain_accuracy: Vec<f64>,
    pub domain_image_counts: Vec<usize>,
    pub wada: f64,
    pub accuracy_definition: String,
}

impl MetricReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>10} {:>8}", "class", "instances", "AP");
        for ((name, ap), n) in self.class_names.iter().zip(&self.per_class_ap).zip(&self.instance_counts) {
            let ap = ap.map_or("absent".to_string(), |a| format!("{:.4}", a));
            let _ = writeln!(s, "{name:<16} {n:>10} {ap:>8}");
        }
        let _ = writeln!(s, "{:<16} {:>10} {:>8.4}", "mAP", "", self.map);
        let _ = writeln!(s, "{:<16} {:>10} {:>8.4}", "WmAP", "", self.wmap);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16} {:>10} {:>8}", "domain", "images", "acc");
        for ((name, a), n) in self.domain_names.iter().zip(&self.domain_accuracy).zip(&self.domain_image_counts) {
            let _ = writeln!(s, "{name:<16} {n:>10} {a:>8.4}");
        }
        let _ = writeln!(s, "{:<16} {:>10} {:>8.4}", "WADA", "", self.wada);
        let _ = writeln!(s, "(IoU {}; accuracy: {})", self.iou_threshold, self.accuracy_definition);
        s
    }
}

/// Scores `preds` against every sample of `ds`.
pub fn evaluate_predictions(preds: &[Prediction], ds: &DomainDataset, iou_threshold: f64) -> Result<MetricReport> {
    let k = ds.num_classes();
    if let Some(p) = preds.iter().find(|p| p.class == 0 || p.class > k) {
        return Err(Error::Dimension(format!("prediction class {} outside 1..={k}", p.class)));
    }
    let mut per_image: BTreeMap<&str, Vec<(usize, f64, BoundingBox)>> = BTreeMap::new();
    for p in preds {
        per_image.entry(p.image_id.as_str()).or_default().push((p.class, p.score, p.bbox()));
    }

    let mut per_class_ap = Vec::with_capacity(k);
    let mut instance_counts = Vec::with_capacity(k);
    for c in 1..=k {
        let gts: Vec<GroundTruth> = ds
            .samples()
            .flat_map(|s| {
                s.annotations
                    .iter()
                    .filter(|a| a.class == ClassLabel(c))
                    .map(|a| GroundTruth {
                        image: s.id.as_str(),
                        bbox: a.bbox,
                    })
            })
            .collect();
        let sb: Vec<ScoredBox> = preds
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class == c)
            .map(|(i, p)| ScoredBox {
                id: i,
                image: p.image_id.as_str(),
                score: p.score,
                bbox: p.bbox(),
            })
            .collect();
        instance_counts.push(gts.len());
        per_class_ap.push(average_precision(&sb, &gts, iou_threshold));
    }
    let (map, wmap) = summarize(&per_class_ap, &instance_counts)?;

    let mut domain_accuracy = Vec::with_capacity(ds.num_domains());
    let mut domain_image_counts = Vec::with_capacity(ds.num_domains());
    for samples in &ds.domains {
        let accs: Vec<f64> = samples
            .iter()
            .map(|s| {
                let gts: Vec<(usize, BoundingBox)> = s.annotations.iter().map(|a| (a.class.0, a.bbox)).collect();
                let p = per_image.get(s.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                image_accuracy(p, &gts, iou_threshold)
            })
            .collect();
        domain_image_counts.push(accs.len());
        domain_accuracy.push(if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        });
    }
    let wada = wada(&domain_accuracy, &domain_image_counts)?;
    Ok(MetricReport {
        iou_threshold,
        class_names: ds.class_names.clone(),
        per_class_ap,
        instance_counts,
        map,
        wmap,
        domain_names: ds.domain_names.clone(),
        domain_accuracy,
        domain_image_counts,
        wada,
        accuracy_definition: ACCURACY_DEFINITION.into(),
    })
}

/// Runs the detector over every image of `ds`.
pub fn predict(model: &ModelParams, ds: &DomainDataset) -> Result<Vec<Prediction>> {
    check_schema(model, ds)?;
    let mut out = Vec::new();
    for s in ds.samples() {
        let d = detect(model, &s.image)?;
        for i in 0..d.len() {
            let b = d.boxes[i];
            out.push(Prediction {
                image_id: s.id.clone(),
                class: d.classes[i].0,
                score: d.scores[i],
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
            });
        }
    }
    Ok(out)
}

/// The class list and image size must agree; the domain count may differ
/// because evaluation domains are usually unseen.
pub fn check_schema(model: &ModelParams, ds: &DomainDataset) -> Result<()> {
    model.check_compatible(ds.num_classes(), None)?;
    if (model.meta.height, model.meta.width) != (ds.height, ds.width) {
        return Err(Error::Checkpoint(format!(
            "model expects {}x{} images, dataset has {}x{}",
            model.meta.height, model.meta.width, ds.height, ds.width
        )));
    }
    Ok(())
}

pub fn evaluate(model: &ModelParams, ds: &DomainDataset, iou_threshold: f64) -> Result<MetricReport> {
    let preds = predict(model, ds)?;
    evaluate_predictions(&preds, ds, iou_threshold)
}
