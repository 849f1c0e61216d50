//! Detector abstraction (feature extractor, instance classifier, box
//! regressor) and the tiny two-stage reference detector.
//!
//! The feature extractor owns the backbone and the region proposal network;
//! instance features are bilinear region pools of the backbone map. Box
//! deltas use the usual parameterisation relative to a reference box `p`:
//! `dx = (gx - px) / pw`, `dy = (gy - py) / ph` on centres, and
//! `dw = ln(gw / pw)`, `dh = ln(gh / ph)`.

use dgdet_autograd::{softmax_in_place, Graph, PoolRegion, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{mlp, ArchConfig, Bound, Collection, ModelParams};
use crate::types::{iou, Annotation, BoundingBox, ClassLabel, Image, ProbVector};

/// Largest log-scale delta applied when decoding.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)
/// Smallest proposal side kept after clipping, in pixels.
pub const MIN_PROPOSAL_SIDE: f64 = 2.0;

/// Backbone output, stored channel-major as `[C_f, H', W']`.
#[derive(Debug, Clone, Copy)]
pub struct ImageFeatures {
    pub map: Var,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct InstanceFeatures {
    /// `[R, C_i]`, one row per box.
    pub features: Var,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `[H' * W' * A, 2]` background/object logits.
    pub logits: Var,
    /// `[H' * W' * A, 4]` deltas relative to `anchors`.
    pub deltas: Var,
    pub anchors: Vec<BoundingBox>,
}

#[derive(Debug, Clone)]
pub struct FeatureOutput {
    pub image: ImageFeatures,
    pub rpn: RpnOutput,
    pub instances: InstanceFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    pub boxes: Vec<BoundingBox>,
    pub class_probs: Vec<ProbVector>,
    pub scores: Vec<f64>,
    pub classes: Vec<ClassLabel>,
}

impl Detections {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Seam for plugging a detector into the training losses: anything that can
/// produce image features, pooled instance features, class logits and box
/// deltas on a [`Graph`].
pub trait FeatureDetector {
    fn extract_features(
        &self,
        g: &mut Graph,
        theta: &Bound,
        image: &Image,
        extra_proposals: &[BoundingBox],
    ) -> Result<FeatureOutput>;

    fn class_logits(&self, g: &mut Graph, phi: &Bound, inst: Var) -> Result<Var>;

    fn box_deltas(&self, g: &mut Graph, beta: &Bound, inst: Var) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDetector {
    pub arch: ArchConfig,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

impl TinyDetector {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            arch: params.arch.clone(),
            num_classes: params.num_classes(),
            height: params.meta.height,
            width: params.meta.width,
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if (image.height(), image.width()) != (self.height, self.width) {
            return Err(Error::Dimension(format!(
                "image is {}x{}, model expects {}x{}",
                image.height(),
                image.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    fn check_instances(&self, g: &Graph, inst: Var) -> Result<()> {
        let v = g.value(inst);
        if v.shape().len() != 2 || v.cols() != self.arch.instance_dim() {
            return Err(Error::Dimension(format!(
                "instance features have shape {:?}, heads expect [R, {}]",
                v.shape(),
                self.arch.instance_dim()
            )));
        }
        Ok(())
    }

    /// Backbone and RPN heads.
    pub fn backbone(&self, g: &mut Graph, theta: &Bound, image: &Image) -> Result<(ImageFeatures, RpnOutput)> {
        self.check_image(image)?;
        let centred: Vec<f64> = image.to_chw().into_iter().map(|v| v - 0.5).collect();
        let mut x = g.constant(Tensor::new(&[3, self.height, self.width], centred));
        for (i, &s) in self.arch.backbone_strides.iter().enumerate() {
            let n = i + 1;
            x = g.conv2d(x, theta.var(&format!("conv{n}.w")), theta.var(&format!("conv{n}.b")), s, 1);
            x = g.relu(x);
        }
        let shape = g.value(x).shape().to_vec();
        let (c, fh, fw) = (shape[0], shape[1], shape[2]);
        let features = ImageFeatures {
            map: x,
            stride: self.arch.stride(),
            height: fh,
            width: fw,
            channels: c,
        };

        let h = g.conv2d(x, theta.var("rpn.conv.w"), theta.var("rpn.conv.b"), 1, 1);
        let h = g.relu(h);
        let rows = g.chw_to_rows(h);
        let a = self.arch.num_anchors();
        let logits = g.linear(rows, theta.var("rpn.cls.w"), theta.var("rpn.cls.b"));
        let logits = g.reshape(logits, &[fh * fw * a, 2]);
        let deltas = g.linear(rows, theta.var("rpn.box.w"), theta.var("rpn.box.b"));
        let deltas = g.reshape(deltas, &[fh * fw * a, 4]);
        let rpn = RpnOutput {
            logits,
            deltas,
            anchors: anchors(&self.arch, fh, fw),
        };
        Ok((features, rpn))
    }

    /// Top proposals from the RPN outputs.
    pub fn propose(&self, g: &Graph, rpn: &RpnOutput) -> Vec<BoundingBox> {
        let logits = g.value(rpn.logits);
        let deltas = g.value(rpn.deltas);
        let mut boxes = Vec::with_capacity(rpn.anchors.len());
        let mut scores = Vec::with_capacity(rpn.anchors.len());
        for (i, anchor) in rpn.anchors.iter().enumerate() {
            let mut p = [logits.row(i)[0], logits.row(i)[1]];
            softmax_in_place(&mut p);
            let d = deltas.row(i);
            let b = decode(anchor, [d[0], d[1], d[2], d[3]]).clipped(self.height, self.width);
            if b.w >= MIN_PROPOSAL_SIDE && b.h >= MIN_PROPOSAL_SIDE {
                boxes.push(b);
                scores.push(p[1]);
            }
        }
        let keep = nms(&boxes, &scores, self.arch.rpn_nms_iou);
        keep.into_iter().take(self.arch.num_proposals).map(|i| boxes[i]).collect()
    }

    /// Region pooling of `boxes` from the backbone map.
    pub fn pool(&self, g: &mut Graph, features: &ImageFeatures, boxes: &[BoundingBox]) -> InstanceFeatures {
        let regions: Vec<PoolRegion> = boxes
            .iter()
            .map(|b| PoolRegion {
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
            })
            .collect();
        let features = if regions.is_empty() {
            g.constant(Tensor::zeros(&[0, self.arch.instance_dim()]))
        } else {
            g.roi_align(features.map, &regions, 1.0 / features.stride as f64, self.arch.roi_bins)
        };
        InstanceFeatures {
            features,
            boxes: boxes.to_vec(),
        }
    }
}

impl FeatureDetector for TinyDetector {
    fn extract_features(
        &self,
        g: &mut Graph,
        theta: &Bound,
        image: &Image,
        extra_proposals: &[BoundingBox],
    ) -> Result<FeatureOutput> {
        let (features, rpn) = self.backbone(g, theta, image)?;
        let mut proposals = self.propose(g, &rpn);
        proposals.extend_from_slice(extra_proposals);
        let instances = self.pool(g, &features, &proposals);
        Ok(FeatureOutput {
            image: features,
            rpn,
            instances,
        })
    }

    fn class_logits(&self, g: &mut Graph, phi: &Bound, inst: Var) -> Result<Var> {
        self.check_instances(g, inst)?;
        Ok(mlp(g, phi, inst))
    }

    fn box_deltas(&self, g: &mut Graph, beta: &Bound, inst: Var) -> Result<Var> {
        self.check_instances(g, inst)?;
        Ok(mlp(g, beta, inst))
    }
}

/// Anchors centred on every feature cell, cell-major then size.
pub fn anchors(arch: &ArchConfig, fh: usize, fw: usize) -> Vec<BoundingBox> {
    let s = arch.stride() as f64;
    let mut out = Vec::with_capacity(fh * fw * arch.num_anchors());
    for i in 0..fh {
        for j in 0..fw {
            let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            for &a in &arch.anchor_sizes {
                out.push(BoundingBox::new(cx - a / 2.0, cy - a / 2.0, a, a));
            }
        }
    }
    out
}

/// Deltas that map `reference` onto `target`.
pub fn encode(reference: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (px, py) = reference.center();
    let (gx, gy) = target.center();
    [
        (gx - px) / reference.w,
        (gy - py) / reference.h,
        (target.w / reference.w).ln(),
        (target.h / reference.h).ln(),
    ]
}

/// Inverse of [`encode`]; log-scale deltas are capped at [`MAX_LOG_SCALE`].
pub fn decode(reference: &BoundingBox, d: [f64; 4]) -> BoundingBox {
    let (px, py) = reference.center();
    let cx = px + d[0] * reference.w;
    let cy = py + d[1] * reference.h;
    let w = reference.w * d[2].min(MAX_LOG_SCALE).exp();
    let h = reference.h * d[3].min(MAX_LOG_SCALE).exp();
    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

/// Applies per-box deltas and clips the results to the image.
pub fn apply_deltas(boxes: &[BoundingBox], deltas: &[[f64; 4]], height: usize, width: usize) -> Vec<BoundingBox> {
    boxes
        .iter()
        .zip(deltas)
        .map(|(b, d)| decode(b, *d).clipped(height, width))
        .collect()
}

/// Greedy non-maximum suppression. Returns kept indices by descending score
/// (ties by index); a box is dropped when its IoU with a kept box exceeds
/// `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Labels for the RPN anchors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    /// 1 object, 0 background, -1 ignored.
    pub labels: Vec<i8>,
    pub deltas: Tensor,
    pub objectness_weights: Vec<f64>,
    pub regression_weights: Vec<f64>,
}

pub const RPN_POSITIVE_IOU: f64 = 0.5;
pub const RPN_NEGATIVE_IOU: f64 = 0.3;
pub const ROI_POSITIVE_IOU: f64 = 0.5;

/// Anchors with IoU >= 0.5 to some box, and the best anchor of every box, are
/// positive; IoU < 0.3 is negative. Positives and negatives each carry half
/// of the objectness weight.
pub fn rpn_targets(anchors: &[BoundingBox], gt: &[BoundingBox]) -> RpnTargets {
    let n = anchors.len();
    let mut labels = vec![0i8; n];
    let mut assigned = vec![usize::MAX; n];
    let mut best_iou = vec![0.0f64; n];
    for (i, a) in anchors.iter().enumerate() {
        for (j, b) in gt.iter().enumerate() {
            let v = iou(a, b);
            if v > best_iou[i] {
                best_iou[i] = v;
                assigned[i] = j;
            }
        }
        labels[i] = if best_iou[i] >= RPN_POSITIVE_IOU {
            1
        } else if best_iou[i] < RPN_NEGATIVE_IOU {
            0
        } else {
            -1
        };
    }
    for (j, b) in gt.iter().enumerate() {
        let mut best = None;
        let mut best_v = 0.0;
        for (i, a) in anchors.iter().enumerate() {
            let v = iou(a, b);
            if v > best_v {
                best_v = v;
                best = Some(i);
            }
        }
        if let Some(i) = best {
            labels[i] = 1;
            assigned[i] = j;
        }
    }
    let npos = labels.iter().filter(|&&l| l == 1).count();
    let nneg = labels.iter().filter(|&&l| l == 0).count();
    let (wp, wn) = match (npos, nneg) {
        (0, 0) => (0.0, 0.0),
        (0, n) => (0.0, 1.0 / n as f64),
        (p, 0) => (1.0 / p as f64, 0.0),
        (p, n) => (0.5 / p as f64, 0.5 / n as f64),
    };
    let mut deltas = vec![0.0; n * 4];
    let mut objectness_weights = vec![0.0; n];
    let mut regression_weights = vec![0.0; n];
    for i in 0..n {
        match labels[i] {
            1 => {
                objectness_weights[i] = wp;
                regression_weights[i] = 1.0 / npos as f64;
                deltas[i * 4..i * 4 + 4].copy_from_slice(&encode(&anchors[i], &gt[assigned[i]]));
            }
            0 => objectness_weights[i] = wn,
            _ => {}
        }
    }
    RpnTargets {
        labels,
        deltas: Tensor::new(&[n, 4], deltas),
        objectness_weights,
        regression_weights,
    }
}

/// Class and regression targets for a set of instance boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTargets {
    pub classes: Vec<usize>,
    pub deltas: Tensor,
    pub positive: Vec<bool>,
}

impl RoiTargets {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn select(&self, idx: &[usize]) -> RoiTargets {
        let mut d = Vec::with_capacity(idx.len() * 4);
        for &i in idx {
            d.extend_from_slice(self.deltas.row(i));
        }
        RoiTargets {
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            deltas: Tensor::new(&[idx.len(), 4], d),
            positive: idx.iter().map(|&i| self.positive[i]).collect(),
        }
    }

    pub fn concat(parts: &[RoiTargets]) -> RoiTargets {
        let n: usize = parts.iter().map(RoiTargets::len).sum();
        let mut out = RoiTargets {
            classes: Vec::with_capacity(n),
            deltas: Tensor::zeros(&[0, 4]),
            positive: Vec::with_capacity(n),
        };
        let mut d = Vec::with_capacity(n * 4);
        for p in parts {
            out.classes.extend_from_slice(&p.classes);
            out.positive.extend_from_slice(&p.positive);
            d.extend_from_slice(p.deltas.data());
        }
        out.deltas = Tensor::new(&[n, 4], d);
        out
    }
}

/// A box takes the class of its best-overlapping annotation when the IoU is
/// at least 0.5 and is background otherwise.
pub fn roi_targets(boxes: &[BoundingBox], gt: &[Annotation]) -> RoiTargets {
    let mut classes = vec![0; boxes.len()];
    let mut positive = vec![false; boxes.len()];
    let mut deltas = vec![0.0; boxes.len() * 4];
    for (i, b) in boxes.iter().enumerate() {
        let best = gt
            .iter()
            .map(|a| iou(b, &a.bbox))
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        if let Some((j, v)) = best {
            if v >= ROI_POSITIVE_IOU {
                classes[i] = gt[j].class.0;
                positive[i] = true;
                deltas[i * 4..i * 4 + 4].copy_from_slice(&encode(b, &gt[j].bbox));
            }
        }
    }
    RoiTargets {
        classes,
        deltas: Tensor::new(&[boxes.len(), 4], deltas),
        positive,
    }
}

/// Training subset of instance boxes: every positive, then negatives in
/// proposal order up to three per positive (at least `min_negatives`).
pub fn sample_rois(targets: &RoiTargets, min_negatives: usize) -> Vec<usize> {
    let pos: Vec<usize> = (0..targets.len()).filter(|&i| targets.positive[i]).collect();
    let quota = (3 * pos.len()).max(min_negatives);
    let neg = (0..targets.len()).filter(|&i| !targets.positive[i]).take(quota);
    pos.iter().copied().chain(neg).collect()
}

/// Per-row class probabilities of instance features under `phi`.
pub fn classify_instances(params: &ModelParams, inst: &Tensor) -> Result<Vec<ProbVector>> {
    if inst.rows() == 0 {
        return Err(Error::Empty("no instance features to classify"));
    }
    let det = TinyDetector::new(params);
    let mut g = Graph::new();
    let x = g.constant(inst.clone());
    let phi = params.bind(&mut g, Collection::Phi, false)?;
    let logits = det.class_logits(&mut g, &phi, x)?;
    let p = g.softmax(logits);
    Ok(rows_to_probs(g.value(p)))
}

/// Refined boxes for instance features pooled from `proposals`, clipped to
/// the model's image size.
pub fn regress_boxes(params: &ModelParams, inst: &Tensor, proposals: &[BoundingBox]) -> Result<Vec<BoundingBox>> {
    if inst.rows() == 0 {
        return Err(Error::Empty("no instance features to regress"));
    }
    if inst.rows() != proposals.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for {} proposals",
            inst.rows(),
            proposals.len()
        )));
    }
    let det = TinyDetector::new(params);
    let mut g = Graph::new();
    let x = g.constant(inst.clone());
    let beta = params.bind(&mut g, Collection::Beta, false)?;
    let d = det.box_deltas(&mut g, &beta, x)?;
    let d = g.value(d);
    let deltas: Vec<[f64; 4]> = (0..d.rows()).map(|r| [d.row(r)[0], d.row(r)[1], d.row(r)[2], d.row(r)[3]]).collect();
    Ok(apply_deltas(proposals, &deltas, det.height, det.width))
}

fn rows_to_probs(t: &Tensor) -> Vec<ProbVector> {
    (0..t.rows())
        .map(|r| ProbVector::new(t.row(r).to_vec()).expect("softmax rows are distributions"))
        .collect()
}

/// Full inference: proposals, class probabilities, refined boxes, score
/// threshold and per-class NMS.
pub fn detect(params: &ModelParams, image: &Image) -> Result<Detections> {
    let det = TinyDetector::new(params);
    let mut g = Graph::new();
    let theta = params.bind(&mut g, Collection::Theta, false)?;
    let phi = params.bind(&mut g, Collection::Phi, false)?;
    let beta = params.bind(&mut g, Collection::Beta, false)?;
    let out = det.extract_features(&mut g, &theta, image, &[])?;
    let boxes = out.instances.boxes;
    if boxes.is_empty() {
        return Ok(Detections {
            boxes: vec![],
            class_probs: vec![],
            scores: vec![],
            classes: vec![],
        });
    }
    let logits = det.class_logits(&mut g, &phi, out.instances.features)?;
    let probs = g.softmax(logits);
    let deltas = det.box_deltas(&mut g, &beta, out.instances.features)?;
    let probs = rows_to_probs(g.value(probs));
    let d = g.value(deltas);
    let deltas: Vec<[f64; 4]> = (0..d.rows()).map(|r| [d.row(r)[0], d.row(r)[1], d.row(r)[2], d.row(r)[3]]).collect();
    let refined = apply_deltas(&boxes, &deltas, det.height, det.width);

    let mut cand: Vec<(usize, usize, f64)> = Vec::new();
    for (r, p) in probs.iter().enumerate() {
        let (c, s) = p.as_slice()[1..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i + 1, v) } else { acc });
        if s >= params.arch.score_threshold {
            cand.push((r, c, s));
        }
    }
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for c in 1..=det.num_classes {
        let group: Vec<&(usize, usize, f64)> = cand.iter().filter(|x| x.1 == c).collect();
        let b: Vec<BoundingBox> = group.iter().map(|x| refined[x.0]).collect();
        let s: Vec<f64> = group.iter().map(|x| x.2).collect();
        kept.extend(nms(&b, &s, params.arch.nms_iou).into_iter().map(|i| *group[i]));
    }
    kept.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    kept.truncate(params.arch.max_detections);
    Ok(Detections {
        boxes: kept.iter().map(|x| refined[x.0]).collect(),
        class_probs: kept.iter().map(|x| probs[x.0].clone()).collect(),
        scores: kept.iter().map(|x| x.2).collect(),
        classes: kept.iter().map(|x| ClassLabel(x.1)).collect(),
    })
}
