//! Shared domain types and the geometric helpers every other module uses.
//!
//! Boxes are `(left, top, width, height)` in continuous pixel units with a
//! top-left origin. Class 0 is background; object classes are `1..=K`, so
//! class heads emit `K + 1` probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x >= 0.0 && self.y >= 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn fits_within(&self, height: usize, width: usize) -> bool {
        self.x2() <= width as f64 && self.y2() <= height as f64
    }

    /// Clips to the image, keeping at least one pixel of extent on each axis.
    pub fn clipped(&self, height: usize, width: usize) -> Self {
        let (wf, hf) = (width as f64, height as f64);
        let x1 = self.x.clamp(0.0, wf - 1.0);
        let y1 = self.y.clamp(0.0, hf - 1.0);
        let x2 = self.x2().clamp(x1 + 1.0, wf);
        let y2 = self.y2().clamp(y1 + 1.0, hf);
        Self::from_corners(x1, y1, x2, y2)
    }
}

/// Intersection over union. Symmetric, in `[0, 1]` for valid boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// `0` is background, `1..=K` are object classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassLabel(pub usize);

impl ClassLabel {
    pub const BACKGROUND: ClassLabel = ClassLabel(0);

    pub fn is_background(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainLabel(pub usize);

/// RGB image stored row-major `H x W x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "image buffer holds {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[3, H, W]` copy for convolution.
    pub fn to_chw(&self) -> Vec<f64> {
        let p = self.height * self.width;
        let mut out = vec![0.0; 3 * p];
        for i in 0..p {
            for c in 0..3 {
                out[c * p + i] = self.data[i * 3 + c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub class: ClassLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub id: String,
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub domain: DomainLabel,
}

/// `(K, N, H, W)` a sample is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub num_classes: usize,
    pub num_domains: usize,
    pub height: usize,
    pub width: usize,
}

/// Probability vector; entries non-negative and summing to one within `1e-6`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, Self::TOLERANCE)
    }

    pub fn with_tolerance(probs: Vec<f64>, tol: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::NotDistribution("empty vector".into()));
        }
        if let Some(i) = probs.iter().position(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::NotDistribution(format!("entry {i} is {}", probs[i])));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::NotDistribution(format!("entries sum to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneHotDomain(Vec<f64>);

impl OneHotDomain {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn index(&self) -> usize {
        argmax(&self.0)
    }
}

pub fn one_hot_domain(d: DomainLabel, n: usize) -> Result<OneHotDomain> {
    if d.0 >= n {
        return Err(Error::DomainOutOfRange { index: d.0, count: n });
    }
    let mut v = vec![0.0; n];
    v[d.0] = 1.0;
    Ok(OneHotDomain(v))
}

/// Returns the sample unchanged when every invariant holds against `schema`,
/// otherwise a report listing each violation.
pub fn validate_sample(s: DomainSample, schema: &Schema) -> Result<DomainSample> {
    let mut violations = Vec::new();
    let found = (s.image.height(), s.image.width());
    if found != (schema.height, schema.width) {
        violations.push(Violation::ImageShape {
            expected: (schema.height, schema.width),
            found,
        });
    }
    if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        violations.push(Violation::ImageRange);
    }
    if s.domain.0 >= schema.num_domains {
        violations.push(Violation::DomainOutOfRange {
            domain: s.domain.0,
            count: schema.num_domains,
        });
    }
    for (index, a) in s.annotations.iter().enumerate() {
        let b = &a.bbox;
        if !(b.w > 0.0 && b.h > 0.0) {
            violations.push(Violation::BoxNotPositive { index });
        }
        if !(b.x >= 0.0 && b.y >= 0.0) {
            violations.push(Violation::BoxNegativeOrigin { index });
        }
        if !b.fits_within(schema.height, schema.width) {
            violations.push(Violation::BoxOutOfBounds { index });
        }
        if a.class.0 == 0 || a.class.0 > schema.num_classes {
            violations.push(Violation::ClassOutOfRange {
                index,
                class: a.class.0,
                max: schema.num_classes,
            });
        }
    }
    if violations.is_empty() {
        Ok(s)
    } else {
        Err(Error::InvalidSample { id: s.id, violations })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> Schema {
        Schema {
            num_classes: 3,
            num_domains: 2,
            height: 32,
            width: 32,
        }
    }

    fn sample(annotations: Vec<Annotation>) -> DomainSample {
        DomainSample {
            id: "s0".into(),
            image: Image::zeros(32, 32),
            annotations,
            domain: DomainLabel(1),
        }
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot_domain(DomainLabel(0), 3).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(one_hot_domain(DomainLabel(2), 3).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
        assert!(matches!(
            one_hot_domain(DomainLabel(3), 3),
            Err(Error::DomainOutOfRange { index: 3, count: 3 })
        ));
    }

    #[test]
    fn one_hot_argmax_recovers_index() {
        for n in 1..8 {
            for d in 0..n {
                assert_eq!(one_hot_domain(DomainLabel(d), n).unwrap().index(), d);
            }
        }
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        let b = BoundingBox::new(1.0, 0.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    /// Counts unit cells covered by integer-coordinate boxes.
    fn grid_iou(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32)) -> f64 {
        let inside = |bx: (u32, u32, u32, u32), x: u32, y: u32| x >= bx.0 && x < bx.0 + bx.2 && y >= bx.1 && y < bx.1 + bx.3;
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..64 {
            for x in 0..64 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u32;
                union += (ia || ib) as u32;
            }
        }
        inter as f64 / union as f64
    }

    fn int_box() -> impl Strategy<Value = (u32, u32, u32, u32)> {
        (0u32..32, 0u32..32, 1u32..=32, 1u32..=32)
    }

    fn float_box() -> impl Strategy<Value = BoundingBox> {
        (0.0f64..100.0, 0.0f64..100.0, 0.01f64..50.0, 0.01f64..50.0)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_matches_grid_counting(a in int_box(), b in int_box()) {
            let fa = BoundingBox::new(a.0 as f64, a.1 as f64, a.2 as f64, a.3 as f64);
            let fb = BoundingBox::new(b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64);
            prop_assert!((iou(&fa, &fb) - grid_iou(a, b)).abs() < 1e-9);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in float_box(), b in float_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn validate_accepts_empty_annotations() {
        let s = sample(vec![]);
        assert_eq!(validate_sample(s.clone(), &schema()).unwrap(), s);
    }

    #[test]
    fn validate_names_box_exceeding_width() {
        let s = sample(vec![
            Annotation { bbox: BoundingBox::new(1.0, 1.0, 4.0, 4.0), class: ClassLabel(1) },
            Annotation { bbox: BoundingBox::new(30.0, 1.0, 4.0, 4.0), class: ClassLabel(2) },
        ]);
        let err = validate_sample(s, &schema()).unwrap_err();
        match &err {
            Error::InvalidSample { violations, .. } => {
                assert_eq!(violations, &vec![Violation::BoxOutOfBounds { index: 1 }])
            }
            e => panic!("unexpected {e}"),
        }
        assert!(err.to_string().contains("box 1"));
    }

    #[test]
    fn validate_rejects_class_above_k_and_bad_domain() {
        let mut s = sample(vec![Annotation { bbox: BoundingBox::new(1.0, 1.0, 4.0, 4.0), class: ClassLabel(4) }]);
        s.domain = DomainLabel(2);
        let Error::InvalidSample { violations, .. } = validate_sample(s, &schema()).unwrap_err() else {
            panic!()
        };
        assert!(violations.contains(&Violation::ClassOutOfRange { index: 0, class: 4, max: 3 }));
        assert!(violations.contains(&Violation::DomainOutOfRange { domain: 2, count: 2 }));
    }

    #[test]
    fn validate_rejects_negative_width() {
        let s = sample(vec![Annotation { bbox: BoundingBox::new(1.0, 1.0, -4.0, 4.0), class: ClassLabel(1) }]);
        assert!(validate_sample(s, &schema()).is_err());
    }

    #[test]
    fn prob_vector_checks_normalisation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn clipping_keeps_boxes_inside() {
        let b = BoundingBox::new(-5.0, 60.0, 20.0, 20.0).clipped(64, 64);
        assert_eq!(b, BoundingBox::new(0.0, 60.0, 15.0, 4.0));
        let far = BoundingBox::new(100.0, 100.0, 5.0, 5.0).clipped(64, 64);
        assert!(far.is_valid() && far.fits_within(64, 64));
    }
}
