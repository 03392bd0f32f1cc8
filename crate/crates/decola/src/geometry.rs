//! Box representations and the differentiable box costs used by matching and
//! losses.
//!
//! All boxes are stored normalized to [0,1] relative to image size, so labels
//! produced at one resolution are directly consumable at another.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DecolaError, Result};

/// Coordinate convention for a box 4-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxFormat {
    /// (x1, y1, x2, y2) with x1 ≤ x2 and y1 ≤ y2.
    Xyxy,
    /// (center x, center y, width, height) with w ≥ 0 and h ≥ 0.
    Cxcywh,
}

impl BoxFormat {
    pub fn name(self) -> &'static str {
        match self {
            BoxFormat::Xyxy => "XYXY",
            BoxFormat::Cxcywh => "CXCYWH",
        }
    }
}

/// Ordered collection of boxes in a declared format, normalized to [0,1],
/// with the pixel size of the image they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub boxes: Vec<[f64; 4]>,
    pub format: BoxFormat,
    /// (height px, width px)
    pub image_size: (u32, u32),
}

impl BoxSet {
    /// Validates finiteness and the declared format's ordering invariants.
    pub fn new(boxes: Vec<[f64; 4]>, format: BoxFormat, image_size: (u32, u32)) -> Result<Self> {
        for (index, b) in boxes.iter().enumerate() {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(DecolaError::NonFiniteBox { index, coords: *b });
            }
            let ok = match format {
                BoxFormat::Xyxy => b[0] <= b[2] && b[1] <= b[3],
                BoxFormat::Cxcywh => b[2] >= 0.0 && b[3] >= 0.0,
            };
            if !ok {
                return Err(DecolaError::InvalidBox {
                    index,
                    format: format.name(),
                    coords: *b,
                });
            }
        }
        Ok(Self {
            boxes,
            format,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Clamps every coordinate into [0,1] (both formats are closed under this).
    pub fn clip_unit(mut self) -> Self {
        for b in &mut self.boxes {
            for v in b.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        self
    }
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = b;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

pub fn xyxy_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    let [x1, y1, x2, y2] = b;
    [(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1]
}

/// Converts a box set to the target format. Round-trips are exact to 1e-9.
pub fn convert_format(b: &BoxSet, target: BoxFormat) -> Result<BoxSet> {
    for (index, raw) in b.boxes.iter().enumerate() {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(DecolaError::NonFiniteBox {
                index,
                coords: *raw,
            });
        }
    }
    if b.format == target {
        return Ok(b.clone());
    }
    let boxes = b
        .boxes
        .iter()
        .map(|&raw| match target {
            BoxFormat::Xyxy => cxcywh_to_xyxy(raw),
            BoxFormat::Cxcywh => xyxy_to_cxcywh(raw),
        })
        .collect();
    Ok(BoxSet {
        boxes,
        format: target,
        image_size: b.image_size,
    })
}

/// Plain IoU of two XYXY boxes. Zero-area boxes intersect nothing.
pub fn iou_pair_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// GIoU of two XYXY boxes: IoU minus the enclosing-hull excess, in [-1, 1].
///
/// Zero-area boxes are legal: their area and any intersection are exactly 0.
/// If the enclosing hull itself has zero area the penalty term is dropped.
pub fn giou_pair_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if hull > 0.0 {
        iou - (hull - union.max(0.0)) / hull
    } else {
        iou
    }
}

/// GIoU of a pair plus its analytic gradient w.r.t. both boxes' coordinates.
///
/// Piecewise smooth; at min/max ties the a-side subgradient is taken. The
/// finite-difference property test pins this against central differences.
pub fn giou_pair_with_grad_xyxy(a: [f64; 4], b: [f64; 4]) -> (f64, [f64; 4], [f64; 4]) {
    let mut da = [0.0; 4];
    let mut db = [0.0; 4];

    let aw = a[2] - a[0];
    let ah = a[3] - a[1];
    let bw = b[2] - b[0];
    let bh = b[3] - b[1];
    let area_a = aw * ah;
    let area_b = bw * bh;
    // d(area_a)/d(a) = [-ah, -aw, ah, aw]
    let darea_a = [-ah, -aw, ah, aw];

    let ix1 = a[0].max(b[0]);
    let iy1 = a[1].max(b[1]);
    let ix2 = a[2].min(b[2]);
    let iy2 = a[3].min(b[3]);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let inter = if iw > 0.0 && ih > 0.0 { iw * ih } else { 0.0 };

    // d(inter)/d coordinates, only where the a box is the active argmin/argmax
    let mut dinter_a = [0.0; 4];
    let mut dinter_b = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if a[0] >= b[0] {
            dinter_a[0] = -ih;
        } else {
            dinter_b[0] = -ih;
        }
        if a[1] >= b[1] {
            dinter_a[1] = -iw;
        } else {
            dinter_b[1] = -iw;
        }
        if a[2] <= b[2] {
            dinter_a[2] = ih;
        } else {
            dinter_b[2] = ih;
        }
        if a[3] <= b[3] {
            dinter_a[3] = iw;
        } else {
            dinter_b[3] = iw;
        }
    }

    let union = area_a + area_b - inter;
    let dunion_a = [
        darea_a[0] - dinter_a[0],
        darea_a[1] - dinter_a[1],
        darea_a[2] - dinter_a[2],
        darea_a[3] - dinter_a[3],
    ];
    let darea_b = [-bh, -bw, bh, bw];
    let dunion_b = [
        darea_b[0] - dinter_b[0],
        darea_b[1] - dinter_b[1],
        darea_b[2] - dinter_b[2],
        darea_b[3] - dinter_b[3],
    ];

    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if union > 0.0 {
        for i in 0..4 {
            da[i] += (dinter_a[i] * union - inter * dunion_a[i]) / (union * union);
            db[i] += (dinter_b[i] * union - inter * dunion_b[i]) / (union * union);
        }
    }

    let hx1 = a[0].min(b[0]);
    let hy1 = a[1].min(b[1]);
    let hx2 = a[2].max(b[2]);
    let hy2 = a[3].max(b[3]);
    let hw = hx2 - hx1;
    let hh = hy2 - hy1;
    let hull = hw * hh;

    let mut dhull_a = [0.0; 4];
    let mut dhull_b = [0.0; 4];
    if a[0] <= b[0] {
        dhull_a[0] = -hh;
    } else {
        dhull_b[0] = -hh;
    }
    if a[1] <= b[1] {
        dhull_a[1] = -hw;
    } else {
        dhull_b[1] = -hw;
    }
    if a[2] >= b[2] {
        dhull_a[2] = hh;
    } else {
        dhull_b[2] = hh;
    }
    if a[3] >= b[3] {
        dhull_a[3] = hw;
    } else {
        dhull_b[3] = hw;
    }

    let giou = if hull > 0.0 {
        // giou = iou - 1 + union/hull
        let u = union.max(0.0);
        for i in 0..4 {
            da[i] += dunion_a[i] / hull - u * dhull_a[i] / (hull * hull);
            db[i] += dunion_b[i] / hull - u * dhull_b[i] / (hull * hull);
        }
        iou - (hull - u) / hull
    } else {
        iou
    };

    (giou, da, db)
}

/// Pairwise GIoU matrix, shape |a| × |b|. Both sets must be XYXY.
pub fn generalized_iou(a: &BoxSet, b: &BoxSet) -> Result<Array2<f64>> {
    if a.format != BoxFormat::Xyxy {
        return Err(DecolaError::FormatMismatch {
            expected: "XYXY",
            got: a.format.name(),
        });
    }
    if b.format != BoxFormat::Xyxy {
        return Err(DecolaError::FormatMismatch {
            expected: "XYXY",
            got: b.format.name(),
        });
    }
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &ba) in a.boxes.iter().enumerate() {
        for (j, &bb) in b.boxes.iter().enumerate() {
            out[(i, j)] = giou_pair_xyxy(ba, bb);
        }
    }
    Ok(out)
}

/// Pairwise L1 distance matrix over CXCYWH coordinates, shape |a| × |b|.
pub fn l1_box_distance(a: &BoxSet, b: &BoxSet) -> Result<Array2<f64>> {
    if a.format != BoxFormat::Cxcywh {
        return Err(DecolaError::FormatMismatch {
            expected: "CXCYWH",
            got: a.format.name(),
        });
    }
    if b.format != BoxFormat::Cxcywh {
        return Err(DecolaError::FormatMismatch {
            expected: "CXCYWH",
            got: b.format.name(),
        });
    }
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, ba) in a.boxes.iter().enumerate() {
        for (j, bb) in b.boxes.iter().enumerate() {
            out[(i, j)] = ba.iter().zip(bb.iter()).map(|(x, y)| (x - y).abs()).sum();
        }
    }
    Ok(out)
}

pub fn l1_pair(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// Stacks boxes into an N×4 matrix.
pub fn boxes_to_mat(boxes: &[[f64; 4]]) -> Array2<f64> {
    let mut out = Array2::zeros((boxes.len(), 4));
    for (i, b) in boxes.iter().enumerate() {
        for j in 0..4 {
            out[(i, j)] = b[j];
        }
    }
    out
}

/// Inverse of [`boxes_to_mat`].
pub fn mat_to_boxes(m: &Array2<f64>) -> Vec<[f64; 4]> {
    assert_eq!(m.ncols(), 4);
    (0..m.nrows())
        .map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)], m[(i, 3)]])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(boxes: Vec<[f64; 4]>, format: BoxFormat) -> BoxSet {
        BoxSet::new(boxes, format, (64, 64)).unwrap()
    }

    #[test]
    fn convert_cxcywh_to_xyxy() {
        let b = set(vec![[0.5, 0.5, 0.2, 0.2]], BoxFormat::Cxcywh);
        let c = convert_format(&b, BoxFormat::Xyxy).unwrap();
        assert_abs_diff_eq!(c.boxes[0][0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(c.boxes[0][1], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(c.boxes[0][2], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(c.boxes[0][3], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn convert_xyxy_to_cxcywh() {
        let b = set(vec![[0.0, 0.0, 1.0, 1.0]], BoxFormat::Xyxy);
        let c = convert_format(&b, BoxFormat::Cxcywh).unwrap();
        assert_eq!(c.boxes[0], [0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn convert_rejects_non_finite_with_index() {
        let mut b = set(vec![[0.1, 0.1, 0.2, 0.2]], BoxFormat::Xyxy);
        b.boxes.push([0.1, f64::NAN, 0.2, 0.2]);
        let err = convert_format(&b, BoxFormat::Cxcywh).unwrap_err();
        match err {
            DecolaError::NonFiniteBox { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn round_trip_100_random_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let cx: f64 = rng.gen_range(0.1..0.9);
            let cy: f64 = rng.gen_range(0.1..0.9);
            let w: f64 = rng.gen_range(0.0..0.2);
            let h: f64 = rng.gen_range(0.0..0.2);
            let b = set(vec![[cx, cy, w, h]], BoxFormat::Cxcywh);
            let rt = convert_format(&convert_format(&b, BoxFormat::Xyxy).unwrap(), BoxFormat::Cxcywh)
                .unwrap();
            for k in 0..4 {
                assert!((rt.boxes[0][k] - b.boxes[0][k]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn giou_identical_is_one() {
        let a = set(vec![[0.1, 0.1, 0.5, 0.5]], BoxFormat::Xyxy);
        let m = generalized_iou(&a, &a).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn giou_hand_case_one_seventh_minus_two_ninths() {
        // (0,0,2,2) vs (1,1,3,3): IoU 1/7, union 7, hull 9
        let (g, _, _) = giou_pair_with_grad_xyxy([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
        assert_abs_diff_eq!(g, 1.0 / 7.0 - 2.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            giou_pair_xyxy([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]),
            g,
            epsilon = 1e-15
        );
    }

    #[test]
    fn giou_far_disjoint_is_negative() {
        let g = giou_pair_xyxy([0.0, 0.0, 0.1, 0.1], [0.9, 0.9, 1.0, 1.0]);
        assert!(g < 0.0);
        // separation grows -> approaches -1
        let g2 = giou_pair_xyxy([0.0, 0.0, 0.001, 0.001], [0.999, 0.999, 1.0, 1.0]);
        assert!(g2 < g);
        assert!(g2 > -1.0);
    }

    #[test]
    fn giou_zero_area_boxes_are_legal() {
        let g = giou_pair_xyxy([0.5, 0.5, 0.5, 0.5], [0.0, 0.0, 1.0, 1.0]);
        // inter 0, union 1, hull 1 -> giou = 0
        assert_abs_diff_eq!(g, 0.0, epsilon = 1e-12);
        let g = giou_pair_xyxy([0.2, 0.2, 0.2, 0.2], [0.2, 0.2, 0.2, 0.2]);
        assert!(g.is_finite());
    }

    #[test]
    fn giou_equals_iou_under_containment() {
        // hull equals the outer box whenever one box contains the other
        let outer = [0.1, 0.2, 0.8, 0.9];
        let inner = [0.3, 0.3, 0.5, 0.6];
        let g = giou_pair_xyxy(outer, inner);
        assert_abs_diff_eq!(g, iou_pair_xyxy(outer, inner), epsilon = 1e-12);
    }

    #[test]
    fn giou_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let step = 1e-4;
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                let x1: f64 = rng.gen_range(0.0..0.7);
                let y1: f64 = rng.gen_range(0.0..0.7);
                let w: f64 = rng.gen_range(0.05..0.3);
                let h: f64 = rng.gen_range(0.05..0.3);
                [x1, y1, x1 + w, y1 + h]
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let (_, da, db) = giou_pair_with_grad_xyxy(a, b);
            for side in 0..2 {
                for k in 0..4 {
                    let mut ap = a;
                    let mut am = a;
                    let mut bp = b;
                    let mut bm = b;
                    if side == 0 {
                        ap[k] += step;
                        am[k] -= step;
                    } else {
                        bp[k] += step;
                        bm[k] -= step;
                    }
                    let fd = (giou_pair_xyxy(ap, bp) - giou_pair_xyxy(am, bm)) / (2.0 * step);
                    let an = if side == 0 { da[k] } else { db[k] };
                    let rel = (an - fd).abs() / fd.abs().max(1e-3);
                    assert!(
                        rel <= 1e-3,
                        "analytic {an} vs fd {fd} at side {side} coord {k} for {a:?} {b:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn l1_identical_zero_and_example() {
        let a = set(vec![[0.5, 0.5, 0.2, 0.2]], BoxFormat::Cxcywh);
        let b = set(vec![[0.6, 0.5, 0.2, 0.2]], BoxFormat::Cxcywh);
        assert_abs_diff_eq!(l1_box_distance(&a, &a).unwrap()[(0, 0)], 0.0);
        assert_abs_diff_eq!(l1_box_distance(&a, &b).unwrap()[(0, 0)], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn l1_rejects_format_mismatch() {
        let a = set(vec![[0.1, 0.1, 0.2, 0.2]], BoxFormat::Xyxy);
        assert!(l1_box_distance(&a, &a).is_err());
        assert!(generalized_iou(
            &set(vec![[0.5, 0.5, 0.2, 0.2]], BoxFormat::Cxcywh),
            &a
        )
        .is_err());
    }

    #[test]
    fn l1_symmetry_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng, n: usize| {
            let boxes = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..0.5),
                        rng.gen_range(0.0..0.5),
                    ]
                })
                .collect();
            set(boxes, BoxFormat::Cxcywh)
        };
        let a = mk(&mut rng, 4);
        let b = mk(&mut rng, 6);
        let d_ab = l1_box_distance(&a, &b).unwrap();
        let d_ba = l1_box_distance(&b, &a).unwrap();
        assert_eq!(d_ab.t().to_owned(), d_ba);
    }
}
