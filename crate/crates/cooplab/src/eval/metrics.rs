//! Rotated-box IoU, NMS, and average precision.

use crate::geometry::Box3D;
use crate::sim::GtBox;

use super::{Detection, EvalError};

type Pt = (f64, f64);

fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn segment_intersection(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    // Intersection of line pq with line ab (callers guarantee the
    // segments straddle).
    let a1 = q.1 - p.1;
    let b1 = p.0 - q.0;
    let c1 = a1 * p.0 + b1 * p.1;
    let a2 = b.1 - a.1;
    let b2 = a.0 - b.0;
    let c2 = a2 * a.0 + b2 * a.1;
    let det = a1 * b2 - a2 * b1;
    ((b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det)
}

/// Sutherland-Hodgman clip of a convex subject against a
/// counter-clockwise convex clip polygon.
fn clip_convex(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut output: Vec<Pt> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let p_in = cross(a, b, p) >= 0.0;
            let q_in = cross(a, b, q) >= 0.0;
            if p_in {
                output.push(p);
                if !q_in {
                    output.push(segment_intersection(p, q, a, b));
                }
            } else if q_in {
                output.push(segment_intersection(p, q, a, b));
            }
        }
    }
    output
}

/// BEV IoU of two yawed rectangles via convex polygon clipping.
pub fn rotated_iou(a: &Box3D, b: &Box3D) -> Result<f64, EvalError> {
    let (area_a, area_b) = (a.bev_area(), b.bev_area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return Err(EvalError::DegenerateBox);
    }
    let pa = a.bev_corners().to_vec();
    let pb = b.bev_corners().to_vec();
    let inter = polygon_area(&clip_convex(&pa, &pb));
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Greedy NMS by descending score; equal scores keep the earlier index.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(EvalError::BadThreshold(iou_threshold));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let mut suppressed = false;
        for k in &kept {
            if rotated_iou(&dets[i].bbox, &k.bbox)? >= iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(dets[i].clone());
        }
    }
    Ok(kept)
}

/// Per-frame detections and labels, paired for matching.
pub struct ApSample<'a> {
    pub dets: &'a [Detection],
    pub gts: &'a [GtBox],
}

/// Average precision at one IoU threshold over a set of frames.
///
/// Detections match one-to-one with observed ground truths (greedy in
/// descending score, best IoU first). Equal scores are swept as one
/// group so the PR curve does not depend on their order. The area under
/// the precision envelope is returned; `None` when there are no
/// matchable ground truths.
pub fn compute_ap(samples: &[ApSample<'_>], iou_threshold: f64) -> Result<Option<f64>, EvalError> {
    let n_gt: usize = samples.iter().map(|s| s.gts.iter().filter(|g| g.observed).count()).sum();
    if n_gt == 0 {
        return Ok(None);
    }
    // Greedy matching per frame, in global descending-score order.
    let mut flat: Vec<(usize, usize, f64)> = Vec::new();
    for (f, s) in samples.iter().enumerate() {
        for (d, det) in s.dets.iter().enumerate() {
            flat.push((f, d, det.score));
        }
    }
    flat.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    let mut matched: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.gts.len()]).collect();
    let mut is_tp: Vec<bool> = Vec::with_capacity(flat.len());
    for &(f, d, _) in &flat {
        let s = &samples[f];
        let det = &s.dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in s.gts.iter().enumerate() {
            if !gt.observed || matched[f][g] {
                continue;
            }
            let iou = rotated_iou(&det.bbox, &gt.bbox)?;
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                matched[f][g] = true;
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }
    // Sweep score groups: one PR point after each distinct score.
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < flat.len() {
        let score = flat[i].2;
        while i < flat.len() && flat[i].2 == score {
            if is_tp[i] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_gt as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
    }
    // Area under the precision envelope (all-point interpolation).
    let mut envelope = points.clone();
    let mut running = 0.0f64;
    for p in envelope.iter_mut().rev() {
        running = running.max(p.1);
        p.1 = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in envelope {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(Some(ap))
}

/// AP per right-open range bucket, assigning ground truths and
/// detections by the BEV distance of their centers to the ego origin.
pub fn range_bucketed_ap(
    samples: &[ApSample<'_>],
    buckets: &[(f64, f64)],
    iou_threshold: f64,
) -> Result<Vec<Option<f64>>, EvalError> {
    let mut out = Vec::with_capacity(buckets.len());
    for &(lo, hi) in buckets {
        let in_bucket = |r: f64| r >= lo && r < hi;
        let filtered: Vec<(Vec<Detection>, Vec<GtBox>)> = samples
            .iter()
            .map(|s| {
                (
                    s.dets.iter().filter(|d| in_bucket(d.bbox.bev_range())).cloned().collect(),
                    s.gts.iter().filter(|g| in_bucket(g.bbox.bev_range())).copied().collect(),
                )
            })
            .collect();
        let views: Vec<ApSample<'_>> =
            filtered.iter().map(|(d, g)| ApSample { dets: d, gts: g }).collect();
        out.push(compute_ap(&views, iou_threshold)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::seed::rng_for;
    use crate::sim::ObjectClass;
    use proptest::prelude::*;
    use rand::Rng;

    fn bx(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> Box3D {
        Box3D::new(Vec3::new(x, y, 0.0), l, w, 1.5, yaw)
    }

    fn gt(b: Box3D, observed: bool) -> GtBox {
        GtBox { object_id: 0, class: ObjectClass::Car, bbox: b, observed }
    }

    fn det(b: Box3D, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn iou_analytic_cases() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        assert!((rotated_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let far = bx(10.0, 0.0, 1.0, 1.0, 0.3);
        assert_eq!(rotated_iou(&a, &far).unwrap(), 0.0);
        let shifted = bx(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((rotated_iou(&a, &shifted).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_degenerate_box_is_an_error() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let z = bx(0.0, 0.0, 0.0, 1.0, 0.0);
        assert!(matches!(rotated_iou(&a, &z), Err(EvalError::DegenerateBox)));
    }

    /// Monte-Carlo area oracle: sample the union's bounding box.
    pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
        let corners: Vec<(f64, f64)> =
            a.bev_corners().iter().chain(b.bev_corners().iter()).copied().collect();
        let xs: Vec<f64> = corners.iter().map(|c| c.0).collect();
        let ys: Vec<f64> = corners.iter().map(|c| c.1).collect();
        let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let (y0, y1) = (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let area_bb = (x1 - x0) * (y1 - y0);
        let inside = |bbox: &Box3D, x: f64, y: f64| {
            let p = bbox.to_local(Vec3::new(x, y, bbox.center.z));
            p.x.abs() <= bbox.length / 2.0 && p.y.abs() <= bbox.width / 2.0
        };
        let mut rng = rng_for(seed, "iou-mc");
        let mut hit = 0usize;
        for _ in 0..samples {
            let x = rng.gen_range(x0..x1);
            let y = rng.gen_range(y0..y1);
            if inside(a, x, y) && inside(b, x, y) {
                hit += 1;
            }
        }
        let inter = area_bb * hit as f64 / samples as f64;
        inter / (a.bev_area() + b.bev_area() - inter)
    }

    #[test]
    fn iou_matches_monte_carlo_on_yawed_pairs() {
        let mut rng = rng_for(5, "iou/pairs");
        for i in 0..20 {
            let a = bx(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(2.0..5.0), rng.gen_range(1.0..3.0), rng.gen_range(-3.0..3.0));
            let b = bx(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(2.0..5.0), rng.gen_range(1.0..3.0), rng.gen_range(-3.0..3.0));
            let exact = rotated_iou(&a, &b).unwrap();
            let mc = monte_carlo_iou(&a, &b, 200_000, i);
            assert!((exact - mc).abs() < 0.01, "exact {exact} vs mc {mc}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn iou_is_symmetric_and_yaw_invariant(seed in 0u64..4000) {
            let mut rng = rng_for(seed, "prop/iou");
            let a = bx(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(1.0..5.0), rng.gen_range(1.0..4.0), rng.gen_range(-3.0..3.0));
            let b = bx(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(1.0..5.0), rng.gen_range(1.0..4.0), rng.gen_range(-3.0..3.0));
            let ab = rotated_iou(&a, &b).unwrap();
            let ba = rotated_iou(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            // Rotating both boxes about the origin leaves IoU unchanged.
            let phi = rng.gen_range(-3.0..3.0);
            let rot = |bb: &Box3D| {
                let (s, c) = f64::sin_cos(phi);
                bx(
                    c * bb.center.x - s * bb.center.y,
                    s * bb.center.x + c * bb.center.y,
                    bb.length,
                    bb.width,
                    bb.yaw + phi,
                )
            };
            let rotated = rotated_iou(&rot(&a), &rot(&b)).unwrap();
            prop_assert!((ab - rotated).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_examples() {
        let a = det(bx(0.0, 0.0, 4.0, 2.0, 0.0), 0.9);
        let b = det(bx(20.0, 0.0, 4.0, 2.0, 0.0), 0.8);
        let kept = nms(&[a.clone(), b.clone()], 0.5).unwrap();
        assert_eq!(kept.len(), 2);

        let dup = det(bx(0.0, 0.0, 4.0, 2.0, 0.0), 0.8);
        let kept = nms(&[a.clone(), dup], 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        // Kept set comes out in descending score order.
        let kept = nms(&[b, a], 0.5).unwrap();
        assert!(kept[0].score >= kept[1].score);
    }

    #[test]
    fn ap_trivial_cases() {
        let g = [gt(bx(0.0, 0.0, 4.0, 2.0, 0.0), true), gt(bx(10.0, 0.0, 4.0, 2.0, 0.0), true)];
        let perfect = [det(g[0].bbox, 0.9), det(g[1].bbox, 0.8)];
        let s = [ApSample { dets: &perfect, gts: &g }];
        assert_eq!(compute_ap(&s, 0.5).unwrap(), Some(1.0));

        let none: [Detection; 0] = [];
        let s = [ApSample { dets: &none, gts: &g }];
        assert_eq!(compute_ap(&s, 0.5).unwrap(), Some(0.0));

        let no_gts: [GtBox; 0] = [];
        let s = [ApSample { dets: &perfect, gts: &no_gts }];
        assert_eq!(compute_ap(&s, 0.5).unwrap(), None);
    }

    #[test]
    fn ap_hand_computed_pr_curve() {
        // One gt; a confident miss at 0.9 then a hit at 0.8. Precision
        // at full recall is 1/2, so all-point AP is 0.5.
        let g = [gt(bx(0.0, 0.0, 4.0, 2.0, 0.0), true)];
        let dets = [det(bx(30.0, 0.0, 4.0, 2.0, 0.0), 0.9), det(g[0].bbox, 0.8)];
        let s = [ApSample { dets: &dets, gts: &g }];
        let ap = compute_ap(&s, 0.5).unwrap().unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_ignores_order_of_equal_scores() {
        let g = [gt(bx(0.0, 0.0, 4.0, 2.0, 0.0), true)];
        let hit = det(g[0].bbox, 0.5);
        let miss = det(bx(30.0, 0.0, 4.0, 2.0, 0.0), 0.5);
        let s1 = [ApSample { dets: &[hit.clone(), miss.clone()], gts: &g }];
        let s2 = [ApSample { dets: &[miss, hit], gts: &g }];
        assert_eq!(compute_ap(&s1, 0.5).unwrap(), compute_ap(&s2, 0.5).unwrap());
    }

    #[test]
    fn unobserved_gts_are_excluded() {
        let g = [gt(bx(0.0, 0.0, 4.0, 2.0, 0.0), true), gt(bx(50.0, 0.0, 4.0, 2.0, 0.0), false)];
        let dets = [det(g[0].bbox, 0.9)];
        let s = [ApSample { dets: &dets, gts: &g }];
        assert_eq!(compute_ap(&s, 0.5).unwrap(), Some(1.0));
    }

    #[test]
    fn bucket_assignment_uses_right_open_intervals() {
        let buckets = [(0.0, 30.0), (30.0, 50.0), (50.0, 100.0)];
        // A gt exactly at 30 m goes to the second bucket.
        let g = [gt(bx(30.0, 0.0, 4.0, 2.0, 0.0), true)];
        let dets = [det(g[0].bbox, 0.9)];
        let s = [ApSample { dets: &dets, gts: &g }];
        let per = range_bucketed_ap(&s, &buckets, 0.5).unwrap();
        assert_eq!(per[0], None);
        assert_eq!(per[1], Some(1.0));
        assert_eq!(per[2], None);
    }

    #[test]
    fn buckets_cover_the_overall_set() {
        let g = [
            gt(bx(10.0, 0.0, 4.0, 2.0, 0.0), true),
            gt(bx(40.0, 0.0, 4.0, 2.0, 0.0), true),
            gt(bx(70.0, 0.0, 4.0, 2.0, 0.0), true),
        ];
        let dets = [det(g[0].bbox, 0.9), det(g[1].bbox, 0.8), det(g[2].bbox, 0.7)];
        let s = [ApSample { dets: &dets, gts: &g }];
        let buckets = [(0.0, 30.0), (30.0, 50.0), (50.0, 100.0)];
        let per = range_bucketed_ap(&s, &buckets, 0.5).unwrap();
        assert!(per.iter().all(|ap| *ap == Some(1.0)));
        assert_eq!(compute_ap(&s, 0.5).unwrap(), Some(1.0));
    }
}
