//! Region similarity J, boundary measure F, and their aggregation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::idmech::LabelMask;

/// Boundary tolerance as a fraction of the image diagonal.
pub const BOUNDARY_TOLERANCE_FRACTION: f64 = 0.008;

/// Default tolerance in pixels: 0.8% of the diagonal, rounded up.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    let diag = ((height * height + width * width) as f64).sqrt();
    (BOUNDARY_TOLERANCE_FRACTION * diag).ceil()
}

fn check_shapes(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::dim(format!(
            "prediction {:?} and ground truth {:?} differ in size",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// IoU of the binary masks of `object`; 1.0 when both are empty.
pub fn region_similarity(pred: &LabelMask, gt: &LabelMask, object: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p == object, g == object);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Object pixels with at least one 4-neighbour outside the object. Pixels on
/// the image border count as boundary.
pub fn inner_boundary(mask: &LabelMask, object: u8) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize) == object
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            if inside(yi, xi) && !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1))
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// Fraction of `from` pixels within `tolerance` (Euclidean) of any `to` pixel.
fn matched_fraction(from: &[(usize, usize)], to: &[(usize, usize)], tolerance: f64) -> f64 {
    let tol2 = tolerance * tolerance;
    let hits = from
        .iter()
        .filter(|&&(y, x)| {
            to.iter().any(|&(ty, tx)| {
                let dy = y as f64 - ty as f64;
                let dx = x as f64 - tx as f64;
                dy * dy + dx * dx <= tol2
            })
        })
        .count();
    hits as f64 / from.len() as f64
}

/// Boundary F-measure of `object` with a pixel distance tolerance.
pub fn boundary_f(pred: &LabelMask, gt: &LabelMask, object: u8, tolerance: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    if !(tolerance >= 0.0 && tolerance.is_finite()) {
        return Err(Error::Range(format!("tolerance must be non-negative, got {tolerance}")));
    }
    let pb = inner_boundary(pred, object);
    let gb = inner_boundary(gt, object);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_fraction(&pb, &gb, tolerance);
    let recall = matched_fraction(&gb, &pb, tolerance);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn jf_mean(j: f64, f: f64) -> Result<f64> {
    for (name, v) in [("J", j), ("F", f)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    Ok((j + f) / 2.0)
}

/// A score in [0, 1] as a percentage with one decimal. Decimal halves round
/// up (0.8555 → 85.6) even when the binary value sits just below the half.
pub fn round_percent(v: f64) -> f64 {
    (v * 1000.0 + 0.5 + 1e-7).floor() / 10.0
}

pub fn format_percent(v: f64) -> String {
    format!("{:.1}", round_percent(v))
}

/// Scores of one sequence. Frame 0 is the given reference and is not scored.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub objects: Vec<u8>,
    /// Indices of the scored frames.
    pub frames: Vec<usize>,
    /// `j[o][t]`: object `objects[o]` on frame `frames[t]`.
    pub j: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    pub mean_j: f64,
    pub mean_f: f64,
    pub jf: f64,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in v {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    pub fn object_j(&self, o: usize) -> f64 {
        mean(self.j[o].iter().copied()).unwrap_or(1.0)
    }

    pub fn object_f(&self, o: usize) -> f64 {
        mean(self.f[o].iter().copied()).unwrap_or(1.0)
    }

    /// Rows `sequence,object,frame,J,F,J&F` (percentages) followed by the
    /// sequence mean row, without a header.
    pub fn csv_rows(&self, sequence: &str, out: &mut String) {
        for (o, obj) in self.objects.iter().enumerate() {
            for (t, frame) in self.frames.iter().enumerate() {
                let (j, f) = (self.j[o][t], self.f[o][t]);
                let _ = writeln!(
                    out,
                    "{sequence},{obj},{frame},{},{},{}",
                    format_percent(j),
                    format_percent(f),
                    format_percent((j + f) / 2.0)
                );
            }
        }
        let _ = writeln!(
            out,
            "{sequence},mean,,{},{},{}",
            format_percent(self.mean_j),
            format_percent(self.mean_f),
            format_percent(self.jf)
        );
    }
}

pub const CSV_HEADER: &str = "sequence,object,frame,J,F,J&F";

/// CSV for several sequences with a final `summary` row averaging the
/// sequence means.
pub fn reports_to_csv(reports: &[(String, EvalReport)]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (name, r) in reports {
        r.csv_rows(name, &mut out);
    }
    let j = mean(reports.iter().map(|(_, r)| r.mean_j)).unwrap_or(1.0);
    let f = mean(reports.iter().map(|(_, r)| r.mean_f)).unwrap_or(1.0);
    let _ = writeln!(
        out,
        "summary,,,{},{},{}",
        format_percent(j),
        format_percent(f),
        format_percent((j + f) / 2.0)
    );
    out
}

/// Scores every frame after the first. Objects are all labels present in
/// either sequence; per-object scores are averaged over frames, then over
/// objects. `tolerance` defaults to [`default_tolerance`].
pub fn evaluate_sequence(preds: &[LabelMask], gts: &[LabelMask], tolerance: Option<f64>) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::dim(format!(
            "{} predicted frames but {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    if gts.len() < 2 {
        return Err(Error::Argument(
            "evaluation needs at least one frame after the reference".into(),
        ));
    }
    let (h, w) = gts[0].dims();
    for (t, (p, g)) in preds.iter().zip(gts).enumerate() {
        if g.dims() != (h, w) || p.dims() != (h, w) {
            return Err(Error::dim(format!("frame {t} does not match the size of frame 0")));
        }
    }
    let tolerance = tolerance.unwrap_or_else(|| default_tolerance(h, w));
    let mut present = [false; 256];
    for m in gts.iter().chain(&preds[1..]) {
        for id in m.object_ids() {
            present[id as usize] = true;
        }
    }
    let objects: Vec<u8> = (1..=255u8).filter(|&l| present[l as usize]).collect();
    let frames: Vec<usize> = (1..gts.len()).collect();
    let mut j = Vec::with_capacity(objects.len());
    let mut f = Vec::with_capacity(objects.len());
    for &obj in &objects {
        j.push(
            frames
                .iter()
                .map(|&t| region_similarity(&preds[t], &gts[t], obj))
                .collect::<Result<Vec<_>>>()?,
        );
        f.push(
            frames
                .iter()
                .map(|&t| boundary_f(&preds[t], &gts[t], obj, tolerance))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mut report = EvalReport {
        objects,
        frames,
        j,
        f,
        mean_j: 1.0,
        mean_f: 1.0,
        jf: 1.0,
    };
    let n = report.objects.len();
    if n > 0 {
        report.mean_j = mean((0..n).map(|o| report.object_j(o))).expect("non-empty");
        report.mean_f = mean((0..n).map(|o| report.object_f(o))).expect("non-empty");
    }
    report.jf = jf_mean(report.mean_j, report.mean_f)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize, label: u8) -> LabelMask {
        LabelMask::from_fn(h, w, |y, x| {
            if (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x) {
                label
            } else {
                0
            }
        })
    }

    /// Boundary as the object minus its 4-neighbourhood erosion, with
    /// distances checked by scanning integer offsets inside the tolerance disk.
    fn f_oracle(pred: &LabelMask, gt: &LabelMask, obj: u8, tol: f64) -> f64 {
        let (h, w) = pred.dims();
        let boundary = |m: &LabelMask| {
            let inside = |y: i64, x: i64| {
                (0..h as i64).contains(&y) && (0..w as i64).contains(&x) && m.get(y as usize, x as usize) == obj
            };
            let mut b = vec![false; h * w];
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let eroded = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
                        .iter()
                        .all(|&(dy, dx)| inside(y + dy, x + dx));
                    b[(y as usize) * w + x as usize] = inside(y, x) && !eroded;
                }
            }
            b
        };
        let (pb, gb) = (boundary(pred), boundary(gt));
        let r = tol.floor() as i64;
        let near = |b: &[bool], y: i64, x: i64| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if ((dy * dy + dx * dx) as f64) <= tol * tol
                        && (0..h as i64).contains(&yy)
                        && (0..w as i64).contains(&xx)
                        && b[yy as usize * w + xx as usize]
                    {
                        return true;
                    }
                }
            }
            false
        };
        let frac = |from: &[bool], to: &[bool]| {
            let (mut n, mut hit) = (0, 0);
            for i in 0..h * w {
                if from[i] {
                    n += 1;
                    hit += near(to, (i / w) as i64, (i % w) as i64) as usize;
                }
            }
            (n, hit as f64 / n.max(1) as f64)
        };
        let (np, p) = frac(&pb, &gb);
        let (ng, r) = frac(&gb, &pb);
        match (np, ng) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            _ if p + r == 0.0 => 0.0,
            _ => 2.0 * p * r / (p + r),
        }
    }

    #[test]
    fn j_examples() {
        let gt = square(20, 20, 0, 0, 10, 1);
        assert_eq!(region_similarity(&gt, &gt, 1).unwrap(), 1.0);
        let other = square(20, 20, 12, 12, 5, 1);
        assert_eq!(region_similarity(&other, &gt, 1).unwrap(), 0.0);
        // 50 of the 100 gt pixels and nothing else
        let half = LabelMask::from_fn(20, 20, |y, x| (y < 5 && x < 10) as u8);
        assert_eq!(region_similarity(&half, &gt, 1).unwrap(), 0.5);
        let empty = LabelMask::filled(20, 20, 0);
        assert_eq!(region_similarity(&empty, &empty, 1).unwrap(), 1.0);
        assert!(region_similarity(&empty, &LabelMask::filled(10, 20, 0), 1).is_err());
    }

    #[test]
    fn f_examples() {
        let gt = square(20, 20, 4, 4, 8, 1);
        assert_eq!(boundary_f(&gt, &gt, 1, 1.0).unwrap(), 1.0);
        let empty = LabelMask::filled(20, 20, 0);
        assert_eq!(boundary_f(&empty, &gt, 1, 2.0).unwrap(), 0.0);
        assert_eq!(boundary_f(&empty, &empty, 1, 2.0).unwrap(), 1.0);
        let shifted = square(20, 20, 4, 5, 8, 1);
        assert_eq!(boundary_f(&shifted, &gt, 1, 1.5).unwrap(), 1.0);
        let tight = boundary_f(&shifted, &gt, 1, 0.5).unwrap();
        assert!((tight - f_oracle(&shifted, &gt, 1, 0.5)).abs() < 1e-12);
        assert!(tight < 1.0);
    }

    #[test]
    fn default_tolerance_is_rounded_up() {
        // diagonal of 64×64 is 90.5 px, 0.8% of that is 0.72
        assert_eq!(default_tolerance(64, 64), 1.0);
        assert_eq!(default_tolerance(480, 854), 8.0);
    }

    #[test]
    fn jf_mean_and_rounding() {
        assert!((jf_mean(0.817, 0.863).unwrap() - 0.84).abs() < 1e-12);
        assert_eq!(format_percent(jf_mean(0.817, 0.863).unwrap()), "84.0");
        assert_eq!(format_percent(jf_mean(0.832, 0.879).unwrap()), "85.6");
        assert_eq!(format_percent(jf_mean(0.867, 0.910).unwrap()), "88.9");
        assert_eq!(format_percent(0.12345), "12.3");
        assert_eq!(format_percent(1.0), "100.0");
        assert!(matches!(jf_mean(1.2, 0.5), Err(Error::Range(_))));
        assert!(jf_mean(0.5, -0.1).is_err());
    }

    #[test]
    fn evaluation_averages_over_frames_then_objects() {
        let gt0 = square(16, 16, 0, 0, 4, 1);
        let gt1 = LabelMask::from_fn(16, 16, |y, x| {
            if y < 4 && x < 4 {
                1
            } else if y > 10 && x > 10 {
                2
            } else {
                0
            }
        });
        let gt2 = gt1.clone();
        let pred1 = square(16, 16, 0, 0, 4, 1);
        let pred2 = gt1.clone();
        let preds = vec![gt0.clone(), pred1.clone(), pred2.clone()];
        let gts = vec![gt0, gt1.clone(), gt2.clone()];
        let r = evaluate_sequence(&preds, &gts, Some(1.0)).unwrap();
        assert_eq!(r.objects, vec![1, 2]);
        assert_eq!(r.frames, vec![1, 2]);
        let oj = |o, p: &LabelMask, g: &LabelMask| region_similarity(p, g, o).unwrap();
        let of = |o, p: &LabelMask, g: &LabelMask| boundary_f(p, g, o, 1.0).unwrap();
        let j1 = (oj(1, &pred1, &gt1) + oj(1, &pred2, &gt2)) / 2.0;
        let j2 = (oj(2, &pred1, &gt1) + oj(2, &pred2, &gt2)) / 2.0;
        let f1 = (of(1, &pred1, &gt1) + of(1, &pred2, &gt2)) / 2.0;
        let f2 = (of(2, &pred1, &gt1) + of(2, &pred2, &gt2)) / 2.0;
        assert_eq!(r.mean_j, (j1 + j2) / 2.0);
        assert_eq!(r.mean_f, (f1 + f2) / 2.0);
        assert_eq!(r.jf, (r.mean_j + r.mean_f) / 2.0);

        let perfect = evaluate_sequence(&gts, &gts, None).unwrap();
        assert_eq!((perfect.mean_j, perfect.mean_f, perfect.jf), (1.0, 1.0, 1.0));
        let single = evaluate_sequence(&preds[..2], &gts[..2], Some(1.0)).unwrap();
        assert_eq!(single.j[1], vec![oj(2, &pred1, &gt1)]);
        assert!(matches!(
            evaluate_sequence(&preds[..2], &gts, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let m = square(8, 8, 0, 0, 4, 1);
        let r = evaluate_sequence(&[m.clone(), m.clone()], &[m.clone(), m], None).unwrap();
        let csv = reports_to_csv(&[("seq".into(), r)]);
        assert_eq!(
            csv,
            "sequence,object,frame,J,F,J&F\nseq,1,1,100.0,100.0,100.0\nseq,mean,,100.0,100.0,100.0\nsummary,,,100.0,100.0,100.0\n"
        );
    }

    fn mask_strategy() -> impl Strategy<Value = (LabelMask, LabelMask)> {
        (
            proptest::collection::vec(0u8..3, 12 * 12),
            proptest::collection::vec(0u8..3, 12 * 12),
        )
            .prop_map(|(a, b)| (LabelMask::new(12, 12, a).unwrap(), LabelMask::new(12, 12, b).unwrap()))
    }

    proptest! {
        #[test]
        fn scores_are_symmetric_and_bounded((a, b) in mask_strategy(), tol in 0.0f64..3.0) {
            for obj in 1..3u8 {
                let j = region_similarity(&a, &b, obj).unwrap();
                prop_assert_eq!(j, region_similarity(&b, &a, obj).unwrap());
                let f = boundary_f(&a, &b, obj, tol).unwrap();
                prop_assert!((f - boundary_f(&b, &a, obj, tol).unwrap()).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&f));
                prop_assert!((f - f_oracle(&a, &b, obj, tol)).abs() < 1e-9);
            }
        }

        #[test]
        fn j_is_relabeling_invariant((a, b) in mask_strategy()) {
            let swap = |l: u8| match l { 1 => 2, 2 => 1, x => x };
            let (pa, pb) = (a.relabel(swap), b.relabel(swap));
            prop_assert_eq!(region_similarity(&a, &b, 1).unwrap(), region_similarity(&pa, &pb, 2).unwrap());
        }
    }
}
