//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use mtan::tasks::{LabelMap, MetricReport, TaskKind, TaskSpec};
use mtan::tensor::Tensor;
use rand::Rng;

/// Segmentation metrics by scanning pixels per class, with no confusion matrix.
pub fn brute_seg(pred: &Tensor, ids: &[Option<u32>], classes: usize) -> (f64, f64) {
    let (b, c, h, w) = (pred.dims()[0], pred.dims()[1], pred.dims()[2], pred.dims()[3]);
    let hw = h * w;
    let mut labels = Vec::new();
    for bi in 0..b {
        for p in 0..hw {
            let Some(gt) = ids[bi * hw + p] else { continue };
            let mut best = 0;
            for ci in 1..c {
                if pred.data()[(bi * c + ci) * hw + p] > pred.data()[(bi * c + best) * hw + p] {
                    best = ci;
                }
            }
            labels.push((gt as usize, best));
        }
    }
    let correct = labels.iter().filter(|(g, p)| g == p).count();
    let mut ious = Vec::new();
    for class in 0..classes {
        let inter = labels.iter().filter(|(g, p)| *g == class && *p == class).count();
        let union = labels.iter().filter(|(g, p)| *g == class || *p == class).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    (ious.iter().sum::<f64>() / ious.len() as f64, correct as f64 / labels.len() as f64)
}

pub fn brute_depth(pred: &Tensor, gt: &Tensor, valid: &[bool]) -> (f64, f64) {
    let pairs: Vec<(f64, f64)> = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|((p, g), _)| (*p, *g))
        .collect();
    let abs = pairs.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / pairs.len() as f64;
    let rel_pairs: Vec<_> = pairs.iter().filter(|(_, g)| *g >= 1e-6).collect();
    let rel = rel_pairs.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / rel_pairs.len() as f64;
    (abs, rel)
}

pub fn brute_angles(pred: &Tensor, gt: &Tensor, valid: &[bool]) -> Vec<f64> {
    let (b, h, w) = (pred.dims()[0], pred.dims()[2], pred.dims()[3]);
    let hw = h * w;
    let mut out = Vec::new();
    for bi in 0..b {
        for p in 0..hw {
            if !valid[bi * hw + p] {
                continue;
            }
            let at = |t: &Tensor, c: usize| t.data()[(bi * 3 + c) * hw + p];
            let dot = at(pred, 0) * at(gt, 0) + at(pred, 1) * at(gt, 1) + at(pred, 2) * at(gt, 2);
            out.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    out
}

/// `[mean, median, <=11.25, <=22.5, <=30]` of a set of angles in degrees.
pub fn angle_summary(angles: &[f64]) -> [f64; 5] {
    let n = angles.len();
    let mut s = angles.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
    let frac = |t: f64| angles.iter().filter(|&&a| a <= t).count() as f64 / n as f64;
    [angles.iter().sum::<f64>() / n as f64, median, frac(11.25), frac(22.5), frac(30.0)]
}

/// Full report by the brute-force routines above, in `MetricReport::COLUMNS` order.
pub fn brute_report(preds: &[Tensor], labels: &[LabelMap], specs: &[TaskSpec]) -> [Option<f64>; 9] {
    let mut out = [None; 9];
    for ((pred, label), spec) in preds.iter().zip(labels).zip(specs) {
        match (spec.kind, label) {
            (TaskKind::Segmentation { classes }, LabelMap::Segmentation { ids, .. }) => {
                let (miou, acc) = brute_seg(pred, ids, classes);
                out[0] = Some(miou);
                out[1] = Some(acc);
            }
            (TaskKind::Depth, LabelMap::Depth { values, valid }) => {
                let (abs, rel) = brute_depth(pred, values, valid);
                out[2] = Some(abs);
                out[3] = Some(rel);
            }
            (TaskKind::Normals, LabelMap::Normals { values, valid }) => {
                let s = angle_summary(&brute_angles(pred, values, valid));
                for i in 0..5 {
                    out[4 + i] = Some(s[i]);
                }
            }
            _ => panic!("label kind mismatch"),
        }
    }
    out
}

/// Unit vectors `[B, 3, H, W]` drawn uniformly on the sphere.
pub fn random_normals(b: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let hw = h * w;
    let mut data = vec![0.0; b * 3 * hw];
    for bi in 0..b {
        for p in 0..hw {
            let v = loop {
                let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 0.1 && n <= 1.0 {
                    break v.map(|x| x / n);
                }
            };
            for c in 0..3 {
                data[(bi * 3 + c) * hw + p] = v[c];
            }
        }
    }
    Tensor::new(vec![b, 3, h, w], data).unwrap()
}

/// Random predictions and labels for seg(`classes`) + depth + normals on
/// `b x h x w` maps, with roughly 10% of pixels ignored.
pub fn random_case(
    classes: usize,
    b: usize,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> (Vec<Tensor>, Vec<LabelMap>, Vec<TaskSpec>) {
    let n = b * h * w;
    // Coarse logits make argmax ties likely, exercising tie-breaking.
    let logits: Vec<f64> = (0..b * classes * h * w).map(|_| rng.random_range(0..4) as f64).collect();
    let ids: Vec<Option<u32>> = (0..n)
        .map(|_| rng.random_bool(0.9).then(|| rng.random_range(0..classes as u32)))
        .collect();
    let depth_pred = Tensor::new(vec![b, 1, h, w], (0..n).map(|_| rng.random_range(0.5..3.0)).collect()).unwrap();
    let depth_gt = Tensor::new(vec![b, 1, h, w], (0..n).map(|_| rng.random_range(0.5..3.0)).collect()).unwrap();
    let valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
    let normals_pred = random_normals(b, h, w, rng);
    let normals_gt = random_normals(b, h, w, rng);
    let normal_valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
    let specs = vec![TaskSpec::segmentation(classes), TaskSpec::depth(), TaskSpec::normals()];
    let labels = vec![
        LabelMap::segmentation(b, h, w, ids).unwrap(),
        LabelMap::depth(depth_gt, valid).unwrap(),
        LabelMap::normals(normals_gt, normal_valid).unwrap(),
    ];
    let preds = vec![Tensor::new(vec![b, classes, h, w], logits).unwrap(), depth_pred, normals_pred];
    (preds, labels, specs)
}

/// Compare a report against the brute-force oracle bit for bit.
pub fn report_matches(report: &MetricReport, oracle: &[Option<f64>; 9]) -> bool {
    report
        .values()
        .iter()
        .zip(oracle)
        .all(|(a, b)| a.map(f64::to_bits) == b.map(f64::to_bits))
}
