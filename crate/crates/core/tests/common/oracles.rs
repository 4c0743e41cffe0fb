//! Independent oracles shared by the test suites and the acceptance run.

use std::fs;
use std::path::Path;

use trainforge_core::dataset::Record;
use trainforge_core::models::stumps::TIE_TOLERANCE;
use trainforge_core::models::{tokenize, Stump};
use trainforge_core::trainer::GradientModel;

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// `|a - n| / (|a| + |n|)` over `coords`, numeric by central differences.
pub fn grad_rel_error(model: &dyn GradientModel, params: &[f64], batch: &[usize], coords: &[usize]) -> f64 {
    let analytic = model.loss_and_grad(params, batch).grad;
    let mut p = params.to_vec();
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for &i in coords {
        let orig = p[i];
        p[i] = orig + GRAD_H;
        let plus = model.loss_and_grad(&p, batch).loss;
        p[i] = orig - GRAD_H;
        let minus = model.loss_and_grad(&p, batch).loss;
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * GRAD_H);
        diff += (analytic[i] - numeric).powi(2);
        na += analytic[i].powi(2);
        nn += numeric.powi(2);
    }
    assert!(na > 0.0, "gradient vanished on the checked coordinates");
    diff.sqrt() / (na.sqrt() + nn.sqrt())
}

/// Plain perceptron on token counts; returns true once an epoch makes no
/// mistakes.
pub fn perceptron_separates(records: &[Record]) -> bool {
    let mut vocab: Vec<String> = records
        .iter()
        .flat_map(|r| tokenize(r["text"].as_str().unwrap()))
        .collect();
    vocab.sort();
    vocab.dedup();
    let mut w = vec![0.0; vocab.len() + 1];
    for _ in 0..100 {
        let mut mistakes = 0;
        for r in records {
            let mut x = vec![0.0; vocab.len() + 1];
            x[vocab.len()] = 1.0;
            for t in tokenize(r["text"].as_str().unwrap()) {
                x[vocab.binary_search(&t).unwrap()] += 1.0;
            }
            let y = if r["label"] == "A" { 1.0 } else { -1.0 };
            let score: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            if y * score <= 0.0 {
                mistakes += 1;
                for (wi, xi) in w.iter_mut().zip(&x) {
                    *wi += y * xi;
                }
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

/// Every (feature, midpoint) candidate in (feature, threshold) order, SSE
/// computed directly; a later candidate must beat the incumbent by more
/// than the tie tolerance.
pub fn brute_force_stump(x: &[Vec<f64>], r: &[f64]) -> Stump {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let energy: f64 = r.iter().map(|v| v * v).sum();
    let tol = TIE_TOLERANCE * energy.max(1.0);
    let mut best: Option<(f64, Stump)> = None;
    for j in 0..x[0].len() {
        let mut values: Vec<f64> = x.iter().map(|row| row[j]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = w[0] + (w[1] - w[0]) / 2.0;
            let left: Vec<f64> = (0..r.len()).filter(|&i| x[i][j] <= t).map(|i| r[i]).collect();
            let right: Vec<f64> = (0..r.len()).filter(|&i| x[i][j] > t).map(|i| r[i]).collect();
            let ml = left.iter().sum::<f64>() / left.len() as f64;
            let mr = right.iter().sum::<f64>() / right.len() as f64;
            let sse: f64 =
                left.iter().map(|v| (v - ml).powi(2)).sum::<f64>() + right.iter().map(|v| (v - mr).powi(2)).sum::<f64>();
            let candidate = Stump {
                feature: j,
                threshold: t,
                left: ml,
                right: mr,
            };
            match &best {
                Some((b, _)) if sse >= b - tol => {}
                _ => best = Some((sse, candidate)),
            }
        }
    }
    best.map(|(_, s)| s).unwrap_or(Stump {
        feature: 0,
        threshold: x[0][0],
        left: mean,
        right: mean,
    })
}

pub fn same_stump(a: &Stump, b: &Stump) -> bool {
    a.feature == b.feature
        && a.threshold == b.threshold
        && (a.left - b.left).abs() <= 1e-9 * a.left.abs().max(1.0)
        && (a.right - b.right).abs() <= 1e-9 * a.right.abs().max(1.0)
}

/// Files under `root` whose bytes contain `needle`.
pub fn files_containing(root: &Path, needle: &[u8]) -> Vec<String> {
    let mut hits = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if fs::read(&path).unwrap().windows(needle.len()).any(|w| w == needle) {
                hits.push(path.display().to_string());
            }
        }
    }
    hits
}
