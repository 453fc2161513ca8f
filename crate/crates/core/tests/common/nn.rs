//! Brute-force nearest-neighbour label propagation over stride-16 cells.

use msdeaot::Tensor;

/// Per-cell features as the template encoder sees them: mean colour of the
/// 16×16 cell, expanded to `width` channels, layer-normalized and scaled so
/// that a dot product equals the template's matching score up to a constant.
pub fn cell_features(frame: &Tensor, width: usize) -> Vec<Vec<f64>> {
    let (rows, cols) = (frame.shape()[0] / 16, frame.shape()[1] / 16);
    let mut out = Vec::with_capacity(rows * cols);
    for cy in 0..rows {
        for cx in 0..cols {
            let mut rgb = [0f64; 3];
            for y in 0..16 {
                for x in 0..16 {
                    for (c, acc) in rgb.iter_mut().enumerate() {
                        *acc += frame.at3(cy * 16 + y, cx * 16 + x, c) as f64 / 256.0;
                    }
                }
            }
            let v: Vec<f64> = (0..width).map(|i| rgb[i % 3]).collect();
            let mean = v.iter().sum::<f64>() / width as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / width as f64;
            let d = (var + 1e-5).sqrt() * (width as f64).sqrt();
            out.push(v.iter().map(|x| (x - mean) / d).collect());
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Label distribution of the best-matching keys; exact-match ties share
/// the vote equally.
fn nearest_votes(query: &[f64], keys: &[(&[f64], u8)], labels: usize) -> Vec<f64> {
    let sims: Vec<f64> = keys.iter().map(|(k, _)| dot(k, query)).collect();
    let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut votes = vec![0.0; labels];
    let mut n = 0.0;
    for (s, (_, l)) in sims.iter().zip(keys) {
        if best - s < 1e-4 {
            votes[*l as usize] += 1.0;
            n += 1.0;
        }
    }
    votes.iter().map(|v| v / n).collect()
}

/// Brute-force nearest-neighbour propagation at stride 16 for frame `t`,
/// with `memory_labels(s)` giving the cell labels of earlier frame `s`.
/// Returns per-cell label scores as the two-layer template accumulates them.
pub fn propagation_scores(
    feats: &[Vec<Vec<f64>>],
    memory_labels: &dyn Fn(usize) -> Vec<u8>,
    t: usize,
    grid: (usize, usize),
    interval: usize,
    radius: usize,
    labels: usize,
) -> Vec<Vec<f64>> {
    let cells = grid.0 * grid.1;
    let long: Vec<usize> = (0..t).filter(|s| s % interval == 0).collect();
    let long_labels: Vec<(usize, Vec<u8>)> = long.iter().map(|&s| (s, memory_labels(s))).collect();
    let short_labels = memory_labels(t - 1);
    let propagated: Vec<Vec<f64>> = (0..cells)
        .map(|i| {
            let q = &feats[t][i];
            let long_keys: Vec<(&[f64], u8)> = long_labels
                .iter()
                .flat_map(|(s, l)| (0..cells).map(move |j| (feats[*s][j].as_slice(), l[j])))
                .collect();
            let (y, x) = (i / grid.1, i % grid.1);
            let short_keys: Vec<(&[f64], u8)> = (0..cells)
                .filter(|j| (j / grid.1).abs_diff(y) <= radius && (j % grid.1).abs_diff(x) <= radius)
                .map(|j| (feats[t - 1][j].as_slice(), short_labels[j]))
                .collect();
            let a = nearest_votes(q, &long_keys, labels);
            let b = nearest_votes(q, &short_keys, labels);
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        })
        .collect();
    // The second layer adds a self-match over the first layer's output.
    (0..cells)
        .map(|i| {
            let sims: Vec<f64> = (0..cells).map(|j| dot(&feats[t][j], &feats[t][i])).collect();
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let peers: Vec<usize> = (0..cells).filter(|&j| best - sims[j] < 1e-4).collect();
            (0..labels)
                .map(|k| {
                    2.0 * propagated[i][k] + peers.iter().map(|&j| propagated[j][k]).sum::<f64>() / peers.len() as f64
                })
                .collect()
        })
        .collect()
}

/// Labels tying for the best score.
pub fn best_labels(scores: &[f64]) -> Vec<u8> {
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..scores.len() as u8)
        .filter(|&k| top - scores[k as usize] < 1e-9)
        .collect()
}
