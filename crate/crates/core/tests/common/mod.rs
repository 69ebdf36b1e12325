//! Reference implementations written independently of the library code, used
//! as oracles by the property tests and the acceptance suite.
#![allow(dead_code)]

/// Frame-by-frame integrate-and-fire. Each frame's weight is poured into unit
/// cells; a cell fires when full and any remainder spills into the next one.
/// Exactly `cells` vectors come out: mass past the last cell is dropped and a
/// last cell that never filled is emitted as it stands.
pub fn cif_scalar(weights: &[f64], content: &[Vec<f64>], cells: usize) -> Vec<Vec<f64>> {
    let d = content.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    let mut acc = vec![0.0; d];
    let mut fill = 0.0;
    'frames: for (w, h) in weights.iter().zip(content) {
        let mut left = *w;
        while left > 0.0 {
            if out.len() == cells {
                break 'frames;
            }
            let room = 1.0 - fill;
            let take = left.min(room);
            for (a, x) in acc.iter_mut().zip(h) {
                *a += take * x;
            }
            fill += take;
            left -= take;
            if take == room {
                out.push(std::mem::replace(&mut acc, vec![0.0; d]));
                fill = 0.0;
            }
        }
    }
    if out.len() < cells {
        out.push(acc);
    }
    while out.len() < cells {
        out.push(vec![0.0; d]);
    }
    out
}

/// Probability of `target` under per-frame distributions `probs[t][k]` (blank
/// is the last column), summed over every frame labelling that collapses to it.
pub fn ctc_brute_force(probs: &[Vec<f64>], target: &[usize]) -> f64 {
    let t_len = probs.len();
    let k = probs[0].len();
    let blank = k - 1;
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != blank {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &s)| probs[t][s])
                .product::<f64>();
        }
        // Odometer increment over all k^T labellings.
        let mut i = 0;
        loop {
            if i == t_len {
                return total;
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Minimum edit script length found by trying every insertion, deletion and
/// substitution sequence, with no memoization.
pub fn edit_distance_exhaustive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a, b) {
        ([], _) => b.len(),
        (_, []) => a.len(),
        ([x, ra @ ..], [y, rb @ ..]) => {
            let keep = edit_distance_exhaustive(ra, rb) + usize::from(x != y);
            let del = edit_distance_exhaustive(ra, b) + 1;
            let ins = edit_distance_exhaustive(a, rb) + 1;
            keep.min(del).min(ins)
        }
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}
