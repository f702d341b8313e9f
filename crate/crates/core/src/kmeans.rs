//! Seeded k-means with k-means++ seeding over flattened masks.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::BinaryMask;
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 50;
/// Masks larger than this on either side are block-averaged before clustering.
pub const MAX_FEATURE_SIDE: usize = 64;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centre; equal distances go to the lowest index.
fn nearest(p: &[f64], centres: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centres.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Flattened mask, block-averaged so neither side exceeds [`MAX_FEATURE_SIDE`].
pub fn mask_features(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.shape();
    let fy = h.div_ceil(MAX_FEATURE_SIDE).max(1);
    let fx = w.div_ceil(MAX_FEATURE_SIDE).max(1);
    if fy == 1 && fx == 1 {
        return mask.to_f64();
    }
    let (ho, wo) = (h.div_ceil(fy), w.div_ceil(fx));
    let mut sums = vec![0.0; ho * wo];
    let mut counts = vec![0.0; ho * wo];
    for r in 0..h {
        for c in 0..w {
            let i = (r / fy) * wo + c / fx;
            sums[i] += f64::from(u8::from(mask.get(r, c)));
            counts[i] += 1.0;
        }
    }
    sums.iter().zip(&counts).map(|(s, n)| s / n).collect()
}

/// Cluster assignment of each point; every cluster is non-empty.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("k-means needs 1 ≤ K ≤ N, got K={k}, N={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = vec![points[rng.gen_range(0..n)].clone()];
    while centres.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centres).1).collect();
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(&mut rng),
            // every point coincides with a centre; repair below separates them
            Err(_) => centres.len() % n,
        };
        centres.push(points[next].clone());
    }

    let mut assign: Vec<usize> = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centres).0).collect();
        repair_empty(points, &centres, &mut next, k);
        if next == assign {
            break;
        }
        assign = next;
        centres = (0..k)
            .map(|c| {
                let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                let mut mean = vec![0.0; points[0].len()];
                for m in &members {
                    for (acc, v) in mean.iter_mut().zip(m.iter()) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= members.len() as f64);
                mean
            })
            .collect();
    }
    Ok(assign)
}

/// Moves the member farthest from the largest cluster's centre into each empty cluster.
fn repair_empty(points: &[Vec<f64>], centres: &[Vec<f64>], assign: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        // largest cluster, lowest index on ties
        let largest = (0..k).fold(0, |best, c| if sizes[c] > sizes[best] { c } else { best });
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if assign[i] == largest {
                let d = sq_dist(p, &centres[largest]);
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
        }
        assign[far.expect("largest cluster has members")] = empty;
    }
}
