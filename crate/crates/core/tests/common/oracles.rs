//! Brute-force references shared by the oracle suites.

use predann::teacher::KMeansCodebook;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Smallest within-cluster sum of squares over every assignment of `n`
/// points to `k` labels.
pub fn exhaustive_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    loop {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for d in 0..dim {
                sums[l][d] += p[d];
            }
        }
        let cost: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| {
                let mean: Vec<f64> = sums[l].iter().map(|s| s / counts[l] as f64).collect();
                sq_dist(p, &mean)
            })
            .sum();
        best = best.min(cost);
        // Next assignment in base-k counting order.
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

pub fn codebook_inertia(cb: &KMeansCodebook, points: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| {
            let f: Vec<f32> = p.iter().map(|&x| x as f32).collect();
            let c: Vec<f64> = cb.centroid(cb.nearest(&f)).iter().map(|&x| x as f64).collect();
            sq_dist(p, &c)
        })
        .sum()
}

/// Bin populations from sorting: rank `r` of `n` goes to bin `floor(r·B/n)`.
pub fn rank_populations(n: usize, bins: usize) -> Vec<i64> {
    let mut out = vec![0i64; bins];
    for r in 0..n {
        out[r * bins / n] += 1;
    }
    out
}

/// Doubled smaller binomial tail with exact integer coefficients.
pub fn mcnemar_oracle(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    let mut coef: u128 = 1;
    let mut tail: u128 = 0;
    for i in 0..=k {
        if i > 0 {
            coef = coef * (n - i + 1) as u128 / i as u128;
        }
        tail += coef;
    }
    (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0)
}

/// Largest frame index whose start time `i / rate` is at or before `num / den` seconds.
pub fn frame_at(num: u64, den: u64, rate: u64) -> usize {
    let mut i = 0u64;
    while (i + 1) * den <= num * rate {
        i += 1;
    }
    i as usize
}

/// Segment starts from scanning every frame.
pub fn brute_segments(t: usize, len: usize, hop: usize) -> Vec<(usize, usize)> {
    (0..t).filter(|s| s % hop == 0 && s + len <= t).map(|s| (s, s + len)).collect()
}
