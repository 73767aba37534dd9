//! Brute-force reference solutions for tiny clustering instances.
//!
//! Kept free of any `tokpool` clustering code so the checks stay independent.

#![allow(dead_code)]

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum of `sum_i min_j ||x_i - c_j||^2` over all partitions of `points`
/// into `k` non-empty clusters with centroid centers.
pub fn kmeans_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        if sizes.iter().all(|&s| s > 0) {
            let mut cost = 0.0;
            for j in 0..k {
                let mut mean = vec![0.0; dim];
                for (p, &l) in points.iter().zip(&labels) {
                    if l == j {
                        for (m, v) in mean.iter_mut().zip(p) {
                            *m += v;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= sizes[j] as f64);
                for (p, &l) in points.iter().zip(&labels) {
                    if l == j {
                        cost += sq(p, &mean);
                    }
                }
            }
            best = best.min(cost);
        }
        // next label vector in base k
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Minimum Chamfer loss over every choice of `k` distinct input points as
/// centers.
pub fn kmedoids_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    fn rec(points: &[Vec<f64>], k: usize, start: usize, chosen: &mut Vec<usize>, best: &mut f64) {
        if chosen.len() == k {
            let cost: f64 = points
                .iter()
                .map(|p| chosen.iter().map(|&c| sq(p, &points[c])).fold(f64::INFINITY, f64::min))
                .sum();
            *best = best.min(cost);
            return;
        }
        for i in start..points.len() {
            chosen.push(i);
            rec(points, k, i + 1, chosen, best);
            chosen.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(points, k, 0, &mut Vec::new(), &mut best);
    best
}

/// Small deterministic generator (64-bit LCG) for fixtures.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }
}

/// Random cloud of `n` points in `dim` dimensions.
pub fn random_points(rng: &mut Lcg, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.range(-5.0, 5.0)).collect()).collect()
}

/// Two tight, far-apart blobs. Point 0 lies in the first blob and point 1 in
/// the second, so a first-two-tokens initialisation seeds both blobs.
pub fn two_blobs(rng: &mut Lcg, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let blob = if i < 2 { i } else { rng.below(2) };
        let center = if blob == 0 { -50.0 } else { 50.0 };
        pts.push((0..dim).map(|_| center + rng.range(-1.0, 1.0)).collect());
    }
    pts
}
