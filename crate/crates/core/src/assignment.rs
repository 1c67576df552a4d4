//! Minimum-cost perfect matching on a square cost matrix (Hungarian method
//! with row/column potentials, O(n^3)).

/// Optimal assignment with its dual certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `col_of[row]`.
    pub col_of: Vec<usize>,
    pub cost: f64,
    /// Dual potentials: `u[i] + v[j] <= cost(i, j)` with equality on the matching.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Assignment {
    /// Lower bound on any assignment's cost from LP duality.
    pub fn dual_bound(&self) -> f64 {
        self.u.iter().sum::<f64>() + self.v.iter().sum::<f64>()
    }
}

/// `cost` is row-major `n x n`.
pub fn hungarian(cost: &[f64], n: usize) -> Assignment {
    assert_eq!(cost.len(), n * n, "square cost matrix");
    if n == 0 {
        return Assignment {
            col_of: Vec::new(),
            cost: 0.0,
            u: Vec::new(),
            v: Vec::new(),
        };
    }
    let c = |i: usize, j: usize| cost[(i - 1) * n + (j - 1)];
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[i * n + col_of[i]]).sum();
    Assignment {
        col_of,
        cost: total,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..=7 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect();
                let a = hungarian(&cost, n);
                assert!((a.cost - brute(&cost, n)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dual_certificate_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40;
        let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = hungarian(&cost, n);
        for i in 0..n {
            for j in 0..n {
                assert!(a.u[i] + a.v[j] <= cost[i * n + j] + 1e-9);
            }
        }
        assert!((a.dual_bound() - a.cost).abs() < 1e-9);
    }
}
