//! Chamfer distance, EMD on matched subsamples, free-space violation ratio
//! and point-count error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{IoError, MetricsError};
use crate::geometry::{Point3, PointCloud};
use crate::scene::RayRecord;
use crate::spatial::GridIndex;

/// Mean distance from each point of `a` to its nearest neighbor in `b`.
pub fn one_sided_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let index = GridIndex::auto(b);
    let d: Vec<f64> = a
        .par_iter()
        .map(|p| index.nearest(p).map(|(_, d)| d).unwrap_or(f64::INFINITY))
        .collect();
    d.iter().sum::<f64>() / a.len() as f64
}

/// Symmetric Chamfer distance, mean of the two one-sided means of
/// Euclidean (not squared) nearest-neighbor distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let ab = one_sided_chamfer(&a.points, &b.points);
    let ba = one_sided_chamfer(&b.points, &a.points);
    Ok(0.5 * ab + 0.5 * ba)
}

/// Seeded farthest-point sampling of `k` indices.
pub fn farthest_point_sample(points: &[Point3], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(k);
    let mut current = rng.random_range(0..n);
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..k {
        picked.push(current);
        let c = points[current];
        dist.par_iter_mut().zip(points.par_iter()).for_each(|(d, p)| {
            *d = d.min(p.distance_sq(&c));
        });
        // farthest, lowest index on ties
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &d) in dist.iter().enumerate() {
            if d > best.1 {
                best = (i, d);
            }
        }
        current = best.0;
    }
    picked
}

/// Largest subsample the exact matching runs on.
pub const EMD_MAX_POINTS: usize = 512;

/// Mean matched Euclidean distance of a minimum-cost perfect matching
/// between equal-size farthest-point subsamples.
pub fn emd(a: &PointCloud, b: &PointCloud, max_pts: usize, seed: u64) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let n = max_pts.min(EMD_MAX_POINTS).min(a.len()).min(b.len()).max(1);
    let sa: Vec<Point3> = farthest_point_sample(&a.points, n, seed).into_iter().map(|i| a.points[i]).collect();
    let sb: Vec<Point3> = farthest_point_sample(&b.points, n, seed).into_iter().map(|i| b.points[i]).collect();
    Ok(emd_exact(&sa, &sb))
}

/// Exact mean matched distance for equal-size sets.
pub fn emd_exact(a: &[Point3], b: &[Point3]) -> f64 {
    assert_eq!(a.len(), b.len(), "equal-size sets");
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = a[i].distance(&b[j]);
        }
    }
    hungarian(&cost, n).cost / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsvrConfig {
    /// Points strictly closer than this to a GT ray are tested, meters.
    pub lateral_tol: f64,
    /// Radial allowance before a return counts as violated, meters.
    pub radial_slack: f64,
    /// Whether rays without a return take part (any point along them violates).
    pub include_misses: bool,
}

impl Default for FsvrConfig {
    fn default() -> Self {
        Self {
            lateral_tol: 0.1,
            radial_slack: 1e-3,
            include_misses: true,
        }
    }
}

impl FsvrConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lateral_tol > 0.0) || !(self.radial_slack >= 0.0) {
            return Err(format!("lateral_tol {} / radial_slack {}", self.lateral_tol, self.radial_slack));
        }
        Ok(())
    }
}

/// A generated point seen in front of a GT return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub point: usize,
    pub ray: usize,
    pub d_perp: f64,
    /// `gt_range - projection`; infinite for rays without a return.
    pub deficit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsvrResult {
    /// Percent of generated points with at least one violation.
    pub fsvr: f64,
    /// One entry per violating point: the ray with the largest deficit.
    pub violations: Vec<Violation>,
}

/// Distance from `p` to the half-line along unit `d`.
fn half_line_distance(p: &Point3, d: &Point3) -> (f64, f64) {
    let proj = p.dot(d);
    if proj > 0.0 {
        ((*p - *d * proj).norm(), proj)
    } else {
        (p.norm(), proj)
    }
}

pub fn fsvr(gen: &PointCloud, gt_rays: &[RayRecord], cfg: &FsvrConfig) -> FsvrResult {
    let rays: Vec<usize> = (0..gt_rays.len())
        .filter(|&i| cfg.include_misses || gt_rays[i].is_hit())
        .collect();
    if gen.is_empty() || rays.is_empty() {
        return FsvrResult {
            fsvr: 0.0,
            violations: Vec::new(),
        };
    }
    let dirs: Vec<Point3> = rays.iter().map(|&i| gt_rays[i].ray.direction()).collect();
    let index = GridIndex::new(&dirs, 0.02);
    let tol = cfg.lateral_tol;
    let found: Vec<Option<Violation>> = gen
        .points
        .par_iter()
        .enumerate()
        .map(|(pi, p)| {
            let r = p.norm();
            let candidates: Vec<usize> = if r <= tol {
                (0..dirs.len()).collect()
            } else {
                // rays within the angle whose lateral offset reaches tol, with a small pad
                let theta = (tol / r).asin();
                let chord = 2.0 * (0.5 * theta).sin() * (1.0 + 1e-9) + 1e-12;
                index.within(&(*p * (1.0 / r)), chord)
            };
            let mut worst: Option<Violation> = None;
            for k in candidates {
                let rec = &gt_rays[rays[k]];
                let (d_perp, proj) = half_line_distance(p, &dirs[k]);
                if !(d_perp < tol) {
                    continue;
                }
                let deficit = rec.range - proj;
                if deficit > cfg.radial_slack {
                    let v = Violation {
                        point: pi,
                        ray: rays[k],
                        d_perp,
                        deficit,
                    };
                    if worst.is_none_or(|w| v.deficit > w.deficit) {
                        worst = Some(v);
                    }
                }
            }
            worst
        })
        .collect();
    let violations: Vec<Violation> = found.into_iter().flatten().collect();
    FsvrResult {
        fsvr: 100.0 * violations.len() as f64 / gen.len() as f64,
        violations,
    }
}

/// Relative point-count error in percent.
pub fn reap(n_generated: usize, n_gt: usize) -> Result<f64, MetricsError> {
    if n_gt == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(100.0 * (n_generated as f64 - n_gt as f64).abs() / n_gt as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub fsvr: FsvrConfig,
    pub emd_max_points: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fsvr: FsvrConfig::default(),
            emd_max_points: EMD_MAX_POINTS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cd: f64,
    pub emd: f64,
    pub fsvr: f64,
    pub reap: f64,
    pub n_generated: usize,
    pub n_gt: usize,
    pub violations: Vec<Violation>,
}

const SUMMARY_HEADER: &str = "cd,emd,fsvr,reap,n_generated,n_gt,n_violations";
const VIOLATION_HEADER: &str = "point,ray,d_perp,deficit";

impl EvalReport {
    /// Summary row plus the violation table, separated by a blank line.
    /// Floats use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{SUMMARY_HEADER}\n{},{},{},{},{},{},{}\n\n{VIOLATION_HEADER}\n",
            self.cd,
            self.emd,
            self.fsvr,
            self.reap,
            self.n_generated,
            self.n_gt,
            self.violations.len()
        );
        for v in &self.violations {
            s.push_str(&format!("{},{},{},{}\n", v.point, v.ray, v.d_perp, v.deficit));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, IoError> {
        let bad = |m: &str| IoError::Parse(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(SUMMARY_HEADER) {
            return Err(bad("missing report header"));
        }
        let row: Vec<&str> = lines.next().ok_or_else(|| bad("missing report row"))?.split(',').collect();
        if row.len() != 7 {
            return Err(bad("report row needs 7 fields"));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|e| bad(&format!("{s}: {e}")));
        let u = |s: &str| s.parse::<usize>().map_err(|e| bad(&format!("{s}: {e}")));
        let n_viol = u(row[6])?;
        let mut violations = Vec::with_capacity(n_viol);
        let rest: Vec<&str> = lines.skip_while(|l| l.is_empty()).collect();
        if rest.first() != Some(&VIOLATION_HEADER) {
            return Err(bad("missing violation header"));
        }
        for l in &rest[1..] {
            if l.is_empty() {
                continue;
            }
            let v: Vec<&str> = l.split(',').collect();
            if v.len() != 4 {
                return Err(bad("violation row needs 4 fields"));
            }
            violations.push(Violation {
                point: u(v[0])?,
                ray: u(v[1])?,
                d_perp: f(v[2])?,
                deficit: f(v[3])?,
            });
        }
        if violations.len() != n_viol {
            return Err(bad("violation count mismatch"));
        }
        Ok(Self {
            cd: f(row[0])?,
            emd: f(row[1])?,
            fsvr: f(row[2])?,
            reap: f(row[3])?,
            n_generated: u(row[4])?,
            n_gt: u(row[5])?,
            violations,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "CD {:.4} m | EMD {:.4} | FSVR {:.2}% | REAP {:.2}% | generated {} / GT {} | {} violations",
            self.cd,
            self.emd,
            self.fsvr,
            self.reap,
            self.n_generated,
            self.n_gt,
            self.violations.len()
        )
    }
}

pub fn evaluate(gen: &PointCloud, gt: &PointCloud, gt_rays: &[RayRecord], cfg: &EvalConfig) -> Result<EvalReport, MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let cd = chamfer(gen, gt)?;
    let e = emd(gen, gt, cfg.emd_max_points, cfg.seed)?;
    let f = fsvr(gen, gt_rays, &cfg.fsvr);
    Ok(EvalReport {
        cd,
        emd: e,
        fsvr: f.fsvr,
        reap: reap(gen.len(), gt.len())?,
        n_generated: gen.len(),
        n_gt: gt.len(),
        violations: f.violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Ray, ScanlineAttr};

    fn ray(d: [f64; 3], range: f64) -> RayRecord {
        RayRecord {
            ray: Ray::new(Point3::new(d[0], d[1], d[2])).unwrap(),
            range,
            attr: ScanlineAttr::default(),
        }
    }

    fn cloud(p: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(p.iter().map(|a| Point3::new(a[0], a[1], a[2])).collect())
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(matches!(chamfer(&a, &PointCloud::default()), Err(MetricsError::EmptyCloud)));
    }

    #[test]
    fn emd_prefers_uncrossed_pairing() {
        let a = cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let b = cloud(&[[10.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!((emd(&a, &b, 512, 0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(emd(&a, &a, 512, 0).unwrap(), 0.0);
    }

    #[test]
    fn fsvr_examples() {
        let rays = [ray([1.0, 0.0, 0.0], 5.0)];
        let cfg = FsvrConfig::default();
        assert_eq!(fsvr(&cloud(&[[3.0, 0.0, 0.0]]), &rays, &cfg).fsvr, 100.0);
        assert_eq!(fsvr(&cloud(&[[5.05, 0.0, 0.0]]), &rays, &cfg).fsvr, 0.0);
        assert_eq!(fsvr(&cloud(&[[3.0, 0.1, 0.0]]), &rays, &cfg).fsvr, 0.0);
        assert_eq!(fsvr(&cloud(&[[3.0, 0.0999, 0.0]]), &rays, &cfg).fsvr, 100.0);
        let v = fsvr(&cloud(&[[3.0, 0.0, 0.0]]), &rays, &cfg).violations;
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].point, v[0].ray, v[0].deficit), (0, 0, 2.0));
    }

    #[test]
    fn miss_rays_flag_any_point_along_them() {
        let rays = [ray([0.0, 1.0, 0.0], f64::INFINITY)];
        let pts = cloud(&[[0.0, 35.0, 0.0]]);
        assert_eq!(fsvr(&pts, &rays, &FsvrConfig::default()).fsvr, 100.0);
        let no_miss = FsvrConfig {
            include_misses: false,
            ..FsvrConfig::default()
        };
        assert_eq!(fsvr(&pts, &rays, &no_miss).fsvr, 0.0);
    }

    #[test]
    fn points_behind_the_origin_are_not_on_the_ray() {
        let rays = [ray([1.0, 0.0, 0.0], 5.0)];
        assert_eq!(fsvr(&cloud(&[[-3.0, 0.0, 0.0]]), &rays, &FsvrConfig::default()).fsvr, 0.0);
    }

    #[test]
    fn reap_examples() {
        assert_eq!(reap(10, 10).unwrap(), 0.0);
        assert_eq!(reap(240_000, 250_000).unwrap(), 4.0);
        assert_eq!(reap(0, 7).unwrap(), 100.0);
        assert!(reap(3, 0).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let r = EvalReport {
            cd: 0.1234567890123,
            emd: 1.0 / 3.0,
            fsvr: 12.5,
            reap: 4.0,
            n_generated: 9,
            n_gt: 10,
            violations: vec![
                Violation {
                    point: 1,
                    ray: 7,
                    d_perp: 0.01,
                    deficit: f64::INFINITY,
                },
                Violation {
                    point: 4,
                    ray: 2,
                    d_perp: 0.0,
                    deficit: 0.1 + 0.2,
                },
            ],
        };
        assert_eq!(EvalReport::from_csv(&r.to_csv()).unwrap(), r);
    }

    #[test]
    fn fps_spreads_points() {
        let pts: Vec<Point3> = (0..100).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let s = farthest_point_sample(&pts, 3, 5);
        let mut xs: Vec<f64> = s.iter().map(|&i| pts[i].x).collect();
        xs.sort_by(f64::total_cmp);
        assert!(xs.contains(&0.0) || xs.contains(&99.0));
        assert_eq!(farthest_point_sample(&pts, 3, 5), s);
    }
}
