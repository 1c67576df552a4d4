//! Uniform hash-grid index over 3D points.
//!
//! Queries are exact: shells of cells are visited in order of Chebyshev
//! distance until no unvisited cell can hold a closer point.

use std::collections::HashMap;

use crate::geometry::Point3;

type CellKey = (i32, i32, i32);

#[derive(Debug, Clone)]
pub struct GridIndex {
    points: Vec<Point3>,
    cell: f64,
    /// Point indices sorted by cell.
    order: Vec<u32>,
    cells: HashMap<CellKey, (u32, u32)>,
    min_key: CellKey,
    max_key: CellKey,
}

impl GridIndex {
    pub fn new(points: &[Point3], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell size must be positive");
        let key_of = |p: &Point3| -> CellKey {
            (
                (p.x / cell).floor() as i32,
                (p.y / cell).floor() as i32,
                (p.z / cell).floor() as i32,
            )
        };
        let mut keyed: Vec<(CellKey, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (key_of(p), i as u32))
            .collect();
        keyed.sort_unstable();
        let mut cells = HashMap::new();
        let mut min_key = (i32::MAX, i32::MAX, i32::MAX);
        let mut max_key = (i32::MIN, i32::MIN, i32::MIN);
        let mut start = 0usize;
        while start < keyed.len() {
            let key = keyed[start].0;
            let mut end = start;
            while end < keyed.len() && keyed[end].0 == key {
                end += 1;
            }
            cells.insert(key, (start as u32, end as u32));
            min_key = (min_key.0.min(key.0), min_key.1.min(key.1), min_key.2.min(key.2));
            max_key = (max_key.0.max(key.0), max_key.1.max(key.1), max_key.2.max(key.2));
            start = end;
        }
        Self {
            points: points.to_vec(),
            cell,
            order: keyed.into_iter().map(|(_, i)| i).collect(),
            cells,
            min_key,
            max_key,
        }
    }

    /// Picks a cell size that puts a handful of points in each occupied cell
    /// for surface-like data.
    pub fn auto(points: &[Point3]) -> Self {
        let cell = auto_cell_size(points);
        Self::new(points, cell)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    fn key(&self, p: &Point3) -> CellKey {
        (
            (p.x / self.cell).floor() as i32,
            (p.y / self.cell).floor() as i32,
            (p.z / self.cell).floor() as i32,
        )
    }

    fn cell_members(&self, key: CellKey) -> &[u32] {
        match self.cells.get(&key) {
            Some(&(s, e)) => &self.order[s as usize..e as usize],
            None => &[],
        }
    }

    /// Largest shell radius that can still reach an occupied cell.
    fn max_shell(&self, center: CellKey) -> i32 {
        let dx = (center.0 - self.min_key.0).abs().max((self.max_key.0 - center.0).abs());
        let dy = (center.1 - self.min_key.1).abs().max((self.max_key.1 - center.1).abs());
        let dz = (center.2 - self.min_key.2).abs().max((self.max_key.2 - center.2).abs());
        dx.max(dy).max(dz)
    }

    fn visit_shell(&self, center: CellKey, s: i32, mut f: impl FnMut(u32)) {
        let clip_lo = |c: i32, m: i32| c.max(m);
        let clip_hi = |c: i32, m: i32| c.min(m);
        let x0 = clip_lo(center.0 - s, self.min_key.0);
        let x1 = clip_hi(center.0 + s, self.max_key.0);
        let y0 = clip_lo(center.1 - s, self.min_key.1);
        let y1 = clip_hi(center.1 + s, self.max_key.1);
        let z0 = clip_lo(center.2 - s, self.min_key.2);
        let z1 = clip_hi(center.2 + s, self.max_key.2);
        for x in x0..=x1 {
            let edge_x = (x - center.0).abs() == s;
            for y in y0..=y1 {
                let edge_xy = edge_x || (y - center.1).abs() == s;
                if edge_xy {
                    for z in z0..=z1 {
                        for &i in self.cell_members((x, y, z)) {
                            f(i);
                        }
                    }
                } else {
                    for z in [center.2 - s, center.2 + s] {
                        if z < z0 || z > z1 || (s == 0 && z != center.2) {
                            continue;
                        }
                        for &i in self.cell_members((x, y, z)) {
                            f(i);
                        }
                        if s == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }

    /// Index and distance of the nearest point. Ties go to the lower index.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let center = self.key(q);
        let limit = self.max_shell(center);
        let mut best: Option<(u32, f64)> = None;
        let mut s = 0;
        while s <= limit {
            self.visit_shell(center, s, |i| {
                let d = q.distance(&self.points[i as usize]);
                match best {
                    Some((bi, bd)) if d > bd || (d == bd && i > bi) => {}
                    _ => best = Some((i, d)),
                }
            });
            if let Some((_, bd)) = best {
                if bd < s as f64 * self.cell {
                    break;
                }
            }
            s += 1;
        }
        best.map(|(i, d)| (i as usize, d))
    }

    /// The `k` nearest points sorted by (distance, index).
    pub fn k_nearest(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let center = self.key(q);
        let limit = self.max_shell(center);
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        let mut s = 0;
        while s <= limit {
            self.visit_shell(center, s, |i| {
                let d = q.distance(&self.points[i as usize]);
                if best.len() < k || (d, i) < best[best.len() - 1] {
                    let pos = best.partition_point(|e| *e < (d, i));
                    best.insert(pos, (d, i));
                    best.truncate(k);
                }
            });
            if best.len() == k && best[k - 1].0 < s as f64 * self.cell {
                break;
            }
            s += 1;
        }
        best.into_iter().map(|(d, i)| (i as usize, d)).collect()
    }

    /// Indices of all points with distance `<= radius`, ascending.
    pub fn within(&self, q: &Point3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.points.is_empty() || radius < 0.0 {
            return out;
        }
        let center = self.key(q);
        // shell s lies at least (s - 1) * cell away
        let reach = ((radius / self.cell).floor() as i64).saturating_add(1).min(self.max_shell(center) as i64) as i32;
        for s in 0..=reach {
            self.visit_shell(center, s, |i| {
                if q.distance(&self.points[i as usize]) <= radius {
                    out.push(i as usize);
                }
            });
        }
        out.sort_unstable();
        out
    }
}

pub fn auto_cell_size(points: &[Point3]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let diag = (hi - lo).norm();
    let cell = 2.0 * diag / (points.len() as f64).sqrt();
    if cell > 1e-9 && cell.is_finite() {
        cell
    } else {
        1.0
    }
}
