//! World-frame point map with exact k-nearest-neighbor plane queries.
//!
//! Points live in a uniform hash grid. Queries take `&self` and can run from
//! many threads at once; insertion takes `&mut self`, so the borrow checker
//! enforces the many-readers-or-one-writer contract.

use std::collections::{HashMap, HashSet};
use std::io::{self, Write};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

type Key = (i64, i64, i64);

fn key_of(p: &Vector3<f64>, size: f64) -> Key {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneParams {
    pub k: usize,
    pub max_corr_dist: f64,
    pub plane_tol: f64,
    /// Largest query-to-plane distance a registration accepts as a
    /// correspondence. Not applied by [`PointMap::query_plane`].
    pub max_plane_dist: f64,
}

impl Default for PlaneParams {
    fn default() -> Self {
        Self { k: 5, max_corr_dist: 1.0, plane_tol: 0.05, max_plane_dist: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    pub anchor: Vector3<f64>,
    pub rms_distance: f64,
    pub neighbor_count: usize,
}

#[derive(Debug, Clone)]
pub struct PointMap {
    points: Vec<Vector3<f64>>,
    cell_size: f64,
    cells: HashMap<Key, Vec<u32>>,
    lo: Key,
    hi: Key,
    voxel_size: f64,
    occupied: HashSet<Key>,
    origin: Vector3<f64>,
}

impl Default for PointMap {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl PointMap {
    pub fn new(cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        Self {
            points: Vec::new(),
            cell_size,
            cells: HashMap::new(),
            lo: (i64::MAX, i64::MAX, i64::MAX),
            hi: (i64::MIN, i64::MIN, i64::MIN),
            voxel_size: 0.0,
            occupied: HashSet::new(),
            origin: Vector3::zeros(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn distance_from_origin(&self, p: &Vector3<f64>) -> f64 {
        (p - self.origin).norm()
    }

    /// Starts a new local map at `origin`. Stored points are kept: the global
    /// map is the union of all local maps.
    pub fn start_new_local_map(&mut self, origin: Vector3<f64>) {
        self.origin = origin;
    }

    fn push(&mut self, p: Vector3<f64>) {
        let idx = self.points.len() as u32;
        let k = key_of(&p, self.cell_size);
        self.cells.entry(k).or_default().push(idx);
        self.lo = (self.lo.0.min(k.0), self.lo.1.min(k.1), self.lo.2.min(k.2));
        self.hi = (self.hi.0.max(k.0), self.hi.1.max(k.1), self.hi.2.max(k.2));
        self.points.push(p);
    }

    /// Inserts points without any filtering. Non-finite points are dropped.
    pub fn insert_raw(&mut self, points: &[Vector3<f64>]) -> usize {
        let before = self.len();
        for p in points.iter().filter(|p| p.iter().all(|v| v.is_finite())) {
            if self.voxel_size > 0.0 {
                self.occupied.insert(key_of(p, self.voxel_size));
            }
            self.push(*p);
        }
        self.len() - before
    }

    /// Voxel-filtered insertion: a point is kept only if its voxel holds no
    /// map point yet (first arrival wins, in input order). Returns the number
    /// of points added.
    pub fn insert_scan(&mut self, points: &[Vector3<f64>], voxel_size: f64) -> usize {
        assert!(voxel_size > 0.0, "voxel size must be positive");
        if voxel_size != self.voxel_size {
            self.voxel_size = voxel_size;
            self.occupied = self.points.iter().map(|p| key_of(p, voxel_size)).collect();
        }
        let before = self.len();
        for p in points.iter().filter(|p| p.iter().all(|v| v.is_finite())) {
            if self.occupied.insert(key_of(p, voxel_size)) {
                self.push(*p);
            }
        }
        self.len() - before
    }

    fn visit_ring(&self, center: Key, r: i64, mut f: impl FnMut(u32)) {
        let visit = |k: Key, f: &mut dyn FnMut(u32)| {
            if let Some(ids) = self.cells.get(&k) {
                ids.iter().for_each(|&i| f(i));
            }
        };
        if r == 0 {
            visit(center, &mut f);
            return;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                let edge = dx.abs() == r || dy.abs() == r;
                if edge {
                    for dz in -r..=r {
                        visit((center.0 + dx, center.1 + dy, center.2 + dz), &mut f);
                    }
                } else {
                    visit((center.0 + dx, center.1 + dy, center.2 - r), &mut f);
                    visit((center.0 + dx, center.1 + dy, center.2 + r), &mut f);
                }
            }
        }
    }

    fn ring_limit(&self, center: Key) -> i64 {
        if self.is_empty() {
            return -1;
        }
        [
            (center.0 - self.lo.0).abs(),
            (center.0 - self.hi.0).abs(),
            (center.1 - self.lo.1).abs(),
            (center.1 - self.hi.1).abs(),
            (center.2 - self.lo.2).abs(),
            (center.2 - self.hi.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }

    /// Exact k nearest stored points within `max_dist`, sorted by distance
    /// with ties broken by insertion order. Returns `(index, squared distance)`.
    pub fn knn(&self, q: &Vector3<f64>, k: usize, max_dist: f64) -> Vec<(usize, f64)> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let center = key_of(q, self.cell_size);
        let max_sq = max_dist * max_dist;
        let limit = self.ring_limit(center);
        let mut r = 0;
        while r <= limit {
            self.visit_ring(center, r, |i| {
                let d = (self.points[i as usize] - q).norm_squared();
                if d > max_sq {
                    return;
                }
                let cand = (d, i);
                if best.len() == k && !lt(cand, best[k - 1]) {
                    return;
                }
                let pos = best.partition_point(|&b| lt(b, cand));
                best.insert(pos, cand);
                best.truncate(k);
            });
            // Anything in ring r+1 or beyond is at least r cells away.
            let reach = r as f64 * self.cell_size;
            if reach > max_dist || (best.len() == k && best[k - 1].0 < reach * reach) {
                break;
            }
            r += 1;
        }
        best.into_iter().map(|(d, i)| (i as usize, d)).collect()
    }

    /// Plane through the `k` nearest neighbors of `q`, if they are all within
    /// range and flat enough.
    pub fn query_plane(&self, q: &Vector3<f64>, params: &PlaneParams) -> Option<PlaneFit> {
        let nn = self.knn(q, params.k, params.max_corr_dist);
        if nn.len() < params.k || params.k < 3 {
            return None;
        }
        let pts: Vec<Vector3<f64>> = nn.iter().map(|&(i, _)| self.points[i]).collect();
        let fit = fit_plane(&pts, q)?;
        (fit.rms_distance < params.plane_tol).then_some(fit)
    }

    /// One `x y z` line per point.
    pub fn write_xyz<W: Write>(&self, mut out: W) -> io::Result<()> {
        for p in &self.points {
            writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
        }
        Ok(())
    }
}

fn lt(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Least-squares plane through `pts`; the normal points toward `toward`.
pub fn fit_plane(pts: &[Vector3<f64>], toward: &Vector3<f64>) -> Option<PlaneFit> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let centroid = pts.iter().sum::<Vector3<f64>>() / n;
    let scatter = pts.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    });
    let eig = SymmetricEigen::new(scatter);
    let i = eig.eigenvalues.imin();
    let mut normal: Vector3<f64> = eig.eigenvectors.column(i).normalize();
    if !normal.iter().all(|v| v.is_finite()) {
        return None;
    }
    if (toward - centroid).dot(&normal) < 0.0 {
        normal = -normal;
    }
    let rms_distance = (eig.eigenvalues[i].max(0.0) / n).sqrt();
    Some(PlaneFit { normal, anchor: centroid, rms_distance, neighbor_count: pts.len() })
}

/// Indices of the first point to land in each voxel, in input order.
pub fn voxel_downsample_indices(points: &[Vector3<f64>], voxel_size: f64) -> Vec<usize> {
    let mut seen = HashSet::with_capacity(points.len());
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| seen.insert(key_of(p, voxel_size)))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute_knn(pts: &[Vector3<f64>], q: &Vector3<f64>, k: usize, max_dist: f64) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .filter(|&(_, d)| d <= max_dist * max_dist)
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..4000)
            .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0)))
            .collect();
        let mut map = PointMap::new(0.7);
        map.insert_raw(&pts);
        for _ in 0..200 {
            let q = Vector3::new(rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0), rng.random_range(-3.0..3.0));
            for (k, r) in [(5, 1.0), (8, f64::INFINITY), (1, 0.3)] {
                assert_eq!(map.knn(&q, k, r), brute_knn(&pts, &q, k, r));
            }
        }
    }

    #[test]
    fn knn_ties_follow_insertion_order() {
        let mut map = PointMap::new(1.0);
        let pts = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        map.insert_raw(&pts);
        let ids: Vec<usize> = map.knn(&Vector3::zeros(), 2, 5.0).into_iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn exact_plane_above() {
        let mut map = PointMap::new(1.0);
        let pts: Vec<_> = [(0.0, 0.0), (0.2, 0.0), (0.0, 0.2), (-0.2, 0.1), (0.1, -0.2)]
            .iter()
            .map(|&(x, y)| Vector3::new(x, y, 0.0))
            .collect();
        map.insert_raw(&pts);
        let fit = map.query_plane(&Vector3::new(0.0, 0.0, 0.3), &PlaneParams::default()).unwrap();
        assert!((fit.normal - Vector3::z()).amax() < 1e-12);
        assert!(fit.rms_distance < 1e-12);
        assert_eq!(fit.neighbor_count, 5);
        // Querying from below flips the normal.
        let fit = map.query_plane(&Vector3::new(0.0, 0.0, -0.3), &PlaneParams::default()).unwrap();
        assert!((fit.normal + Vector3::z()).amax() < 1e-12);
    }

    #[test]
    fn jittered_plane_fit() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<_> = (0..5)
            .map(|_| Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.01..0.01)))
            .collect();
        let fit = fit_plane(&pts, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(fit.rms_distance <= 0.01);
        assert!(fit.normal.dot(&Vector3::z()).acos() < 2f64.to_radians());
        // Oracle: no other unit normal through the centroid has a smaller residual.
        let cost = |n: &Vector3<f64>| pts.iter().map(|p| (p - fit.anchor).dot(n).powi(2)).sum::<f64>();
        let best = cost(&fit.normal);
        for _ in 0..2000 {
            let n = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            assert!(cost(&n) >= best - 1e-15);
        }
    }

    #[test]
    fn corner_is_not_a_plane() {
        let mut map = PointMap::new(1.0);
        map.insert_raw(&[
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.3, 0.0, 0.0),
            Vector3::new(0.0, 0.3, 0.0),
            Vector3::new(0.0, 0.0, 0.3),
            Vector3::new(0.0, 0.3, 0.3),
        ]);
        assert!(map.query_plane(&Vector3::new(0.1, 0.1, 0.1), &PlaneParams::default()).is_none());
    }

    #[test]
    fn too_few_or_too_far_neighbors() {
        let mut map = PointMap::new(1.0);
        map.insert_raw(&[Vector3::zeros(), Vector3::x() * 0.1, Vector3::y() * 0.1, Vector3::new(0.1, 0.1, 0.0)]);
        assert!(map.query_plane(&Vector3::new(0.0, 0.0, 0.1), &PlaneParams::default()).is_none());
        map.insert_raw(&[Vector3::new(3.0, 0.0, 0.0)]);
        assert!(map.query_plane(&Vector3::new(0.0, 0.0, 0.1), &PlaneParams::default()).is_none());
    }

    #[test]
    fn voxel_insertion_examples() {
        let mut map = PointMap::new(1.0);
        let same = vec![Vector3::new(0.1, 0.1, 0.1); 1000];
        assert_eq!(map.insert_scan(&same, 0.5), 1);

        let mut map = PointMap::new(1.0);
        let grid: Vec<_> = (0..5)
            .flat_map(|x| (0..5).map(move |y| Vector3::new(x as f64 + 0.25, y as f64 + 0.25, 0.25)))
            .collect();
        assert_eq!(map.insert_scan(&grid, 0.5), 25);
        // Re-inserting the same scan adds nothing.
        assert_eq!(map.insert_scan(&grid, 0.5), 0);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cloud: Vec<_> = (0..10_000)
            .map(|_| Vector3::new(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)))
            .collect();
        let mut map = PointMap::new(1.0);
        let n = map.insert_scan(&cloud, 0.5);
        assert!((1..=8000).contains(&n));
    }

    #[test]
    fn local_map_switch_keeps_points() {
        let mut map = PointMap::new(1.0);
        map.insert_raw(&[Vector3::x(), Vector3::y()]);
        let p = Vector3::new(60.0, 0.0, 0.0);
        assert_eq!(map.distance_from_origin(&p), 60.0);
        map.start_new_local_map(p);
        assert_eq!(map.distance_from_origin(&p), 0.0);
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn xyz_export() {
        let mut map = PointMap::new(1.0);
        map.insert_raw(&[Vector3::new(1.0, 2.5, -3.0)]);
        let mut out = Vec::new();
        map.write_xyz(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "1 2.5 -3\n");
    }

    #[test]
    fn downsample_first_arrival() {
        let pts = [Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.2, 0.0, 0.0), Vector3::new(0.7, 0.0, 0.0)];
        assert_eq!(voxel_downsample_indices(&pts, 0.5), vec![0, 2]);
    }
}
