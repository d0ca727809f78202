//! Voronoi cells clipped to a rectangular region, and the priori density built from them.

use serde::{Deserialize, Serialize};

use crate::error::{MiwError, Result};
use crate::sum::exact_sum;

/// Positions are stored as two-component points; 1D problems leave the second component at 0.
pub type Point = [f64; 2];

pub const DUPLICATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Region {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let r = Region { lower, upper };
        r.validate()?;
        Ok(r)
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        Region { lower: vec![lo], upper: vec![hi] }
    }

    pub fn square(half: f64) -> Self {
        Region { lower: vec![-half, -half], upper: vec![half, half] }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lower.len();
        if d == 0 || d > 2 || self.upper.len() != d {
            return Err(MiwError::InvalidRegion(format!(
                "dimension must be 1 or 2 on both bounds, got {} and {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for k in 0..d {
            if !(self.lower[k] < self.upper[k]) || !self.lower[k].is_finite() || !self.upper[k].is_finite() {
                return Err(MiwError::InvalidRegion(format!("axis {k}: lower must be below upper")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.upper[k] - self.lower[k]).product()
    }

    pub fn center(&self) -> Point {
        let mut c = [0.0; 2];
        for k in 0..self.dim() {
            c[k] = 0.5 * (self.lower[k] + self.upper[k]);
        }
        c
    }

    /// Closed-region membership.
    pub fn contains(&self, p: &Point) -> bool {
        (0..self.dim()).all(|k| p[k] >= self.lower[k] && p[k] <= self.upper[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPartition {
    pub volumes: Vec<f64>,
    pub adjacency: Vec<Vec<usize>>,
}

impl CellPartition {
    pub fn total(&self) -> f64 {
        exact_sum(self.volumes.iter().copied())
    }
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn check_points(positions: &[Point], region: &Region) -> Result<()> {
    for (i, p) in positions.iter().enumerate() {
        if !region.contains(p) || p.iter().any(|v| !v.is_finite()) {
            return Err(MiwError::OutOfRegion(i));
        }
    }
    for i in 0..positions.len() {
        for j in 0..i {
            if dist2(&positions[i], &positions[j]).sqrt() <= DUPLICATE_TOL {
                return Err(MiwError::DuplicatePoints(j, i));
            }
        }
    }
    Ok(())
}

/// Voronoi cells of `positions` clipped to the region. Points may sit on the
/// closed boundary (fixed corner worlds do).
pub fn voronoi_cells(positions: &[Point], region: &Region) -> Result<CellPartition> {
    region.validate()?;
    if positions.is_empty() {
        return Err(MiwError::EmptyEnsemble);
    }
    check_points(positions, region)?;
    match region.dim() {
        1 => Ok(cells_1d(positions, region.lower[0], region.upper[0])),
        _ => Ok(cells_2d(positions, region)),
    }
}

fn cells_1d(positions: &[Point], lo: f64, hi: f64) -> CellPartition {
    let n = positions.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| positions[a][0].total_cmp(&positions[b][0]));
    let mut volumes = vec![0.0; n];
    let mut adjacency = vec![Vec::new(); n];
    for (k, &i) in order.iter().enumerate() {
        let left = if k == 0 { lo } else { 0.5 * (positions[order[k - 1]][0] + positions[i][0]) };
        let right = if k + 1 == n { hi } else { 0.5 * (positions[i][0] + positions[order[k + 1]][0]) };
        volumes[i] = right - left;
        if k > 0 {
            adjacency[i].push(order[k - 1]);
        }
        if k + 1 < n {
            adjacency[i].push(order[k + 1]);
        }
    }
    CellPartition { volumes, adjacency }
}

/// Vertex of a clipped polygon; `edge` labels the edge leaving this vertex
/// (`None` for the region boundary, `Some(j)` for the bisector with world j).
#[derive(Clone, Copy)]
struct Vertex {
    p: Point,
    edge: Option<usize>,
}

fn clip(poly: &[Vertex], site: &Point, other: &Point, label: usize) -> Vec<Vertex> {
    let nx = other[0] - site[0];
    let ny = other[1] - site[1];
    let mx = 0.5 * (other[0] + site[0]);
    let my = 0.5 * (other[1] + site[1]);
    let side = |p: &Point| (p[0] - mx) * nx + (p[1] - my) * ny;
    let mut out = Vec::with_capacity(poly.len() + 1);
    let m = poly.len();
    for k in 0..m {
        let a = poly[k];
        let b = poly[(k + 1) % m];
        let sa = side(&a.p);
        let sb = side(&b.p);
        let a_in = sa <= 0.0;
        let b_in = sb <= 0.0;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = sa / (sa - sb);
            let p = [a.p[0] + t * (b.p[0] - a.p[0]), a.p[1] + t * (b.p[1] - a.p[1])];
            let edge = if a_in { Some(label) } else { a.edge };
            out.push(Vertex { p, edge });
        }
    }
    out
}

fn polygon_area(poly: &[Vertex]) -> f64 {
    let m = poly.len();
    let terms = (0..m).map(|k| {
        let a = poly[k].p;
        let b = poly[(k + 1) % m].p;
        0.5 * (a[0] * b[1] - a[1] * b[0])
    });
    exact_sum(terms).abs()
}

/// The clipped polygon of cell `i`, counter-clockwise.
pub fn cell_polygon(positions: &[Point], region: &Region, i: usize) -> Vec<Point> {
    cell_vertices(positions, region, i).into_iter().map(|v| v.p).collect()
}

fn cell_vertices(positions: &[Point], region: &Region, i: usize) -> Vec<Vertex> {
    let (x0, y0, x1, y1) = (region.lower[0], region.lower[1], region.upper[0], region.upper[1]);
    let mut poly = vec![
        Vertex { p: [x0, y0], edge: None },
        Vertex { p: [x1, y0], edge: None },
        Vertex { p: [x1, y1], edge: None },
        Vertex { p: [x0, y1], edge: None },
    ];
    let site = positions[i];
    // nearest first keeps intermediate polygons small
    let mut others: Vec<usize> = (0..positions.len()).filter(|&j| j != i).collect();
    others.sort_by(|&a, &b| dist2(&site, &positions[a]).total_cmp(&dist2(&site, &positions[b])).then(a.cmp(&b)));
    for j in others {
        if poly.is_empty() {
            break;
        }
        // skip bisectors that cannot reach the current polygon
        let r2 = poly.iter().map(|v| dist2(&v.p, &site)).fold(0.0, f64::max);
        if dist2(&site, &positions[j]) > 4.0 * r2 {
            break;
        }
        poly = clip(&poly, &site, &positions[j], j);
    }
    poly
}

fn cells_2d(positions: &[Point], region: &Region) -> CellPartition {
    let n = positions.len();
    let mut volumes = vec![0.0; n];
    let mut adjacency = vec![Vec::new(); n];
    let scale = region.volume().sqrt();
    for i in 0..n {
        let poly = cell_vertices(positions, region, i);
        volumes[i] = polygon_area(&poly);
        let m = poly.len();
        for k in 0..m {
            if let Some(j) = poly[k].edge {
                let len2 = dist2(&poly[k].p, &poly[(k + 1) % m].p);
                if len2.sqrt() > 1e-12 * scale && !adjacency[i].contains(&j) {
                    adjacency[i].push(j);
                }
            }
        }
        adjacency[i].sort_unstable();
    }
    CellPartition { volumes, adjacency }
}

/// P̃(x_n) = 1/(N |Cell_n|).
pub fn priori_density(cells: &CellPartition, n_worlds: usize) -> Vec<f64> {
    cells.volumes.iter().map(|&v| 1.0 / (n_worlds as f64 * v)).collect()
}

/// Mean distance from each world to its nearest neighbour.
pub fn mean_nearest_spacing(positions: &[Point]) -> f64 {
    let n = positions.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| dist2(&positions[i], &positions[j]))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // nearest-site labelling of a fine midpoint grid
    fn labelled_volumes(positions: &[Point], region: &Region, m: usize) -> Vec<f64> {
        let d = region.dim();
        let mut counts = vec![0usize; positions.len()];
        let steps: Vec<f64> = (0..d).map(|k| (region.upper[k] - region.lower[k]) / m as f64).collect();
        let total = if d == 1 { m } else { m * m };
        for idx in 0..total {
            let mut q = [0.0; 2];
            q[0] = region.lower[0] + ((idx % m) as f64 + 0.5) * steps[0];
            if d == 2 {
                q[1] = region.lower[1] + ((idx / m) as f64 + 0.5) * steps[1];
            }
            let best = (0..positions.len())
                .min_by(|&a, &b| dist2(&q, &positions[a]).total_cmp(&dist2(&q, &positions[b])))
                .unwrap();
            counts[best] += 1;
        }
        let cell = steps.iter().product::<f64>();
        counts.iter().map(|&c| c as f64 * cell).collect()
    }

    #[test]
    fn interior_1d_cell_is_half_gap() {
        let pts: Vec<Point> = [-1.0, 0.0, 0.7, 2.5].iter().map(|&x| [x, 0.0]).collect();
        let c = voronoi_cells(&pts, &Region::interval(-3.0, 3.0)).unwrap();
        assert!((c.volumes[1] - (0.7 + 1.0) / 2.0).abs() < 1e-15);
        assert!((c.volumes[2] - (2.5 - 0.0) / 2.0).abs() < 1e-15);
        assert_eq!(c.adjacency[1], vec![0, 2]);
    }

    #[test]
    fn three_point_example_against_labelling() {
        let pts: Vec<Point> = [-1.0, 0.0, 2.0].iter().map(|&x| [x, 0.0]).collect();
        let region = Region::interval(-2.0, 3.0);
        let c = voronoi_cells(&pts, &region).unwrap();
        let oracle = labelled_volumes(&pts, &region, 100_000);
        for (v, o) in c.volumes.iter().zip(&oracle) {
            assert!((v - o).abs() < 1e-4);
        }
        assert_eq!(c.volumes, vec![1.5, 1.5, 2.0]);
        let p = priori_density(&c, 3);
        assert!((p[0] - 2.0 / 9.0).abs() < 1e-15);
        assert!((p[2] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_grid_cells() {
        let mut pts = Vec::new();
        for j in 0..6 {
            for i in 0..6 {
                pts.push([-1.25 + 0.5 * i as f64, -1.25 + 0.5 * j as f64]);
            }
        }
        let c = voronoi_cells(&pts, &Region::square(1.5)).unwrap();
        for v in &c.volumes {
            assert!((v - 0.25).abs() < 1e-14);
        }
        for p in priori_density(&c, 36) {
            assert!((p - 1.0 / 9.0).abs() < 1e-14);
        }
        // interior cell has four neighbours, corner cell two
        assert_eq!(c.adjacency[7].len(), 4);
        assert_eq!(c.adjacency[0], vec![1, 6]);
    }

    #[test]
    fn corner_worlds_own_cells() {
        let mut pts = vec![[-1.5, -1.5], [1.5, -1.5], [1.5, 1.5], [-1.5, 1.5]];
        pts.push([0.0, 0.0]);
        let c = voronoi_cells(&pts, &Region::square(1.5)).unwrap();
        assert!(c.volumes.iter().all(|&v| v > 0.0));
        assert!((c.total() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let region = Region::interval(0.0, 1.0);
        assert_eq!(voronoi_cells(&[[0.5, 0.0], [0.5, 0.0]], &region), Err(MiwError::DuplicatePoints(0, 1)));
        assert_eq!(voronoi_cells(&[[0.5, 0.0], [1.5, 0.0]], &region), Err(MiwError::OutOfRegion(1)));
        assert!(Region::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn labelling_matches_2d_cells() {
        let pts = vec![[0.1, 0.2], [-0.8, 0.5], [0.9, -0.7], [-0.3, -1.1], [1.2, 1.0], [-1.3, 1.4]];
        let region = Region::square(1.5);
        let c = voronoi_cells(&pts, &region).unwrap();
        let oracle = labelled_volumes(&pts, &region, 1000);
        for (v, o) in c.volumes.iter().zip(&oracle) {
            assert!((v - o).abs() / v < 0.01, "{v} {o}");
        }
    }

    fn points_strategy(d: usize) -> impl Strategy<Value = Vec<Point>> {
        proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 2..30).prop_map(move |v| {
            v.into_iter().map(|(x, y)| if d == 1 { [x, 0.0] } else { [x, y] }).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn volumes_conserved_2d(pts in points_strategy(2)) {
            let region = Region::square(2.0);
            if let Ok(c) = voronoi_cells(&pts, &region) {
                prop_assert!((c.total() - 16.0).abs() / 16.0 < 1e-9);
                prop_assert!(c.volumes.iter().all(|&v| v > 0.0));
                let p = priori_density(&c, pts.len());
                let mass = exact_sum(p.iter().zip(&c.volumes).map(|(a, b)| a * b));
                prop_assert!((mass - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn volumes_conserved_1d(pts in points_strategy(1)) {
            let region = Region::interval(-2.0, 2.0);
            if let Ok(c) = voronoi_cells(&pts, &region) {
                prop_assert!((c.total() - 4.0).abs() / 4.0 < 1e-9);
            }
        }

        #[test]
        fn each_site_inside_its_cell(pts in points_strategy(2)) {
            let region = Region::square(2.0);
            if voronoi_cells(&pts, &region).is_ok() {
                for i in 0..pts.len() {
                    let poly = cell_polygon(&pts, &region, i);
                    let m = poly.len();
                    // site on the inner side of every edge of a convex ccw polygon
                    for k in 0..m {
                        let a = poly[k];
                        let b = poly[(k + 1) % m];
                        let cross = (b[0] - a[0]) * (pts[i][1] - a[1]) - (b[1] - a[1]) * (pts[i][0] - a[0]);
                        prop_assert!(cross >= -1e-12);
                    }
                }
            }
        }
    }
}
