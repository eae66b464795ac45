//! Fit metrics and level-set extraction.
//!
//! Curves come from marching squares, with saddle cells resolved by the sign
//! of `g` at the cell center. Surfaces come from marching tetrahedra on the
//! six-tetrahedron split of each cube around its main diagonal. That split
//! is conforming across cube faces, so meshes are watertight away from the
//! box boundary and their Euler characteristic is meaningful.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::cloud::PointCloud;
use crate::error::{FitError, Result};
use crate::fitter::FitResult;
use crate::shapes::{Bbox, ImplicitShape};

/// Smallest accepted grid resolution per axis.
pub const MIN_RESOLUTION: usize = 16;
pub const DEFAULT_RESOLUTION_2D: usize = 512;
pub const DEFAULT_RESOLUTION_3D: usize = 128;

/// Default grid resolution for a dimension.
pub fn default_resolution(dim: usize) -> usize {
    if dim == 2 {
        DEFAULT_RESOLUTION_2D
    } else {
        DEFAULT_RESOLUTION_3D
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(FitError::DimensionMismatch { expected: b.len(), got: a.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite()) {
        return Err(FitError::InvalidArgument("coefficient vectors must be finite and nonzero".into()));
    }
    Ok((na, nb))
}

/// `|a . b| / (|a| |b|)`, clamped to `[0, 1]`.
pub fn cosine_similarity(a_hat: &[f64], a_star: &[f64]) -> Result<f64> {
    let (na, nb) = check_pair(a_hat, a_star)?;
    let dot: f64 = a_hat.iter().zip(a_star).map(|(x, y)| x * y).sum();
    Ok((dot.abs() / (na * nb)).min(1.0))
}

/// `min(|a - b|, |a + b|)` after scaling both to unit length.
pub fn coefficient_distance(a_hat: &[f64], a_star: &[f64]) -> Result<f64> {
    let (na, nb) = check_pair(a_hat, a_star)?;
    let (mut minus, mut plus) = (0.0, 0.0);
    for (x, y) in a_hat.iter().zip(a_star) {
        let (x, y) = (x / na, y / nb);
        minus += (x - y) * (x - y);
        plus += (x + y) * (x + y);
    }
    Ok(minus.min(plus).sqrt())
}

/// Extracted zero set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    /// Ordered vertex chains; closed chains repeat their first vertex.
    Polylines(Vec<Vec<[f64; 2]>>),
    Mesh { vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSet {
    pub geometry: Geometry,
    /// Grid nodes per axis.
    pub resolution: usize,
    pub bbox: Bbox,
    pub warnings: Vec<String>,
}

impl LevelSet {
    /// Distinct vertices (closing duplicates of polylines removed).
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        match &self.geometry {
            Geometry::Polylines(lines) => lines
                .iter()
                .flat_map(|l| {
                    let closed = l.len() > 2 && l.first() == l.last();
                    l[..l.len() - usize::from(closed)].iter().map(|p| p.to_vec())
                })
                .collect(),
            Geometry::Mesh { vertices, .. } => vertices.iter().map(|p| p.to_vec()).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        match &self.geometry {
            Geometry::Polylines(lines) => lines.is_empty(),
            Geometry::Mesh { faces, .. } => faces.is_empty(),
        }
    }

    /// Diagonal of one grid cell.
    pub fn cell_diagonal(&self) -> f64 {
        let steps: Vec<f64> =
            self.bbox.lo.iter().zip(&self.bbox.hi).map(|(a, b)| (b - a) / (self.resolution - 1) as f64).collect();
        norm(&steps)
    }

    /// `V - E + F` of a mesh, counting only vertices used by faces.
    pub fn euler_characteristic(&self) -> Option<i64> {
        let Geometry::Mesh { faces, .. } = &self.geometry else {
            return None;
        };
        let mut used = std::collections::HashSet::new();
        let mut edges = std::collections::HashSet::new();
        for f in faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                used.insert(a);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        Some(used.len() as i64 - edges.len() as i64 + faces.len() as i64)
    }

    /// Wavefront OBJ (mesh) or `curve,x1,x2` CSV rows (curves).
    pub fn export(&self) -> String {
        let mut out = String::new();
        match &self.geometry {
            Geometry::Mesh { vertices, faces } => {
                for v in vertices {
                    let _ = writeln!(out, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
                }
                for f in faces {
                    let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
                }
            }
            Geometry::Polylines(lines) => {
                out.push_str("curve,x1,x2\n");
                for (i, line) in lines.iter().enumerate() {
                    for p in line {
                        let _ = writeln!(out, "{i},{:?},{:?}", p[0], p[1]);
                    }
                }
            }
        }
        out
    }
}

struct Grid {
    lo: Vec<f64>,
    step: Vec<f64>,
    res: usize,
}

impl Grid {
    fn coord(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + i as f64 * self.step[axis]
    }

    fn node(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().enumerate().map(|(a, &i)| self.coord(a, i)).collect()
    }
}

/// Samples `g` on the grid, axis 0 fastest, in parallel by slabs of the last axis.
fn sample_grid<G: Fn(&[f64]) -> f64 + Sync>(g: &G, grid: &Grid, dim: usize) -> Vec<f64> {
    let r = grid.res;
    let slab = r.pow(dim as u32 - 1);
    let mut values = vec![0.0; slab * r];
    values.par_chunks_mut(slab).enumerate().for_each(|(last, out)| {
        let mut p = vec![0.0; dim];
        p[dim - 1] = grid.coord(dim - 1, last);
        for (flat, v) in out.iter_mut().enumerate() {
            let mut rest = flat;
            for (axis, slot) in p.iter_mut().enumerate().take(dim - 1) {
                *slot = grid.coord(axis, rest % r);
                rest /= r;
            }
            *v = g(&p);
        }
    });
    values
}

/// Zero set of `g` inside `bbox` on a grid of `resolution` nodes per axis.
pub fn extract_level_set<G: Fn(&[f64]) -> f64 + Sync>(g: &G, bbox: &Bbox, resolution: usize) -> Result<LevelSet> {
    let dim = bbox.dim();
    if dim != 2 && dim != 3 {
        return Err(FitError::UnsupportedDimension(dim));
    }
    if resolution < MIN_RESOLUTION {
        return Err(FitError::InvalidArgument(format!("resolution must be at least {MIN_RESOLUTION}, got {resolution}")));
    }
    let grid = Grid {
        lo: bbox.lo.clone(),
        step: bbox.lo.iter().zip(&bbox.hi).map(|(a, b)| (b - a) / (resolution - 1) as f64).collect(),
        res: resolution,
    };
    let values = sample_grid(g, &grid, dim);
    let geometry = if dim == 2 { marching_squares(g, &grid, &values) } else { marching_tetrahedra(&grid, &values) };
    let mut level_set = LevelSet { geometry, resolution, bbox: bbox.clone(), warnings: Vec::new() };
    if level_set.is_empty() {
        level_set.warnings.push("function has no sign change on the grid; level set is empty".into());
    }
    Ok(level_set)
}

/// Zero set of a fitted function, in data units.
pub fn fit_level_set(fit: &FitResult, bbox: &Bbox, resolution: usize) -> Result<LevelSet> {
    let basis = Basis::new(&fit.basis_spec);
    extract_level_set(&|x: &[f64]| fit.implicit_value(&basis, x), bbox, resolution)
}

/// Zero set of a ground-truth shape.
pub fn shape_level_set(shape: &ImplicitShape, bbox: &Bbox, resolution: usize) -> Result<LevelSet> {
    let basis = shape.basis();
    extract_level_set(&|x: &[f64]| basis.implicit_value(&shape.coefficients, x), bbox, resolution)
}

/// Deduplicates interpolated vertices by the grid edge they lie on.
struct EdgeVertices<const K: usize> {
    index: HashMap<(usize, usize), usize>,
    vertices: Vec<[f64; K]>,
}

impl<const K: usize> EdgeVertices<K> {
    fn new() -> Self {
        Self { index: HashMap::new(), vertices: Vec::new() }
    }

    /// Vertex on the edge between nodes `a` and `b` (global indices).
    fn get(&mut self, grid: &Grid, values: &[f64], a: usize, b: usize) -> usize {
        let key = (a.min(b), a.max(b));
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let (a, b) = key;
        let (va, vb) = (values[a], values[b]);
        let t = va / (va - vb);
        let (pa, pb) = (unflatten(grid, a), unflatten(grid, b));
        let mut v = [0.0; K];
        for axis in 0..K {
            let (x0, x1) = (grid.coord(axis, pa[axis]), grid.coord(axis, pb[axis]));
            v[axis] = x0 + t * (x1 - x0);
        }
        let i = self.vertices.len();
        self.vertices.push(v);
        self.index.insert(key, i);
        i
    }
}

fn unflatten(grid: &Grid, mut flat: usize) -> [usize; 3] {
    let mut idx = [0; 3];
    for slot in &mut idx {
        *slot = flat % grid.res;
        flat /= grid.res;
    }
    idx
}

fn marching_squares<G: Fn(&[f64]) -> f64>(g: &G, grid: &Grid, values: &[f64]) -> Geometry {
    let r = grid.res;
    let at = |i: usize, j: usize| i + j * r;
    let mut verts = EdgeVertices::<2>::new();
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for j in 0..r - 1 {
        for i in 0..r - 1 {
            // corners counter-clockwise from the lower left
            let c = [at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)];
            let pos: [bool; 4] = std::array::from_fn(|k| values[c[k]] > 0.0);
            let crossed: Vec<usize> = (0..4).filter(|&e| pos[e] != pos[(e + 1) % 4]).collect();
            let mut edge = |e: usize| verts.get(grid, values, c[e], c[(e + 1) % 4]);
            match crossed.len() {
                2 => {
                    let (a, b) = (edge(crossed[0]), edge(crossed[1]));
                    segments.push((a, b));
                }
                4 => {
                    let center = g(&[grid.coord(0, i) + 0.5 * grid.step[0], grid.coord(1, j) + 0.5 * grid.step[1]]);
                    if (center > 0.0) == pos[0] {
                        // corners 0 and 2 joined through the center; cut off 1 and 3
                        segments.push((edge(0), edge(1)));
                        segments.push((edge(2), edge(3)));
                    } else {
                        segments.push((edge(3), edge(0)));
                        segments.push((edge(1), edge(2)));
                    }
                }
                _ => {}
            }
        }
    }
    Geometry::Polylines(chain_segments(&verts.vertices, &segments))
}

/// Links segments sharing endpoints into chains. Open chains (ending on the
/// box boundary) come first, then closed loops.
fn chain_segments(vertices: &[[f64; 2]], segments: &[(usize, usize)]) -> Vec<Vec<[f64; 2]>> {
    let mut adjacent: Vec<Vec<usize>> = vec![Vec::new(); vertices.len()];
    for &(a, b) in segments {
        adjacent[a].push(b);
        adjacent[b].push(a);
    }
    let mut visited = vec![false; vertices.len()];
    let mut lines = Vec::new();
    let walk = |start: usize, visited: &mut Vec<bool>| -> Vec<[f64; 2]> {
        let mut chain = vec![start];
        visited[start] = true;
        let mut current = start;
        loop {
            match adjacent[current].iter().find(|&&n| !visited[n]) {
                Some(&next) => {
                    visited[next] = true;
                    chain.push(next);
                    current = next;
                }
                None => {
                    if chain.len() > 2 && adjacent[current].contains(&start) {
                        chain.push(start);
                    }
                    break;
                }
            }
        }
        chain.into_iter().map(|i| vertices[i]).collect()
    };
    for v in 0..vertices.len() {
        if !visited[v] && adjacent[v].len() == 1 {
            lines.push(walk(v, &mut visited));
        }
    }
    for v in 0..vertices.len() {
        if !visited[v] && !adjacent[v].is_empty() {
            lines.push(walk(v, &mut visited));
        }
    }
    lines
}

/// Six tetrahedra per cube, each a monotone path from corner 0 to corner 7.
const KUHN: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn marching_tetrahedra(grid: &Grid, values: &[f64]) -> Geometry {
    let r = grid.res;
    let at = |i: usize, j: usize, k: usize| i + r * (j + r * k);
    let mut verts = EdgeVertices::<3>::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for k in 0..r - 1 {
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                for perm in KUHN {
                    let mut idx = [i, j, k];
                    let mut tet = [at(i, j, k); 4];
                    for (s, &axis) in perm.iter().enumerate() {
                        idx[axis] += 1;
                        tet[s + 1] = at(idx[0], idx[1], idx[2]);
                    }
                    polygonize_tet(grid, values, tet, &mut verts, &mut faces);
                }
            }
        }
    }
    Geometry::Mesh { vertices: verts.vertices, faces }
}

fn polygonize_tet(
    grid: &Grid,
    values: &[f64],
    tet: [usize; 4],
    verts: &mut EdgeVertices<3>,
    faces: &mut Vec<[usize; 3]>,
) {
    let (pos, neg): (Vec<usize>, Vec<usize>) = tet.iter().partition(|&&n| values[n] > 0.0);
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    match (pos.len(), neg.len()) {
        (1, 3) | (3, 1) => {
            let (lone, others) = if pos.len() == 1 { (pos[0], &neg) } else { (neg[0], &pos) };
            let e: Vec<usize> = others.iter().map(|&o| verts.get(grid, values, lone, o)).collect();
            triangles.push([e[0], e[1], e[2]]);
        }
        (2, 2) => {
            let (a, b, c, d) = (pos[0], pos[1], neg[0], neg[1]);
            let ac = verts.get(grid, values, a, c);
            let ad = verts.get(grid, values, a, d);
            let bd = verts.get(grid, values, b, d);
            let bc = verts.get(grid, values, b, c);
            triangles.push([ac, ad, bd]);
            triangles.push([ac, bd, bc]);
        }
        _ => return,
    }
    // orient normals from the negative side toward the positive side
    let centroid = |nodes: &[usize]| -> [f64; 3] {
        let mut s = [0.0; 3];
        for &n in nodes {
            let p = grid.node(&unflatten(grid, n));
            for a in 0..3 {
                s[a] += p[a] / nodes.len() as f64;
            }
        }
        s
    };
    let (cp, cn) = (centroid(&pos), centroid(&neg));
    let dir = [cp[0] - cn[0], cp[1] - cn[1], cp[2] - cn[2]];
    for mut t in triangles {
        let [p0, p1, p2] = t.map(|v| verts.vertices[v]);
        let u = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let w = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
        let n = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
        if n[0] * dir[0] + n[1] * dir[1] + n[2] * dir[2] < 0.0 {
            t.swap(1, 2);
        }
        faces.push(t);
    }
}

fn nearest_distances<const K: usize>(targets: &[Vec<f64>], queries: &PointCloud) -> Vec<f64> {
    let points: Vec<[f64; K]> = targets.iter().map(|v| std::array::from_fn(|a| v[a])).collect();
    let tree: ImmutableKdTree<f64, K> = ImmutableKdTree::new_from_slice(&points);
    let queries: Vec<[f64; K]> = queries
        .iter()
        .filter(|p| p.iter().all(|v| v.is_finite()))
        .map(|p| std::array::from_fn(|a| p[a]))
        .collect();
    queries.par_iter().map(|q| tree.nearest_one::<SquaredEuclidean>(q).distance.sqrt()).collect()
}

/// Mean distance from each original point to the nearest level-set vertex.
pub fn level_set_loss(original: &PointCloud, level_set: &LevelSet) -> Result<f64> {
    if level_set.is_empty() {
        return Err(FitError::EmptyLevelSet);
    }
    let vertices = level_set.vertices();
    if original.dim() != vertices[0].len() {
        return Err(FitError::DimensionMismatch { expected: vertices[0].len(), got: original.dim() });
    }
    let distances = match original.dim() {
        2 => nearest_distances::<2>(&vertices, original),
        3 => nearest_distances::<3>(&vertices, original),
        d => return Err(FitError::UnsupportedDimension(d)),
    };
    if distances.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}

/// Extracts the fitted zero set and returns its loss against `original`.
pub fn fit_loss(original: &PointCloud, fit: &FitResult, bbox: &Bbox, resolution: usize) -> Result<f64> {
    level_set_loss(original, &fit_level_set(fit, bbox, resolution)?)
}

/// Box used when none is given: the original points padded by 10 % of their extent.
pub fn default_bbox(original: &PointCloud) -> Result<Bbox> {
    Bbox::around(original, 0.1)
}

/// Metrics of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_similarity: Option<f64>,
    /// Distance to the nearer of the two unit ground-truth vectors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficient_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub resolution: usize,
    pub cell_diagonal: Option<f64>,
    pub level_set_vertices: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub euler_characteristic: Option<i64>,
    pub runtime_seconds: f64,
    pub warnings: Vec<String>,
}

/// Computes every metric the inputs allow. Coefficients are compared in the
/// data frame; the loss needs the noiseless points.
pub fn evaluate(
    fit: &FitResult,
    original: Option<&PointCloud>,
    a_star: Option<&[f64]>,
    bbox: Option<&Bbox>,
    resolution: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut report = EvalReport {
        cosine_similarity: None,
        coefficient_distance: None,
        loss: None,
        resolution,
        cell_diagonal: None,
        level_set_vertices: 0,
        euler_characteristic: None,
        runtime_seconds: 0.0,
        warnings: Vec::new(),
    };
    if let Some(a_star) = a_star {
        let coefficients = fit.coefficients_in_data_frame()?;
        report.cosine_similarity = Some(cosine_similarity(&coefficients, a_star)?);
        report.coefficient_distance = Some(coefficient_distance(&coefficients, a_star)?);
    }
    if let Some(original) = original {
        let bbox = match bbox {
            Some(b) => b.clone(),
            None => default_bbox(original)?,
        };
        let level_set = fit_level_set(fit, &bbox, resolution)?;
        report.cell_diagonal = Some(level_set.cell_diagonal());
        report.level_set_vertices = level_set.vertices().len();
        report.euler_characteristic = level_set.euler_characteristic();
        report.warnings.extend(level_set.warnings.iter().cloned());
        if !level_set.is_empty() {
            report.loss = Some(level_set_loss(original, &level_set)?);
        }
    }
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::builtin_shape;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        let a = [0.1, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, -1.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&neg, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = [0.6, 0.8];
        assert_eq!(coefficient_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(coefficient_distance(&[-0.6, -0.8], &a).unwrap(), 0.0);
        assert!((coefficient_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(coefficient_distance(&[1.0], &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(v in prop::collection::vec(-10.0f64..10.0, 4), w in prop::collection::vec(-10.0f64..10.0, 4), k in prop::sample::select(vec![-3.0, -0.5, 0.25, 7.0])) {
            prop_assume!(norm(&v) > 1e-3 && norm(&w) > 1e-3);
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let (c1, c2) = (cosine_similarity(&v, &w).unwrap(), cosine_similarity(&scaled, &w).unwrap());
            prop_assert!((c1 - c2).abs() <= 1e-15);
            prop_assert!((0.0..=1.0).contains(&c1));
        }

        #[test]
        fn zero_distance_iff_unit_cosine(v in prop::collection::vec(-10.0f64..10.0, 3), k in -5.0f64..5.0) {
            prop_assume!(norm(&v) > 1e-3 && k.abs() > 1e-3);
            let w: Vec<f64> = v.iter().map(|x| x * k).collect();
            prop_assert!(coefficient_distance(&v, &w).unwrap() <= 1e-12);
            prop_assert!((cosine_similarity(&v, &w).unwrap() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn circle_polyline_lies_on_the_circle() {
        let shape = builtin_shape("unit-circle").unwrap();
        let ls = shape_level_set(&shape, &Bbox::cube(2, 1.5), 256).unwrap();
        let Geometry::Polylines(lines) = &ls.geometry else { panic!("expected curves") };
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].first(), lines[0].last());
        let bound = 2.0 * ls.cell_diagonal();
        for p in &lines[0] {
            assert!((p[0].hypot(p[1]) - 1.0).abs() <= bound);
        }
        assert!(ls.export().starts_with("curve,x1,x2\n0,"));
    }

    #[test]
    fn sign_definite_function_gives_empty_set_with_warning() {
        let ls = extract_level_set(&|x: &[f64]| x[0] * x[0] + x[1] * x[1] + 1.0, &Bbox::cube(2, 1.0), 32).unwrap();
        assert!(ls.is_empty());
        assert_eq!(ls.warnings.len(), 1);
        let cloud = PointCloud::from_points(&[[0.0, 0.0]]).unwrap();
        assert!(matches!(level_set_loss(&cloud, &ls), Err(FitError::EmptyLevelSet)));
    }

    #[test]
    fn argument_checks() {
        let g = |_: &[f64]| 1.0;
        assert!(matches!(extract_level_set(&g, &Bbox::cube(4, 1.0), 32), Err(FitError::UnsupportedDimension(4))));
        assert!(extract_level_set(&g, &Bbox::cube(2, 1.0), 8).is_err());
    }

    #[test]
    fn saddle_uses_center_sign() {
        // g = x y + s: four alternating corners around the origin, center sign decides
        let bbox = Bbox::new(vec![-1.0; 2], vec![1.0; 2]).unwrap();
        for (s, expected_open) in [(0.1, 2), (-0.1, 2)] {
            let ls = extract_level_set(&|p: &[f64]| p[0] * p[1] + s, &bbox, 16).unwrap();
            let Geometry::Polylines(lines) = &ls.geometry else { panic!() };
            assert_eq!(lines.len(), expected_open);
            for l in lines {
                for p in l {
                    // branches never cross into the quadrants where x y + s has the other sign
                    assert!((p[0] * p[1] + s).abs() < 0.2);
                }
            }
        }
    }

    #[test]
    fn sphere_mesh_is_closed() {
        let g = |p: &[f64]| p[0] * p[0] + p[1] * p[1] + p[2] * p[2] - 0.5;
        let ls = extract_level_set(&g, &Bbox::cube(3, 1.0), 24).unwrap();
        assert_eq!(ls.euler_characteristic(), Some(2));
        let Geometry::Mesh { vertices, faces } = &ls.geometry else { panic!() };
        assert!(faces.iter().all(|f| f.iter().all(|&i| i < vertices.len())));
        // outward orientation: positive side is outside
        let mut volume = 0.0;
        for f in faces {
            let [a, b, c] = f.map(|i| vertices[i]);
            volume += a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0]);
        }
        volume /= 6.0;
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.5f64.powf(1.5);
        assert!((volume - exact).abs() < 0.02 * exact, "{volume} vs {exact}");
        let obj = ls.export();
        assert!(obj.starts_with("v ") && obj.contains("\nf "));
    }

    #[test]
    fn cone_mesh_is_an_annulus() {
        let shape = builtin_shape("elliptic-cone").unwrap();
        let ls = shape_level_set(&shape, &Bbox::cube(3, 1.0), 48).unwrap();
        assert_eq!(ls.euler_characteristic(), Some(0));
        let basis = shape.basis();
        let (v0, gmax) = (ls.vertices(), 6.0);
        let bound = gmax * ls.cell_diagonal();
        assert!(v0.iter().all(|v| basis.implicit_value(&shape.coefficients, v).abs() <= bound));
    }

    #[test]
    fn vertex_residual_within_lipschitz_bound() {
        let shape = builtin_shape("quartic-blob").unwrap();
        let basis = shape.basis();
        let bbox = Bbox::cube(2, 1.0);
        let ls = shape_level_set(&shape, &bbox, 64).unwrap();
        let mut lipschitz: f64 = 0.0;
        for i in 0..=100 {
            for j in 0..=100 {
                let p = [-1.0 + 0.02 * i as f64, -1.0 + 0.02 * j as f64];
                let (_, grad) = basis.value_and_gradient(&shape.coefficients, &p);
                lipschitz = lipschitz.max(norm(&grad));
            }
        }
        let bound = 1.1 * lipschitz * ls.cell_diagonal();
        for v in ls.vertices() {
            assert!(basis.implicit_value(&shape.coefficients, &v).abs() <= bound);
        }
    }

    #[test]
    fn exact_shape_loss_is_below_discretization() {
        let shape = builtin_shape("unit-circle").unwrap();
        let angles = (0..200).map(|k| k as f64 * 0.0314159);
        let pts: Vec<[f64; 2]> = angles.map(|t| [t.cos(), t.sin()]).collect();
        let cloud = PointCloud::from_points(&pts).unwrap();
        let bbox = default_bbox(&cloud).unwrap();
        let mut previous: Option<(f64, f64)> = None;
        for res in [64, 128, 256] {
            let ls = shape_level_set(&shape, &bbox, res).unwrap();
            let loss = level_set_loss(&cloud, &ls).unwrap();
            assert!(loss <= 2.0 * ls.cell_diagonal());
            if let Some((coarse, diag)) = previous {
                assert!(loss <= coarse + diag);
            }
            previous = Some((loss, ls.cell_diagonal()));
        }
    }
}
