//! Point clouds and their CSV / XYZ files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{FitError, Result};

/// `len` points of dimension `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(FitError::InvalidArgument("point dimension must be at least 1".into()));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(FitError::Malformed(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, coords: Vec::new() }
    }

    pub fn from_points<P: AsRef<[f64]>>(points: &[P]) -> Result<Self> {
        let dim = points.first().map(|p| p.as_ref().len()).ok_or(FitError::EmptyDataset)?;
        let mut cloud = Self::empty(dim);
        for p in points {
            cloud.push(p.as_ref())?;
        }
        Ok(cloud)
    }

    pub fn push(&mut self, point: &[f64]) -> Result<()> {
        if point.len() != self.dim {
            return Err(FitError::DimensionMismatch { expected: self.dim, got: point.len() });
        }
        self.coords.extend_from_slice(point);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Largest absolute coordinate over all finite values.
    pub fn max_abs(&self) -> f64 {
        self.coords.iter().filter(|v| v.is_finite()).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Coordinate-wise mean of the finite points.
    pub fn mean(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim];
        let mut count = 0usize;
        for p in self.iter().filter(|p| p.iter().all(|v| v.is_finite())) {
            for (s, v) in sum.iter_mut().zip(p) {
                *s += v;
            }
            count += 1;
        }
        sum.iter().map(|s| s / count.max(1) as f64).collect()
    }

    /// Applies `f` to every point.
    pub fn map(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> PointCloud {
        let mut coords = vec![0.0; self.coords.len()];
        for (src, dst) in self.iter().zip(coords.chunks_exact_mut(self.dim)) {
            f(src, dst);
        }
        PointCloud { dim: self.dim, coords }
    }

    /// Every coordinate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> PointCloud {
        PointCloud { dim: self.dim, coords: self.coords.iter().map(|v| v * factor).collect() }
    }

    /// The first `count` points.
    pub fn truncated(&self, count: usize) -> PointCloud {
        let end = (count * self.dim).min(self.coords.len());
        PointCloud { dim: self.dim, coords: self.coords[..end].to_vec() }
    }
}

/// Plain-text point formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    /// Comma separated with a header row.
    Csv,
    /// Whitespace separated without header.
    Xyz,
}

impl PointFormat {
    /// `.xyz` and `.txt` select XYZ, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("xyz") | Some("txt") => PointFormat::Xyz,
            _ => PointFormat::Csv,
        }
    }
}

/// Parses points, skipping blank lines, `#` comments and a non-numeric header.
pub fn parse_points(text: &str, format: PointFormat) -> Result<PointCloud> {
    let mut cloud: Option<PointCloud> = None;
    let mut row = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        row.clear();
        let fields: Vec<&str> = match format {
            PointFormat::Csv => line.split(',').map(str::trim).collect(),
            PointFormat::Xyz => line.split_whitespace().collect(),
        };
        let mut numeric = true;
        for field in &fields {
            match field.parse::<f64>() {
                Ok(v) => row.push(v),
                Err(_) => {
                    numeric = false;
                    break;
                }
            }
        }
        if !numeric {
            if cloud.is_none() {
                continue; // header
            }
            return Err(FitError::Malformed(format!("line {}: non-numeric field", lineno + 1)));
        }
        match &mut cloud {
            None => cloud = Some(PointCloud { dim: row.len(), coords: row.clone() }),
            Some(c) => c.push(&row).map_err(|_| {
                FitError::Malformed(format!(
                    "line {}: expected {} values, found {}",
                    lineno + 1,
                    c.dim(),
                    row.len()
                ))
            })?,
        }
    }
    cloud.ok_or(FitError::EmptyDataset)
}

/// Formats points; values use the shortest representation that round-trips.
pub fn format_points(cloud: &PointCloud, format: PointFormat) -> String {
    let mut out = String::with_capacity(cloud.coords.len() * 20);
    let sep = match format {
        PointFormat::Csv => {
            let header: Vec<String> = (1..=cloud.dim).map(|i| format!("x{i}")).collect();
            out.push_str(&header.join(","));
            out.push('\n');
            ","
        }
        PointFormat::Xyz => " ",
    };
    for p in cloud.iter() {
        for (i, v) in p.iter().enumerate() {
            if i > 0 {
                out.push_str(sep);
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn read_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    parse_points(&fs::read_to_string(path)?, PointFormat::from_path(path))
}

pub fn write_points(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_points(cloud, PointFormat::from_path(path)))?;
    Ok(())
}
