//! Point clouds, unit-box normalization, resampling, and the two base
//! distances (Chamfer distance and F-score) the rest of the pipeline builds on.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kdtree::KdTree;

/// Standard number of points per cloud after resampling.
pub const DEFAULT_CLOUD_SIZE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dist2(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        self.dist2(other).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudKind {
    Shape,
    Sketch,
}

impl fmt::Display for CloudKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CloudKind::Shape => write!(f, "shape"),
            CloudKind::Sketch => write!(f, "sketch"),
        }
    }
}

/// A fixed-size set of 3D points representing either a shape or a sketch.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub kind: CloudKind,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, kind: CloudKind) -> Self {
        PointCloud { points, kind }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn check_non_empty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument(format!("{what}: empty point cloud")));
        }
        Ok(())
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bbox(&self) -> (Point3, Point3) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            lo.z = lo.z.min(p.z);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
            hi.z = hi.z.max(p.z);
        }
        (lo, hi)
    }

    /// Recenters the cloud at the bounding-box center and scales uniformly so
    /// the longest bounding-box edge spans exactly 1. Idempotent.
    pub fn normalize_unit_box(&self) -> Result<PointCloud> {
        self.check_non_empty("normalize_unit_box")?;
        for p in &self.points {
            if !p.is_finite() {
                return Err(Error::InvalidArgument(
                    "normalize_unit_box: non-finite coordinate".into(),
                ));
            }
        }
        let (lo, hi) = self.bbox();
        let extent = (hi.x - lo.x).max(hi.y - lo.y).max(hi.z - lo.z);
        if extent <= 0.0 {
            return Err(Error::DegenerateGeometry(
                "zero-extent cloud (all points identical)".into(),
            ));
        }
        let cx = 0.5 * (lo.x + hi.x);
        let cy = 0.5 * (lo.y + hi.y);
        let cz = 0.5 * (lo.z + hi.z);
        let s = 1.0 / extent;
        let points = self
            .points
            .iter()
            .map(|p| Point3::new((p.x - cx) * s, (p.y - cy) * s, (p.z - cz) * s))
            .collect();
        Ok(PointCloud::new(points, self.kind))
    }

    /// Draws exactly `n` points uniformly with replacement, or returns the
    /// cloud unchanged when `pass_through` is set and `n` equals the source
    /// size. Deterministic per seed.
    pub fn resample_uniform(&self, n: usize, seed: u64, pass_through: bool) -> Result<PointCloud> {
        self.check_non_empty("resample_uniform")?;
        if n == 0 {
            return Err(Error::InvalidArgument("resample_uniform: n = 0".into()));
        }
        if pass_through && n == self.len() {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| self.points[rng.random_range(0..self.len())])
            .collect();
        Ok(PointCloud::new(points, self.kind))
    }
}

/// For each point of `a`, the Euclidean distance to its nearest point of `b`.
/// Exact; ties are broken by the lowest index in `b`.
pub fn nearest_neighbor_distances(a: &PointCloud, b: &PointCloud) -> Result<Vec<f64>> {
    a.check_non_empty("nearest_neighbor_distances")?;
    b.check_non_empty("nearest_neighbor_distances")?;
    let tree = KdTree::build(&b.points);
    Ok(a.points
        .iter()
        .map(|p| tree.nearest(p).1.sqrt())
        .collect())
}

/// Bidirectional mean of squared nearest-neighbor distances:
/// CD(a,b) = mean_{p in a} min_q |p-q|^2 + mean_{q in b} min_p |q-p|^2.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    a.check_non_empty("chamfer_distance")?;
    b.check_non_empty("chamfer_distance")?;
    Ok(chamfer_term(&a.points, &b.points) + chamfer_term(&b.points, &a.points))
}

/// One direction of the Chamfer distance: mean over `a` of squared distance
/// to the nearest point of `b`.
pub fn chamfer_term(a: &[Point3], b: &[Point3]) -> f64 {
    let tree = KdTree::build(b);
    let mut sum = 0.0;
    for p in a {
        sum += tree.nearest(p).1;
    }
    sum / a.len() as f64
}

/// F-score at threshold `tau`, on a 0-100 scale.
pub fn f_score(a: &PointCloud, b: &PointCloud, tau: f64) -> Result<f64> {
    a.check_non_empty("f_score")?;
    b.check_non_empty("f_score")?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("f_score: tau must be > 0".into()));
    }
    let tau2 = tau * tau;
    let count_within = |from: &PointCloud, to: &PointCloud| -> usize {
        let tree = KdTree::build(&to.points);
        from.points
            .iter()
            .filter(|p| tree.nearest(p).1 <= tau2)
            .count()
    };
    let precision = 100.0 * count_within(a, b) as f64 / a.len() as f64;
    let recall = 100.0 * count_within(b, a) as f64 / b.len() as f64;
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Writes the text format: optional header, then one `x y z` line per point.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf = String::new();
    buf.push_str(&format!("# n={} kind={}\n", cloud.len(), cloud.kind));
    for p in &cloud.points {
        buf.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads the text format, with or without the `# n=... kind=...` header.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(f);
    let mut kind = CloudKind::Shape;
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if line.contains("kind=sketch") {
                kind = CloudKind::Sketch;
            }
            continue;
        }
        let mut it = line.split_whitespace();
        let mut coord = |name: &str| -> Result<f64> {
            it.next()
                .ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    reason: format!("missing {name} coordinate"),
                })?
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    reason: format!("bad {name} coordinate: {e}"),
                })
        };
        let x = coord("x")?;
        let y = coord("y")?;
        let z = coord("z")?;
        if it.next().is_some() {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                reason: "more than three fields".into(),
            });
        }
        points.push(Point3::new(x, y, z));
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 0,
            reason: "no points in file".into(),
        });
    }
    Ok(PointCloud::new(points, kind))
}
