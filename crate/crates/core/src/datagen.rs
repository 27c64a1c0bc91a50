//! Synthetic desk-scale dataset: parametric shape families (chair, lamp,
//! table) sampled as surface point clouds, sparse edge-sampled sketches with
//! global distortions, and split manifests.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{write_cloud, CloudKind, Point3, PointCloud, DEFAULT_CLOUD_SIZE};

pub const SKETCH_EDGE_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Chair,
    Lamp,
    Table,
}

impl Family {
    pub fn parse(s: &str) -> Result<Family> {
        match s {
            "chair" => Ok(Family::Chair),
            "lamp" => Ok(Family::Lamp),
            "table" => Ok(Family::Table),
            other => Err(Error::Config(format!("unknown family: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LegStyle {
    Four,
    Pedestal,
}

/// Parametric description of one synthetic shape. All dimensions are in
/// model units before unit-box normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: Family,
    pub seed: u64,
    pub seat_width: f64,
    pub seat_depth: f64,
    pub seat_height: f64,
    pub back_height: f64,
    pub back_tilt_deg: f64,
    pub leg_style: LegStyle,
    pub leg_thickness: f64,
    pub armrests: bool,
}

impl ShapeSpec {
    /// Draws family parameters from their documented ranges, deterministic
    /// per seed.
    pub fn sample(family: Family, seed: u64) -> ShapeSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = match family {
            Family::Chair => ShapeSpec {
                family,
                seed,
                seat_width: rng.random_range(0.8..1.6),
                seat_depth: rng.random_range(0.8..1.4),
                seat_height: rng.random_range(0.6..1.1),
                back_height: rng.random_range(0.6..1.4),
                back_tilt_deg: rng.random_range(0.0..15.0),
                leg_style: if rng.random_range(0.0..1.0) < 0.25 {
                    LegStyle::Pedestal
                } else {
                    LegStyle::Four
                },
                leg_thickness: rng.random_range(0.05..0.12),
                armrests: rng.random_range(0.0..1.0) < 0.4,
            },
            Family::Lamp => ShapeSpec {
                family,
                seed,
                seat_width: rng.random_range(0.5..1.0),   // base diameter
                seat_depth: rng.random_range(0.06..0.12), // pole radius x10
                seat_height: rng.random_range(0.8..1.4),  // pole height
                back_height: rng.random_range(0.25..0.5), // shade height
                back_tilt_deg: 0.0,
                leg_style: LegStyle::Pedestal,
                leg_thickness: rng.random_range(0.4..0.9), // shade diameter
                armrests: false,
            },
            Family::Table => ShapeSpec {
                family,
                seed,
                seat_width: rng.random_range(1.2..2.0),
                seat_depth: rng.random_range(0.8..1.4),
                seat_height: rng.random_range(0.7..1.1),
                back_height: 0.0,
                back_tilt_deg: 0.0,
                leg_style: if rng.random_range(0.0..1.0) < 0.25 {
                    LegStyle::Pedestal
                } else {
                    LegStyle::Four
                },
                leg_thickness: rng.random_range(0.06..0.14),
                armrests: false,
            },
        };
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.seat_width,
            self.seat_depth,
            self.seat_height,
            self.leg_thickness,
        ];
        if dims.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidArgument(
                "shape spec: dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn parts(&self) -> Vec<Part> {
        match self.family {
            Family::Chair => chair_parts(self),
            Family::Lamp => lamp_parts(self),
            Family::Table => table_parts(self),
        }
    }
}

/// Solid primitive whose surface and edges are sampled.
#[derive(Debug, Clone, Copy)]
pub enum Part {
    /// Axis-aligned box, optionally tilted about the x axis through its center.
    Box {
        center: [f64; 3],
        half: [f64; 3],
        x_tilt_deg: f64,
    },
    /// Upright cylinder (axis +y) standing on its base center.
    Cylinder {
        base: [f64; 3],
        radius: f64,
        height: f64,
    },
}

fn rotate_x(p: [f64; 3], deg: f64, about: [f64; 3]) -> [f64; 3] {
    let a = deg.to_radians();
    let (s, c) = a.sin_cos();
    let y = p[1] - about[1];
    let z = p[2] - about[2];
    [p[0], about[1] + c * y - s * z, about[2] + s * y + c * z]
}

fn chair_parts(s: &ShapeSpec) -> Vec<Part> {
    let mut parts = Vec::new();
    let seat_t = 0.1;
    let seat_y = s.seat_height + seat_t / 2.0;
    parts.push(Part::Box {
        center: [0.0, seat_y, 0.0],
        half: [s.seat_width / 2.0, seat_t / 2.0, s.seat_depth / 2.0],
        x_tilt_deg: 0.0,
    });
    // backrest rises from the rear seat edge, tilted backwards
    parts.push(Part::Box {
        center: [
            0.0,
            s.seat_height + seat_t + s.back_height / 2.0,
            -s.seat_depth / 2.0 + 0.05,
        ],
        half: [s.seat_width / 2.0, s.back_height / 2.0, 0.05],
        x_tilt_deg: -s.back_tilt_deg,
    });
    match s.leg_style {
        LegStyle::Four => {
            let t = s.leg_thickness;
            for &sx in &[-1.0, 1.0] {
                for &sz in &[-1.0, 1.0] {
                    parts.push(Part::Box {
                        center: [
                            sx * (s.seat_width / 2.0 - t / 2.0),
                            s.seat_height / 2.0,
                            sz * (s.seat_depth / 2.0 - t / 2.0),
                        ],
                        half: [t / 2.0, s.seat_height / 2.0, t / 2.0],
                        x_tilt_deg: 0.0,
                    });
                }
            }
        }
        LegStyle::Pedestal => {
            parts.push(Part::Cylinder {
                base: [0.0, 0.0, 0.0],
                radius: (s.leg_thickness * 1.2).max(0.06),
                height: s.seat_height,
            });
            parts.push(Part::Cylinder {
                base: [0.0, 0.0, 0.0],
                radius: 0.35 * s.seat_width.min(s.seat_depth),
                height: 0.06,
            });
        }
    }
    if s.armrests {
        let arm_y = s.seat_height + seat_t + 0.3;
        for &sx in &[-1.0, 1.0] {
            parts.push(Part::Box {
                center: [sx * (s.seat_width / 2.0 - 0.04), arm_y, 0.0],
                half: [0.04, 0.03, s.seat_depth / 2.0 * 0.8],
                x_tilt_deg: 0.0,
            });
            parts.push(Part::Box {
                center: [sx * (s.seat_width / 2.0 - 0.04), s.seat_height + seat_t + 0.15, s.seat_depth / 2.0 * 0.6],
                half: [0.03, 0.15, 0.03],
                x_tilt_deg: 0.0,
            });
        }
    }
    parts
}

fn lamp_parts(s: &ShapeSpec) -> Vec<Part> {
    let base_r = s.seat_width / 2.0;
    let base_h = 0.08;
    let pole_r = s.seat_depth / 2.0;
    let pole_h = s.seat_height;
    let shade_r = s.leg_thickness / 2.0;
    let shade_h = s.back_height;
    vec![
        Part::Cylinder {
            base: [0.0, 0.0, 0.0],
            radius: base_r,
            height: base_h,
        },
        Part::Cylinder {
            base: [0.0, base_h, 0.0],
            radius: pole_r,
            height: pole_h,
        },
        Part::Cylinder {
            base: [0.0, base_h + pole_h, 0.0],
            radius: shade_r,
            height: shade_h,
        },
    ]
}

fn table_parts(s: &ShapeSpec) -> Vec<Part> {
    let top_t = 0.08;
    let mut parts = vec![Part::Box {
        center: [0.0, s.seat_height + top_t / 2.0, 0.0],
        half: [s.seat_width / 2.0, top_t / 2.0, s.seat_depth / 2.0],
        x_tilt_deg: 0.0,
    }];
    match s.leg_style {
        LegStyle::Four => {
            let t = s.leg_thickness;
            for &sx in &[-1.0, 1.0] {
                for &sz in &[-1.0, 1.0] {
                    parts.push(Part::Box {
                        center: [
                            sx * (s.seat_width / 2.0 - t),
                            s.seat_height / 2.0,
                            sz * (s.seat_depth / 2.0 - t),
                        ],
                        half: [t / 2.0, s.seat_height / 2.0, t / 2.0],
                        x_tilt_deg: 0.0,
                    });
                }
            }
        }
        LegStyle::Pedestal => {
            parts.push(Part::Cylinder {
                base: [0.0, 0.0, 0.0],
                radius: s.leg_thickness,
                height: s.seat_height,
            });
            parts.push(Part::Cylinder {
                base: [0.0, 0.0, 0.0],
                radius: 0.3 * s.seat_width.min(s.seat_depth),
                height: 0.06,
            });
        }
    }
    parts
}

/// One sampleable surface patch with its area.
enum Surface {
    /// Box face: origin corner plus two spanning edge vectors, then tilt.
    Quad {
        origin: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        tilt_deg: f64,
        about: [f64; 3],
    },
    Lateral {
        base: [f64; 3],
        radius: f64,
        height: f64,
    },
    Cap {
        center: [f64; 3],
        radius: f64,
    },
}

impl Surface {
    fn area(&self) -> f64 {
        match self {
            Surface::Quad { u, v, .. } => {
                let lu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                let lv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                lu * lv
            }
            Surface::Lateral { radius, height, .. } => {
                2.0 * std::f64::consts::PI * radius * height
            }
            Surface::Cap { radius, .. } => std::f64::consts::PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self {
            Surface::Quad {
                origin,
                u,
                v,
                tilt_deg,
                about,
            } => {
                let a: f64 = rng.random_range(0.0..1.0);
                let b: f64 = rng.random_range(0.0..1.0);
                let p = [
                    origin[0] + a * u[0] + b * v[0],
                    origin[1] + a * u[1] + b * v[1],
                    origin[2] + a * u[2] + b * v[2],
                ];
                rotate_x(p, *tilt_deg, *about)
            }
            Surface::Lateral {
                base,
                radius,
                height,
            } => {
                let theta: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                let y: f64 = rng.random_range(0.0..*height);
                [
                    base[0] + radius * theta.cos(),
                    base[1] + y,
                    base[2] + radius * theta.sin(),
                ]
            }
            Surface::Cap { center, radius } => {
                let theta: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                [
                    center[0] + r * theta.cos(),
                    center[1],
                    center[2] + r * theta.sin(),
                ]
            }
        }
    }
}

fn part_surfaces(part: &Part) -> Vec<Surface> {
    match *part {
        Part::Box {
            center,
            half,
            x_tilt_deg,
        } => {
            let mut faces = Vec::with_capacity(6);
            // two faces per axis
            for axis in 0..3 {
                for &side in &[-1.0, 1.0] {
                    let mut origin = [
                        center[0] - half[0],
                        center[1] - half[1],
                        center[2] - half[2],
                    ];
                    origin[axis] = center[axis] + side * half[axis];
                    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
                    let mut u = [0.0; 3];
                    u[others[0]] = 2.0 * half[others[0]];
                    let mut v = [0.0; 3];
                    v[others[1]] = 2.0 * half[others[1]];
                    faces.push(Surface::Quad {
                        origin,
                        u,
                        v,
                        tilt_deg: x_tilt_deg,
                        about: center,
                    });
                }
            }
            faces
        }
        Part::Cylinder {
            base,
            radius,
            height,
        } => vec![
            Surface::Lateral {
                base,
                radius,
                height,
            },
            Surface::Cap {
                center: base,
                radius,
            },
            Surface::Cap {
                center: [base[0], base[1] + height, base[2]],
                radius,
            },
        ],
    }
}

/// Curve along a part boundary, sampled for sketches.
enum Edge {
    Segment {
        a: [f64; 3],
        b: [f64; 3],
    },
    Circle {
        center: [f64; 3],
        radius: f64,
    },
}

impl Edge {
    fn length(&self) -> f64 {
        match self {
            Edge::Segment { a, b } => {
                let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            }
            Edge::Circle { radius, .. } => 2.0 * std::f64::consts::PI * radius,
        }
    }

    fn at(&self, t: f64) -> [f64; 3] {
        match self {
            Edge::Segment { a, b } => [
                a[0] + t * (b[0] - a[0]),
                a[1] + t * (b[1] - a[1]),
                a[2] + t * (b[2] - a[2]),
            ],
            Edge::Circle { center, radius } => {
                let theta = t * 2.0 * std::f64::consts::PI;
                [
                    center[0] + radius * theta.cos(),
                    center[1],
                    center[2] + radius * theta.sin(),
                ]
            }
        }
    }
}

fn part_edges(part: &Part) -> Vec<Edge> {
    match *part {
        Part::Box {
            center,
            half,
            x_tilt_deg,
        } => {
            let corner = |sx: f64, sy: f64, sz: f64| {
                rotate_x(
                    [
                        center[0] + sx * half[0],
                        center[1] + sy * half[1],
                        center[2] + sz * half[2],
                    ],
                    x_tilt_deg,
                    center,
                )
            };
            let mut edges = Vec::with_capacity(12);
            for &a in &[-1.0, 1.0] {
                for &b in &[-1.0, 1.0] {
                    edges.push(Edge::Segment {
                        a: corner(-1.0, a, b),
                        b: corner(1.0, a, b),
                    });
                    edges.push(Edge::Segment {
                        a: corner(a, -1.0, b),
                        b: corner(a, 1.0, b),
                    });
                    edges.push(Edge::Segment {
                        a: corner(a, b, -1.0),
                        b: corner(a, b, 1.0),
                    });
                }
            }
            edges
        }
        Part::Cylinder {
            base,
            radius,
            height,
        } => {
            let top = [base[0], base[1] + height, base[2]];
            let mut edges = vec![
                Edge::Circle {
                    center: base,
                    radius,
                },
                Edge::Circle {
                    center: top,
                    radius,
                },
            ];
            // silhouette lines
            for &(dx, dz) in &[(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                edges.push(Edge::Segment {
                    a: [base[0] + dx * radius, base[1], base[2] + dz * radius],
                    b: [top[0] + dx * radius, top[1], top[2] + dz * radius],
                });
            }
            edges
        }
    }
}

/// Area-weighted uniform surface sampling over the union of part surfaces,
/// normalized to the unit box. Deterministic per spec seed.
pub fn generate_shape(spec: &ShapeSpec, n_points: usize) -> Result<PointCloud> {
    spec.validate()?;
    if n_points == 0 {
        return Err(Error::InvalidArgument("generate_shape: n_points = 0".into()));
    }
    let surfaces: Vec<Surface> = spec.parts().iter().flat_map(|p| part_surfaces(p)).collect();
    let areas: Vec<f64> = surfaces.iter().map(Surface::area).collect();
    let total: f64 = areas.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let mut pick = rng.random_range(0.0..total);
        let mut idx = 0;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                idx = i;
                break;
            }
            pick -= a;
            idx = i;
        }
        let p = surfaces[idx].sample(&mut rng);
        points.push(Point3::new(p[0], p[1], p[2]));
    }
    PointCloud::new(points, CloudKind::Shape).normalize_unit_box()
}

/// Sketch corruption knobs. `default_corruption` matches the documented
/// recipe; `none` yields clean edge samples.
#[derive(Debug, Clone, Copy)]
pub struct SketchCorruption {
    pub distort: bool,
    pub jitter_sigma: f64,
    pub dropout: f64,
}

impl SketchCorruption {
    pub fn default_corruption() -> Self {
        SketchCorruption {
            distort: true,
            jitter_sigma: 0.02,
            dropout: 0.1,
        }
    }

    pub fn none() -> Self {
        SketchCorruption {
            distort: false,
            jitter_sigma: 0.0,
            dropout: 0.0,
        }
    }
}

/// Sparse sketch synthesis: samples points along part edges, applies a
/// smooth global distortion (per-axis scale in [0.7, 1.4] and a small
/// shear), per-point jitter, and random curve dropout, then resamples to the
/// standard cloud size. If every edge is dropped the sketch is regenerated
/// once with dropout disabled.
pub fn generate_sketch_with(
    spec: &ShapeSpec,
    style_seed: u64,
    corruption: &SketchCorruption,
    out_size: usize,
) -> Result<PointCloud> {
    spec.validate()?;
    let edges: Vec<Edge> = spec.parts().iter().flat_map(|p| part_edges(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed.wrapping_mul(0x85eb_ca6b).wrapping_add(7));

    let kept: Vec<&Edge> = edges
        .iter()
        .filter(|_| !(corruption.dropout > 0.0 && rng.random_range(0.0..1.0) < corruption.dropout))
        .collect();
    let kept: Vec<&Edge> = if kept.is_empty() {
        edges.iter().collect()
    } else {
        kept
    };

    let total_len: f64 = kept.iter().map(|e| e.length()).sum();
    if total_len <= 0.0 {
        return Err(Error::DegenerateGeometry("sketch: zero edge length".into()));
    }

    let scale = if corruption.distort {
        [
            rng.random_range(0.7..1.4),
            rng.random_range(0.7..1.4),
            rng.random_range(0.7..1.4),
        ]
    } else {
        [1.0, 1.0, 1.0]
    };
    let shear = if corruption.distort {
        rng.random_range(-0.15..0.15)
    } else {
        0.0
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut points = Vec::with_capacity(SKETCH_EDGE_POINTS);
    for edge in &kept {
        let count =
            ((edge.length() / total_len * SKETCH_EDGE_POINTS as f64).round() as usize).max(2);
        for i in 0..count {
            let t = i as f64 / (count - 1) as f64;
            let p = edge.at(t);
            let mut x = p[0] * scale[0] + shear * p[1];
            let mut y = p[1] * scale[1];
            let mut z = p[2] * scale[2];
            if corruption.jitter_sigma > 0.0 {
                x += corruption.jitter_sigma * normal.sample(&mut rng);
                y += corruption.jitter_sigma * normal.sample(&mut rng);
                z += corruption.jitter_sigma * normal.sample(&mut rng);
            }
            points.push(Point3::new(x, y, z));
        }
    }
    let cloud = PointCloud::new(points, CloudKind::Sketch).normalize_unit_box()?;
    cloud.resample_uniform(out_size, style_seed ^ 0xabcd_ef01, true)
}

pub fn generate_sketch(spec: &ShapeSpec, style_seed: u64) -> Result<PointCloud> {
    generate_sketch_with(
        spec,
        style_seed,
        &SketchCorruption::default_corruption(),
        DEFAULT_CLOUD_SIZE,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub shape_file: String,
    pub sketch_file: String,
    pub split: Split,
    pub spec: ShapeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_seed: u64,
    pub family_mix: Vec<(String, f64)>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Generates `count` shape/sketch pairs under `out_dir` and writes the
/// manifest. Splits are ~70/10/20 train/val/test, disjoint by shape id:
/// val = floor(0.1 n), test = floor(0.2 n), remainder goes to train.
pub fn build_dataset(
    count: usize,
    family_mix: &[(Family, f64)],
    seed: u64,
    out_dir: &Path,
    points_per_cloud: usize,
) -> Result<DatasetManifest> {
    if count < 10 {
        return Err(Error::InvalidArgument("build_dataset: count < 10".into()));
    }
    let weight_total: f64 = family_mix.iter().map(|(_, w)| w).sum();
    if family_mix.is_empty() || weight_total <= 0.0 {
        return Err(Error::InvalidArgument(
            "build_dataset: empty or zero-weight family mix".into(),
        ));
    }
    let shapes_dir = out_dir.join("shapes");
    let sketches_dir = out_dir.join("sketches");
    std::fs::create_dir_all(&shapes_dir).map_err(|e| Error::io(&shapes_dir, e))?;
    std::fs::create_dir_all(&sketches_dir).map_err(|e| Error::io(&sketches_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // family per index, then split assignment over a seeded shuffle
    let families: Vec<Family> = (0..count)
        .map(|_| {
            let mut pick = rng.random_range(0.0..weight_total);
            for (fam, w) in family_mix {
                if pick < *w {
                    return *fam;
                }
                pick -= w;
            }
            family_mix.last().unwrap().0
        })
        .collect();
    let mut order: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = count / 10;
    let n_test = count / 5;
    let mut split_of = vec![Split::Train; count];
    for (pos, &idx) in order.iter().enumerate() {
        split_of[idx] = if pos < n_val {
            Split::Val
        } else if pos < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("shape_{i:04}");
        let shape_seed = seed
            .wrapping_mul(0x0100_0000_01b3)
            .wrapping_add(i as u64 * 2 + 1);
        let sketch_seed = shape_seed.wrapping_add(1);
        let spec = ShapeSpec::sample(families[i], shape_seed);
        let shape = generate_shape(&spec, points_per_cloud)?;
        let sketch = generate_sketch_with(
            &spec,
            sketch_seed,
            &SketchCorruption::default_corruption(),
            points_per_cloud,
        )?;
        let shape_file = format!("shapes/{id}.xyz");
        let sketch_file = format!("sketches/{id}.xyz");
        write_cloud(&out_dir.join(&shape_file), &shape)?;
        write_cloud(&out_dir.join(&sketch_file), &sketch)?;
        entries.push(ManifestEntry {
            id,
            shape_file,
            sketch_file,
            split: split_of[i],
            spec,
        });
    }
    let manifest = DatasetManifest {
        generator_seed: seed,
        family_mix: family_mix
            .iter()
            .map(|(f, w)| (format!("{f:?}").to_lowercase(), *w))
            .collect(),
        entries,
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Resolves a manifest entry's files into loaded clouds.
pub fn load_entry(dir: &Path, entry: &ManifestEntry) -> Result<(PointCloud, PointCloud)> {
    let shape = crate::geometry::read_cloud(&dir.join(&entry.shape_file))?;
    let sketch = crate::geometry::read_cloud(&dir.join(&entry.sketch_file))?;
    Ok((shape, sketch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer_distance;

    #[test]
    fn shape_deterministic_and_normalized() {
        let spec = ShapeSpec::sample(Family::Chair, 12);
        let a = generate_shape(&spec, 512).unwrap();
        let b = generate_shape(&spec, 512).unwrap();
        assert_eq!(a, b);
        let renorm = a.normalize_unit_box().unwrap();
        for (p, q) in a.points.iter().zip(&renorm.points) {
            assert!(p.dist(q) < 1e-12);
        }
    }

    #[test]
    fn pedestal_chair_has_no_corner_legs() {
        // force a pedestal spec
        let mut seed = 0;
        let spec = loop {
            let s = ShapeSpec::sample(Family::Chair, seed);
            if s.leg_style == LegStyle::Pedestal && !s.armrests {
                break s;
            }
            seed += 1;
        };
        let cloud = generate_shape(&spec, 2048).unwrap();
        // in normalized space, look for points near the x/z extremes below
        // the seat: four-leg chairs have them, pedestal chairs must not
        let (lo, hi) = cloud.bbox();
        let seat_frac = spec.seat_height / (spec.seat_height + 0.1 + spec.back_height);
        let seat_y = lo.y + seat_frac * (hi.y - lo.y);
        let offenders = cloud
            .points
            .iter()
            .filter(|p| {
                p.y < seat_y - 0.05
                    && p.x.abs() > 0.8 * hi.x.max(-lo.x)
                    && p.z.abs() > 0.8 * hi.z.max(-lo.z)
            })
            .count();
        assert_eq!(offenders, 0);
    }

    #[test]
    fn clean_sketch_lies_near_shape() {
        let spec = ShapeSpec::sample(Family::Chair, 3);
        let sketch =
            generate_sketch_with(&spec, 17, &SketchCorruption::none(), 512).unwrap();
        let shape = generate_shape(&spec, 2048).unwrap();
        // sketch points sample edges of the exact shape; after shared
        // normalization they must hug the surface
        let d = crate::geometry::nearest_neighbor_distances(&sketch, &shape).unwrap();
        let max = d.iter().cloned().fold(0.0, f64::max);
        assert!(max < 0.08, "max sketch-to-shape distance {max}");
    }

    #[test]
    fn sketch_deterministic() {
        let spec = ShapeSpec::sample(Family::Lamp, 5);
        let a = generate_sketch(&spec, 9).unwrap();
        let b = generate_sketch(&spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kind, CloudKind::Sketch);
        assert_eq!(a.len(), DEFAULT_CLOUD_SIZE);
    }

    #[test]
    fn corrupted_sketch_closer_to_own_shape_than_random_other() {
        // Monte-Carlo pairwise retrievability: a corrupted sketch stays
        // nonzero-distance from its shape yet closer to it than to a random
        // other shape in at least 90 of 100 trials
        let mut wins = 0;
        let trials = 100;
        for t in 0..trials {
            let spec = ShapeSpec::sample(Family::Chair, 1000 + t);
            let own = generate_shape(&spec, 384).unwrap();
            let other_spec = ShapeSpec::sample(Family::Chair, 3000 + t);
            let other = generate_shape(&other_spec, 384).unwrap();
            let sketch = generate_sketch_with(
                &spec,
                5000 + t,
                &SketchCorruption::default_corruption(),
                384,
            )
            .unwrap();
            let own_cd = chamfer_distance(&sketch, &own).unwrap();
            assert!(own_cd > 0.0);
            if own_cd < chamfer_distance(&sketch, &other).unwrap() {
                wins += 1;
            }
        }
        assert!(
            wins >= 90,
            "only {wins}/{trials} sketches closer to their own shape"
        );
    }

    #[test]
    fn uncorrupted_pairwise_retrievability() {
        // on a 50-shape set, an uncorrupted sketch is closer to its own
        // shape than to another shape in at least 95% of ordered pairs
        let shapes: Vec<(PointCloud, PointCloud)> = (0..50)
            .map(|i| {
                let spec = ShapeSpec::sample(Family::Chair, 7000 + i);
                let shape = generate_shape(&spec, 256).unwrap();
                let sketch =
                    generate_sketch_with(&spec, 9000 + i, &SketchCorruption::none(), 256).unwrap();
                (shape, sketch)
            })
            .collect();
        let mut wins = 0;
        let mut total = 0;
        for (i, (own, sketch)) in shapes.iter().enumerate() {
            let own_cd = chamfer_distance(sketch, own).unwrap();
            for (j, (other, _)) in shapes.iter().enumerate() {
                if i == j {
                    continue;
                }
                total += 1;
                if own_cd < chamfer_distance(sketch, other).unwrap() {
                    wins += 1;
                }
            }
        }
        assert!(
            wins * 100 >= total * 95,
            "only {wins}/{total} pairs favor the own shape"
        );
    }

    #[test]
    fn dataset_split_sizes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mix = [(Family::Chair, 1.0)];
        let m1 = build_dataset(20, &mix, 11, dir.path(), 64).unwrap();
        assert_eq!(m1.split_entries(Split::Train).len(), 14);
        assert_eq!(m1.split_entries(Split::Val).len(), 2);
        assert_eq!(m1.split_entries(Split::Test).len(), 4);

        let bytes1 = std::fs::read(dir.path().join("manifest.json")).unwrap();
        let shape_bytes1 = std::fs::read(dir.path().join(&m1.entries[0].shape_file)).unwrap();

        let dir2 = tempfile::tempdir().unwrap();
        let m2 = build_dataset(20, &mix, 11, dir2.path(), 64).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(
            bytes1,
            std::fs::read(dir2.path().join("manifest.json")).unwrap()
        );
        assert_eq!(
            shape_bytes1,
            std::fs::read(dir2.path().join(&m2.entries[0].shape_file)).unwrap()
        );

        // ids disjoint across splits by construction; verify uniqueness
        let mut ids: Vec<&str> = m1.entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 20);
        // manifest round-trip
        let back = DatasetManifest::read(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, m1);
    }

    #[test]
    fn small_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_dataset(5, &[(Family::Chair, 1.0)], 1, dir.path(), 64).is_err());
    }
}
