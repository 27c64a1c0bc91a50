//! Fitting-gap measures between shapes and the persistent pairwise matrix
//! consumed by the adaptive margin and by evaluation.
//!
//! The asymmetric gap deforms the negative/gallery shape toward the
//! ground-truth shape and measures the residual; the symmetric gap averages
//! both deformation directions. CD variants: lower = more similar. F
//! variants: higher = more similar (0-100 scale).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::deform::{deform_to, DeformConfig};
use crate::error::{Error, Result};
use crate::geometry::{f_score, PointCloud};

pub const DEFAULT_F_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitGapKind {
    AsymCd,
    SymCd,
    AsymF { tau: f64 },
    SymF { tau: f64 },
}

impl FitGapKind {
    pub fn name(&self) -> &'static str {
        match self {
            FitGapKind::AsymCd => "asym_cd",
            FitGapKind::SymCd => "sym_cd",
            FitGapKind::AsymF { .. } => "asym_f",
            FitGapKind::SymF { .. } => "sym_f",
        }
    }

    pub fn tau(&self) -> f64 {
        match self {
            FitGapKind::AsymF { tau } | FitGapKind::SymF { tau } => *tau,
            _ => DEFAULT_F_TAU,
        }
    }

    pub fn is_f(&self) -> bool {
        matches!(self, FitGapKind::AsymF { .. } | FitGapKind::SymF { .. })
    }

    pub fn is_symmetric(&self) -> bool {
        matches!(self, FitGapKind::SymCd | FitGapKind::SymF { .. })
    }

    /// Value of delta(p, p): identical shapes need no deformation.
    pub fn identity_value(&self) -> f64 {
        if self.is_f() {
            100.0
        } else {
            0.0
        }
    }

    /// Converts a stored gap value to a "larger = less similar" distance.
    pub fn as_distance(&self, value: f64) -> f64 {
        if self.is_f() {
            100.0 - value
        } else {
            value
        }
    }

    pub fn parse(name: &str, tau: f64) -> Result<FitGapKind> {
        match name {
            "asym_cd" => Ok(FitGapKind::AsymCd),
            "sym_cd" => Ok(FitGapKind::SymCd),
            "asym_f" => Ok(FitGapKind::AsymF { tau }),
            "sym_f" => Ok(FitGapKind::SymF { tau }),
            other => Err(Error::Config(format!("unknown fit-gap kind: {other}"))),
        }
    }
}

/// Fitting gap delta(p, n): `p` plays the ground-truth role, `n` the gallery
/// role. The deformation always warps the second argument of D toward the
/// first argument of the distance.
pub fn fit_gap(
    p: &PointCloud,
    n: &PointCloud,
    kind: FitGapKind,
    config: &DeformConfig,
) -> Result<f64> {
    match kind {
        FitGapKind::AsymCd => {
            // CD(D(n; p), p)
            let r = deform_to(n, p, config)?;
            Ok(r.final_cd)
        }
        FitGapKind::SymCd => {
            let fwd = deform_to(n, p, config)?;
            let rev = deform_to(p, n, config)?;
            Ok(0.5 * (fwd.final_cd + rev.final_cd))
        }
        FitGapKind::AsymF { tau } => {
            let r = deform_to(n, p, config)?;
            f_score(&r.deformed, p, tau)
        }
        FitGapKind::SymF { tau } => {
            let fwd = deform_to(n, p, config)?;
            let rev = deform_to(p, n, config)?;
            Ok(0.5 * (f_score(&fwd.deformed, p, tau)? + f_score(&rev.deformed, n, tau)?))
        }
    }
}

/// Cached pairwise fitting-gap values over a shape collection. Entry (i, j)
/// is delta(T_i, T_j) with T_i in the ground-truth role.
#[derive(Debug, Clone, PartialEq)]
pub struct FitGapMatrix {
    pub shape_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub kind: FitGapKind,
    pub deform_config_hash: u64,
    index: HashMap<String, usize>,
}

impl FitGapMatrix {
    pub fn new(
        shape_ids: Vec<String>,
        values: Vec<Vec<f64>>,
        kind: FitGapKind,
        deform_config_hash: u64,
    ) -> FitGapMatrix {
        let index = shape_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        FitGapMatrix {
            shape_ids,
            values,
            kind,
            deform_config_hash,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.shape_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape_ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, p_index: usize, n_index: usize) -> f64 {
        self.values[p_index][n_index]
    }

    pub fn get_by_id(&self, p_id: &str, n_id: &str) -> Result<f64> {
        let pi = self.index_of(p_id).ok_or_else(|| Error::IncompleteMatrix {
            row: p_id.into(),
            col: n_id.into(),
        })?;
        let ni = self.index_of(n_id).ok_or_else(|| Error::IncompleteMatrix {
            row: p_id.into(),
            col: n_id.into(),
        })?;
        Ok(self.values[pi][ni])
    }
}

/// M_S: maximum distance from shape `p_index` to the negatives. F-kind
/// values are converted to distances (100 - value) first.
pub fn max_gap_to_negatives(
    p_index: usize,
    negative_indices: &[usize],
    matrix: &FitGapMatrix,
) -> Result<f64> {
    if negative_indices.is_empty() {
        return Err(Error::InvalidArgument(
            "max_gap_to_negatives: empty negative set".into(),
        ));
    }
    if negative_indices.contains(&p_index) {
        return Err(Error::InvalidArgument(
            "max_gap_to_negatives: negatives include the anchor".into(),
        ));
    }
    let m = negative_indices
        .iter()
        .map(|&j| matrix.kind.as_distance(matrix.get(p_index, j)))
        .fold(f64::NEG_INFINITY, f64::max);
    if m <= 0.0 {
        return Err(Error::DegenerateBatch(
            "all negatives identical to the anchor shape (M_S = 0)".into(),
        ));
    }
    Ok(m)
}

/// Computes the full pairwise matrix, resuming from `cache_path` when a
/// compatible partial or complete cache exists, and writes the completed
/// matrix back. Pair computation is parallel; entries do not depend on
/// scheduling.
pub fn build_matrix(
    shapes: &[(String, PointCloud)],
    kind: FitGapKind,
    config: &DeformConfig,
    cache_path: Option<&Path>,
) -> Result<FitGapMatrix> {
    let n = shapes.len();
    let ids: Vec<String> = shapes.iter().map(|(id, _)| id.clone()).collect();
    {
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::InvalidArgument(format!(
                    "build_matrix: duplicate shape id {id}"
                )));
            }
        }
    }
    let hash = config.digest();

    let mut values = vec![vec![f64::NAN; n]; n];
    let mut done_rows = 0usize;
    if let Some(path) = cache_path {
        if path.exists() {
            let cached = read_cache(path, true)?;
            if cached.kind != kind || cached.deform_config_hash != hash {
                return Err(Error::StaleCache {
                    path: path.into(),
                    reason: "kind or deform-config hash mismatch".into(),
                });
            }
            if cached.shape_ids != ids {
                return Err(Error::StaleCache {
                    path: path.into(),
                    reason: "shape id list mismatch".into(),
                });
            }
            if cached.values.len() == n {
                // complete: no deformations executed
                return Ok(FitGapMatrix::new(ids, cached.values, kind, hash));
            }
            done_rows = cached.values.len();
            for (i, row) in cached.values.into_iter().enumerate() {
                values[i] = row;
            }
        }
    }

    // remaining (row, col) pairs; sym kinds compute the upper triangle only
    let mut pairs = Vec::new();
    for i in done_rows..n {
        for j in 0..n {
            if i == j || (kind.is_symmetric() && j < i && j >= done_rows) {
                continue;
            }
            pairs.push((i, j));
        }
    }
    let computed: Vec<((usize, usize), Result<f64>)> = pairs
        .par_iter()
        .map(|&(i, j)| ((i, j), fit_gap(&shapes[i].1, &shapes[j].1, kind, config)))
        .collect();
    for ((i, j), v) in computed {
        let v = v?;
        values[i][j] = v;
        if kind.is_symmetric() && j >= done_rows {
            values[j][i] = v;
        }
    }
    for i in 0..n {
        values[i][i] = kind.identity_value();
    }

    let matrix = FitGapMatrix::new(ids, values, kind, hash);
    if let Some(path) = cache_path {
        write_cache(path, &matrix)?;
    }
    Ok(matrix)
}

/// Cache text format: header lines (kind, tau, hash, ids), then one
/// whitespace-separated row per shape. Floats use shortest round-trip
/// formatting, so write/read reproduces the matrix bit-exactly.
pub fn write_cache(path: &Path, matrix: &FitGapMatrix) -> Result<()> {
    let mut buf = String::new();
    buf.push_str(&format!("kind={}\n", matrix.kind.name()));
    buf.push_str(&format!("tau={}\n", matrix.kind.tau()));
    buf.push_str(&format!("hash={:016x}\n", matrix.deform_config_hash));
    buf.push_str(&format!("ids={}\n", matrix.shape_ids.join(",")));
    for row in &matrix.values {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        buf.push_str(&cells.join(" "));
        buf.push('\n');
    }
    write_text_atomic(path, &buf)
}

/// Whole-file atomic replace via a sibling temp file.
pub fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a cache file. With `allow_partial`, fewer rows than ids is accepted
/// (resume case); otherwise a short file is a stale-cache error.
pub fn read_cache(path: &Path, allow_partial: bool) -> Result<FitGapMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let stale = |reason: &str| Error::StaleCache {
        path: path.into(),
        reason: reason.into(),
    };
    let header = |prefix: &str, line: Option<&str>| -> Result<String> {
        let line = line.ok_or_else(|| stale("truncated header"))?;
        line.strip_prefix(prefix)
            .map(str::to_string)
            .ok_or_else(|| stale(&format!("expected header line {prefix}...")))
    };
    let kind_name = header("kind=", lines.next())?;
    let tau: f64 = header("tau=", lines.next())?
        .parse()
        .map_err(|_| stale("bad tau"))?;
    let hash = u64::from_str_radix(&header("hash=", lines.next())?, 16)
        .map_err(|_| stale("bad hash"))?;
    let ids: Vec<String> = header("ids=", lines.next())?
        .split(',')
        .map(str::to_string)
        .collect();
    let kind = FitGapKind::parse(&kind_name, tau)?;

    let mut values = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse::<f64>).collect();
        let row = row.map_err(|_| stale("bad matrix value"))?;
        if row.len() != ids.len() {
            return Err(stale("row length mismatch"));
        }
        values.push(row);
    }
    if !allow_partial && values.len() != ids.len() {
        return Err(stale("row count mismatch"));
    }
    if values.len() > ids.len() {
        return Err(stale("more rows than ids"));
    }
    Ok(FitGapMatrix::new(ids, values, kind, hash))
}
