//! Shared-weight point-cloud encoder: per-point affine layers with max(0, .)
//! activations, a coordinatewise max pool over points, an affine head, and
//! L2 normalization. The same parameters encode sketches and shapes.
//!
//! The backward pass is written by hand and verified against central finite
//! differences; max-pool ties are broken by the lowest point index so
//! gradients are deterministic.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderDims {
    /// Widths of the per-point stage, starting at 3.
    pub point_widths: Vec<usize>,
    /// Widths of the head, starting at the pooled width and ending at D.
    pub head_widths: Vec<usize>,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            point_widths: vec![3, 64, 128, 256],
            head_widths: vec![256, 256, 128],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    w_off: usize,
    b_off: usize,
    in_dim: usize,
    out_dim: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.point_widths.len() < 2 || self.point_widths[0] != 3 {
            return Err(Error::Config(
                "encoder: point stage must start at width 3".into(),
            ));
        }
        if self.head_widths.len() < 2 {
            return Err(Error::Config("encoder: head needs >= 2 widths".into()));
        }
        if self.head_widths[0] != *self.point_widths.last().unwrap() {
            return Err(Error::Config(
                "encoder: head input width must equal pooled width".into(),
            ));
        }
        if self.embedding_dim() < 2 {
            return Err(Error::Config("encoder: D must be >= 2".into()));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.head_widths.last().unwrap()
    }

    pub fn pooled_dim(&self) -> usize {
        *self.point_widths.last().unwrap()
    }

    fn layer_specs(&self) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
        let mut off = 0;
        let mut make = |widths: &[usize]| {
            let mut specs = Vec::new();
            for w in widths.windows(2) {
                let (i, o) = (w[0], w[1]);
                specs.push(LayerSpec {
                    w_off: off,
                    b_off: off + i * o,
                    in_dim: i,
                    out_dim: o,
                });
                off += i * o + o;
            }
            specs
        };
        let point = make(&self.point_widths);
        let head = make(&self.head_widths);
        (point, head)
    }

    pub fn param_count(&self) -> usize {
        let count = |w: &[usize]| -> usize { w.windows(2).map(|p| p[0] * p[1] + p[1]).sum() };
        count(&self.point_widths) + count(&self.head_widths)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    /// All weights and biases, layer by layer (row-major W, then b).
    pub data: Vec<f64>,
}

/// Weights uniform in [-sqrt(3/fan_in), sqrt(3/fan_in)], biases zero.
pub fn init_params(seed: u64, dims: &EncoderDims) -> Result<EncoderParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; dims.param_count()];
    let (point, head) = dims.layer_specs();
    for spec in point.iter().chain(&head) {
        let bound = (3.0 / spec.in_dim as f64).sqrt();
        for w in &mut data[spec.w_off..spec.w_off + spec.in_dim * spec.out_dim] {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(EncoderParams {
        dims: dims.clone(),
        data,
    })
}

/// Unit-length feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn dist2(&self, other: &Embedding) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn dist(&self, other: &Embedding) -> f64 {
        self.dist2(other).sqrt()
    }
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    /// [layer][point * out_dim]: post-activation of each point layer.
    pub(crate) point_acts: Vec<Vec<f64>>,
    /// Winning point index per pooled channel (lowest index on ties).
    pub(crate) argmax: Vec<usize>,
    pub(crate) pooled: Vec<f64>,
    /// [layer][unit]: post-activation of each head layer (last one linear).
    head_acts: Vec<Vec<f64>>,
    norm: f64,
    n_points: usize,
}

fn affine(
    data: &[f64],
    spec: &LayerSpec,
    input: &[f64],
    in_off: usize,
    output: &mut [f64],
    relu: bool,
) {
    for o in 0..spec.out_dim {
        let row = &data[spec.w_off + o * spec.in_dim..spec.w_off + (o + 1) * spec.in_dim];
        let mut acc = data[spec.b_off + o];
        for i in 0..spec.in_dim {
            acc += row[i] * input[in_off + i];
        }
        output[o] = if relu { acc.max(0.0) } else { acc };
    }
}

pub fn encode_with_cache(
    params: &EncoderParams,
    cloud: &PointCloud,
) -> Result<(Embedding, ForwardCache)> {
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("encode: empty cloud".into()));
    }
    let dims = &params.dims;
    let (point_specs, head_specs) = dims.layer_specs();
    let n = cloud.len();

    let mut point_acts: Vec<Vec<f64>> = Vec::with_capacity(point_specs.len());
    let mut prev: Vec<f64> = Vec::with_capacity(n * 3);
    for p in &cloud.points {
        prev.extend_from_slice(&[p.x, p.y, p.z]);
    }
    let mut prev_dim = 3;
    for spec in &point_specs {
        let mut act = vec![0.0; n * spec.out_dim];
        for pt in 0..n {
            affine(
                &params.data,
                spec,
                &prev,
                pt * prev_dim,
                &mut act[pt * spec.out_dim..(pt + 1) * spec.out_dim],
                true,
            );
        }
        point_acts.push(act);
        prev = point_acts.last().unwrap().clone();
        prev_dim = spec.out_dim;
    }

    let pooled_dim = dims.pooled_dim();
    let last = point_acts.last().unwrap();
    let mut pooled = vec![f64::NEG_INFINITY; pooled_dim];
    let mut argmax = vec![0usize; pooled_dim];
    for pt in 0..n {
        for c in 0..pooled_dim {
            let v = last[pt * pooled_dim + c];
            if v > pooled[c] {
                pooled[c] = v;
                argmax[c] = pt;
            }
        }
    }

    let mut head_acts: Vec<Vec<f64>> = Vec::with_capacity(head_specs.len());
    let mut h_prev = pooled.clone();
    for (li, spec) in head_specs.iter().enumerate() {
        let relu = li + 1 < head_specs.len();
        let mut act = vec![0.0; spec.out_dim];
        affine(&params.data, spec, &h_prev, 0, &mut act, relu);
        head_acts.push(act.clone());
        h_prev = act;
    }

    let raw = head_acts.last().unwrap();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::Numeric(format!(
            "encode: degenerate pre-normalization vector (norm = {norm})"
        )));
    }
    let vector: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    Ok((
        Embedding { vector },
        ForwardCache {
            point_acts,
            argmax,
            pooled,
            head_acts,
            norm,
            n_points: n,
        },
    ))
}

/// Maps a normalized cloud to a unit-length embedding. Permutation-invariant
/// and deterministic.
pub fn encode(params: &EncoderParams, cloud: &PointCloud) -> Result<Embedding> {
    Ok(encode_with_cache(params, cloud)?.0)
}

/// Gradient of `upstream . embedding` with respect to every parameter, using
/// the activations cached by a prior forward pass on the same cloud.
pub fn backward_from_cache(
    params: &EncoderParams,
    cloud: &PointCloud,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let dims = &params.dims;
    if upstream.len() != dims.embedding_dim() {
        return Err(Error::InvalidArgument(format!(
            "encode_backward: upstream length {} != D {}",
            upstream.len(),
            dims.embedding_dim()
        )));
    }
    let (point_specs, head_specs) = dims.layer_specs();
    let mut grad = vec![0.0; params.data.len()];
    let n = cache.n_points;

    // through L2 normalization: y = h / |h|, dL/dh = (u - (u.y) y) / |h|
    let raw = cache.head_acts.last().unwrap();
    let dot: f64 = upstream
        .iter()
        .zip(raw)
        .map(|(u, r)| u * r / cache.norm)
        .sum();
    let mut g: Vec<f64> = upstream
        .iter()
        .zip(raw)
        .map(|(u, r)| (u - dot * r / cache.norm) / cache.norm)
        .collect();

    // head layers, last to first
    for (li, spec) in head_specs.iter().enumerate().rev() {
        if li + 1 < head_specs.len() {
            // relu mask: post > 0 iff pre > 0
            for (gv, &a) in g.iter_mut().zip(&cache.head_acts[li]) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let input: &[f64] = if li == 0 {
            &cache.pooled
        } else {
            &cache.head_acts[li - 1]
        };
        let mut g_in = vec![0.0; spec.in_dim];
        for o in 0..spec.out_dim {
            grad[spec.b_off + o] += g[o];
            for i in 0..spec.in_dim {
                grad[spec.w_off + o * spec.in_dim + i] += g[o] * input[i];
                g_in[i] += params.data[spec.w_off + o * spec.in_dim + i] * g[o];
            }
        }
        g = g_in;
    }

    // scatter the pooled gradient to the winning point per channel
    let pooled_dim = dims.pooled_dim();
    let mut g_points = vec![0.0; n * pooled_dim];
    for c in 0..pooled_dim {
        g_points[cache.argmax[c] * pooled_dim + c] = g[c];
    }

    // point layers, last to first
    let mut g_act = g_points;
    for (li, spec) in point_specs.iter().enumerate().rev() {
        let act = &cache.point_acts[li];
        let mut g_in = vec![0.0; n * spec.in_dim];
        let mut input_buf;
        for pt in 0..n {
            let g_pt = &mut g_act[pt * spec.out_dim..(pt + 1) * spec.out_dim];
            let mut any = false;
            for (gv, &a) in g_pt.iter_mut().zip(&act[pt * spec.out_dim..]) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
                any |= *gv != 0.0;
            }
            if !any {
                continue;
            }
            let input: &[f64] = if li == 0 {
                let p = &cloud.points[pt];
                input_buf = [p.x, p.y, p.z];
                &input_buf
            } else {
                &cache.point_acts[li - 1][pt * spec.in_dim..(pt + 1) * spec.in_dim]
            };
            for o in 0..spec.out_dim {
                let gv = g_pt[o];
                if gv == 0.0 {
                    continue;
                }
                grad[spec.b_off + o] += gv;
                for i in 0..spec.in_dim {
                    grad[spec.w_off + o * spec.in_dim + i] += gv * input[i];
                    g_in[pt * spec.in_dim + i] +=
                        params.data[spec.w_off + o * spec.in_dim + i] * gv;
                }
            }
        }
        g_act = g_in;
    }

    Ok(grad)
}

/// Convenience wrapper: forward then backward in one call.
pub fn encode_backward(
    params: &EncoderParams,
    cloud: &PointCloud,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let (_, cache) = encode_with_cache(params, cloud)?;
    backward_from_cache(params, cloud, &cache, upstream)
}

/// Max relative error of the analytic parameter gradient against central
/// finite differences (step 1e-4) of `upstream . encode`.
pub fn grad_check_encoder(
    params: &EncoderParams,
    cloud: &PointCloud,
    upstream: &[f64],
) -> Result<f64> {
    let analytic = encode_backward(params, cloud, upstream)?;
    let mut work = params.clone();
    let h = 1e-4;
    let mut max_rel = 0.0f64;
    for i in 0..work.data.len() {
        let saved = work.data[i];
        work.data[i] = saved + h;
        let (e_p, c_p) = encode_with_cache(&work, cloud)?;
        let ep: f64 = e_p.vector.iter().zip(upstream).map(|(v, u)| v * u).sum();
        work.data[i] = saved - h;
        let (e_m, c_m) = encode_with_cache(&work, cloud)?;
        let em: f64 = e_m.vector.iter().zip(upstream).map(|(v, u)| v * u).sum();
        work.data[i] = saved;
        // the network is only piecewise smooth: when the probe itself flips
        // a relu state or pool winner, the central difference straddles a
        // kink and no subgradient can match it, so skip that coordinate
        if activation_signature(&c_p) != activation_signature(&c_m) {
            continue;
        }
        let fd = (ep - em) / (2.0 * h);
        let an = analytic[i];
        let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Discrete state of the piecewise-linear parts of the network: relu
/// activity per unit plus the pool winner per channel.
fn activation_signature(cache: &ForwardCache) -> (Vec<bool>, Vec<usize>, Vec<bool>) {
    let point: Vec<bool> = cache
        .point_acts
        .iter()
        .flat_map(|layer| layer.iter().map(|&a| a > 0.0))
        .collect();
    let n_head = cache.head_acts.len();
    let head: Vec<bool> = cache
        .head_acts
        .iter()
        .take(n_head.saturating_sub(1))
        .flat_map(|layer| layer.iter().map(|&a| a > 0.0))
        .collect();
    (point, cache.argmax.clone(), head)
}

/// Trained encoder state written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub seed: u64,
    pub epoch: usize,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let dims = &ckpt.params.dims;
    let fmt_widths = |w: &[usize]| {
        w.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut buf = String::new();
    buf.push_str(&format!("point_widths={}\n", fmt_widths(&dims.point_widths)));
    buf.push_str(&format!("head_widths={}\n", fmt_widths(&dims.head_widths)));
    buf.push_str(&format!("seed={}\n", ckpt.seed));
    buf.push_str(&format!("epoch={}\n", ckpt.epoch));
    for v in &ckpt.params.data {
        buf.push_str(&format!("{v}\n"));
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut header = |prefix: &str| -> Result<String> {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| Error::Parse {
                path: path.into(),
                line: 0,
                reason: "truncated checkpoint".into(),
            })?;
        line.strip_prefix(prefix)
            .map(str::to_string)
            .ok_or_else(|| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                reason: format!("expected {prefix}..."),
            })
    };
    let parse_widths = |s: &str| -> Result<Vec<usize>> {
        s.split(',')
            .map(|t| {
                t.parse::<usize>().map_err(|_| Error::Parse {
                    path: path.into(),
                    line: 0,
                    reason: format!("bad width {t}"),
                })
            })
            .collect()
    };
    let point_widths = parse_widths(&header("point_widths=")?)?;
    let head_widths = parse_widths(&header("head_widths=")?)?;
    let seed: u64 = header("seed=")?.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line: 3,
        reason: "bad seed".into(),
    })?;
    let epoch: usize = header("epoch=")?.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line: 4,
        reason: "bad epoch".into(),
    })?;
    let dims = EncoderDims {
        point_widths,
        head_widths,
    };
    dims.validate()?;
    let mut data = Vec::with_capacity(dims.param_count());
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        data.push(line.parse::<f64>().map_err(|_| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            reason: "bad parameter value".into(),
        })?);
    }
    if data.len() != dims.param_count() {
        return Err(Error::Parse {
            path: path.into(),
            line: 0,
            reason: format!(
                "parameter count {} != expected {}",
                data.len(),
                dims.param_count()
            ),
        });
    }
    Ok(Checkpoint {
        params: EncoderParams { dims, data },
        seed,
        epoch,
    })
}
