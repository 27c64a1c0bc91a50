//! Siamese training: triplet loss with a fixed or adaptive margin, the
//! regression baseline, batch construction, augmentation, and the
//! adaptive-moment update loop. Deterministic end to end for a given seed,
//! including under multi-threaded forward/backward passes (per-cloud results
//! are reduced in a fixed order).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::deform::{fnv1a64, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::encoder::{
    backward_from_cache, encode_with_cache, init_params, Checkpoint, Embedding, EncoderDims,
};
use crate::error::{Error, Result};
use crate::evaluation::{avg_metric_at_k, rank_gallery, top_k_accuracy, CdMatrix};
use crate::fitgap::{max_gap_to_negatives, FitGapKind, FitGapMatrix};
use crate::geometry::{CloudKind, Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletMode {
    Fixed,
    Adaptive,
    Regression,
}

impl TripletMode {
    pub fn parse(s: &str) -> Result<TripletMode> {
        match s {
            "fixed" => Ok(TripletMode::Fixed),
            "adaptive" => Ok(TripletMode::Adaptive),
            "regression" => Ok(TripletMode::Regression),
            other => Err(Error::Config(format!("unknown mode: {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletConfig {
    pub mode: TripletMode,
    pub fixed_margin: f64,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub augment: bool,
    pub seed: u64,
    pub gap_kind: FitGapKind,
    /// beta_R: scale applied to the normalized gap target in regression mode.
    pub regression_scale: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            mode: TripletMode::Adaptive,
            fixed_margin: 0.6,
            alpha: 0.3,
            beta: 1.2,
            batch_size: 16,
            epochs: 100,
            learning_rate: 1e-3,
            augment: false,
            seed: 0,
            gap_kind: FitGapKind::AsymCd,
            regression_scale: 1.0,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < self.beta) {
            return Err(Error::Config("training: need 0 < alpha < beta".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("training: batch_size must be >= 2".into()));
        }
        if !(self.fixed_margin > 0.0) {
            return Err(Error::Config("training: fixed margin must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("training: epochs must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("training: learning rate must be >= 0".into()));
        }
        Ok(())
    }

    /// Flat key=value serialization mirroring the deform-config format.
    pub fn canonical_text(&self) -> String {
        let mode = match self.mode {
            TripletMode::Fixed => "fixed",
            TripletMode::Adaptive => "adaptive",
            TripletMode::Regression => "regression",
        };
        format!(
            "mode={mode}\nfixed_margin={}\nalpha={}\nbeta={}\nbatch_size={}\nepochs={}\nlearning_rate={}\naugment={}\nseed={}\ngap_kind={}\nregression_scale={}\n",
            self.fixed_margin,
            self.alpha,
            self.beta,
            self.batch_size,
            self.epochs,
            self.learning_rate,
            self.augment,
            self.seed,
            self.gap_kind.name(),
            self.regression_scale
        )
    }
}

/// One sketch-shape training pair.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub id: String,
    pub sketch: PointCloud,
    pub shape: PointCloud,
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<PairSample>,
    pub val: Vec<PairSample>,
}

/// Triplet loss with a constant margin: mean over negatives of
/// [d(s, t_p)^2 - d(s, t_n)^2 + m]_+.
pub fn triplet_loss_fixed(
    s: &Embedding,
    t_p: &Embedding,
    negatives: &[&Embedding],
    m: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "triplet_loss_fixed: empty negative set".into(),
        ));
    }
    let dp2 = s.dist2(t_p);
    let sum: f64 = negatives
        .iter()
        .map(|t_n| (dp2 - s.dist2(t_n) + m).max(0.0))
        .sum();
    Ok(sum / negatives.len() as f64)
}

/// Per-pair adaptive margin: m = alpha + (beta - alpha) * delta / M_S.
pub fn adaptive_margin(
    p_index: usize,
    n_index: usize,
    negative_indices: &[usize],
    matrix: &FitGapMatrix,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let m_s = max_gap_to_negatives(p_index, negative_indices, matrix)?;
    let delta = matrix.kind.as_distance(matrix.get(p_index, n_index));
    Ok(alpha + (beta - alpha) * delta / m_s)
}

/// In-batch triplet loss with per-negative adaptive margins, averaged per
/// anchor then over anchors.
pub fn triplet_loss_adaptive(
    sketches: &[Embedding],
    shapes: &[Embedding],
    matrix_indices: &[usize],
    matrix: &FitGapMatrix,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let n = sketches.len();
    if n < 2 || shapes.len() != n || matrix_indices.len() != n {
        return Err(Error::InvalidArgument(
            "triplet_loss_adaptive: need N >= 2 aligned sketches/shapes/indices".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        let negatives: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let neg_matrix: Vec<usize> = negatives.iter().map(|&j| matrix_indices[j]).collect();
        let mut anchor = 0.0;
        for &j in &negatives {
            let m = adaptive_margin(
                matrix_indices[i],
                matrix_indices[j],
                &neg_matrix,
                matrix,
                alpha,
                beta,
            )?;
            let term = sketches[i].dist2(&shapes[i]) - sketches[i].dist2(&shapes[j]) + m;
            anchor += term.max(0.0);
        }
        total += anchor / negatives.len() as f64;
    }
    Ok(total / n as f64)
}

/// Regression baseline: fit embedding distances to batch-normalized fitting
/// gaps, with the positive pair targeted at distance 0.
pub fn regression_loss(
    sketches: &[Embedding],
    shapes: &[Embedding],
    matrix_indices: &[usize],
    matrix: &FitGapMatrix,
    scale: f64,
) -> Result<f64> {
    let n = sketches.len();
    if n < 2 || shapes.len() != n || matrix_indices.len() != n {
        return Err(Error::InvalidArgument(
            "regression_loss: need N >= 2 aligned sketches/shapes/indices".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        let negatives: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let neg_matrix: Vec<usize> = negatives.iter().map(|&j| matrix_indices[j]).collect();
        let m_s = max_gap_to_negatives(matrix_indices[i], &neg_matrix, matrix)?;
        for &j in &negatives {
            let delta = matrix.kind.as_distance(matrix.get(matrix_indices[i], matrix_indices[j]));
            let target = scale * delta / m_s;
            let d = sketches[i].dist(&shapes[j]);
            total += (d - target) * (d - target) / (n * (n - 1)) as f64;
        }
        total += sketches[i].dist2(&shapes[i]) / n as f64;
    }
    Ok(total)
}

/// Global distortion augmentation with explicit knobs: per-axis scale,
/// rotation about the up (y) axis, then per-point Gaussian jitter for
/// sketches. The result is re-normalized to the unit box.
pub fn augment_with(
    cloud: &PointCloud,
    scale: [f64; 3],
    angle_deg: f64,
    jitter_sigma: f64,
    seed: u64,
) -> Result<PointCloud> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Point3> = cloud
        .points
        .iter()
        .map(|p| {
            let x = p.x * scale[0];
            let y = p.y * scale[1];
            let z = p.z * scale[2];
            let (rx, rz) = (cos * x + sin * z, -sin * x + cos * z);
            let mut q = Point3::new(rx, y, rz);
            if jitter_sigma > 0.0 {
                q.x += jitter_sigma * normal.sample(&mut rng);
                q.y += jitter_sigma * normal.sample(&mut rng);
                q.z += jitter_sigma * normal.sample(&mut rng);
            }
            q
        })
        .collect();
    PointCloud::new(points, cloud.kind).normalize_unit_box()
}

/// Seeded augmentation recipe: anisotropic scale in [0.8, 1.25] per axis,
/// up-axis rotation in [-10, 10] degrees, and (sketches only) jitter with
/// sigma 0.01.
pub fn augment_cloud(cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = [
        rng.random_range(0.8..1.25),
        rng.random_range(0.8..1.25),
        rng.random_range(0.8..1.25),
    ];
    let angle = rng.random_range(-10.0..10.0);
    let sigma = if cloud.kind == CloudKind::Sketch {
        0.01
    } else {
        0.0
    };
    augment_with(cloud, scale, angle, sigma, seed.wrapping_add(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub acc1: f64,
    pub acc5: f64,
    pub acc10: f64,
    pub avg_cd5: f64,
    pub avg_gap5: f64,
}

pub const LOG_HEADER: &str = "epoch,loss,acc1,acc5,acc10,avg_cd5,avg_gap5";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.loss, self.acc1, self.acc5, self.acc10, self.avg_cd5, self.avg_gap5
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

impl TrainResult {
    pub fn log_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for rec in &self.log {
            out.push_str(&rec.csv_line());
            out.push('\n');
        }
        out
    }
}

/// Loss and embedding gradients for one batch. Margins are constants with
/// respect to the embeddings (the gap matrix is precomputed).
struct BatchLoss {
    loss: f64,
    grad_sketches: Vec<Vec<f64>>,
    grad_shapes: Vec<Vec<f64>>,
}

fn batch_loss_and_grads(
    config: &TripletConfig,
    ids: &[&str],
    sketches: &[Embedding],
    shapes: &[Embedding],
    matrix_indices: Option<&[usize]>,
    matrix: Option<&FitGapMatrix>,
) -> Result<BatchLoss> {
    let n = sketches.len();
    let d = sketches[0].vector.len();
    let mut grad_sketches = vec![vec![0.0; d]; n];
    let mut grad_shapes = vec![vec![0.0; d]; n];
    let mut loss = 0.0;

    // negatives per anchor exclude same-shape samples: a training set may
    // carry several sketches of one shape, and those are not negatives
    let negs_of: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| ids[j] != ids[i]).collect())
        .collect();
    let n_eff = negs_of.iter().filter(|v| !v.is_empty()).count();
    if n_eff == 0 {
        return Err(Error::DegenerateBatch(
            "all batch samples share one shape".into(),
        ));
    }

    // margins (or regression targets) per anchor/negative
    let margin_of = |i: usize, j: usize| -> Result<f64> {
        match config.mode {
            TripletMode::Fixed => Ok(config.fixed_margin),
            TripletMode::Adaptive | TripletMode::Regression => {
                let idx = matrix_indices.expect("matrix indices required");
                let matrix = matrix.expect("matrix required");
                let negs: Vec<usize> = negs_of[i].iter().map(|&k| idx[k]).collect();
                if config.mode == TripletMode::Adaptive {
                    adaptive_margin(idx[i], idx[j], &negs, matrix, config.alpha, config.beta)
                } else {
                    let m_s = max_gap_to_negatives(idx[i], &negs, matrix)?;
                    let delta = matrix.kind.as_distance(matrix.get(idx[i], idx[j]));
                    Ok(config.regression_scale * delta / m_s)
                }
            }
        }
    };

    match config.mode {
        TripletMode::Fixed | TripletMode::Adaptive => {
            for i in 0..n {
                if negs_of[i].is_empty() {
                    continue;
                }
                let inv = 1.0 / (n_eff * negs_of[i].len()) as f64;
                let dp2 = sketches[i].dist2(&shapes[i]);
                for &j in &negs_of[i] {
                    let m = margin_of(i, j)?;
                    let dn2 = sketches[i].dist2(&shapes[j]);
                    let term = dp2 - dn2 + m;
                    if term > 0.0 {
                        loss += term * inv;
                        for k in 0..d {
                            let s = sketches[i].vector[k];
                            let tp = shapes[i].vector[k];
                            let tn = shapes[j].vector[k];
                            grad_sketches[i][k] += inv * 2.0 * ((s - tp) - (s - tn));
                            grad_shapes[i][k] -= inv * 2.0 * (s - tp);
                            grad_shapes[j][k] += inv * 2.0 * (s - tn);
                        }
                    }
                }
            }
        }
        TripletMode::Regression => {
            for i in 0..n {
                if negs_of[i].is_empty() {
                    continue;
                }
                let inv = 1.0 / (n_eff * negs_of[i].len()) as f64;
                for &j in &negs_of[i] {
                    let target = margin_of(i, j)?;
                    let dist = sketches[i].dist(&shapes[j]);
                    let r = dist - target;
                    loss += r * r * inv;
                    if dist > 0.0 {
                        let coeff = inv * 2.0 * r / dist;
                        for k in 0..d {
                            let diff = sketches[i].vector[k] - shapes[j].vector[k];
                            grad_sketches[i][k] += coeff * diff;
                            grad_shapes[j][k] -= coeff * diff;
                        }
                    }
                }
                // positive pair targeted at distance 0 (smooth squared form)
                let dp2 = sketches[i].dist2(&shapes[i]);
                loss += dp2 / n_eff as f64;
                for k in 0..d {
                    let diff = sketches[i].vector[k] - shapes[i].vector[k];
                    grad_sketches[i][k] += 2.0 * diff / n_eff as f64;
                    grad_shapes[i][k] -= 2.0 * diff / n_eff as f64;
                }
            }
        }
    }

    Ok(BatchLoss {
        loss,
        grad_sketches,
        grad_shapes,
    })
}

fn augment_seed(config_seed: u64, epoch: usize, id: &str, role: &str) -> u64 {
    fnv1a64(format!("{config_seed}:{epoch}:{id}:{role}").as_bytes())
}

/// Validation-split retrieval metrics against a gallery of all train+val
/// shapes.
#[allow(clippy::too_many_arguments)]
fn validation_metrics(
    params: &crate::encoder::EncoderParams,
    data: &TrainData,
    cd: &CdMatrix,
    matrix: Option<&FitGapMatrix>,
) -> Result<(f64, f64, f64, f64, f64)> {
    if data.val.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN));
    }
    let gallery_samples: Vec<&PairSample> = data.train.iter().chain(&data.val).collect();
    let gallery: Vec<(String, Embedding)> = gallery_samples
        .par_iter()
        .map(|s| Ok((s.id.clone(), encode_with_cache(params, &s.shape)?.0)))
        .collect::<Result<_>>()?;
    let queries: Vec<Embedding> = data
        .val
        .par_iter()
        .map(|s| Ok(encode_with_cache(params, &s.sketch)?.0))
        .collect::<Result<_>>()?;
    let rankings: Vec<Vec<(String, f64)>> = queries
        .iter()
        .map(|q| rank_gallery(q, &gallery))
        .collect::<Result<_>>()?;
    let gts: Vec<String> = data.val.iter().map(|s| s.id.clone()).collect();
    let acc1 = top_k_accuracy(&rankings, &gts, 1)?;
    let acc5 = top_k_accuracy(&rankings, &gts, 5)?;
    let acc10 = top_k_accuracy(&rankings, &gts, 10)?;
    let avg_cd5 = avg_metric_at_k(&rankings, &gts, 5, cd, false)?;
    let avg_gap5 = match matrix {
        Some(m) => avg_metric_at_k(&rankings, &gts, 5, m, m.kind.is_f())?,
        None => f64::NAN,
    };
    Ok((acc1, acc5, acc10, avg_cd5, avg_gap5))
}

/// Trains the shared encoder. Deterministic per config: fixed shuffling and
/// augmentation streams, sequential parameter updates, per-epoch metric log.
pub fn train(
    data: &TrainData,
    dims: &EncoderDims,
    config: &TripletConfig,
    matrix: Option<&FitGapMatrix>,
) -> Result<TrainResult> {
    config.validate()?;
    dims.validate()?;
    if data.train.len() < 2 {
        return Err(Error::InvalidArgument(
            "train: need at least 2 training pairs".into(),
        ));
    }
    let needs_matrix = config.mode != TripletMode::Fixed;
    let matrix_indices: Option<Vec<usize>> = if needs_matrix {
        let matrix = matrix.ok_or_else(|| {
            Error::Config("train: adaptive/regression mode requires a fit-gap matrix".into())
        })?;
        Some(
            data.train
                .iter()
                .map(|s| {
                    matrix.index_of(&s.id).ok_or_else(|| Error::IncompleteMatrix {
                        row: s.id.clone(),
                        col: "(training set)".into(),
                    })
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    // validation assets: Chamfer rows from each val shape to the gallery
    let gallery_clouds: Vec<(String, PointCloud)> = data
        .train
        .iter()
        .chain(&data.val)
        .map(|s| (s.id.clone(), s.shape.clone()))
        .collect();
    let val_clouds: Vec<(String, PointCloud)> = data
        .val
        .iter()
        .map(|s| (s.id.clone(), s.shape.clone()))
        .collect();
    let cd = CdMatrix::build(&val_clouds, &gallery_clouds)?;

    let mut params = init_params(config.seed, dims)?;
    let mut adam_m = vec![0.0; params.data.len()];
    let mut adam_v = vec![0.0; params.data.len()];
    let mut adam_t = 0u64;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ fnv1a64(format!("epoch:{epoch}").as_bytes()),
        );
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut batch: Vec<usize> = chunk.to_vec();
            let mut attempt = 0;
            let step = loop {
                let result = run_batch(
                    data,
                    &batch,
                    &params,
                    config,
                    matrix_indices.as_deref(),
                    matrix,
                    epoch,
                );
                match result {
                    Err(Error::DegenerateBatch(_)) if attempt == 0 => {
                        // resample the batch once from the full training set
                        attempt = 1;
                        let mut pool: Vec<usize> = (0..data.train.len()).collect();
                        for i in (1..pool.len()).rev() {
                            let j = rng.random_range(0..=i);
                            pool.swap(i, j);
                        }
                        batch = pool.into_iter().take(batch.len()).collect();
                    }
                    other => break other?,
                }
            };
            if !step.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "train: non-finite loss {} at epoch {epoch} batch {batches} \
                     (|params| = {:.6e}, mode = {:?})",
                    step.loss,
                    params.data.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    config.mode
                )));
            }
            epoch_loss += step.loss;
            batches += 1;

            if config.learning_rate > 0.0 {
                adam_t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powf(adam_t as f64);
                let bc2 = 1.0 - ADAM_BETA2.powf(adam_t as f64);
                for (i, g) in step.grad.iter().enumerate() {
                    adam_m[i] = ADAM_BETA1 * adam_m[i] + (1.0 - ADAM_BETA1) * g;
                    adam_v[i] = ADAM_BETA2 * adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = adam_m[i] / bc1;
                    let v_hat = adam_v[i] / bc2;
                    params.data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        let loss = if batches > 0 {
            epoch_loss / batches as f64
        } else {
            0.0
        };
        let (acc1, acc5, acc10, avg_cd5, avg_gap5) =
            validation_metrics(&params, data, &cd, matrix)?;
        log.push(EpochRecord {
            epoch,
            loss,
            acc1,
            acc5,
            acc10,
            avg_cd5,
            avg_gap5,
        });
    }

    Ok(TrainResult {
        checkpoint: Checkpoint {
            params,
            seed: config.seed,
            epoch: config.epochs,
        },
        log,
    })
}

struct BatchStep {
    loss: f64,
    grad: Vec<f64>,
}

fn run_batch(
    data: &TrainData,
    batch: &[usize],
    params: &crate::encoder::EncoderParams,
    config: &TripletConfig,
    matrix_indices: Option<&[usize]>,
    matrix: Option<&FitGapMatrix>,
    epoch: usize,
) -> Result<BatchStep> {
    // clouds for this batch, augmented when enabled
    let clouds: Vec<(usize, bool, PointCloud)> = batch
        .par_iter()
        .flat_map(|&idx| {
            let sample = &data.train[idx];
            let (sketch, shape) = if config.augment {
                let sk = augment_cloud(
                    &sample.sketch,
                    augment_seed(config.seed, epoch, &sample.id, "sketch"),
                );
                let sh = augment_cloud(
                    &sample.shape,
                    augment_seed(config.seed, epoch, &sample.id, "shape"),
                );
                (sk, sh)
            } else {
                (Ok(sample.sketch.clone()), Ok(sample.shape.clone()))
            };
            vec![(idx, true, sketch), (idx, false, shape)]
        })
        .map(|(idx, is_sketch, cloud)| Ok((idx, is_sketch, cloud?)))
        .collect::<Result<_>>()?;

    // forward passes, in parallel, collected in deterministic order
    let encoded: Vec<(Embedding, crate::encoder::ForwardCache)> = clouds
        .par_iter()
        .map(|(_, _, cloud)| encode_with_cache(params, cloud))
        .collect::<Result<_>>()?;

    let n = batch.len();
    let mut sketches = Vec::with_capacity(n);
    let mut shapes = Vec::with_capacity(n);
    for pair in encoded.chunks(2) {
        sketches.push(pair[0].0.clone());
        shapes.push(pair[1].0.clone());
    }
    let batch_matrix_indices: Option<Vec<usize>> =
        matrix_indices.map(|all| batch.iter().map(|&i| all[i]).collect());

    let ids: Vec<&str> = batch.iter().map(|&i| data.train[i].id.as_str()).collect();
    let bl = batch_loss_and_grads(
        config,
        &ids,
        &sketches,
        &shapes,
        batch_matrix_indices.as_deref(),
        matrix,
    )?;

    // backward passes, parallel over clouds; sum in fixed order
    let upstreams: Vec<&[f64]> = (0..n)
        .flat_map(|i| [bl.grad_sketches[i].as_slice(), bl.grad_shapes[i].as_slice()])
        .collect();
    let grads: Vec<Vec<f64>> = clouds
        .par_iter()
        .zip(&encoded)
        .zip(&upstreams)
        .map(|(((_, _, cloud), (_, cache)), upstream)| {
            backward_from_cache(params, cloud, cache, upstream)
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.data.len()];
    for g in &grads {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok(BatchStep {
        loss: bl.loss,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_shape, generate_sketch_with, Family, ShapeSpec, SketchCorruption};
    use crate::fitgap::FitGapMatrix;

    fn emb(v: Vec<f64>) -> Embedding {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Embedding {
            vector: v.into_iter().map(|x| x / n).collect(),
        }
    }

    fn gap_matrix(values: Vec<Vec<f64>>) -> FitGapMatrix {
        let ids = (0..values.len()).map(|i| format!("s{i}")).collect();
        FitGapMatrix::new(ids, values, FitGapKind::AsymCd, 0)
    }

    #[test]
    fn fixed_loss_examples() {
        let s = emb(vec![1.0, 0.0]);
        // positive identical to anchor, negative at squared distance 1
        let tn = emb(vec![2.0_f64.sqrt() / 2.0, 2.0_f64.sqrt() / 2.0]);
        assert!((s.dist2(&tn) - (2.0 - 2.0_f64.sqrt())).abs() < 1e-12);
        let tn_far = emb(vec![0.0, 1.0]); // d2 = 2
        let l = triplet_loss_fixed(&s, &s, &[&tn_far], 0.6).unwrap();
        assert_eq!(l, 0.0); // 0 - 2 + 0.6 clips

        // hand arithmetic: dp2 = 0.1, dn2 = 0.5, m = 0.6 -> 0.2
        // build embeddings in 3D achieving those squared distances
        let s = emb(vec![1.0, 0.0, 0.0]);
        let make_at = |d2: f64| {
            // unit vector at squared distance d2 from s: cos = 1 - d2/2
            let c: f64 = 1.0 - d2 / 2.0;
            emb(vec![c, (1.0 - c * c).sqrt(), 0.0])
        };
        let tp = make_at(0.1);
        let tn = make_at(0.5);
        let l = triplet_loss_fixed(&s, &tp, &[&tn], 0.6).unwrap();
        assert!((l - 0.2).abs() < 1e-12);

        // two negatives with terms 0.2 and 0 average to 0.1
        let tn2 = make_at(2.0);
        let l = triplet_loss_fixed(&s, &tp, &[&tn, &tn2], 0.6).unwrap();
        assert!((l - 0.1).abs() < 1e-12);

        assert!(triplet_loss_fixed(&s, &tp, &[], 0.6).is_err());
    }

    #[test]
    fn adaptive_margin_examples() {
        let m = gap_matrix(vec![
            vec![0.0, 1.0, 0.5, 0.0],
            vec![1.0, 0.0, 0.2, 0.3],
            vec![0.5, 0.2, 0.0, 0.4],
            vec![0.0, 0.3, 0.4, 0.0],
        ]);
        let negs = [1, 2, 3];
        // delta = M_S = 1.0 -> beta
        assert!((adaptive_margin(0, 1, &negs, &m, 0.3, 1.2).unwrap() - 1.2).abs() < 1e-12);
        // delta = 0 -> alpha
        assert!((adaptive_margin(0, 3, &negs, &m, 0.3, 1.2).unwrap() - 0.3).abs() < 1e-12);
        // delta = M_S / 2 -> midpoint 0.75
        assert!((adaptive_margin(0, 2, &negs, &m, 0.3, 1.2).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn adaptive_margin_bounds_and_monotonicity() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 6;
            let mut values = vec![vec![0.0; n]; n];
            #[allow(clippy::needless_range_loop)]
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        values[i][j] = rng.random_range(0.01..2.0);
                    }
                }
            }
            let m = gap_matrix(values.clone());
            let negs: Vec<usize> = (1..n).collect();
            let mut pairs: Vec<(f64, f64)> = Vec::new();
            for &j in &negs {
                let margin = adaptive_margin(0, j, &negs, &m, 0.3, 1.2).unwrap();
                assert!((0.3..=1.2 + 1e-12).contains(&margin));
                pairs.push((values[0][j], margin));
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                if w[0].0 < w[1].0 {
                    assert!(w[0].1 < w[1].1, "margin not strictly increasing in delta");
                }
            }
        }
    }

    #[test]
    fn adaptive_degenerate_batch() {
        let m = gap_matrix(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let s = vec![emb(vec![1.0, 0.0]), emb(vec![0.0, 1.0])];
        let t = s.clone();
        assert!(matches!(
            triplet_loss_adaptive(&s, &t, &[0, 1], &m, 0.3, 1.2),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn adaptive_reduces_to_fixed_for_single_negative() {
        let m = gap_matrix(vec![vec![0.0, 0.7], vec![0.7, 0.0]]);
        let s = vec![emb(vec![1.0, 0.2]), emb(vec![-0.3, 1.0])];
        let t = vec![emb(vec![0.9, 0.1]), emb(vec![0.1, -1.0])];
        let adaptive = triplet_loss_adaptive(&s, &t, &[0, 1], &m, 0.3, 1.2).unwrap();
        // single negative per anchor: delta = M_S, so every margin is beta
        let per_anchor_0 = triplet_loss_fixed(&s[0], &t[0], &[&t[1]], 1.2).unwrap();
        let per_anchor_1 = triplet_loss_fixed(&s[1], &t[1], &[&t[0]], 1.2).unwrap();
        assert!((adaptive - 0.5 * (per_anchor_0 + per_anchor_1)).abs() < 1e-12);
    }

    #[test]
    fn adaptive_matches_bruteforce_recomputation() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4;
        let d = 6;
        let mut values = vec![vec![0.0; n]; n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i][j] = rng.random_range(0.01..1.0);
                }
            }
        }
        let m = gap_matrix(values.clone());
        let rand_emb = |rng: &mut ChaCha8Rng| {
            emb((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let sketches: Vec<Embedding> = (0..n).map(|_| rand_emb(&mut rng)).collect();
        let shapes: Vec<Embedding> = (0..n).map(|_| rand_emb(&mut rng)).collect();
        let idx: Vec<usize> = (0..n).collect();
        let got = triplet_loss_adaptive(&sketches, &shapes, &idx, &m, 0.3, 1.2).unwrap();

        // independent scalar recomputation, term by term
        let mut expect = 0.0;
        for i in 0..n {
            let mut anchor = 0.0;
            let m_s = (0..n)
                .filter(|&j| j != i)
                .map(|j| values[i][j])
                .fold(f64::NEG_INFINITY, f64::max);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let margin = 0.3 + 0.9 * values[i][j] / m_s;
                let term =
                    sketches[i].dist2(&shapes[i]) - sketches[i].dist2(&shapes[j]) + margin;
                anchor += term.max(0.0);
            }
            expect += anchor / (n - 1) as f64;
        }
        expect /= n as f64;
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn fixed_mode_equivalence_with_alpha_eq_beta() {
        // alpha = beta = m makes every adaptive margin equal m regardless of
        // the gap values; compare against explicit fixed losses
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 5;
        let mut values = vec![vec![0.0; n]; n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i][j] = rng.random_range(0.01..1.0);
                }
            }
        }
        let matrix = gap_matrix(values);
        let rand_emb = |rng: &mut ChaCha8Rng| {
            emb((0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let sketches: Vec<Embedding> = (0..n).map(|_| rand_emb(&mut rng)).collect();
        let shapes: Vec<Embedding> = (0..n).map(|_| rand_emb(&mut rng)).collect();
        let idx: Vec<usize> = (0..n).collect();
        let m = 0.6;
        let adaptive = triplet_loss_adaptive(&sketches, &shapes, &idx, &matrix, m, m).unwrap();
        let mut fixed = 0.0;
        for i in 0..n {
            let negs: Vec<&Embedding> = (0..n).filter(|&j| j != i).map(|j| &shapes[j]).collect();
            fixed += triplet_loss_fixed(&sketches[i], &shapes[i], &negs, m).unwrap();
        }
        fixed /= n as f64;
        assert!((adaptive - fixed).abs() < 1e-12);
    }

    #[test]
    fn regression_loss_examples() {
        let matrix = gap_matrix(vec![vec![0.0, 0.5], vec![0.5, 0.0]]);
        // single anchor/negative arithmetic: d = 0.8, target = 1.0 * 0.5/0.5 = 1.0
        // loss_i = (0.8 - 1.0)^2 / 2 (pairs) + positive terms
        let s0 = emb(vec![1.0, 0.0, 0.0]);
        let c: f64 = 1.0 - 0.8 * 0.8 / 2.0; // cosine giving d = 0.8
        let t1 = emb(vec![c, (1.0 - c * c).sqrt(), 0.0]);
        let sketches = vec![s0.clone(), t1.clone()];
        let shapes = vec![s0.clone(), t1.clone()]; // positives coincide -> d(s,t_p) = 0
        let got = regression_loss(&sketches, &shapes, &[0, 1], &matrix, 1.0).unwrap();
        // both anchors: negative distance d(s_i, t_j) = 0.8, target 1.0
        let expect = 2.0 * (0.8 - 1.0_f64).powi(2) / 2.0;
        assert!((got - expect).abs() < 1e-12, "got {got} expect {expect}");

        // embeddings satisfying all targets exactly -> 0 requires target = d;
        // with target = 0.8: zero loss
        let got = regression_loss(&sketches, &shapes, &[0, 1], &matrix, 0.8).unwrap();
        assert!(got.abs() < 1e-12);
    }

    #[test]
    fn regression_matches_bruteforce_recomputation() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 4;
        let mut values = vec![vec![0.0; n]; n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i][j] = rng.random_range(0.01..1.0);
                }
            }
        }
        let matrix = gap_matrix(values.clone());
        let rand_emb = |rng: &mut ChaCha8Rng| {
            emb((0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let sketches: Vec<Embedding> = (0..n).map(|_| rand_emb(&mut rng)).collect();
        let shapes: Vec<Embedding> = (0..n).map(|_| rand_emb(&mut rng)).collect();
        let idx: Vec<usize> = (0..n).collect();
        let got = regression_loss(&sketches, &shapes, &idx, &matrix, 1.0).unwrap();
        let mut expect = 0.0;
        for i in 0..n {
            let m_s = (0..n)
                .filter(|&j| j != i)
                .map(|j| values[i][j])
                .fold(f64::NEG_INFINITY, f64::max);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let r = sketches[i].dist(&shapes[j]) - values[i][j] / m_s;
                expect += r * r / (n * (n - 1)) as f64;
            }
            expect += sketches[i].dist2(&shapes[i]) / n as f64;
        }
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        // sanity for the embedding-space gradients of all three losses
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 3;
        let d = 4;
        let mut values = vec![vec![0.0; n]; n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i][j] = rng.random_range(0.1..1.0);
                }
            }
        }
        let matrix = gap_matrix(values);
        let idx: Vec<usize> = (0..n).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let ids: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        for mode in [TripletMode::Fixed, TripletMode::Adaptive, TripletMode::Regression] {
            let config = TripletConfig {
                mode,
                ..Default::default()
            };
            // raw (non-unit) vectors: the loss is defined on any vectors
            let mut sk: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let sh: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let eval = |sk: &[Vec<f64>], sh: &[Vec<f64>]| -> f64 {
                let se: Vec<Embedding> = sk
                    .iter()
                    .map(|v| Embedding { vector: v.clone() })
                    .collect();
                let te: Vec<Embedding> = sh
                    .iter()
                    .map(|v| Embedding { vector: v.clone() })
                    .collect();
                batch_loss_and_grads(&config, &ids, &se, &te, Some(&idx), Some(&matrix))
                    .unwrap()
                    .loss
            };
            let se: Vec<Embedding> = sk
                .iter()
                .map(|v| Embedding { vector: v.clone() })
                .collect();
            let te: Vec<Embedding> = sh
                .iter()
                .map(|v| Embedding { vector: v.clone() })
                .collect();
            let bl =
                batch_loss_and_grads(&config, &ids, &se, &te, Some(&idx), Some(&matrix)).unwrap();
            assert!(bl.loss >= 0.0);
            let h = 1e-6;
            for i in 0..n {
                for k in 0..d {
                    let saved = sk[i][k];
                    sk[i][k] = saved + h;
                    let up = eval(&sk, &sh);
                    sk[i][k] = saved - h;
                    let dn = eval(&sk, &sh);
                    sk[i][k] = saved;
                    let fd = (up - dn) / (2.0 * h);
                    assert!(
                        (fd - bl.grad_sketches[i][k]).abs() < 1e-6,
                        "mode {mode:?}: sketch grad mismatch fd={fd} an={}",
                        bl.grad_sketches[i][k]
                    );
                }
            }
        }
    }

    #[test]
    fn augment_identity_override() {
        let spec = ShapeSpec::sample(Family::Chair, 2);
        let cloud = generate_shape(&spec, 128).unwrap();
        let out = augment_with(&cloud, [1.0, 1.0, 1.0], 0.0, 0.0, 7).unwrap();
        for (p, q) in cloud.points.iter().zip(&out.points) {
            assert!(p.dist(q) < 1e-12);
        }
    }

    #[test]
    fn augment_pure_scale_anisotropy() {
        // a unit cube scaled by (1.25, 1, 1) renormalizes so that y and z
        // extents shrink to 1/1.25 = 0.8
        let corners: Vec<Point3> = (0..8)
            .map(|i| {
                Point3::new(
                    (i & 1) as f64 - 0.5,
                    ((i >> 1) & 1) as f64 - 0.5,
                    ((i >> 2) & 1) as f64 - 0.5,
                )
            })
            .collect();
        let cube = PointCloud::new(corners, CloudKind::Shape);
        let out = augment_with(&cube, [1.25, 1.0, 1.0], 0.0, 0.0, 1).unwrap();
        let (lo, hi) = out.bbox();
        assert!((hi.x - lo.x - 1.0).abs() < 1e-12);
        assert!((hi.y - lo.y - 0.8).abs() < 1e-12);
        assert!((hi.z - lo.z - 0.8).abs() < 1e-12);
    }

    #[test]
    fn augment_deterministic() {
        let spec = ShapeSpec::sample(Family::Chair, 4);
        let sketch =
            generate_sketch_with(&spec, 3, &SketchCorruption::default_corruption(), 128).unwrap();
        assert_eq!(
            augment_cloud(&sketch, 42).unwrap(),
            augment_cloud(&sketch, 42).unwrap()
        );
    }

    fn tiny_data(n: usize) -> (TrainData, FitGapMatrix) {
        let pairs: Vec<PairSample> = (0..n)
            .map(|i| {
                let spec = ShapeSpec::sample(Family::Chair, 7000 + i as u64);
                PairSample {
                    id: format!("shape_{i:04}"),
                    shape: generate_shape(&spec, 96).unwrap(),
                    sketch: generate_sketch_with(
                        &spec,
                        100 + i as u64,
                        &SketchCorruption::default_corruption(),
                        96,
                    )
                    .unwrap(),
                }
            })
            .collect();
        // synthetic gap values from chamfer distances (fast stand-in)
        let mut values = vec![vec![0.0; n]; n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i][j] =
                        crate::geometry::chamfer_distance(&pairs[i].shape, &pairs[j].shape)
                            .unwrap();
                }
            }
        }
        let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
        let matrix = FitGapMatrix::new(ids, values, FitGapKind::AsymCd, 0);
        let data = TrainData {
            train: pairs[..n - 2].to_vec(),
            val: pairs[n - 2..].to_vec(),
        };
        (data, matrix)
    }

    fn tiny_dims() -> EncoderDims {
        EncoderDims {
            point_widths: vec![3, 8, 16],
            head_widths: vec![16, 16, 8],
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (data, matrix) = tiny_data(8);
        let config = TripletConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 4,
            ..Default::default()
        };
        let result = train(&data, &tiny_dims(), &config, Some(&matrix)).unwrap();
        let fresh = init_params(config.seed, &tiny_dims()).unwrap();
        assert_eq!(result.checkpoint.params, fresh);
        assert_eq!(result.log.len(), 1);
        assert!(result.log[0].loss.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let (data, matrix) = tiny_data(8);
        let config = TripletConfig {
            epochs: 2,
            batch_size: 4,
            augment: true,
            ..Default::default()
        };
        let a = train(&data, &tiny_dims(), &config, Some(&matrix)).unwrap();
        let b = train(&data, &tiny_dims(), &config, Some(&matrix)).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log_csv(), b.log_csv());
    }

    #[test]
    fn loss_decreases_on_small_set() {
        let (data, matrix) = tiny_data(10);
        let config = TripletConfig {
            epochs: 30,
            batch_size: 4,
            ..Default::default()
        };
        let result = train(&data, &tiny_dims(), &config, Some(&matrix)).unwrap();
        let first = result.log.first().unwrap().loss;
        let last = result.log.last().unwrap().loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn fixed_mode_ignores_matrix() {
        let (data, _) = tiny_data(6);
        let config = TripletConfig {
            mode: TripletMode::Fixed,
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let result = train(&data, &tiny_dims(), &config, None).unwrap();
        assert!(result.log[0].avg_gap5.is_nan());
        assert!(result.log[0].loss.is_finite());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = TripletConfig {
            alpha: 1.2,
            beta: 0.3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TripletConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
