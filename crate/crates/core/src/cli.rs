//! Subcommand surface. Every run is deterministic given its full argument
//! set; reports are written to disk and echoed. Defaults may come from a
//! key=value config file (`--config` or the SKETCHSHAPE_CONFIG environment
//! variable); explicit flags win over the file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::{build_dataset, load_entry, DatasetManifest, Family, ManifestEntry, Split};
use crate::deform::{grad_check_deformer, DeformConfig};
use crate::encoder::{
    encode, encode_backward, grad_check_encoder, init_params, read_checkpoint, write_checkpoint,
    Checkpoint, Embedding, EncoderDims,
};
use crate::error::{Error, Result};
use crate::evaluation::{rank_gallery, CdMatrix, PairLookup, RetrievalReport};
use crate::fitgap::{build_matrix, read_cache, FitGapKind, DEFAULT_F_TAU};
use crate::geometry::{read_cloud, Point3, PointCloud, DEFAULT_CLOUD_SIZE};
use crate::training::{train, PairSample, TrainData, TripletConfig, TripletMode};

pub const CONFIG_ENV: &str = "SKETCHSHAPE_CONFIG";

#[derive(Parser)]
#[command(name = "sketchshape", disable_version_flag = true)]
pub struct Cli {
    /// Worker thread cap (0 = rayon default). Results are identical for any
    /// thread count.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// key=value config file supplying defaults; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic sketch/shape dataset.
    GenData(GenDataArgs),
    /// Precompute the fitting-gap matrix over dataset shapes.
    Fitgap(FitgapArgs),
    /// Train the retrieval encoder.
    Train(TrainArgs),
    /// Evaluate retrieval metrics for a split.
    Eval(EvalArgs),
    /// Rank the gallery for a single sketch file.
    Retrieve(RetrieveArgs),
    /// Finite-difference gradient checks for encoder and deformer.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub points: Option<usize>,
    /// Comma-separated family:weight list, e.g. chair:1 or chair:2,lamp:1.
    #[arg(long)]
    pub families: Option<String>,
}

#[derive(Args)]
pub struct FitgapArgs {
    /// Dataset directory (contains manifest.json).
    #[arg(long)]
    pub data: PathBuf,
    /// Output cache file.
    #[arg(long)]
    pub cache: PathBuf,
    /// asym_cd | sym_cd | asym_f | sym_f
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Comma-separated splits to cover (default train,val).
    #[arg(long)]
    pub splits: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub lambda_smooth: Option<f64>,
    #[arg(long)]
    pub lambda_magnitude: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resample clouds to this many points before deformation (0 = as-is).
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Fit-gap cache (required for adaptive/regression modes).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// fixed | adaptive | regression
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, action = ArgAction::SetTrue)]
    pub augment: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Checkpoint output path.
    #[arg(long, default_value = "checkpoint.txt")]
    pub out: PathBuf,
    /// Per-epoch CSV log path.
    #[arg(long, default_value = "train_log.csv")]
    pub log: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query split: train | val | test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Gallery splits (default all).
    #[arg(long, default_value = "train,val,test")]
    pub gallery: String,
    /// Comma-separated k values.
    #[arg(long, default_value = "1,5,10")]
    pub k: String,
    /// Fit-gap cache for the Avg gap criterion (optional).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value = "report.txt")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sketch cloud file to query with.
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long, default_value = "train,val,test")]
    pub gallery: String,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Test hook: corrupt the analytic encoder gradient so the check fails.
    #[arg(long, hide = true, action = ArgAction::SetTrue)]
    pub break_gradient: bool,
}

/// key=value defaults file; '#' starts a comment.
struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    fn load(explicit: Option<&Path>) -> Result<FileConfig> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
        };
        let mut values = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                    path: path.clone(),
                    line: lineno + 1,
                    reason: "expected key=value".into(),
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config file: cannot parse {key}={raw}"))
            }),
        }
    }
}

fn resolve<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T> {
    Ok(flag.or(file.get(key)?).unwrap_or(default))
}

fn parse_splits(s: &str) -> Result<Vec<Split>> {
    s.split(',')
        .map(|part| match part.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split: {other}"))),
        })
        .collect()
}

fn entries_for_splits<'a>(
    manifest: &'a DatasetManifest,
    splits: &[Split],
) -> Vec<&'a ManifestEntry> {
    manifest
        .entries
        .iter()
        .filter(|e| splits.contains(&e.split))
        .collect()
}

fn load_pairs(dir: &Path, entries: &[&ManifestEntry]) -> Result<Vec<PairSample>> {
    entries
        .par_iter()
        .map(|e| {
            let (shape, sketch) = load_entry(dir, e)?;
            Ok(PairSample {
                id: e.id.clone(),
                shape,
                sketch,
            })
        })
        .collect()
}

fn deform_config_from(args: &FitgapArgs, file: &FileConfig) -> Result<DeformConfig> {
    let base = DeformConfig::default();
    Ok(DeformConfig {
        iterations: resolve(args.iterations, file, "iterations", base.iterations)?,
        step_size: resolve(args.step_size, file, "step_size", base.step_size)?,
        lambda_smooth: resolve(args.lambda_smooth, file, "lambda_smooth", base.lambda_smooth)?,
        lambda_magnitude: resolve(
            args.lambda_magnitude,
            file,
            "lambda_magnitude",
            base.lambda_magnitude,
        )?,
        seed: resolve(args.seed, file, "seed", base.seed)?,
        ..base
    })
}

fn cmd_gen_data(args: &GenDataArgs, file: &FileConfig) -> Result<()> {
    let count = resolve(args.count, file, "count", 100)?;
    let seed = resolve(args.seed, file, "seed", 0)?;
    let points = resolve(args.points, file, "points", DEFAULT_CLOUD_SIZE)?;
    let mix_spec = args
        .families
        .clone()
        .or(file.get::<String>("families")?)
        .unwrap_or_else(|| "chair:1".into());
    let mut mix = Vec::new();
    for part in mix_spec.split(',') {
        let (name, weight) = part.split_once(':').unwrap_or((part, "1"));
        let weight: f64 = weight
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad family weight in {part}")))?;
        mix.push((Family::parse(name.trim())?, weight));
    }
    let manifest = build_dataset(count, &mix, seed, &args.out, points)?;
    let n = |s: Split| manifest.split_entries(s).len();
    println!(
        "wrote {} shapes to {} (train {}, val {}, test {})",
        manifest.entries.len(),
        args.out.display(),
        n(Split::Train),
        n(Split::Val),
        n(Split::Test)
    );
    println!("manifest: {}", args.out.join("manifest.json").display());
    Ok(())
}

fn cmd_fitgap(args: &FitgapArgs, file: &FileConfig) -> Result<()> {
    let kind_name = args
        .kind
        .clone()
        .or(file.get::<String>("kind")?)
        .unwrap_or_else(|| "asym_cd".into());
    let tau = resolve(args.tau, file, "tau", DEFAULT_F_TAU)?;
    let kind = FitGapKind::parse(&kind_name, tau)?;
    let config = deform_config_from(args, file)?;
    config.validate()?;
    let splits = parse_splits(
        &args
            .splits
            .clone()
            .or(file.get::<String>("splits")?)
            .unwrap_or_else(|| "train,val".into()),
    )?;
    let points = resolve(args.points, file, "points", 0)?;

    let manifest = DatasetManifest::read(&args.data.join("manifest.json"))?;
    let entries = entries_for_splits(&manifest, &splits);
    let shapes: Vec<(String, PointCloud)> = entries
        .par_iter()
        .map(|e| {
            let (shape, _) = load_entry(&args.data, e)?;
            let shape = if points > 0 && points != shape.len() {
                shape.resample_uniform(points, config.seed, true)?
            } else {
                shape
            };
            Ok((e.id.clone(), shape))
        })
        .collect::<Result<_>>()?;
    let matrix = build_matrix(&shapes, kind, &config, Some(&args.cache))?;
    println!(
        "fit-gap matrix: {} shapes, kind {}, cache {}",
        matrix.len(),
        matrix.kind.name(),
        args.cache.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, file: &FileConfig) -> Result<()> {
    let base = TripletConfig::default();
    let mode = TripletMode::parse(
        &args
            .mode
            .clone()
            .or(file.get::<String>("mode")?)
            .unwrap_or_else(|| "adaptive".into()),
    )?;
    let config = TripletConfig {
        mode,
        fixed_margin: resolve(args.margin, file, "margin", base.fixed_margin)?,
        alpha: resolve(args.alpha, file, "alpha", base.alpha)?,
        beta: resolve(args.beta, file, "beta", base.beta)?,
        batch_size: resolve(args.batch_size, file, "batch_size", base.batch_size)?,
        epochs: resolve(args.epochs, file, "epochs", base.epochs)?,
        learning_rate: resolve(args.lr, file, "lr", base.learning_rate)?,
        augment: args.augment || file.get("augment")?.unwrap_or(false),
        seed: resolve(args.seed, file, "seed", base.seed)?,
        ..base
    };
    config.validate()?;
    let dim = resolve(args.dim, file, "dim", 128)?;
    let dims = EncoderDims {
        point_widths: vec![3, 64, 128, 256],
        head_widths: vec![256, 256, dim],
    };

    let manifest = DatasetManifest::read(&args.data.join("manifest.json"))?;
    let data = TrainData {
        train: load_pairs(&args.data, &entries_for_splits(&manifest, &[Split::Train]))?,
        val: load_pairs(&args.data, &entries_for_splits(&manifest, &[Split::Val]))?,
    };
    let matrix = match &args.cache {
        Some(path) => Some(read_cache(path, false)?),
        None => None,
    };
    if matrix.is_none() && config.mode != TripletMode::Fixed {
        return Err(Error::Config(
            "train: --cache is required for adaptive/regression modes".into(),
        ));
    }
    let result = train(&data, &dims, &config, matrix.as_ref())?;
    write_checkpoint(&args.out, &result.checkpoint)?;
    crate::fitgap::write_text_atomic(&args.log, &result.log_csv())?;
    println!("checkpoint: {}", args.out.display());
    println!("log: {}", args.log.display());
    if let Some(last) = result.log.last() {
        println!("final epoch: {}", last.csv_line());
    }
    Ok(())
}

fn parse_ks(spec: &str, gallery_len: usize) -> Result<Vec<usize>> {
    let mut ks = Vec::new();
    for part in spec.split(',') {
        let k: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad k value: {part}")))?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let clamped = k.min(gallery_len);
        if clamped != k {
            eprintln!("warning: k={k} exceeds gallery size {gallery_len}, clamped");
        }
        if !ks.contains(&clamped) {
            ks.push(clamped);
        }
    }
    Ok(ks)
}

fn encode_gallery(
    checkpoint: &Checkpoint,
    pairs: &[PairSample],
) -> Result<Vec<(String, Embedding)>> {
    pairs
        .par_iter()
        .map(|p| Ok((p.id.clone(), encode(&checkpoint.params, &p.shape)?)))
        .collect()
}

fn cmd_eval(args: &EvalArgs, _file: &FileConfig) -> Result<()> {
    let checkpoint = read_checkpoint(&args.checkpoint)?;
    let manifest = DatasetManifest::read(&args.data.join("manifest.json"))?;
    let query_split = parse_splits(&args.split)?;
    let gallery_splits = parse_splits(&args.gallery)?;
    let queries = load_pairs(&args.data, &entries_for_splits(&manifest, &query_split))?;
    let gallery_pairs = load_pairs(&args.data, &entries_for_splits(&manifest, &gallery_splits))?;
    if queries.is_empty() || gallery_pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "eval: empty query split or gallery".into(),
        ));
    }
    for q in &queries {
        if !gallery_pairs.iter().any(|g| g.id == q.id) {
            return Err(Error::InvalidArgument(format!(
                "eval: query {} has no ground-truth shape in the gallery",
                q.id
            )));
        }
    }
    let ks = parse_ks(&args.k, gallery_pairs.len())?;
    let gallery = encode_gallery(&checkpoint, &gallery_pairs)?;
    let query_embs: Vec<Embedding> = queries
        .par_iter()
        .map(|p| encode(&checkpoint.params, &p.sketch))
        .collect::<Result<_>>()?;
    let rankings: Vec<Vec<(String, f64)>> = query_embs
        .iter()
        .map(|q| rank_gallery(q, &gallery))
        .collect::<Result<_>>()?;
    let gts: Vec<String> = queries.iter().map(|p| p.id.clone()).collect();

    let gt_clouds: Vec<(String, PointCloud)> = queries
        .iter()
        .map(|p| (p.id.clone(), p.shape.clone()))
        .collect();
    let gallery_clouds: Vec<(String, PointCloud)> = gallery_pairs
        .iter()
        .map(|p| (p.id.clone(), p.shape.clone()))
        .collect();
    let cd = CdMatrix::build(&gt_clouds, &gallery_clouds)?;
    let gap = match &args.cache {
        Some(path) => Some(read_cache(path, false)?),
        None => None,
    };
    let mut criteria: Vec<(String, &dyn PairLookup, bool)> = vec![("cd".into(), &cd, false)];
    if let Some(gap) = &gap {
        criteria.push((gap.kind.name().into(), gap, gap.kind.is_f()));
    }
    let report = RetrievalReport::build(gts.clone(), rankings, &gts, &ks, &criteria)?;
    let table = report.render_table();
    crate::fitgap::write_text_atomic(&args.out, &table)?;
    print!("{table}");
    println!("report: {}", args.out.display());
    Ok(())
}

fn cmd_retrieve(args: &RetrieveArgs, _file: &FileConfig) -> Result<()> {
    let checkpoint = read_checkpoint(&args.checkpoint)?;
    let manifest = DatasetManifest::read(&args.data.join("manifest.json"))?;
    let gallery_splits = parse_splits(&args.gallery)?;
    let gallery_pairs = load_pairs(&args.data, &entries_for_splits(&manifest, &gallery_splits))?;
    if gallery_pairs.is_empty() {
        return Err(Error::InvalidArgument("retrieve: empty gallery".into()));
    }
    let query = read_cloud(&args.query)?;
    let query = query.normalize_unit_box()?;
    let gallery = encode_gallery(&checkpoint, &gallery_pairs)?;
    let emb = encode(&checkpoint.params, &query)?;
    let ranking = rank_gallery(&emb, &gallery)?;
    for (rank, (id, dist)) in ranking.iter().take(args.top).enumerate() {
        println!("{:>4}  {id}  {dist}", rank + 1);
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, file: &FileConfig) -> Result<()> {
    let trials = resolve(args.trials, file, "trials", 3)?;
    let seed = resolve(args.seed, file, "seed", 0)?;
    let tol = 1e-4;
    let dims = EncoderDims {
        point_widths: vec![3, 8, 16],
        head_widths: vec![16, 16, 8],
    };
    let mut worst_enc = 0.0f64;
    let mut worst_def = 0.0f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        let cloud = random_cloud(&mut rng, 24);
        let mut params = init_params(rng.random(), &dims)?;
        // perturb biases off the exact relu kinks where the subgradient and
        // a central finite difference legitimately disagree
        for v in params.data.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let upstream: Vec<f64> = (0..dims.embedding_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let enc_err = if args.break_gradient {
            // compare a deliberately corrupted analytic gradient
            let mut analytic = encode_backward(&params, &cloud, &upstream)?;
            analytic[0] += 1.0;
            let reference = encode_backward(&params, &cloud, &upstream)?;
            analytic
                .iter()
                .zip(&reference)
                .map(|(a, r)| (a - r).abs() / (a.abs() + r.abs()).max(1e-6))
                .fold(0.0, f64::max)
        } else {
            grad_check_encoder(&params, &cloud, &upstream)?
        };
        worst_enc = worst_enc.max(enc_err);

        let source = random_cloud(&mut rng, 24);
        let target = random_cloud(&mut rng, 24);
        let config = DeformConfig {
            seed: seed.wrapping_add(1000 + trial as u64),
            ..DeformConfig::default()
        };
        worst_def = worst_def.max(grad_check_deformer(&source, &target, &config)?);
    }
    println!("encoder  max rel err {worst_enc:.3e} over {trials} trials");
    println!("deformer max rel err {worst_def:.3e} over {trials} trials");
    if worst_enc < tol && worst_def < tol {
        println!("gradcheck: PASS (tolerance {tol:.0e})");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradcheck: FAIL (encoder {worst_enc:.3e}, deformer {worst_def:.3e}, tolerance {tol:.0e})"
        )))
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let points = (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect();
    PointCloud::new(points, crate::geometry::CloudKind::Shape)
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        // ignore the error when a global pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args, &file),
        Command::Fitgap(args) => cmd_fitgap(args, &file),
        Command::Train(args) => cmd_train(args, &file),
        Command::Eval(args) => cmd_eval(args, &file),
        Command::Retrieve(args) => cmd_retrieve(args, &file),
        Command::Gradcheck(args) => cmd_gradcheck(args, &file),
    }
}
