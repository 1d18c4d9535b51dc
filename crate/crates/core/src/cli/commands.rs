use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use super::config::KeyValues;
use super::csv_io::{write_bench, write_cg_trace, BenchRow, TrainLogWriter};
use super::manifest::Manifest;
use super::{env_seed, BenchArgs, SolveArgs, TrainArgs, VerifyArgs};
use crate::cg::{cg_solve, CgConfig};
use crate::data::{load_idx, make_blobs, Dataset};
use crate::fisher::DirectInverse;
use crate::linalg::{Matrix, Vector};
use crate::net::{Activation, LossKind, NetworkState, Targets};
use crate::rng::{Rng, Stream};
use crate::telemetry::{measure_path, random_block, SolvePath};
use crate::trainer::{self, Method, TrainConfig};
use crate::{verify as checks, Error, Result};

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Flag, then config-file value, then `default`.
fn pick<T: std::str::FromStr>(flag: Option<T>, file: &KeyValues, key: &str, default: T) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.get(key)?.unwrap_or(default)),
    }
}

fn pick_opt<T: std::str::FromStr>(flag: Option<T>, file: &KeyValues, key: &str) -> Result<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

fn resolve_seed(flag: Option<u64>, file: &KeyValues) -> Result<u64> {
    if let Some(s) = pick_opt(flag, file, "seed")? {
        return Ok(s);
    }
    Ok(env_seed()?.unwrap_or(0))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| usage(format!("bad {what} entry `{t}`"))))
        .collect::<Result<_>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(usage(format!("{what} must be a non-empty list of positive integers")));
    }
    Ok(out)
}

enum DataSource {
    Blobs { per_class: usize, dim: usize, classes: usize, spread: f64 },
    Idx { images: PathBuf, labels: PathBuf },
}

/// Fully resolved training job. Building it touches no files except the
/// config file itself.
struct TrainJob {
    cfg: TrainConfig,
    data: DataSource,
    hidden: Vec<usize>,
    activation: Activation,
    out_dir: PathBuf,
}

fn resolve_train(a: &TrainArgs) -> Result<TrainJob> {
    let file = match &a.config {
        Some(p) => KeyValues::load(p).map_err(|e| usage(format!("config {}: {e}", p.display())))?,
        None => KeyValues::default(),
    };
    let method: Method = match pick_opt(a.method.clone(), &file, "method")? {
        Some(m) => m.parse()?,
        None => return Err(usage("missing --method (sgd, kfac_direct or cgfac)")),
    };
    let mut cfg = TrainConfig::new(method);
    cfg.eta = pick(a.eta, &file, "eta", cfg.eta)?;
    cfg.gamma = pick(a.gamma, &file, "gamma", cfg.gamma)?;
    cfg.batch_size = pick(a.batch_size, &file, "batch_size", cfg.batch_size)?;
    cfg.epochs = pick(a.epochs, &file, "epochs", cfg.epochs)?;
    cfg.seed = resolve_seed(a.seed, &file)?;
    cfg.cg = CgConfig {
        max_iters: pick(a.cg_max_iters, &file, "cg_max_iters", cfg.cg.max_iters)?,
        rel_tol: pick(a.cg_rel_tol, &file, "cg_rel_tol", cfg.cg.rel_tol)?,
        abs_tol: pick(a.cg_abs_tol, &file, "cg_abs_tol", cfg.cg.abs_tol)?,
    };
    cfg.loss_kind = pick(a.loss.clone(), &file, "loss", "cross_entropy".to_owned())?.parse()?;
    cfg.warm_start = !(a.no_warm_start || file.get::<bool>("no_warm_start")?.unwrap_or(false));
    cfg.validate()?;

    let data = match pick(a.data.clone(), &file, "data", "blobs".to_owned())?.as_str() {
        "blobs" => DataSource::Blobs {
            per_class: pick(a.blobs_per_class, &file, "blobs_per_class", 64)?,
            dim: pick(a.blobs_dim, &file, "blobs_dim", 2)?,
            classes: pick(a.blobs_classes, &file, "blobs_classes", 2)?,
            spread: pick(a.blobs_spread, &file, "blobs_spread", 0.5)?,
        },
        "idx" => {
            let images = pick_opt(a.images.clone(), &file, "images")?;
            let labels = pick_opt(a.labels.clone(), &file, "labels")?;
            match (images, labels) {
                (Some(images), Some(labels)) => DataSource::Idx { images, labels },
                _ => return Err(usage("--data idx needs --images and --labels")),
            }
        }
        other => return Err(usage(format!("unknown data source `{other}` (blobs or idx)"))),
    };
    let hidden = match pick(a.hidden.clone(), &file, "hidden", "8".to_owned())?.trim() {
        "" | "none" => Vec::new(),
        s => parse_list(s, "hidden")?,
    };
    let activation = pick(a.activation.clone(), &file, "activation", "tanh".to_owned())?.parse()?;
    let out_dir = pick_opt(a.out_dir.clone(), &file, "out_dir")?.unwrap_or_else(|| PathBuf::from("."));
    Ok(TrainJob {
        cfg,
        data,
        hidden,
        activation,
        out_dir,
    })
}

fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    Matrix::from_fn(classes, labels.len(), |i, j| if labels[j] == i { 1.0 } else { 0.0 })
}

fn load_dataset(src: &DataSource, seed: u64, loss: LossKind) -> Result<(Dataset, &'static str)> {
    let (ds, name) = match src {
        DataSource::Blobs { per_class, dim, classes, spread } => {
            (make_blobs(*per_class, *dim, *classes, *spread, seed)?, "blobs")
        }
        DataSource::Idx { images, labels } => (load_idx(images, labels)?, "idx"),
    };
    let ds = match (&ds.targets, loss) {
        (Targets::Labels(l), LossKind::Mse) => {
            let y = one_hot(l, ds.n_classes);
            Dataset::new(ds.inputs.clone(), Targets::Values(y), ds.n_classes)?
        }
        _ => ds,
    };
    Ok((ds, name))
}

pub(super) fn train(a: &TrainArgs) -> Result<i32> {
    let job = resolve_train(a)?;
    let cfg = &job.cfg;
    let (dataset, source) = load_dataset(&job.data, cfg.seed, cfg.loss_kind)?;
    if cfg.batch_size > dataset.len() {
        return Err(usage(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    let mut dims = vec![dataset.dim()];
    dims.extend(&job.hidden);
    dims.push(dataset.output_dim());
    let net = NetworkState::mlp(&dims, job.activation, true, cfg.seed)?;

    std::fs::create_dir_all(&job.out_dir)?;
    let hidden = job.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
    let manifest = Manifest::for_training(
        cfg,
        source,
        &dataset.fingerprint(),
        &[
            ("hidden", hidden),
            ("activation", format!("{:?}", job.activation).to_lowercase()),
            ("n_samples", dataset.len().to_string()),
        ],
    );
    manifest.write(&job.out_dir.join("manifest.txt"))?;

    let log_path = job.out_dir.join("train_log.csv");
    let mut log = TrainLogWriter::new(BufWriter::new(File::create(&log_path)?))?;
    let result = trainer::train(net, &dataset, cfg, |r| {
        log.write(r)?;
        log.flush()
    });
    log.flush()?;
    let (_net, records) = result?;

    match records.last() {
        Some(last) => {
            let iters: usize = records.iter().map(|r| r.cg_iters_total).sum();
            println!(
                "method={} steps={} final_loss={} final_accuracy={} total_cg_iters={} log={}",
                cfg.method.name(),
                records.len(),
                last.loss,
                last.accuracy.map(|x| x.to_string()).unwrap_or_else(|| "-".into()),
                iters,
                log_path.display()
            );
        }
        None => println!("method={} steps=0 log={}", cfg.method.name(), log_path.display()),
    }
    Ok(0)
}

pub(super) fn solve(a: &SolveArgs) -> Result<i32> {
    if a.n_a == 0 || a.n_g == 0 || a.batch == 0 {
        return Err(usage("--n-a, --n-g and --batch must be positive"));
    }
    if !(a.gamma.is_finite() && a.gamma > 0.0) {
        return Err(usage(format!("--gamma must be positive, got {}", a.gamma)));
    }
    let use_cg = match a.method.as_str() {
        "cg" => true,
        "direct" => false,
        other => return Err(usage(format!("unknown --method `{other}` (cg or direct)"))),
    };
    let cfg = CgConfig {
        max_iters: a.max_iters,
        rel_tol: a.rel_tol,
        abs_tol: a.abs_tol,
    };
    cfg.validate()?;
    let seed = resolve_seed(a.seed, &KeyValues::default())?;

    let block = random_block(a.n_a, a.n_g, a.batch, a.gamma, seed);
    let mut rng = Rng::new(seed, Stream::Rhs);
    let b = Vector::from_fn(block.dim(), |_| rng.normal());
    let (x_cg, report) = cg_solve(&block, &b, &Vector::zeros(block.dim()), &cfg)?;
    let x_direct = DirectInverse::new(block.factors(), a.gamma)?.apply(&b)?;
    let discrepancy = x_cg.sub(&x_direct).norm() / x_direct.norm().max(f64::MIN_POSITIVE);

    println!(
        "block n_a={} n_g={} batch={} n={} gamma={} seed={}",
        a.n_a,
        a.n_g,
        a.batch,
        block.dim(),
        a.gamma,
        seed
    );
    println!(
        "cg iterations={} converged={} fv_calls={} flops={} final_rho={:e}",
        report.iterations,
        report.converged,
        report.fv_calls,
        report.flops,
        report.rho_history.last().copied().unwrap_or(0.0)
    );
    let primary = if use_cg { &x_cg } else { &x_direct };
    println!("primary={} solution_norm={}", a.method, primary.norm());
    println!("relative_discrepancy={discrepancy:e}");

    write_cg_trace(BufWriter::new(File::create(&a.trace)?), &report)?;
    println!("trace={}", a.trace.display());
    Ok(0)
}

pub(super) fn bench(a: &BenchArgs) -> Result<i32> {
    let sizes = parse_list(&a.sizes, "sizes")?;
    let batches = parse_list(&a.batches, "batches")?;
    let cfg = CgConfig {
        max_iters: a.max_iters,
        rel_tol: a.rel_tol,
        ..CgConfig::default()
    };
    cfg.validate()?;
    let seed = resolve_seed(a.seed, &KeyValues::default())?;
    let mut paths = vec![SolvePath::CgFac];
    if a.with_direct {
        paths.push(SolvePath::Direct);
    }
    let mut rows = Vec::new();
    for &path in &paths {
        for &batch in &batches {
            for &n in &sizes {
                let m = measure_path(path, n, n, batch, &cfg, seed)?;
                rows.push(BenchRow {
                    method: path.name().to_owned(),
                    n_a: n,
                    n_g: n,
                    batch,
                    flops: m.counter.flops,
                    peak_floats: m.counter.peak_live_floats,
                    wall_ms: m.wall_ms,
                });
            }
        }
    }
    write_bench(BufWriter::new(File::create(&a.out)?), &rows)?;
    println!("{:<8} {:>5} {:>5} {:>5} {:>14} {:>12} {:>10}", "method", "n_a", "n_g", "batch", "flops", "peak_floats", "wall_ms");
    for r in &rows {
        println!(
            "{:<8} {:>5} {:>5} {:>5} {:>14} {:>12} {:>10.3}",
            r.method, r.n_a, r.n_g, r.batch, r.flops, r.peak_floats, r.wall_ms
        );
    }
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(0)
}

pub(super) fn verify(a: &VerifyArgs) -> Result<i32> {
    let seed = resolve_seed(a.seed, &KeyValues::default())?;
    let results = checks::run_all(seed);
    for c in &results {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(if failed == 0 { 0 } else { super::EXIT_RUNTIME })
}
