//! Training loop with three update rules: plain SGD, K-FAC with a direct
//! eigendecomposition inverse, and K-FAC with the damped system solved by CG.
//!
//! Every method computes a per-layer descent direction `d` and updates
//! `W <- W - eta * d`. For the K-FAC methods `d = (Â ⊗ Ĝ + γI)⁻¹ vec(∇W)`,
//! with factors rebuilt from each mini-batch.

use std::time::Instant;

use crate::cg::{cg_solve, CgConfig, CgReport, WarmStart};
use crate::data::Dataset;
use crate::fisher::{build_factors, DampedBlock, DirectInverse};
use crate::linalg::{mat_to_vec, vec_to_mat, Matrix};
use crate::net::{self, BatchCapture, LossKind, NetworkState, Targets};
use crate::rng::{Rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgd,
    KfacDirect,
    CgFac,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::KfacDirect => "kfac_direct",
            Method::CgFac => "cgfac",
        }
    }

    pub fn default_eta(self) -> f64 {
        match self {
            Method::Sgd => 0.1,
            Method::KfacDirect | Method::CgFac => 0.05,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Method::Sgd),
            "kfac_direct" | "kfac-direct" | "direct" => Ok(Method::KfacDirect),
            "cgfac" | "cg-fac" => Ok(Method::CgFac),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub eta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub cg: CgConfig,
    pub loss_kind: LossKind,
    /// Start each CG solve from the previous batch's solution for that layer.
    pub warm_start: bool,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            method,
            eta: method.default_eta(),
            gamma: 1e-2,
            batch_size: 16,
            epochs: 1,
            seed: 0,
            cg: CgConfig::default(),
            loss_kind: LossKind::CrossEntropy,
            warm_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.cg.validate()
    }
}

/// One row of training telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    /// Batch loss before the update.
    pub loss: f64,
    /// Batch accuracy before the update; `None` for regression.
    pub accuracy: Option<f64>,
    pub grad_norm: f64,
    pub cg_iters_total: usize,
    pub fv_calls: usize,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Everything one step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub net: NetworkState,
    pub record: LossRecord,
    pub directions: Vec<Matrix>,
    pub capture: BatchCapture,
    /// One report per layer for CG-FAC, empty otherwise.
    pub cg_reports: Vec<CgReport>,
}

struct Evaluated {
    capture: BatchCapture,
    loss: f64,
    accuracy: Option<f64>,
}

fn evaluate(net: &NetworkState, batch: &Batch, kind: LossKind) -> Result<Evaluated> {
    let pass = net::forward(net, &batch.inputs)?;
    let loss = net::loss(&pass.logits, &batch.targets, kind)?;
    let accuracy = match &batch.targets {
        Targets::Labels(labels) => Some(net::accuracy(&pass.logits, labels)),
        Targets::Values(_) => None,
    };
    let capture = net::backward(net, &pass, &batch.targets, kind)?;
    Ok(Evaluated {
        capture,
        loss,
        accuracy,
    })
}

fn kfac_direct_directions(capture: &BatchCapture, gamma: f64) -> Result<Vec<Matrix>> {
    (0..capture.n_layers())
        .map(|l| {
            let layer = || -> Result<Matrix> {
                let factors = build_factors(capture, l)?;
                let inv = DirectInverse::new(&factors, gamma)?;
                let grad = &capture.mean_gradients[l];
                let d = inv.apply(&mat_to_vec(grad))?;
                vec_to_mat(&d, grad.rows(), grad.cols())
            };
            layer().map_err(|e| e.at_layer(l))
        })
        .collect()
}

fn cgfac_directions(
    capture: &BatchCapture,
    cfg: &TrainConfig,
    warm: &mut WarmStart,
) -> Result<(Vec<Matrix>, Vec<CgReport>)> {
    let mut directions = Vec::with_capacity(capture.n_layers());
    let mut reports = Vec::with_capacity(capture.n_layers());
    for l in 0..capture.n_layers() {
        let mut layer = || -> Result<()> {
            let block = DampedBlock::new(build_factors(capture, l)?, cfg.gamma)?;
            let grad = &capture.mean_gradients[l];
            let b = mat_to_vec(grad);
            let x0 = if cfg.warm_start {
                warm.fetch(l, b.len())
            } else {
                crate::linalg::Vector::zeros(b.len())
            };
            let (x, report) = cg_solve(&block, &b, &x0, &cfg.cg)?;
            if cfg.warm_start {
                warm.store(l, &x);
            }
            directions.push(vec_to_mat(&x, grad.rows(), grad.cols())?);
            reports.push(report);
            Ok(())
        };
        layer().map_err(|e| e.at_layer(l))?;
    }
    Ok((directions, reports))
}

fn run_step(
    net: &NetworkState,
    batch: &Batch,
    cfg: &TrainConfig,
    warm: &mut WarmStart,
) -> Result<StepOutcome> {
    if batch.targets.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let ev = evaluate(net, batch, cfg.loss_kind)?;
    let (directions, cg_reports) = match cfg.method {
        Method::Sgd => (ev.capture.mean_gradients.clone(), Vec::new()),
        Method::KfacDirect => (kfac_direct_directions(&ev.capture, cfg.gamma)?, Vec::new()),
        Method::CgFac => cgfac_directions(&ev.capture, cfg, warm)?,
    };
    if let Some(l) = directions.iter().position(|d| !d.is_finite()) {
        return Err(Error::Divergence("update direction").at_layer(l));
    }
    let next = net::apply_update(net, &directions, cfg.eta)?;
    let record = LossRecord {
        step: 0,
        epoch: 0,
        loss: ev.loss,
        accuracy: ev.accuracy,
        grad_norm: ev.capture.grad_norm(),
        cg_iters_total: cg_reports.iter().map(|r| r.iterations).sum(),
        fv_calls: cg_reports.iter().map(|r| r.fv_calls).sum(),
        elapsed_ms: 0.0,
    };
    Ok(StepOutcome {
        net: next,
        record,
        directions,
        capture: ev.capture,
        cg_reports,
    })
}

fn with_method(cfg: &TrainConfig, method: Method) -> TrainConfig {
    TrainConfig { method, ..cfg.clone() }
}

/// `W <- W - eta * mean_gradient`.
pub fn step_sgd(net: &NetworkState, batch: &Batch, cfg: &TrainConfig) -> Result<(NetworkState, LossRecord)> {
    let out = run_step(net, batch, &with_method(cfg, Method::Sgd), &mut WarmStart::new())?;
    Ok((out.net, out.record))
}

/// Natural-gradient step with the eigendecomposition inverse.
pub fn step_kfac_direct(
    net: &NetworkState,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(NetworkState, LossRecord)> {
    let out = run_step(net, batch, &with_method(cfg, Method::KfacDirect), &mut WarmStart::new())?;
    Ok((out.net, out.record))
}

/// Natural-gradient step with per-layer CG solves started from `warm`.
pub fn step_cgfac(
    net: &NetworkState,
    batch: &Batch,
    cfg: &TrainConfig,
    warm: &mut WarmStart,
) -> Result<(NetworkState, LossRecord)> {
    let out = run_step(net, batch, &with_method(cfg, Method::CgFac), warm)?;
    Ok((out.net, out.record))
}

/// Owns the network and the warm-start store across steps.
pub struct Trainer {
    net: NetworkState,
    cfg: TrainConfig,
    warm: WarmStart,
    steps: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(net: NetworkState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            net,
            cfg,
            warm: WarmStart::new(),
            steps: 0,
            started: Instant::now(),
        })
    }

    pub fn net(&self) -> &NetworkState {
        &self.net
    }

    pub fn into_net(self) -> NetworkState {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Runs one step and advances the network.
    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<StepOutcome> {
        let mut out = run_step(&self.net, batch, &self.cfg, &mut self.warm)?;
        out.record.step = self.steps;
        out.record.epoch = epoch;
        out.record.elapsed_ms = self.started.elapsed().as_secs_f64() * 1e3;
        self.steps += 1;
        self.net = out.net.clone();
        Ok(out)
    }
}

/// Fixed-size batches of a per-epoch shuffle; a trailing partial batch is
/// dropped. Each record goes to `sink` as soon as it is produced, so an
/// error leaves every completed step already delivered.
pub fn train(
    net: NetworkState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&LossRecord) -> Result<()>,
) -> Result<(NetworkState, Vec<LossRecord>)> {
    cfg.validate()?;
    if dataset.dim() != net.input_dim() {
        return Err(Error::dims("dataset input", net.input_dim(), dataset.dim()));
    }
    if dataset.output_dim() != net.output_dim() {
        return Err(Error::dims("dataset output", net.output_dim(), dataset.output_dim()));
    }
    let batches_per_epoch = dataset.len() / cfg.batch_size;
    if batches_per_epoch == 0 && cfg.epochs > 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let mut rng = Rng::new(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs * batches_per_epoch);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = dataset.batch(chunk);
            let out = trainer.step(&batch, epoch)?;
            sink(&out.record)?;
            records.push(out.record);
        }
    }
    Ok((trainer.into_net(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::fisher::block_diag_fim;
    use crate::linalg::{solve_dense, Vector};
    use crate::net::{mlp_layers, Activation, LayerSpec};

    fn blobs() -> Dataset {
        make_blobs(32, 2, 2, 0.5, 3).unwrap()
    }

    fn small_net(seed: u64) -> NetworkState {
        NetworkState::mlp(&[2, 4, 2], Activation::Tanh, true, seed).unwrap()
    }

    fn first_batch(ds: &Dataset, b: usize) -> Batch {
        let idx: Vec<usize> = (0..b).map(|i| (i * 7) % ds.len()).collect();
        ds.batch(&idx)
    }

    fn max_rel(a: &[Matrix], b: &[Matrix]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.sub(y).unwrap().frobenius_norm() / y.frobenius_norm().max(1e-300))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_eta_is_rejected_by_config_but_zero_step_leaves_weights() {
        let mut cfg = TrainConfig::new(Method::Sgd);
        cfg.eta = 0.0;
        assert!(cfg.validate().is_err());
        // The step functions themselves accept eta = 0.
        let ds = blobs();
        let net = small_net(1);
        let (next, rec) = step_sgd(&net, &first_batch(&ds, 8), &cfg).unwrap();
        assert_eq!(next, net);
        assert!(rec.loss.is_finite());
    }

    #[test]
    fn sgd_hand_gradient_linear_mse() {
        let layers = vec![LayerSpec { in_dim: 2, out_dim: 2, activation: Activation::Identity, has_bias: false }];
        let w = Matrix::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]).unwrap();
        let net = NetworkState::new(layers, vec![w.clone()]).unwrap();
        let x = Matrix::from_rows(&[&[1.0], &[2.0]]).unwrap();
        let y = Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let mut cfg = TrainConfig::new(Method::Sgd);
        cfg.loss_kind = LossKind::Mse;
        cfg.eta = 0.1;
        let batch = Batch { inputs: x, targets: Targets::Values(y) };
        let (next, rec) = step_sgd(&net, &batch, &cfg).unwrap();
        // ŷ = W x = (-1.5, 2.5); residual = (-1.5, 1.5); W' = W - 0.1 r xᵀ.
        let want = Matrix::from_rows(&[&[0.65, -0.7], &[1.85, -0.05]]).unwrap();
        assert!(next.weights()[0].sub(&want).unwrap().max_abs() < 1e-15);
        assert!((rec.loss - 0.5 * (1.5f64.powi(2) * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn kfac_direct_large_damping_approaches_scaled_sgd() {
        let ds = blobs();
        let net = small_net(2);
        let batch = first_batch(&ds, 8);
        let mut cfg = TrainConfig::new(Method::KfacDirect);
        cfg.gamma = 1e8;
        let out = run_step(&net, &batch, &cfg, &mut WarmStart::new()).unwrap();
        let scaled: Vec<Matrix> = out.capture.mean_gradients.iter().map(|g| g.scaled(1.0 / cfg.gamma)).collect();
        assert!(max_rel(&out.directions, &scaled) <= 1e-6);
    }

    #[test]
    fn zero_gradient_gives_zero_direction() {
        let layers = mlp_layers(&[2, 2], Activation::Identity, false).unwrap();
        let net = NetworkState::new(layers, vec![Matrix::identity(2)]).unwrap();
        let x = Matrix::from_rows(&[&[1.0, -1.0], &[0.5, 2.0]]).unwrap();
        let batch = Batch { inputs: x.clone(), targets: Targets::Values(x) };
        for method in [Method::KfacDirect, Method::CgFac] {
            let mut cfg = TrainConfig::new(method);
            cfg.loss_kind = LossKind::Mse;
            let out = run_step(&net, &batch, &cfg, &mut WarmStart::new()).unwrap();
            assert_eq!(out.net, net);
            assert!(out.directions.iter().all(|d| d.max_abs() == 0.0));
            assert_eq!(out.record.cg_iters_total, 0);
        }
    }

    #[test]
    fn kfac_direct_matches_dense_block_solve() {
        let ds = blobs();
        let net = small_net(4);
        let batch = first_batch(&ds, 6);
        let cfg = TrainConfig::new(Method::KfacDirect);
        let out = run_step(&net, &batch, &cfg, &mut WarmStart::new()).unwrap();
        let blocks: Vec<DampedBlock> = (0..2)
            .map(|l| DampedBlock::new(build_factors(&out.capture, l).unwrap(), cfg.gamma).unwrap())
            .collect();
        let fim = block_diag_fim(&blocks).unwrap();
        let stacked: Vec<f64> = out.capture.mean_gradients.iter().flat_map(|g| g.as_slice().to_vec()).collect();
        let want = solve_dense(&fim, &Vector::from_vec(stacked).unwrap()).unwrap();
        let got: Vec<f64> = out.directions.iter().flat_map(|d| d.as_slice().to_vec()).collect();
        let got = Vector::from_vec(got).unwrap();
        assert!(got.sub(&want).norm() <= 1e-9 * want.norm());
    }

    #[test]
    fn cgfac_tight_matches_kfac_direct() {
        let ds = blobs();
        let net = small_net(5);
        let batch = first_batch(&ds, 8);
        let mut cfg = TrainConfig::new(Method::CgFac);
        cfg.cg = CgConfig { max_iters: 500, rel_tol: 1e-12, abs_tol: 1e-300 };
        let (cg_net, _) = step_cgfac(&net, &batch, &cfg, &mut WarmStart::new()).unwrap();
        let (direct_net, _) = step_kfac_direct(&net, &batch, &cfg).unwrap();
        assert!(max_rel(cg_net.weights(), direct_net.weights()) <= 1e-7);
    }

    #[test]
    fn warm_start_never_needs_more_on_repeated_batch() {
        let ds = blobs();
        let net = small_net(6);
        let batch = first_batch(&ds, 8);
        let mut cfg = TrainConfig::new(Method::CgFac);
        cfg.eta = 1e-3;
        let mut warm = WarmStart::new();
        let (net1, r1) = step_cgfac(&net, &batch, &cfg, &mut warm).unwrap();
        let (_, r2) = step_cgfac(&net1, &batch, &cfg, &mut warm).unwrap();
        assert!(r2.cg_iters_total <= r1.cg_iters_total, "{} > {}", r2.cg_iters_total, r1.cg_iters_total);
    }

    #[test]
    fn directions_are_descent_directions() {
        let ds = blobs();
        let net = small_net(7);
        let batch = first_batch(&ds, 8);
        for method in [Method::Sgd, Method::KfacDirect, Method::CgFac] {
            let out = run_step(&net, &batch, &TrainConfig::new(method), &mut WarmStart::new()).unwrap();
            for (d, g) in out.directions.iter().zip(&out.capture.mean_gradients) {
                let inner: f64 = d.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
                assert!(inner >= 0.0, "{method:?}: {inner}");
            }
        }
    }

    #[test]
    fn small_steps_do_not_increase_convex_loss() {
        let layers = vec![LayerSpec { in_dim: 3, out_dim: 2, activation: Activation::Identity, has_bias: true }];
        let net = NetworkState::init(layers, 8).unwrap();
        let mut rng = Rng::new(8, Stream::Data);
        let x = Matrix::from_fn(3, 6, |_, _| rng.normal());
        let y = Matrix::from_fn(2, 6, |_, _| rng.normal());
        let batch = Batch { inputs: x, targets: Targets::Values(y) };
        for method in [Method::Sgd, Method::KfacDirect, Method::CgFac] {
            let mut cfg = TrainConfig::new(method);
            cfg.loss_kind = LossKind::Mse;
            let mut eta = 0.5;
            let decreased = (0..20).any(|_| {
                cfg.eta = eta;
                eta *= 0.5;
                let out = run_step(&net, &batch, &cfg, &mut WarmStart::new()).unwrap();
                let after = evaluate(&out.net, &batch, LossKind::Mse).unwrap().loss;
                after <= out.record.loss
            });
            assert!(decreased, "{method:?}");
        }
    }

    #[test]
    fn sgd_loss_decreases_on_blobs() {
        let ds = blobs();
        let mut cfg = TrainConfig::new(Method::Sgd);
        cfg.batch_size = 8;
        cfg.epochs = 7;
        let (_, recs) = train(small_net(9), &ds, &cfg, |_| Ok(())).unwrap();
        assert!(recs.len() >= 50);
        let head: f64 = recs[..5].iter().map(|r| r.loss).sum();
        let tail: f64 = recs[recs.len() - 5..].iter().map(|r| r.loss).sum();
        assert!(tail < head, "{tail} !< {head}");
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut cfg = TrainConfig::new(Method::CgFac);
        cfg.epochs = 0;
        let net = small_net(10);
        let (out, recs) = train(net.clone(), &blobs(), &cfg, |_| Ok(())).unwrap();
        assert_eq!(out, net);
        assert!(recs.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let mut cfg = TrainConfig::new(Method::CgFac);
        cfg.epochs = 2;
        cfg.seed = 11;
        let run = || {
            let (net, recs) = train(small_net(11), &blobs(), &cfg, |_| Ok(())).unwrap();
            let strip = |r: &LossRecord| LossRecord { elapsed_ms: 0.0, ..r.clone() };
            (net, recs.iter().map(strip).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn step_and_epoch_numbering() {
        let mut cfg = TrainConfig::new(Method::Sgd);
        cfg.epochs = 2;
        cfg.batch_size = 10;
        let mut seen = Vec::new();
        let (_, recs) = train(small_net(12), &blobs(), &cfg, |r| {
            seen.push((r.step, r.epoch));
            Ok(())
        })
        .unwrap();
        assert_eq!(recs.len(), 2 * (64 / 10));
        assert_eq!(seen.first(), Some(&(0, 0)));
        assert_eq!(seen.last(), Some(&(11, 1)));
    }

    #[test]
    fn sink_error_aborts() {
        let cfg = TrainConfig::new(Method::Sgd);
        let mut n = 0;
        let r = train(small_net(13), &blobs(), &cfg, |_| {
            n += 1;
            if n == 2 {
                Err(Error::Config("sink full".into()))
            } else {
                Ok(())
            }
        });
        assert!(r.is_err());
        assert_eq!(n, 2);
    }

    #[test]
    fn cg_breakdown_reports_layer() {
        let e = Error::NotSpd { iteration: 0, curvature: -1.0 }.at_layer(1);
        assert!(e.to_string().starts_with("layer 1:"));
    }
}
