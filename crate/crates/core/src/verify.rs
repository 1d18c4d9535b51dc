//! Built-in self checks run by `cgfac verify`. Each check compares a fast
//! path against a slow, independent one on seeded random problems.

use crate::cg::{cg_solve, CgConfig};
use crate::fisher::DirectInverse;
use crate::linalg::{kron, mat_to_vec, matvec, Matrix, Vector};
use crate::net::{self, Activation, LossKind, NetworkState, Targets};
use crate::rng::{Rng, Stream};
use crate::telemetry::{fv_flops_closed_form, measure_fv, random_block};
use crate::trainer::{Batch, Method, TrainConfig, Trainer};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rel(a: &Vector, b: &Vector) -> f64 {
    a.sub(b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Shape `(n_a, n_g, batch)` drawn from small ranges.
fn shape(rng: &mut Rng) -> (usize, usize, usize) {
    (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(4))
}

fn fv_matches_dense(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed, Stream::Data);
    let mut worst = 0.0f64;
    for t in 0..50u64 {
        let (na, ng, b) = shape(&mut rng);
        let block = random_block(na, ng, b, 1e-2 + rng.uniform(0.0, 1.0), seed.wrapping_add(t));
        let v = Vector::from_fn(block.dim(), |_| rng.normal());
        let dense = block.dense_block()?;
        worst = worst.max(rel(&block.fv(&v)?, &matvec(&dense, &v)?));
    }
    Ok((worst <= 1e-11, format!("max relative error {worst:.3e} over 50 blocks (tol 1e-11)")))
}

fn vec_kron_identity(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed, Stream::Data);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (na, ng, _) = shape(&mut rng);
        let a = Matrix::from_fn(na, na, |_, _| rng.normal());
        let g = Matrix::from_fn(ng, ng, |_, _| rng.normal());
        let v = Matrix::from_fn(ng, na, |_, _| rng.normal());
        let lhs = matvec(&kron(&a, &g)?, &mat_to_vec(&v))?;
        let rhs = mat_to_vec(&g.matmul(&v)?.matmul_t(&a)?);
        worst = worst.max(rel(&lhs, &rhs));
    }
    Ok((worst <= 1e-12, format!("max relative error {worst:.3e} (tol 1e-12)")))
}

fn cg_matches_direct(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed, Stream::Rhs);
    let cfg = CgConfig {
        max_iters: 500,
        rel_tol: 1e-12,
        abs_tol: 1e-300,
    };
    let mut worst = 0.0f64;
    for t in 0..30u64 {
        let (na, ng, b) = shape(&mut rng);
        let gamma = 1e-2 + rng.uniform(0.0, 1.0);
        let block = random_block(na, ng, b, gamma, seed.wrapping_add(100 + t));
        let rhs = Vector::from_fn(block.dim(), |_| rng.normal());
        let (x, _) = cg_solve(&block, &rhs, &Vector::zeros(block.dim()), &cfg)?;
        let direct = DirectInverse::new(block.factors(), gamma)?.apply(&rhs)?;
        worst = worst.max(rel(&x, &direct));
    }
    Ok((worst <= 1e-8, format!("max relative discrepancy {worst:.3e} over 30 blocks (tol 1e-8)")))
}

fn krylov_bound(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed, Stream::Rhs);
    let cfg = CgConfig {
        max_iters: 200,
        rel_tol: 1e-10,
        abs_tol: 1e-300,
    };
    let mut worst_excess = i64::MIN;
    for b in 1..=3usize {
        for t in 0..20u64 {
            let block = random_block(4 + rng.below(5), 4 + rng.below(5), b, 0.1, seed.wrapping_add(200 + t));
            let rhs = Vector::from_fn(block.dim(), |_| rng.normal());
            let (_, report) = cg_solve(&block, &rhs, &Vector::zeros(block.dim()), &cfg)?;
            worst_excess = worst_excess.max(report.iterations as i64 - (b * b + 3) as i64);
        }
    }
    Ok((
        worst_excess <= 0,
        format!("worst iterations minus B^2+3 bound: {worst_excess}"),
    ))
}

fn backprop_finite_difference(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed, Stream::Data);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for t in 0..5u64 {
        let dims = [3, 4, 3];
        let net0 = NetworkState::mlp(&dims, Activation::Tanh, true, seed.wrapping_add(t))?;
        let x = Matrix::from_fn(3, 4, |_, _| rng.normal());
        let y = Targets::Labels((0..4).map(|_| rng.below(3)).collect());
        let pass = net::forward(&net0, &x)?;
        let cap = net::backward(&net0, &pass, &y, LossKind::CrossEntropy)?;
        for (l, grad) in cap.mean_gradients.iter().enumerate() {
            for idx in 0..grad.len() {
                let bumped = |delta: f64| -> Result<f64> {
                    let mut ws = net0.weights().to_vec();
                    ws[l].as_mut_slice()[idx] += delta;
                    let net1 = NetworkState::new(net0.layers().to_vec(), ws)?;
                    net::loss(&net::forward(&net1, &x)?.logits, &y, LossKind::CrossEntropy)
                };
                let fd = (bumped(h)? - bumped(-h)?) / (2.0 * h);
                let an = grad.as_slice()[idx];
                worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
            }
        }
    }
    Ok((worst <= 1e-5, format!("max relative error {worst:.3e} (tol 1e-5)")))
}

fn fv_flop_count(_seed: u64) -> Result<(bool, String)> {
    let mut mismatches = 0;
    for &(na, ng, b) in &[(8, 8, 1), (16, 4, 2), (5, 9, 3), (32, 32, 4)] {
        let m = measure_fv(na, ng, b, 3)?;
        if m.flops_per_call != fv_flops_closed_form(na, ng, b) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} of 4 shapes differ from the closed form")))
}

fn methods_agree(seed: u64) -> Result<(bool, String)> {
    let ds = crate::data::make_blobs(16, 2, 2, 0.5, seed)?;
    let net0 = NetworkState::mlp(&[2, 8, 2], Activation::Tanh, true, seed)?;
    let mut direct_cfg = TrainConfig::new(Method::KfacDirect);
    direct_cfg.seed = seed;
    let mut cg_cfg = TrainConfig {
        method: Method::CgFac,
        ..direct_cfg.clone()
    };
    cg_cfg.cg = CgConfig {
        max_iters: 500,
        rel_tol: 1e-12,
        abs_tol: 1e-300,
    };
    let mut direct = Trainer::new(net0.clone(), direct_cfg)?;
    let mut cgfac = Trainer::new(net0, cg_cfg)?;
    let mut worst = 0.0f64;
    for s in 0..5usize {
        let idx: Vec<usize> = (0..8).map(|i| (s * 8 + i * 3) % ds.len()).collect();
        let batch: Batch = ds.batch(&idx);
        let a = direct.step(&batch, 0)?;
        let b = cgfac.step(&batch, 0)?;
        worst = worst.max((a.record.loss - b.record.loss).abs());
        for (wa, wb) in a.net.weights().iter().zip(b.net.weights()) {
            worst = worst.max(wa.sub(wb)?.max_abs());
        }
    }
    Ok((worst <= 1e-6, format!("max loss/weight difference {worst:.3e} over 5 steps (tol 1e-6)")))
}

/// Runs every check with problems derived from `seed`.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check("fv_matches_dense", || fv_matches_dense(seed)),
        check("vec_kron_identity", || vec_kron_identity(seed)),
        check("cg_matches_direct", || cg_matches_direct(seed)),
        check("krylov_bound", || krylov_bound(seed)),
        check("backprop_finite_difference", || backprop_finite_difference(seed)),
        check("fv_flop_count", || fv_flop_count(seed)),
        check("methods_agree", || methods_agree(seed)),
    ]
}
