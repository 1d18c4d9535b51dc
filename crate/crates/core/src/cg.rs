//! Conjugate gradient on `F_γ x = b` using only operator applications.

use crate::fisher::DampedBlock;
use crate::linalg::{Matrix, Vector};
use crate::telemetry::{add_flops, Scope};
use crate::{Error, Result};

/// A symmetric positive definite linear operator applied without forming it.
pub trait SpdOperator {
    fn dim(&self) -> usize;

    /// `out = F x`
    fn apply_into(&self, x: &[f64], out: &mut [f64]);
}

impl SpdOperator for DampedBlock {
    fn dim(&self) -> usize {
        DampedBlock::dim(self)
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.fv_into(x, out);
    }
}

/// Dense operators, for oracle comparisons.
impl SpdOperator for Matrix {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (j, &xj) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.col(j)) {
                *o += a * xj;
            }
        }
        add_flops(self.len());
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            max_iters: 20,
            rel_tol: 1e-6,
            abs_tol: 1e-12,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("CG needs at least one iteration".into()));
        }
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::Config("CG tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// `‖r_k‖²` for `k = 0..=iterations`.
    pub rho_history: Vec<f64>,
    pub converged: bool,
    pub warm_start: bool,
    pub fv_calls: usize,
    pub flops: u64,
}

/// Iteration state, exposed so callers can observe every iterate.
#[derive(Debug)]
pub struct CgState {
    x: Vector,
    r: Vector,
    p: Vector,
    u: Vector,
    rho: f64,
    tol: f64,
    rho_history: Vec<f64>,
    fv_calls: usize,
    converged: bool,
    warm_start: bool,
}

impl CgState {
    /// Sets `r_0 = p_0 = b - F x_0` and `ρ_0 = ‖r_0‖²`. The operator is not
    /// applied when `x_0 = 0`.
    pub fn new<O: SpdOperator + ?Sized>(op: &O, b: &Vector, x0: &Vector, cfg: &CgConfig) -> Result<Self> {
        cfg.validate()?;
        let n = op.dim();
        if b.len() != n {
            return Err(Error::dims("cg right-hand side", n, b.len()));
        }
        if x0.len() != n {
            return Err(Error::dims("cg initial guess", n, x0.len()));
        }
        if !b.is_finite() {
            return Err(Error::NonFinite("cg right-hand side"));
        }
        if !x0.is_finite() {
            return Err(Error::NonFinite("cg initial guess"));
        }
        let warm_start = !x0.is_zero();
        let mut fv_calls = 0;
        let r = if warm_start {
            let mut fx = Vector::zeros(n);
            op.apply_into(x0.as_slice(), fx.as_mut_slice());
            fv_calls += 1;
            b.sub(&fx)
        } else {
            b.clone()
        };
        let rho = r.norm_sq();
        let tol = (cfg.rel_tol * b.norm()).max(cfg.abs_tol);
        Ok(CgState {
            x: x0.clone(),
            p: r.clone(),
            u: Vector::zeros(n),
            converged: rho.sqrt() <= tol,
            r,
            rho,
            tol,
            rho_history: vec![rho],
            fv_calls,
            warm_start,
        })
    }

    /// One CG iteration. Returns whether the residual is now below tolerance;
    /// on convergence the search direction is left untouched.
    pub fn step<O: SpdOperator + ?Sized>(&mut self, op: &O) -> Result<bool> {
        let k = self.iterations();
        op.apply_into(self.p.as_slice(), self.u.as_mut_slice());
        self.fv_calls += 1;
        let s = self.p.dot(&self.u);
        if s.is_nan() {
            return Err(Error::Divergence("CG curvature"));
        }
        if s <= 0.0 {
            return Err(Error::NotSpd { iteration: k, curvature: s });
        }
        let alpha = self.rho / s;
        self.x.axpy(alpha, &self.p);
        self.r.axpy(-alpha, &self.u);
        let rho_next = self.r.norm_sq();
        self.rho_history.push(rho_next);
        if !rho_next.is_finite() || !self.x.is_finite() {
            return Err(Error::Divergence("CG iterate"));
        }
        if rho_next.sqrt() <= self.tol {
            self.rho = rho_next;
            self.converged = true;
            return Ok(true);
        }
        let beta = rho_next / self.rho;
        self.p.xpby(&self.r, beta);
        self.rho = rho_next;
        Ok(false)
    }

    pub fn x(&self) -> &Vector {
        &self.x
    }

    /// The recursively updated residual `r_k`.
    pub fn residual(&self) -> &Vector {
        &self.r
    }

    pub fn iterations(&self) -> usize {
        self.rho_history.len() - 1
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    fn finish(self, flops: u64) -> (Vector, CgReport) {
        let report = CgReport {
            iterations: self.rho_history.len() - 1,
            rho_history: self.rho_history,
            converged: self.converged,
            warm_start: self.warm_start,
            fv_calls: self.fv_calls,
            flops,
        };
        (self.x, report)
    }
}

/// Solves `op x = b` from `x0`, stopping once `‖r‖ <= max(rel_tol ‖b‖, abs_tol)`
/// or after `cfg.max_iters` iterations.
pub fn cg_solve<O: SpdOperator + ?Sized>(
    op: &O,
    b: &Vector,
    x0: &Vector,
    cfg: &CgConfig,
) -> Result<(Vector, CgReport)> {
    let scope = Scope::begin();
    let mut state = CgState::new(op, b, x0, cfg)?;
    while !state.is_converged() && state.iterations() < cfg.max_iters {
        state.step(op)?;
    }
    let flops = scope.finish().flops;
    Ok(state.finish(flops))
}

/// Per-layer previous solutions used as CG starting points.
#[derive(Debug, Default, Clone)]
pub struct WarmStart {
    slots: Vec<Option<Vector>>,
}

impl WarmStart {
    pub fn new() -> Self {
        Self::default()
    }

    /// The stored solution for `layer`, or zeros if there is none or its
    /// length differs from `n` (the slot is cleared in that case).
    pub fn fetch(&mut self, layer: usize, n: usize) -> Vector {
        match self.slots.get_mut(layer) {
            Some(slot) => match slot {
                Some(x) if x.len() == n => x.clone(),
                _ => {
                    *slot = None;
                    Vector::zeros(n)
                }
            },
            None => Vector::zeros(n),
        }
    }

    pub fn store(&mut self, layer: usize, x: &Vector) {
        if self.slots.len() <= layer {
            self.slots.resize(layer + 1, None);
        }
        self.slots[layer] = Some(x.clone());
    }

    pub fn reset(&mut self) {
        self.slots.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::{DirectInverse, LayerFactors};
    use crate::linalg::solve_dense;
    use crate::rng::{Rng, Stream};
    use proptest::prelude::*;

    fn random_factors(n_a: usize, n_g: usize, batch: usize, seed: u64) -> LayerFactors {
        let mut rng = Rng::new(seed, Stream::Data);
        let a = Matrix::from_fn(n_a, batch, |_, _| rng.normal());
        let g = Matrix::from_fn(n_g, batch, |_, _| rng.normal());
        LayerFactors::new(a, g).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vector {
        let mut rng = Rng::new(seed, Stream::Rhs);
        Vector::from_fn(n, |_| rng.normal())
    }

    fn rel_err(got: &Vector, want: &Vector) -> f64 {
        got.sub(want).norm() / want.norm().max(1e-300)
    }

    fn tight() -> CgConfig {
        CgConfig { max_iters: 200, rel_tol: 1e-12, abs_tol: 1e-300 }
    }

    #[test]
    fn identity_operator_one_iteration() {
        let zero = LayerFactors::new(Matrix::zeros(3, 2), Matrix::zeros(2, 2)).unwrap();
        let block = DampedBlock::new(zero, 1.0).unwrap();
        let b = random_vec(6, 1);
        let (x, rep) = cg_solve(&block, &b, &Vector::zeros(6), &CgConfig::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert!(rel_err(&x, &b) < 1e-15);
    }

    #[test]
    fn zero_rhs_zero_iterations() {
        let block = DampedBlock::new(random_factors(3, 2, 2, 2), 0.1).unwrap();
        let (x, rep) = cg_solve(&block, &Vector::zeros(6), &Vector::zeros(6), &CgConfig::default()).unwrap();
        assert!(x.is_zero());
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.fv_calls, 0);
        assert_eq!(rep.rho_history, vec![0.0]);
        assert!(rep.converged && !rep.warm_start);
    }

    #[test]
    fn rank_one_matches_sherman_morrison() {
        // Â ⊗ Ĝ = w wᵀ with w = vec(g aᵀ) when B = 1, so
        // (γI + w wᵀ)⁻¹ b = b/γ - w (wᵀb) / (γ (γ + wᵀw)).
        let f = random_factors(4, 3, 1, 3);
        let w: Vec<f64> = (0..4)
            .flat_map(|j| (0..3).map(move |i| (i, j)))
            .map(|(i, j)| f.g_root()[(i, 0)] * f.a_root()[(j, 0)])
            .collect();
        let gamma = 0.05;
        let block = DampedBlock::new(f, gamma).unwrap();
        let b = random_vec(12, 4);
        let wtb: f64 = w.iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
        let wtw: f64 = w.iter().map(|x| x * x).sum();
        let want = Vector::from_fn(12, |i| b[i] / gamma - w[i] * wtb / (gamma * (gamma + wtw)));
        let (x, rep) = cg_solve(&block, &b, &Vector::zeros(12), &tight()).unwrap();
        assert!(rep.iterations <= 2, "{} iterations", rep.iterations);
        assert!(rel_err(&x, &want) <= 1e-9);
    }

    #[test]
    fn matches_direct_inverse() {
        let f = random_factors(6, 5, 3, 5);
        let gamma = 1e-2;
        let block = DampedBlock::new(f.clone(), gamma).unwrap();
        let b = random_vec(30, 6);
        let want = DirectInverse::new(&f, gamma).unwrap().apply(&b).unwrap();
        let (x, _) = cg_solve(&block, &b, &Vector::zeros(30), &tight()).unwrap();
        assert!(rel_err(&x, &want) <= 1e-8);
    }

    #[test]
    fn not_spd_is_an_error() {
        let neg = Matrix::identity(3).scaled(-1.0);
        let b = random_vec(3, 7);
        let r = cg_solve(&neg, &b, &Vector::zeros(3), &CgConfig::default());
        assert!(matches!(r, Err(Error::NotSpd { iteration: 0, .. })));
    }

    #[test]
    fn rejects_bad_config_and_dims() {
        let m = Matrix::identity(3);
        let b = random_vec(3, 8);
        let bad = CgConfig { max_iters: 0, ..CgConfig::default() };
        assert!(cg_solve(&m, &b, &Vector::zeros(3), &bad).is_err());
        assert!(cg_solve(&m, &b, &Vector::zeros(4), &CgConfig::default()).is_err());
        assert!(cg_solve(&m, &random_vec(2, 1), &Vector::zeros(3), &CgConfig::default()).is_err());
    }

    #[test]
    fn respects_iteration_cap() {
        let f = random_factors(8, 8, 8, 9);
        let block = DampedBlock::new(f, 1e-4).unwrap();
        let cfg = CgConfig { max_iters: 3, rel_tol: 1e-14, abs_tol: 1e-300 };
        let (_, rep) = cg_solve(&block, &random_vec(64, 10), &Vector::zeros(64), &cfg).unwrap();
        assert_eq!(rep.iterations, 3);
        assert!(!rep.converged);
        assert_eq!(rep.rho_history.len(), 4);
    }

    #[test]
    fn warm_start_store_semantics() {
        let mut ws = WarmStart::new();
        assert!(ws.fetch(0, 4).is_zero());
        let x = random_vec(4, 11);
        ws.store(1, &x);
        assert_eq!(ws.fetch(1, 4), x);
        assert!(ws.fetch(0, 4).is_zero());
        assert!(ws.fetch(1, 5).is_zero());
        assert!(ws.fetch(1, 4).is_zero(), "shape change clears the slot");
        ws.store(1, &x);
        ws.reset();
        assert!(ws.fetch(1, 4).is_zero());
    }

    #[test]
    fn identical_system_warm_restart_converges_immediately() {
        let block = DampedBlock::new(random_factors(5, 4, 3, 12), 1e-2).unwrap();
        let b = random_vec(20, 13);
        let mut ws = WarmStart::new();
        let cfg = CgConfig::default();
        let (x, cold) = cg_solve(&block, &b, &ws.fetch(0, 20), &cfg).unwrap();
        ws.store(0, &x);
        let (_, warm) = cg_solve(&block, &b, &ws.fetch(0, 20), &cfg).unwrap();
        assert!(!cold.warm_start && warm.warm_start);
        assert!(warm.iterations <= 1, "{}", warm.iterations);
        assert_eq!(warm.rho_history[0], (b.sub(&block.fv(&x).unwrap())).norm_sq());
    }

    #[test]
    fn report_counts_flops_and_calls() {
        let block = DampedBlock::new(random_factors(4, 4, 1, 14), 1e-2).unwrap();
        let (_, rep) = cg_solve(&block, &random_vec(16, 15), &Vector::zeros(16), &CgConfig::default()).unwrap();
        assert_eq!(rep.fv_calls, rep.iterations);
        assert!(rep.flops > 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        // B = 1 and B = 2 stay within the bound at the default damping. For
        // B = 3 small damping makes finite-precision CG overshoot B²+1 by
        // several iterations, so that case is checked at γ = 1.
        #[test]
        fn krylov_termination(seed in any::<u64>(), batch in 1usize..=3, n_a in 4usize..=8, n_g in 4usize..=8) {
            let gamma = if batch == 3 { 1.0 } else { 1e-2 };
            let block = DampedBlock::new(random_factors(n_a, n_g, batch, seed), gamma).unwrap();
            let b = random_vec(n_a * n_g, seed ^ 5);
            let cfg = CgConfig { max_iters: 100, rel_tol: 1e-10, abs_tol: 1e-300 };
            let (_, rep) = cg_solve(&block, &b, &Vector::zeros(n_a * n_g), &cfg).unwrap();
            prop_assert!(rep.converged);
            prop_assert!(rep.iterations <= batch * batch + 3, "B={} took {}", batch, rep.iterations);
            if batch == 1 {
                prop_assert!(rep.iterations <= 2);
            }
        }

        #[test]
        fn energy_norm_decreases_and_residual_recurrence_holds(seed in any::<u64>(), batch in 1usize..=4) {
            let (n_a, n_g) = (5, 4);
            let gamma = 1e-1;
            let f = random_factors(n_a, n_g, batch, seed);
            let block = DampedBlock::new(f.clone(), gamma).unwrap();
            let b = random_vec(n_a * n_g, seed ^ 6);
            let exact = DirectInverse::new(&f, gamma).unwrap().apply(&b).unwrap();
            let cfg = CgConfig { max_iters: 50, rel_tol: 1e-13, abs_tol: 1e-300 };
            let mut state = CgState::new(&block, &b, &Vector::zeros(n_a * n_g), &cfg).unwrap();
            let energy = |x: &Vector| {
                let e = x.sub(&exact);
                e.dot(&block.fv(&e).unwrap())
            };
            let mut last = energy(state.x());
            while !state.is_converged() && state.iterations() < cfg.max_iters {
                state.step(&block).unwrap();
                let now = energy(state.x());
                prop_assert!(now <= last + 1e-12);
                last = now;
                let explicit = b.sub(&block.fv(state.x()).unwrap());
                prop_assert!(explicit.sub(state.residual()).norm() <= 1e-8 * b.norm());
            }
        }

        #[test]
        fn matches_dense_solve(seed in any::<u64>(), n_a in 1usize..=6, n_g in 1usize..=6, batch in 1usize..=6) {
            let block = DampedBlock::new(random_factors(n_a, n_g, batch, seed), 1e-2).unwrap();
            let n = n_a * n_g;
            let b = random_vec(n, seed ^ 7);
            let want = solve_dense(&block.dense_block().unwrap(), &b).unwrap();
            let (x, _) = cg_solve(&block, &b, &Vector::zeros(n), &tight()).unwrap();
            prop_assert!(rel_err(&x, &want) <= 1e-8);
        }

        #[test]
        fn scale_equivariance(seed in any::<u64>(), k in -3i32..=3, negative in any::<bool>()) {
            // Powers of two scale exactly, so the iterates scale bit for bit.
            let c = if negative { -(2f64.powi(k)) } else { 2f64.powi(k) };
            let block = DampedBlock::new(random_factors(4, 3, 2, seed), 1e-2).unwrap();
            let b = random_vec(12, seed ^ 8);
            let cfg = CgConfig { max_iters: 30, rel_tol: 1e-10, abs_tol: 1e-300 };
            let (x, rep) = cg_solve(&block, &b, &Vector::zeros(12), &cfg).unwrap();
            let (xc, repc) = cg_solve(&block, &b.scaled(c), &Vector::zeros(12), &cfg).unwrap();
            prop_assert_eq!(rep.iterations, repc.iterations);
            prop_assert_eq!(xc, x.scaled(c));
        }
    }
}
