//! Flop and allocation accounting.
//!
//! Kernels report their own closed-form operation counts through
//! [`add_flops`]; every [`Vector`] and [`Matrix`] buffer reports its
//! allocation and release. Nothing is recorded unless a [`Scope`] is open on
//! the current thread. Scopes nest: an event is recorded into every open
//! scope, so a solver can keep its own count while an outer benchmark also
//! sees it.
//!
//! Counting convention: one flop per scalar multiply, add, or fused
//! multiply-add term. A dot product of length `n` costs `n`, an axpy costs
//! `n`, and a `m x k` by `k x n` product costs `m*n*k`. Under this convention
//! the B = 1 FV product costs `3n + 2n_G + 1` and one CG iteration adds `5n`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::time::Instant;

use crate::cg::{CgConfig, CgState};
use crate::fisher::{DampedBlock, DirectInverse, LayerFactors};
use crate::linalg::{Matrix, Vector};
use crate::rng::{Rng, Stream};
use crate::Result;

/// Counters collected over one measurement scope.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub flops: u64,
    /// High-water mark of floats allocated inside the scope and not yet freed.
    pub peak_live_floats: u64,
    /// Allocation counts keyed by `(rows, cols)`; vectors are `(len, 1)`.
    pub allocations_by_shape: BTreeMap<(usize, usize), u64>,
    live_floats: i64,
}

impl OpCounter {
    pub fn allocations_by_size(&self) -> BTreeMap<usize, u64> {
        let mut out = BTreeMap::new();
        for (&(r, c), &count) in &self.allocations_by_shape {
            *out.entry(r * c).or_insert(0) += count;
        }
        out
    }

    pub fn allocation_count(&self) -> u64 {
        self.allocations_by_shape.values().sum()
    }

    pub fn largest_allocation(&self) -> usize {
        self.allocations_by_shape
            .keys()
            .map(|&(r, c)| r * c)
            .max()
            .unwrap_or(0)
    }

    /// True if any square `dim x dim` matrix was allocated.
    pub fn has_square(&self, dim: usize) -> bool {
        self.allocations_by_shape.contains_key(&(dim, dim))
    }

    fn alloc(&mut self, rows: usize, cols: usize) {
        *self.allocations_by_shape.entry((rows, cols)).or_insert(0) += 1;
        self.live_floats += (rows * cols) as i64;
        if self.live_floats > 0 {
            self.peak_live_floats = self.peak_live_floats.max(self.live_floats as u64);
        }
    }

    fn free(&mut self, len: usize) {
        self.live_floats -= len as i64;
    }
}

thread_local! {
    static SCOPES: RefCell<Vec<OpCounter>> = const { RefCell::new(Vec::new()) };
}

/// An open measurement scope. Close it with [`Scope::finish`]; dropping it
/// unfinished discards its counters.
#[must_use]
pub struct Scope {
    depth: usize,
    done: bool,
}

impl Scope {
    pub fn begin() -> Self {
        let depth = SCOPES.with(|s| {
            let mut s = s.borrow_mut();
            s.push(OpCounter::default());
            s.len()
        });
        Scope { depth, done: false }
    }

    /// Snapshot of the counters so far, without closing the scope.
    pub fn peek(&self) -> OpCounter {
        SCOPES.with(|s| s.borrow()[self.depth - 1].clone())
    }

    pub fn finish(mut self) -> OpCounter {
        self.done = true;
        self.pop()
    }

    fn pop(&self) -> OpCounter {
        SCOPES.with(|s| {
            let mut s = s.borrow_mut();
            assert_eq!(s.len(), self.depth, "telemetry scopes must close in LIFO order");
            s.pop().unwrap_or_default()
        })
    }
}

impl Drop for Scope {
    fn drop(&mut self) {
        if !self.done {
            self.pop();
        }
    }
}

fn with_open(f: impl Fn(&mut OpCounter)) {
    SCOPES.with(|s| {
        if let Ok(mut s) = s.try_borrow_mut() {
            s.iter_mut().for_each(&f);
        }
    });
}

#[inline]
pub fn add_flops(n: usize) {
    with_open(|c| c.flops += n as u64);
}

#[inline]
pub(crate) fn record_alloc(rows: usize, cols: usize) {
    with_open(|c| c.alloc(rows, cols));
}

#[inline]
pub(crate) fn record_free(len: usize) {
    with_open(|c| c.free(len));
}

/// Closed-form FV cost: `2nB + 2B²n_G + B² + n`.
pub fn fv_flops_closed_form(n_a: usize, n_g: usize, batch: usize) -> u64 {
    let n = (n_a * n_g) as u64;
    let (b, ng) = (batch as u64, n_g as u64);
    2 * n * b + 2 * b * b * ng + b * b + n
}

/// Cost of the five vector operations in one CG iteration.
pub fn cg_vector_flops(n: usize) -> u64 {
    5 * n as u64
}

/// Modeled cost of the direct eigendecomposition method:
/// `n_A³ + n_G³ + 2n(n_A + n_G)`.
pub fn direct_cost_model(n_a: usize, n_g: usize) -> u64 {
    let (a, g) = (n_a as u64, n_g as u64);
    a.pow(3) + g.pow(3) + 2 * a * g * (a + g)
}

/// A seeded random block with every root entry drawn from N(0, 1).
pub fn random_block(n_a: usize, n_g: usize, batch: usize, gamma: f64, seed: u64) -> DampedBlock {
    let mut rng = Rng::new(seed, Stream::Data);
    let a = Matrix::from_fn(n_a, batch, |_, _| rng.normal());
    let g = Matrix::from_fn(n_g, batch, |_, _| rng.normal());
    DampedBlock::new(LayerFactors::new(a, g).expect("batch >= 1"), gamma)
        .expect("gamma is positive")
}

fn random_rhs(n: usize, seed: u64) -> Vector {
    let mut rng = Rng::new(seed, Stream::Rhs);
    Vector::from_fn(n, |_| rng.normal())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FvMeasurement {
    pub n_a: usize,
    pub n_g: usize,
    pub batch: usize,
    pub flops_per_call: u64,
    pub closed_form: u64,
}

/// Measures the flops of one FV product, averaged over `trials` calls.
pub fn measure_fv(n_a: usize, n_g: usize, batch: usize, trials: usize) -> Result<FvMeasurement> {
    let block = random_block(n_a, n_g, batch, 1e-2, 11);
    let v = random_rhs(block.dim(), 12);
    let trials = trials.max(1);
    let scope = Scope::begin();
    for _ in 0..trials {
        block.fv(&v)?;
    }
    let counter = scope.finish();
    Ok(FvMeasurement {
        n_a,
        n_g,
        batch,
        flops_per_call: counter.flops / trials as u64,
        closed_form: fv_flops_closed_form(n_a, n_g, batch),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgStepMeasurement {
    pub n_a: usize,
    pub n_g: usize,
    pub batch: usize,
    pub fv_flops: u64,
    pub vector_flops: u64,
    pub step_flops: u64,
    pub direct_model: u64,
}

/// Measures one full CG iteration (FV product plus five vector operations).
pub fn measure_cg_step(n_a: usize, n_g: usize, batch: usize) -> Result<CgStepMeasurement> {
    let block = random_block(n_a, n_g, batch, 1e-2, 21);
    let b = random_rhs(block.dim(), 22);
    let x0 = Vector::zeros(block.dim());
    // Unreachable tolerance so the measured step always runs to the
    // direction update.
    let cfg = CgConfig {
        max_iters: 2,
        rel_tol: 1e-300,
        abs_tol: 1e-300,
    };
    let mut state = CgState::new(&block, &b, &x0, &cfg)?;
    let scope = Scope::begin();
    state.step(&block)?;
    let step_flops = scope.finish().flops;
    let fv_flops = measure_fv(n_a, n_g, batch, 1)?.flops_per_call;
    Ok(CgStepMeasurement {
        n_a,
        n_g,
        batch,
        fv_flops,
        vector_flops: step_flops - fv_flops,
        step_flops,
        direct_model: direct_cost_model(n_a, n_g),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolvePath {
    CgFac,
    Direct,
}

impl SolvePath {
    pub fn name(self) -> &'static str {
        match self {
            SolvePath::CgFac => "cgfac",
            SolvePath::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathMeasurement {
    pub path: SolvePath,
    pub n_a: usize,
    pub n_g: usize,
    pub batch: usize,
    pub counter: OpCounter,
    pub wall_ms: f64,
    pub cg_iterations: Option<usize>,
}

/// Runs one complete preconditioner solve on a seeded random block inside a
/// measurement scope. The scope covers factor capture from the raw roots
/// through the returned direction.
pub fn measure_path(
    path: SolvePath,
    n_a: usize,
    n_g: usize,
    batch: usize,
    cfg: &CgConfig,
    seed: u64,
) -> Result<PathMeasurement> {
    let gamma = 1e-2;
    let template = random_block(n_a, n_g, batch, gamma, seed);
    let (a_root, g_root) = (template.factors().a_root(), template.factors().g_root());
    let b = random_rhs(template.dim(), seed);

    let start = Instant::now();
    let scope = Scope::begin();
    let mut cg_iterations = None;
    match path {
        SolvePath::CgFac => {
            let factors = LayerFactors::new(a_root.clone(), g_root.clone())?;
            let block = DampedBlock::new(factors, gamma)?;
            let x0 = Vector::zeros(block.dim());
            let (_x, report) = crate::cg::cg_solve(&block, &b, &x0, cfg)?;
            cg_iterations = Some(report.iterations);
        }
        SolvePath::Direct => {
            let factors = LayerFactors::new(a_root.clone(), g_root.clone())?;
            let inv = DirectInverse::new(&factors, gamma)?;
            inv.apply(&b)?;
        }
    }
    let counter = scope.finish();
    Ok(PathMeasurement {
        path,
        n_a,
        n_g,
        batch,
        counter,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        cg_iterations,
    })
}

/// Peak live floats of one solve along `path`.
pub fn measure_memory(path: SolvePath, n_a: usize, n_g: usize, batch: usize) -> Result<OpCounter> {
    Ok(measure_path(path, n_a, n_g, batch, &CgConfig::default(), 31)?.counter)
}
