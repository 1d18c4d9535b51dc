//! Kronecker-factored curvature blocks.
//!
//! A layer's block is `Â ⊗ Ĝ + γI` with `Â = (1/B) a aᵀ` and
//! `Ĝ = (1/B) g gᵀ`. Only the roots `a` (`n_A x B`) and `g` (`n_G x B`) are
//! stored. Vectors of length `n = n_A * n_G` are the column-stacked
//! `n_G x n_A` weight-gradient matrices, so `(Â ⊗ Ĝ) vec(V) = vec(Ĝ V Â)`.

use crate::linalg::{self, EigenDecomposition, Matrix, Vector};
use crate::net::BatchCapture;
use crate::telemetry::add_flops;
use crate::{Error, Result};

/// Largest block dimension the dense oracle paths will materialize.
pub const DENSE_MAX_DIM: usize = 1024;

/// Relative cutoff below which factor eigenvalues are treated as zero.
const EIGEN_CLIP: f64 = 1e-12;

/// Minimum eigenvalue ratio for the undamped inverse.
const FULL_RANK_RATIO: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LayerFactors {
    a_root: Matrix,
    g_root: Matrix,
}

impl LayerFactors {
    pub fn new(a_root: Matrix, g_root: Matrix) -> Result<Self> {
        if a_root.cols() != g_root.cols() {
            return Err(Error::dims("factor roots batch", a_root.cols(), g_root.cols()));
        }
        Ok(LayerFactors { a_root, g_root })
    }

    pub fn a_root(&self) -> &Matrix {
        &self.a_root
    }

    pub fn g_root(&self) -> &Matrix {
        &self.g_root
    }

    pub fn batch_size(&self) -> usize {
        self.a_root.cols()
    }

    pub fn n_a(&self) -> usize {
        self.a_root.rows()
    }

    pub fn n_g(&self) -> usize {
        self.g_root.rows()
    }

    pub fn n(&self) -> usize {
        self.n_a() * self.n_g()
    }

    /// Materializes `Â = (1/B) a aᵀ`.
    pub fn factor_a(&self) -> Matrix {
        second_moment(&self.a_root)
    }

    /// Materializes `Ĝ = (1/B) g gᵀ`.
    pub fn factor_g(&self) -> Matrix {
        second_moment(&self.g_root)
    }
}

fn second_moment(root: &Matrix) -> Matrix {
    let b = root.cols() as f64;
    root.matmul_t(root).expect("root times its transpose").scaled(1.0 / b)
}

/// Copies the factor roots of `layer` out of a batch capture.
pub fn build_factors(capture: &BatchCapture, layer: usize) -> Result<LayerFactors> {
    if capture.batch_size == 0 {
        return Err(Error::Empty("batch"));
    }
    let (Some(a), Some(g)) = (capture.a_roots.get(layer), capture.g_roots.get(layer)) else {
        return Err(Error::dims("layer index", format!("< {}", capture.n_layers()), layer));
    };
    LayerFactors::new(a.clone(), g.clone())
}

/// The damped operator `Â ⊗ Ĝ + γI`, never formed explicitly.
#[derive(Debug, Clone)]
pub struct DampedBlock {
    factors: LayerFactors,
    gamma: f64,
}

impl DampedBlock {
    pub fn new(factors: LayerFactors, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!("damping must be positive, got {gamma}")));
        }
        Ok(DampedBlock { factors, gamma })
    }

    pub fn factors(&self) -> &LayerFactors {
        &self.factors
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.factors.n()
    }

    /// Matrix-free product `(Â ⊗ Ĝ + γI) v`.
    pub fn fv(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.dim() {
            return Err(Error::dims("fv", self.dim(), v.len()));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite("fv input"));
        }
        let mut out = Vector::zeros(self.dim());
        self.fv_into(v.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// With `V = mat(v)` (`n_G x n_A`):
    /// `T = V a`, `M = (1/B²) gᵀ T`, `out = g M aᵀ + γ v`.
    /// For `B = 1`, `M` is the scalar `gᵀ V a`.
    pub(crate) fn fv_into(&self, v: &[f64], out: &mut [f64]) {
        let a = &self.factors.a_root;
        let g = &self.factors.g_root;
        let (n_a, n_g, batch) = (a.rows(), g.rows(), a.cols());
        let n = n_a * n_g;

        let mut t = Matrix::zeros(n_g, batch);
        for s in 0..batch {
            let t_col = t.col_mut(s);
            for (j, &a_js) in a.col(s).iter().enumerate() {
                if a_js != 0.0 {
                    for (ti, &vi) in t_col.iter_mut().zip(&v[j * n_g..(j + 1) * n_g]) {
                        *ti += vi * a_js;
                    }
                }
            }
        }
        add_flops(n * batch);

        let scale = 1.0 / (batch * batch) as f64;
        let m = Matrix::from_fn(batch, batch, |r, s| scale * linalg::dot(g.col(r), t.col(s)));
        add_flops(batch * batch * n_g + batch * batch);

        let mut gm = Matrix::zeros(n_g, batch);
        for s in 0..batch {
            let col = gm.col_mut(s);
            for r in 0..batch {
                let m_rs = m[(r, s)];
                for (c, &g_ir) in col.iter_mut().zip(g.col(r)) {
                    *c += g_ir * m_rs;
                }
            }
        }
        add_flops(n_g * batch * batch);

        for (o, &vi) in out.iter_mut().zip(v) {
            *o = self.gamma * vi;
        }
        for s in 0..batch {
            let gm_col = gm.col(s);
            for (j, &a_js) in a.col(s).iter().enumerate() {
                if a_js != 0.0 {
                    for (o, &c) in out[j * n_g..(j + 1) * n_g].iter_mut().zip(gm_col) {
                        *o += c * a_js;
                    }
                }
            }
        }
        add_flops(n * batch + n);
    }

    /// Explicit `kron(Â, Ĝ) + γI`. Oracle use, `n <= 1024`.
    pub fn dense_block(&self) -> Result<Matrix> {
        dense_damped(&self.factors, self.gamma)
    }
}

fn dense_damped(factors: &LayerFactors, gamma: f64) -> Result<Matrix> {
    let n = factors.n();
    if n > DENSE_MAX_DIM {
        return Err(Error::SizeGate {
            op: "dense_block",
            requested: n,
            limit: DENSE_MAX_DIM,
        });
    }
    let mut f = linalg::kron(&factors.factor_a(), &factors.factor_g())?;
    for i in 0..n {
        f[(i, i)] += gamma;
    }
    Ok(f)
}

/// Explicit undamped `kron(Â, Ĝ)`. Oracle use, `n <= 1024`.
pub fn dense_kron_factors(factors: &LayerFactors) -> Result<Matrix> {
    dense_damped(factors, 0.0)
}

/// Block-diagonal assembly of the per-layer dense blocks, in layer order.
pub fn block_diag_fim(blocks: &[DampedBlock]) -> Result<Matrix> {
    let total: usize = blocks.iter().map(DampedBlock::dim).sum();
    if total > DENSE_MAX_DIM {
        return Err(Error::SizeGate {
            op: "block_diag_fim",
            requested: total,
            limit: DENSE_MAX_DIM,
        });
    }
    if blocks.is_empty() {
        return Err(Error::Empty("block list"));
    }
    let mut out = Matrix::zeros(total, total);
    let mut offset = 0;
    for block in blocks {
        let d = block.dense_block()?;
        let n = d.rows();
        for j in 0..n {
            for i in 0..n {
                out[(offset + i, offset + j)] = d[(i, j)];
            }
        }
        offset += n;
    }
    Ok(out)
}

/// Eigendecompositions of `Â` and `Ĝ` for applying `(Â ⊗ Ĝ + γI)⁻¹`.
#[derive(Debug, Clone)]
pub struct DirectInverse {
    pub eig_a: EigenDecomposition,
    pub eig_g: EigenDecomposition,
    pub gamma: f64,
}

impl DirectInverse {
    /// Forms both factors and decomposes them. Eigenvalues below
    /// `1e-12 * λ_max` are clipped to zero.
    pub fn new(factors: &LayerFactors, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::Config(format!("damping must be non-negative, got {gamma}")));
        }
        let mut eig_a = linalg::sym_eigen(&factors.factor_a())?;
        let mut eig_g = linalg::sym_eigen(&factors.factor_g())?;
        clip(&mut eig_a.lambda);
        clip(&mut eig_g.lambda);
        let smallest = eig_a.lambda[eig_a.lambda.len() - 1] * eig_g.lambda[eig_g.lambda.len() - 1] + gamma;
        if smallest <= 0.0 {
            return Err(Error::Singular(format!(
                "undamped block has zero eigenvalue (denominator {smallest:e})"
            )));
        }
        Ok(DirectInverse { eig_a, eig_g, gamma })
    }

    pub fn dim(&self) -> usize {
        self.eig_a.lambda.len() * self.eig_g.lambda.len()
    }

    /// `Q_G [(Q_Gᵀ mat(b) Q_A) ⊘ (λ_G λ_Aᵀ + γ)] Q_Aᵀ`, column-stacked.
    pub fn apply(&self, b: &Vector) -> Result<Vector> {
        let (n_a, n_g) = (self.eig_a.lambda.len(), self.eig_g.lambda.len());
        if b.len() != n_a * n_g {
            return Err(Error::dims("direct_inverse_apply", n_a * n_g, b.len()));
        }
        let (qa, qg) = (&self.eig_a.q, &self.eig_g.q);
        let bm = linalg::vec_to_mat(b, n_g, n_a)?;
        let mut c = qg.t_matmul(&bm)?.matmul(qa)?;
        for j in 0..n_a {
            for i in 0..n_g {
                let denom = self.eig_g.lambda[i] * self.eig_a.lambda[j] + self.gamma;
                if denom <= 0.0 {
                    return Err(Error::Singular(format!("zero denominator at ({i}, {j})")));
                }
                c[(i, j)] /= denom;
            }
        }
        add_flops(n_a * n_g);
        let x = qg.matmul(&c)?.matmul_t(qa)?;
        if !x.is_finite() {
            return Err(Error::Divergence("direct inverse"));
        }
        Ok(linalg::mat_to_vec(&x))
    }
}

fn clip(lambda: &mut Vector) {
    let max = lambda[0];
    for x in lambda.as_mut_slice() {
        if *x < EIGEN_CLIP * max || *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// `(Â⁻¹, Ĝ⁻¹)` for full-rank factors; the undamped inverse is their
/// Kronecker product.
pub fn undamped_kron_inverse(factors: &LayerFactors) -> Result<(Matrix, Matrix)> {
    Ok((spd_inverse(&factors.factor_a())?, spd_inverse(&factors.factor_g())?))
}

fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    let e = linalg::sym_eigen(m)?;
    let n = e.lambda.len();
    let (max, min) = (e.lambda[0], e.lambda[n - 1]);
    if max <= 0.0 || min <= FULL_RANK_RATIO * max {
        let ratio = if max > 0.0 { min / max } else { 0.0 };
        return Err(Error::RankDeficient { ratio });
    }
    Ok(Matrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| e.q[(i, k)] * e.q[(j, k)] / e.lambda[k]).sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron, matvec, solve_dense};
    use crate::rng::{Rng, Stream};
    use crate::telemetry::Scope;
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

    fn rank_one() -> LayerFactors {
        LayerFactors::new(
            Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap(),
            Matrix::from_rows(&[&[1.0]]).unwrap(),
        )
        .unwrap()
    }

    /// `(1/B) Σ_j x_j x_jᵀ` by explicit accumulation.
    fn summed_outer(root: &Matrix) -> Matrix {
        let (n, b) = root.shape();
        let mut out = Matrix::zeros(n, n);
        for s in 0..b {
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += root[(i, s)] * root[(j, s)];
                }
            }
        }
        out.scaled(1.0 / b as f64)
    }

    #[test]
    fn rank_one_factors() {
        let f = rank_one();
        assert_eq!(f.factor_a(), Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap());
        assert_eq!(f.factor_g(), Matrix::from_rows(&[&[1.0]]).unwrap());
    }

    #[test]
    fn zero_activations_give_zero_factor() {
        let f = LayerFactors::new(Matrix::zeros(3, 2), Matrix::from_rows(&[&[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(f.factor_a().max_abs(), 0.0);
    }

    #[test]
    fn root_form_matches_summation() {
        let f = random_factors(5, 4, 3, 1);
        let da = f.factor_a().sub(&summed_outer(f.a_root())).unwrap().max_abs();
        let dg = f.factor_g().sub(&summed_outer(f.g_root())).unwrap().max_abs();
        assert!(da <= 1e-13 && dg <= 1e-13);
    }

    #[test]
    fn build_factors_from_capture() {
        let net = crate::net::NetworkState::mlp(&[3, 4, 2], crate::net::Activation::Tanh, true, 1).unwrap();
        let x = Matrix::from_fn(3, 2, |i, j| (i + j) as f64 * 0.3);
        let pass = crate::net::forward(&net, &x).unwrap();
        let cap = crate::net::backward(&net, &pass, &crate::net::Targets::Labels(vec![0, 1]), crate::net::LossKind::CrossEntropy).unwrap();
        let f = build_factors(&cap, 1).unwrap();
        assert_eq!((f.n_a(), f.n_g(), f.batch_size()), (5, 2, 2));
        assert!(build_factors(&cap, 2).is_err());
    }

    #[test]
    fn fv_hand_example() {
        let block = DampedBlock::new(rank_one(), 0.5).unwrap();
        let v = Vector::from_vec(vec![1.0, 0.0]).unwrap();
        assert_eq!(block.fv(&v).unwrap().as_slice(), &[1.5, 0.0]);
        let dense = block.dense_block().unwrap();
        assert_eq!(dense, Matrix::from_rows(&[&[1.5, 0.0], &[0.0, 0.5]]).unwrap());
    }

    #[test]
    fn fv_zero_and_pure_damping() {
        let block = DampedBlock::new(random_factors(3, 2, 2, 2), 0.1).unwrap();
        assert!(block.fv(&Vector::zeros(6)).unwrap().is_zero());
        let zero = LayerFactors::new(Matrix::zeros(3, 2), Matrix::zeros(2, 2)).unwrap();
        let v = random_vec(6, 3);
        let id = DampedBlock::new(zero, 1.0).unwrap();
        assert_eq!(id.fv(&v).unwrap(), v);
        assert_eq!(id.dense_block().unwrap(), Matrix::identity(6));
    }

    #[test]
    fn fv_rejects_bad_input() {
        let block = DampedBlock::new(random_factors(3, 2, 2, 2), 0.1).unwrap();
        assert!(matches!(block.fv(&Vector::zeros(5)), Err(Error::DimensionMismatch { .. })));
        let mut v = Vector::zeros(6);
        v[2] = f64::INFINITY;
        assert!(matches!(block.fv(&v), Err(Error::NonFinite(_))));
        assert!(DampedBlock::new(random_factors(3, 2, 2, 2), 0.0).is_err());
    }

    #[test]
    fn dense_block_is_symmetric_and_gated() {
        let block = DampedBlock::new(random_factors(4, 3, 2, 4), 2.0).unwrap();
        let d = block.dense_block().unwrap();
        assert_eq!(d, d.transpose());
        let zero = LayerFactors::new(Matrix::zeros(3, 1), Matrix::zeros(3, 1)).unwrap();
        let d = DampedBlock::new(zero, 2.0).unwrap().dense_block().unwrap();
        assert_eq!(d, Matrix::identity(9).scaled(2.0));
        let big = DampedBlock::new(random_factors(33, 32, 1, 5), 1.0).unwrap();
        assert!(matches!(big.dense_block(), Err(Error::SizeGate { .. })));
    }

    #[test]
    fn block_diag_assembly() {
        let b1 = DampedBlock::new(random_factors(2, 1, 2, 6), 0.3).unwrap();
        let b2 = DampedBlock::new(random_factors(3, 1, 2, 7), 0.2).unwrap();
        assert_eq!(block_diag_fim(std::slice::from_ref(&b1)).unwrap(), b1.dense_block().unwrap());
        let f = block_diag_fim(&[b1.clone(), b2.clone()]).unwrap();
        assert_eq!(f.shape(), (5, 5));
        for i in 0..2 {
            for j in 2..5 {
                assert_eq!(f[(i, j)], 0.0);
                assert_eq!(f[(j, i)], 0.0);
            }
        }
        let v = random_vec(5, 8);
        let got = matvec(&f, &v).unwrap();
        let top = b1.fv(&Vector::from_slice(&v.as_slice()[..2])).unwrap();
        let bottom = b2.fv(&Vector::from_slice(&v.as_slice()[2..])).unwrap();
        let want: Vec<f64> = top.as_slice().iter().chain(bottom.as_slice()).copied().collect();
        for (x, y) in got.as_slice().iter().zip(&want) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn direct_inverse_identity_factors() {
        // With B = 3: a = √3 I₃ gives Â = I₃, g = √3 [I₂ | 0] gives Ĝ = I₂.
        let r3 = 3f64.sqrt();
        let a = Matrix::identity(3).scaled(r3);
        let g = Matrix::from_fn(2, 3, |i, j| if i == j { r3 } else { 0.0 });
        let inv = DirectInverse::new(&LayerFactors::new(a, g).unwrap(), 0.0).unwrap();
        let b = random_vec(6, 9);
        assert!(rel_err(&inv.apply(&b).unwrap(), &b) <= 1e-12);
    }

    #[test]
    fn direct_inverse_matches_dense_solve() {
        let f = random_factors(3, 2, 6, 10);
        let inv = DirectInverse::new(&f, 0.0).unwrap();
        let b = random_vec(6, 11);
        let want = solve_dense(&dense_kron_factors(&f).unwrap(), &b).unwrap();
        assert!(rel_err(&inv.apply(&b).unwrap(), &want) <= 1e-9);
    }

    #[test]
    fn direct_inverse_damping_limit() {
        let f = LayerFactors::new(random_factors(3, 2, 2, 12).a_root().scaled(1e-3), random_factors(3, 2, 2, 13).g_root().scaled(1e-3)).unwrap();
        let inv = DirectInverse::new(&f, 1e6).unwrap();
        let b = random_vec(6, 14);
        assert!(rel_err(&inv.apply(&b).unwrap(), &b.scaled(1e-6)) <= 1e-6);
    }

    #[test]
    fn direct_inverse_singular_undamped() {
        let r = DirectInverse::new(&rank_one(), 0.0);
        assert!(matches!(r, Err(Error::Singular(_))));
        assert!(DirectInverse::new(&rank_one(), 1e-3).is_ok());
    }

    #[test]
    fn undamped_inverse_scalar_factors() {
        // a aᵀ / 2 = 2I with a = 2I; g gᵀ / 2 = 4I with g = 2√2 I.
        let f = LayerFactors::new(Matrix::identity(2).scaled(2.0), Matrix::identity(2).scaled(8f64.sqrt())).unwrap();
        let (ai, gi) = undamped_kron_inverse(&f).unwrap();
        assert!(ai.sub(&Matrix::identity(2).scaled(0.5)).unwrap().max_abs() < 1e-15);
        assert!(gi.sub(&Matrix::identity(2).scaled(0.25)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn undamped_inverse_inverts_kron() {
        let f = random_factors(3, 2, 8, 15);
        let (ai, gi) = undamped_kron_inverse(&f).unwrap();
        let prod = kron(&ai, &gi).unwrap().matmul(&dense_kron_factors(&f).unwrap()).unwrap();
        assert!(prod.sub(&Matrix::identity(6)).unwrap().max_abs() <= 1e-9);
    }

    #[test]
    fn undamped_inverse_rejects_rank_one() {
        assert!(matches!(undamped_kron_inverse(&rank_one()), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn fv_allocates_no_square_factor() {
        let (n_a, n_g, b) = (24, 20, 3);
        let mut rng = Rng::new(16, Stream::Data);
        let a = Matrix::from_fn(n_a, b, |_, _| rng.normal());
        let g = Matrix::from_fn(n_g, b, |_, _| rng.normal());
        let v = random_vec(n_a * n_g, 17);
        let scope = Scope::begin();
        let block = DampedBlock::new(LayerFactors::new(a, g).unwrap(), 0.1).unwrap();
        block.fv(&v).unwrap();
        let c = scope.finish();
        assert!(!c.has_square(n_a) && !c.has_square(n_g));
        assert!(c.largest_allocation() <= n_a * n_g);
        assert_eq!(c.allocations_by_size().get(&(n_a * n_g)), Some(&1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn fv_matches_dense_oracle(seed in any::<u64>(), n_a in 1usize..=8, n_g in 1usize..=8,
                                   b in 1usize..=8, gi in 0usize..3) {
            let gamma = [1e-3, 1e-1, 1.0][gi];
            let block = DampedBlock::new(random_factors(n_a, n_g, b, seed), gamma).unwrap();
            let dense = block.dense_block().unwrap();
            for k in 0..4 {
                let v = random_vec(n_a * n_g, seed ^ k);
                let want = matvec(&dense, &v).unwrap();
                prop_assert!(rel_err(&block.fv(&v).unwrap(), &want) <= 1e-11);
            }
        }

        #[test]
        fn fv_linear_symmetric_positive(seed in any::<u64>(), n_a in 1usize..=6, n_g in 1usize..=6,
                                        b in 1usize..=5, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let gamma = 1e-2;
            let block = DampedBlock::new(random_factors(n_a, n_g, b, seed), gamma).unwrap();
            let n = n_a * n_g;
            let u = random_vec(n, seed ^ 1);
            let v = random_vec(n, seed ^ 2);
            let (fu, fv) = (block.fv(&u).unwrap(), block.fv(&v).unwrap());
            let combo = Vector::from_fn(n, |i| alpha * u[i] + beta * v[i]);
            let lhs = block.fv(&combo).unwrap();
            let rhs = Vector::from_fn(n, |i| alpha * fu[i] + beta * fv[i]);
            prop_assert!(lhs.sub(&rhs).norm() <= 1e-11 * rhs.norm().max(1.0));
            let (ufv, vfu) = (u.dot(&fv), v.dot(&fu));
            prop_assert!((ufv - vfu).abs() <= 1e-11 * ufv.abs().max(1.0));
            prop_assert!(v.dot(&fv) >= gamma * v.norm_sq() - 1e-12);
        }

        #[test]
        fn direct_inverse_undoes_fv(seed in any::<u64>(), n_a in 1usize..=6, n_g in 1usize..=6,
                                    b in 1usize..=5, gi in 0usize..3) {
            let gamma = [1e-3, 1e-1, 1.0][gi];
            let f = random_factors(n_a, n_g, b, seed);
            let block = DampedBlock::new(f.clone(), gamma).unwrap();
            let inv = DirectInverse::new(&f, gamma).unwrap();
            let v = random_vec(n_a * n_g, seed ^ 3);
            let back = inv.apply(&block.fv(&v).unwrap()).unwrap();
            prop_assert!(rel_err(&back, &v) <= 1e-8);
        }
    }
}
