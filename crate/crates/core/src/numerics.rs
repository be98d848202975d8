//! Dense linear algebra helpers, SPD ensemble sampling, extreme eigenvalues,
//! central finite-difference oracles and the seeded generator used everywhere.
//!
//! Vectors and matrices are `nalgebra` dense types. Matrices are used for
//! curvature objects (task curvature, Hessians, `I - αA`), so most routines
//! assume square inputs.
//!
//! # Random streams
//!
//! [`Rng`] is xoshiro256** (Blackman & Vigna) seeded through SplitMix64, as
//! implemented by `rand_xoshiro`. Uniform reals use the 53-bit multiply
//! conversion of `rand`, Gaussians use the ziggurat sampler of `rand_distr`.
//! Child streams never depend on how much the parent has been drawn:
//!
//! ```text
//! child_seed(seed, i) = mix64(seed ^ mix64(i + 0x9E3779B97F4A7C15))
//! ```
//!
//! where `mix64` is the SplitMix64 output finalizer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Symmetry tolerance for matrices handed to [`eig_extremes`].
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Default central-difference step for gradients.
pub const GRAD_EPS: f64 = 1e-5;
/// Default central-difference step for Hessian-vector products.
pub const HVP_EPS: f64 = 1e-4;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child stream of `seed`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(GOLDEN_GAMMA)))
}

/// Seeded, single-owner random stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this stream's seed (not its state).
    pub fn child(&self, index: u64) -> Rng {
        Rng::new(child_seed(self.seed, index))
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` when the interval is degenerate.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.random();
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_vector(&mut self, d: usize) -> Vector {
        Vector::from_fn(d, |_, _| self.normal())
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn ensure_finite(v: &Vector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("{what} has non-finite entries")))
    }
}

pub fn ensure_same_dim(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::param(format!("{what}: dimension {a} does not match {b}")))
    }
}

/// Largest absolute asymmetry `max |A_ij - A_ji|`.
pub fn asymmetry(a: &Matrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Random symmetric matrix with spectrum inside `[mu, beta]`.
///
/// Built as `Q D Qᵀ` with `Q` the orthogonal factor of a Gaussian matrix
/// (sign-corrected so it is Haar distributed) and `D` diagonal with entries
/// uniform in `[mu, beta]`. For `d >= 2` the first two diagonal entries are
/// pinned to `mu` and `beta` so both bounds are attained.
pub fn spd_sample(d: usize, mu: f64, beta: f64, rng: &mut Rng) -> Result<Matrix> {
    if d == 0 {
        return Err(Error::param("spd_sample: dimension must be at least 1"));
    }
    if !(mu > 0.0) || !(mu <= beta) || !beta.is_finite() {
        return Err(Error::param(format!(
            "spd_sample: need 0 < mu <= beta, got mu={mu}, beta={beta}"
        )));
    }
    let mut diag: Vec<f64> = (0..d).map(|_| rng.uniform(mu, beta)).collect();
    if d >= 2 {
        diag[0] = mu;
        diag[1] = beta;
    } else if mu == beta {
        diag[0] = mu;
    }
    let gauss = Matrix::from_fn(d, d, |_, _| rng.normal());
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let dm = Matrix::from_diagonal(&Vector::from_vec(diag));
    let a = &q * dm * q.transpose();
    Ok(symmetrize(&a))
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes(a: &Matrix) -> Result<(f64, f64)> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::Contract(format!(
            "eig_extremes: expected a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax().max(1.0);
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Contract(format!(
            "eig_extremes: matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = symmetrize(a).symmetric_eigenvalues();
    if eig.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("eig_extremes: non-finite eigenvalue"));
    }
    Ok((eig.min(), eig.max()))
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(f: F, w: &Vector, eps: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::param("finite_diff_grad: eps must be positive"));
    }
    let mut probe = w.clone();
    let mut out = Vector::zeros(w.len());
    for i in 0..w.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!(
                "finite_diff_grad: non-finite evaluation along coordinate {i}"
            )));
        }
        out[i] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

/// Hessian-vector product by central differences of a gradient map along the
/// normalized direction, rescaled by `‖v‖`.
pub fn finite_diff_hvp<G>(g: G, w: &Vector, v: &Vector, eps: f64) -> Result<Vector>
where
    G: Fn(&Vector) -> Vector,
{
    if !(eps > 0.0) {
        return Err(Error::param("finite_diff_hvp: eps must be positive"));
    }
    ensure_same_dim(w.len(), v.len(), "finite_diff_hvp")?;
    let norm = v.norm();
    if !(norm > 0.0) {
        return Err(Error::param("finite_diff_hvp: zero direction"));
    }
    let step = v * (eps / norm);
    let up = g(&(w + &step));
    let down = g(&(w - &step));
    let out = (up - down) * (norm / (2.0 * eps));
    ensure_finite(&out, "finite_diff_hvp")?;
    Ok(out)
}

/// Solve `A x = rhs` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, rhs: &Vector) -> Result<Vector> {
    ensure_same_dim(a.nrows(), rhs.len(), "solve_spd")?;
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| Error::numeric("solve_spd: matrix is not positive definite"))?;
    let x = chol.solve(rhs);
    ensure_finite(&x, "solve_spd solution")?;
    Ok(x)
}

/// `‖a - b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &Vector, b: &Vector, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}
