//! Correlation objective between two views and the linear CCA fitted on top
//! of the trained encoders.
//!
//! Views are `n × d` matrices with one sample per row. Covariances are
//! computed on column-centered data with a `1/(n−1)` factor, and `r_reg·I`
//! is added to both auto-covariances.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_R_REG: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    X,
    Y,
}

fn check_views(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "views have {} and {} rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Shape(format!("need at least 2 samples, got {}", x.nrows())));
    }
    if x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::Shape("view with zero columns".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("view data".into()));
    }
    Ok(())
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn center(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mean = column_means(m);
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (c, mean)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceStats {
    pub cxx: DMatrix<f64>,
    pub cyy: DMatrix<f64>,
    pub cxy: DMatrix<f64>,
    pub r_reg: f64,
    pub n: usize,
}

impl CovarianceStats {
    pub fn compute(x: &DMatrix<f64>, y: &DMatrix<f64>, r_reg: f64) -> Result<Self> {
        check_views(x, y)?;
        let (hx, _) = center(x);
        let (hy, _) = center(y);
        Ok(Self::from_centered(&hx, &hy, r_reg))
    }

    fn from_centered(hx: &DMatrix<f64>, hy: &DMatrix<f64>, r_reg: f64) -> Self {
        let n = hx.nrows();
        let s = 1.0 / (n as f64 - 1.0);
        let mut cxx = hx.tr_mul(hx) * s;
        let mut cyy = hy.tr_mul(hy) * s;
        symmetrize(&mut cxx);
        symmetrize(&mut cyy);
        for i in 0..cxx.nrows() {
            cxx[(i, i)] += r_reg;
        }
        for i in 0..cyy.nrows() {
            cyy[(i, i)] += r_reg;
        }
        CovarianceStats {
            cxx,
            cyy,
            cxy: hx.tr_mul(hy) * s,
            r_reg,
            n,
        }
    }
}

/// Eigendecomposition of a symmetric positive definite matrix.
struct SpdEigen {
    q: DMatrix<f64>,
    lambda: DVector<f64>,
}

impl SpdEigen {
    fn new(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape(format!("{}×{} matrix is not square", m.nrows(), m.ncols())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix".into()));
        }
        let mut sym = m.clone();
        symmetrize(&mut sym);
        let eig = SymmetricEigen::new(sym);
        let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let min = eig.eigenvalues.min();
        let tol = f64::EPSILON * max * m.nrows() as f64;
        if !(min > tol) {
            return Err(Error::NotPositiveDefinite(min));
        }
        Ok(SpdEigen {
            q: eig.eigenvectors,
            lambda: eig.eigenvalues,
        })
    }

    fn inv_sqrt(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.lambda.map(|l| 1.0 / l.sqrt()));
        let mut r = &self.q * d * self.q.transpose();
        symmetrize(&mut r);
        r
    }

    /// Pulls a gradient `g` with respect to `M^{−1/2}` back to `M`.
    fn inv_sqrt_pullback(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.lambda.map(f64::sqrt);
        let mut inner = self.q.transpose() * g * &self.q;
        for i in 0..inner.nrows() {
            for j in 0..inner.ncols() {
                inner[(i, j)] *= -1.0 / (s[i] * s[j] * (s[i] + s[j]));
            }
        }
        &self.q * inner * self.q.transpose()
    }
}

/// `M^{−1/2}` of a symmetric positive definite matrix.
pub fn inv_sqrt_sym(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(SpdEigen::new(m)?.inv_sqrt())
}

/// The whitened cross-covariance `C_XX^{−1/2} C_XY C_YY^{−1/2}`.
pub fn whitened_cross(stats: &CovarianceStats) -> Result<DMatrix<f64>> {
    let s = inv_sqrt_sym(&stats.cxx)?;
    let r = inv_sqrt_sym(&stats.cyy)?;
    Ok(s * &stats.cxy * r)
}

/// Negative Frobenius norm of the whitened cross-covariance.
pub fn dcca_loss(x: &DMatrix<f64>, y: &DMatrix<f64>, r_reg: f64) -> Result<f64> {
    let stats = CovarianceStats::compute(x, y, r_reg)?;
    Ok(-whitened_cross(&stats)?.norm())
}

pub fn dcca_gradient(x: &DMatrix<f64>, y: &DMatrix<f64>, r_reg: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (_, gx, gy) = dcca_loss_and_gradient(x, y, r_reg)?;
    Ok((gx, gy))
}

/// Loss together with its exact gradient with respect to both views,
/// including the centering and covariance normalization.
pub fn dcca_loss_and_gradient(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    r_reg: f64,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    check_views(x, y)?;
    let (hx, _) = center(x);
    let (hy, _) = center(y);
    let stats = CovarianceStats::from_centered(&hx, &hy, r_reg);
    let ex = SpdEigen::new(&stats.cxx)?;
    let ey = SpdEigen::new(&stats.cyy)?;
    let s = ex.inv_sqrt();
    let r = ey.inv_sqrt();
    let c = &stats.cxy;
    let t = &s * c * &r;
    let f = t.norm_squared();
    let loss = -f.sqrt();
    if f == 0.0 {
        return Ok((loss, DMatrix::zeros(x.nrows(), x.ncols()), DMatrix::zeros(y.nrows(), y.ncols())));
    }

    // Gradients of f = ‖S C R‖² with respect to S, C and R.
    let g_s = (&t * &r * c.transpose()) * 2.0;
    let g_c = (&s * &t * &r) * 2.0;
    let g_r = (c.transpose() * &s * &t) * 2.0;
    let g_a = ex.inv_sqrt_pullback(&g_s);
    let g_b = ey.inv_sqrt_pullback(&g_r);

    let k = 1.0 / (stats.n as f64 - 1.0);
    let mut dhx = (&hx * (&g_a + g_a.transpose()) + &hy * g_c.transpose()) * k;
    let mut dhy = (&hy * (&g_b + g_b.transpose()) + &hx * &g_c) * k;
    let scale = -0.5 / f.sqrt();
    for d in [&mut dhx, &mut dhy] {
        let (mut centered, _) = center(d);
        centered *= scale;
        *d = centered;
    }
    Ok((loss, dhx, dhy))
}

/// Linear CCA between two views.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel {
    /// `d_x × k`
    pub w_x: DMatrix<f64>,
    /// `d_y × k`
    pub w_y: DMatrix<f64>,
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub corrs: Vec<f64>,
    pub k: usize,
    pub r_reg: f64,
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let eig = m.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = max * m.nrows() as f64 * 1e-12;
    eig.iter().filter(|&&l| l > tol).count()
}

pub fn fit_linear_cca(x: &DMatrix<f64>, y: &DMatrix<f64>, k: usize, r_reg: f64) -> Result<CcaModel> {
    check_views(x, y)?;
    let limit = x.ncols().min(y.ncols());
    if k == 0 || k > limit {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={limit}"
        )));
    }
    if x.nrows() <= k {
        return Err(Error::InvalidArgument(format!(
            "{} samples are too few for {k} components",
            x.nrows()
        )));
    }
    let (hx, mean_x) = center(x);
    let (hy, mean_y) = center(y);
    let raw = CovarianceStats::from_centered(&hx, &hy, 0.0);
    let rank = numerical_rank(&raw.cxx).min(numerical_rank(&raw.cyy));
    let k = if rank < k {
        warn!("views have rank {rank}; reducing CCA components from {k} to {rank}");
        rank.max(1)
    } else {
        k
    };

    let stats = CovarianceStats::from_centered(&hx, &hy, r_reg);
    let s = inv_sqrt_sym(&stats.cxx)?;
    let r = inv_sqrt_sym(&stats.cyy)?;
    let t = &s * &stats.cxy * &r;
    let svd = t.svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v = svd.v_t.expect("right singular vectors requested").transpose();
    let mut u_k = u.columns(0, k).into_owned();
    let mut v_k = v.columns(0, k).into_owned();
    // Fix the sign of each pair so results do not depend on SVD internals.
    for j in 0..k {
        let col = u_k.column(j);
        let pivot = col.iter().fold(0.0f64, |a, &b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            u_k.column_mut(j).neg_mut();
            v_k.column_mut(j).neg_mut();
        }
    }
    Ok(CcaModel {
        w_x: s * u_k,
        w_y: r * v_k,
        mean_x,
        mean_y,
        corrs: svd.singular_values.iter().take(k).copied().collect(),
        k,
        r_reg,
    })
}

impl CcaModel {
    /// Unfitted projection with Gaussian weights, used as a chance-level
    /// reference embedding.
    pub fn random(d_x: usize, d_y: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            DMatrix::from_fn(rows, k, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        let w_x = draw(d_x);
        let w_y = draw(d_y);
        CcaModel {
            w_x,
            w_y,
            mean_x: DVector::zeros(d_x),
            mean_y: DVector::zeros(d_y),
            corrs: vec![0.0; k],
            k,
            r_reg: 0.0,
        }
    }

    pub fn dim(&self, which: View) -> usize {
        match which {
            View::X => self.w_x.nrows(),
            View::Y => self.w_y.nrows(),
        }
    }

    /// `(Z − mean)·W` for the chosen view.
    pub fn project(&self, z: &DMatrix<f64>, which: View) -> Result<DMatrix<f64>> {
        let (w, mean) = match which {
            View::X => (&self.w_x, &self.mean_x),
            View::Y => (&self.w_y, &self.mean_y),
        };
        if z.ncols() != w.nrows() {
            return Err(Error::Shape(format!(
                "view {which:?} expects {} columns, got {}",
                w.nrows(),
                z.ncols()
            )));
        }
        let mut c = z.clone();
        for (j, mut col) in c.column_iter_mut().enumerate() {
            col.add_scalar_mut(-mean[j]);
        }
        Ok(c * w)
    }
}
