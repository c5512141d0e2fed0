//! Linear-Gaussian kernels and the Kalman filter.
//!
//! A [`GaussMorphism`] `x ↦ N(Mx + c, Σ)` is a morphism `ℝⁿ → ℝᵐ` of the
//! Gaussian category; states are morphisms out of `ℝ⁰`. The dynamical model
//! `κ: H → H⊕O` is blocked with the hidden coordinates first.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative tolerance for symmetry of stored covariances.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Negative eigenvalues down to `-PSD_TOL · scale` are clipped to zero.
pub const PSD_TOL: f64 = 1e-10;
/// Default relative cutoff for singular values in [`pinv`].
pub const PINV_RTOL: f64 = 1e-12;
/// Default relative tolerance of [`verify_filter_equation`].
pub const EQUATION_TOL: f64 = 1e-9;

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

fn shape_err(context: &'static str, expected: String, found: String) -> Error {
    Error::ShapeMismatch {
        context,
        expected,
        found,
    }
}

fn dims(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

/// Symmetrise and clip small negative eigenvalues. Violations beyond
/// `PSD_TOL · max(λ_max, scale)` are errors.
pub fn repair_psd(m: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(shape_err("covariance", "square".into(), dims(m)));
    }
    let sym = (m + m.transpose()) * 0.5;
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if lmin >= 0.0 {
        return Ok(sym);
    }
    let scale = lmax.max(scale).max(0.0);
    if lmin < -PSD_TOL * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: lmin,
            scale,
        });
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

fn checked_cov(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = max_abs(&cov);
    let asym = max_abs(&(&cov - cov.transpose()));
    if asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) && asym > 0.0 {
        return Err(Error::NotSymmetric(asym));
    }
    repair_psd(&cov, scale)
}

/// Moore–Penrose pseudoinverse by SVD, zeroing singular values below
/// `rel_tol · σ_max`.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let mut out = DMatrix::zeros(c, r);
    if smax == 0.0 {
        return out;
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > rel_tol * smax {
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Gaussian> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(shape_err(
                "gaussian covariance",
                format!("{0}x{0}", mean.len()),
                dims(&cov),
            ));
        }
        Ok(Gaussian {
            mean,
            cov: checked_cov(cov)?,
        })
    }

    pub fn standard(n: usize) -> Gaussian {
        Gaussian {
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// The Gaussian as a morphism out of `ℝ⁰`.
    pub fn as_state(&self) -> GaussMorphism {
        GaussMorphism {
            matrix: DMatrix::zeros(self.dim(), 0),
            offset: self.mean.clone(),
            noise: self.cov.clone(),
        }
    }

    /// Marginal on the coordinates `start..start+len`.
    pub fn block(&self, start: usize, len: usize) -> Gaussian {
        Gaussian {
            mean: self.mean.rows(start, len).into_owned(),
            cov: self.cov.view((start, start), (len, len)).into_owned(),
        }
    }
}

/// `x ↦ N(Mx + c, Σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussMorphism {
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
    noise: DMatrix<f64>,
}

impl GaussMorphism {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let out = matrix.nrows();
        if offset.len() != out {
            return Err(shape_err("offset", format!("{out}"), format!("{}", offset.len())));
        }
        if noise.nrows() != out || noise.ncols() != out {
            return Err(shape_err("noise covariance", format!("{out}x{out}"), dims(&noise)));
        }
        Ok(GaussMorphism {
            matrix,
            offset,
            noise: checked_cov(noise)?,
        })
    }

    pub fn linear(matrix: DMatrix<f64>) -> GaussMorphism {
        let out = matrix.nrows();
        GaussMorphism {
            matrix,
            offset: DVector::zeros(out),
            noise: DMatrix::zeros(out, out),
        }
    }

    pub fn identity(n: usize) -> GaussMorphism {
        GaussMorphism::linear(DMatrix::identity(n, n))
    }

    /// `x ↦ (x, x)` with zero noise.
    pub fn copy(n: usize) -> GaussMorphism {
        let mut m = DMatrix::zeros(2 * n, n);
        for k in 0..n {
            m[(k, k)] = 1.0;
            m[(n + k, k)] = 1.0;
        }
        GaussMorphism::linear(m)
    }

    pub fn discard(n: usize) -> GaussMorphism {
        GaussMorphism::linear(DMatrix::zeros(0, n))
    }

    /// Keep `len` coordinates starting at `start` out of `n`.
    pub fn projection(n: usize, start: usize, len: usize) -> GaussMorphism {
        let mut m = DMatrix::zeros(len, n);
        for k in 0..len {
            m[(k, start + k)] = 1.0;
        }
        GaussMorphism::linear(m)
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    /// `self` followed by `g`.
    pub fn compose(&self, g: &GaussMorphism) -> Result<GaussMorphism> {
        if self.out_dim() != g.in_dim() {
            return Err(shape_err(
                "compose",
                format!("{}", self.out_dim()),
                format!("{}", g.in_dim()),
            ));
        }
        let matrix = &g.matrix * &self.matrix;
        let offset = &g.matrix * &self.offset + &g.offset;
        let noise = &g.matrix * &self.noise * g.matrix.transpose() + &g.noise;
        Ok(GaussMorphism {
            matrix,
            offset,
            noise: (&noise + noise.transpose()) * 0.5,
        })
    }

    /// Block-diagonal product, `self` on the first coordinates.
    pub fn tensor(&self, g: &GaussMorphism) -> GaussMorphism {
        let (r1, c1) = self.matrix.shape();
        let (r2, c2) = g.matrix.shape();
        let mut matrix = DMatrix::zeros(r1 + r2, c1 + c2);
        matrix.view_mut((0, 0), (r1, c1)).copy_from(&self.matrix);
        matrix.view_mut((r1, c1), (r2, c2)).copy_from(&g.matrix);
        let mut offset = DVector::zeros(r1 + r2);
        offset.rows_mut(0, r1).copy_from(&self.offset);
        offset.rows_mut(r1, r2).copy_from(&g.offset);
        let mut noise = DMatrix::zeros(r1 + r2, r1 + r2);
        noise.view_mut((0, 0), (r1, r1)).copy_from(&self.noise);
        noise.view_mut((r1, r1), (r2, r2)).copy_from(&g.noise);
        GaussMorphism {
            matrix,
            offset,
            noise,
        }
    }

    pub fn pushforward(&self, g: &Gaussian) -> Result<Gaussian> {
        let s = g.as_state().compose(self)?;
        Gaussian::new(s.offset, s.noise)
    }

    /// Largest entrywise difference of `(M, c, Σ)`, relative to
    /// `max(1, largest entry)`.
    pub fn deviation(&self, other: &GaussMorphism) -> f64 {
        if self.matrix.shape() != other.matrix.shape() {
            return f64::INFINITY;
        }
        let scale = [
            max_abs(&self.matrix),
            max_abs(&other.matrix),
            self.offset.amax(),
            other.offset.amax(),
            max_abs(&self.noise),
            max_abs(&other.noise),
        ]
        .into_iter()
        .fold(1.0, f64::max);
        let d = max_abs(&(&self.matrix - &other.matrix))
            .max((&self.offset - &other.offset).amax())
            .max(max_abs(&(&self.noise - &other.noise)));
        d / scale
    }
}

/// Belief `(h̄, Σ_p)` of the Kalman filter.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState {
    hbar: DVector<f64>,
    sigma_p: DMatrix<f64>,
}

impl KalmanState {
    pub fn new(hbar: DVector<f64>, sigma_p: DMatrix<f64>) -> Result<KalmanState> {
        let g = Gaussian::new(hbar, sigma_p)?;
        Ok(KalmanState {
            hbar: g.mean,
            sigma_p: g.cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.hbar.len()
    }

    pub fn hbar(&self) -> &DVector<f64> {
        &self.hbar
    }

    pub fn sigma_p(&self) -> &DMatrix<f64> {
        &self.sigma_p
    }
}

/// Interpretation of a filter state as a Gaussian over `H`.
pub fn psi(state: &KalmanState) -> Gaussian {
    Gaussian {
        mean: state.hbar.clone(),
        cov: state.sigma_p.clone(),
    }
}

fn check_model(k: &GaussMorphism, n: usize) -> Result<usize> {
    if k.in_dim() != n || k.out_dim() < n {
        return Err(shape_err(
            "kalman model",
            format!("(n+m)x{n}"),
            dims(&k.matrix),
        ));
    }
    Ok(k.out_dim() - n)
}

/// Joint of next hidden state and output: `N(A h̄ + c, A Σ_p Aᵀ + Σ)`.
pub fn predict(k: &GaussMorphism, state: &KalmanState) -> Result<Gaussian> {
    check_model(k, state.dim())?;
    k.pushforward(&psi(state))
}

/// Condition a joint over `H ⊕ O` on the last `o.len()` coordinates.
pub fn condition(joint: &Gaussian, o: &DVector<f64>) -> Result<Gaussian> {
    let m = o.len();
    if m > joint.dim() {
        return Err(shape_err(
            "observation",
            format!("at most {}", joint.dim()),
            format!("{m}"),
        ));
    }
    let n = joint.dim() - m;
    let s = &joint.cov;
    let s_hh = s.view((0, 0), (n, n));
    let s_ho = s.view((0, n), (n, m));
    let s_oo = s.view((n, n), (m, m)).into_owned();
    let gain = s_ho * pinv(&s_oo, PINV_RTOL);
    let innovation = o - joint.mean.rows(n, m);
    let mean = joint.mean.rows(0, n) + &gain * innovation;
    let cov = s_hh - &gain * s_ho.transpose();
    Ok(Gaussian {
        mean,
        cov: repair_psd(&cov, max_abs(s))?,
    })
}

/// Predict then condition.
pub fn kalman_step(k: &GaussMorphism, state: &KalmanState, o: &DVector<f64>) -> Result<KalmanState> {
    let m = check_model(k, state.dim())?;
    if o.len() != m {
        return Err(shape_err("observation", format!("{m}"), format!("{}", o.len())));
    }
    let post = condition(&predict(k, state)?, o)?;
    Ok(KalmanState {
        hbar: post.mean,
        sigma_p: post.cov,
    })
}

pub fn kalman_filter(
    k: &GaussMorphism,
    state: &KalmanState,
    observations: &[DVector<f64>],
) -> Result<Vec<KalmanState>> {
    let mut out = Vec::with_capacity(observations.len());
    let mut s = state.clone();
    for o in observations {
        s = kalman_step(k, &s, o)?;
        out.push(s.clone());
    }
    Ok(out)
}

/// Check `ψ ⨟ κ = readout ⨟ copy ⨟ ((u ⨟ ψ) ⊗ id_O)` at `state`, where the
/// readout is the output marginal of `ψ ⨟ κ` and `u` is [`kalman_step`].
pub fn verify_filter_equation(k: &GaussMorphism, state: &KalmanState, tol: f64) -> Result<()> {
    verify_filter_equation_with(k, state, tol, kalman_step)
}

/// [`verify_filter_equation`] with a caller-supplied update map.
pub fn verify_filter_equation_with<U>(
    k: &GaussMorphism,
    state: &KalmanState,
    tol: f64,
    update: U,
) -> Result<()>
where
    U: Fn(&GaussMorphism, &KalmanState, &DVector<f64>) -> Result<KalmanState>,
{
    let m = check_model(k, state.dim())?;
    let n = state.dim();
    let lhs = psi(state).as_state().compose(k)?;
    let readout = lhs.compose(&GaussMorphism::projection(n + m, n, m))?;

    // the update is affine in o; recover it from m + 1 evaluations
    let base = update(k, state, &DVector::zeros(m))?;
    let mut gain = DMatrix::zeros(n, m);
    for j in 0..m {
        let e = update(k, state, &DVector::from_fn(m, |r, _| if r == j { 1.0 } else { 0.0 }))?;
        gain.set_column(j, &(e.hbar - &base.hbar));
    }
    let then_psi = GaussMorphism {
        matrix: gain,
        offset: base.hbar.clone(),
        noise: base.sigma_p.clone(),
    };
    let rhs = readout
        .compose(&GaussMorphism::copy(m))?
        .compose(&then_psi.tensor(&GaussMorphism::identity(m)))?;
    let dev = lhs.deviation(&rhs);
    if dev <= tol {
        Ok(())
    } else {
        Err(Error::EquationViolated {
            max_deviation: dev,
            tolerance: tol,
        })
    }
}

/// Draws from `N(0, Σ)` as `L z` with `L = V √Λ`; works for singular `Σ`.
#[derive(Clone, Debug)]
struct Sampler {
    factor: Vec<f64>,
    dim: usize,
}

impl Sampler {
    fn new(cov: &DMatrix<f64>) -> Sampler {
        let dim = cov.nrows();
        let eig = SymmetricEigen::new(cov.clone());
        let l = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
        Sampler {
            factor: (0..dim * dim).map(|k| l[(k / dim, k % dim)]).collect(),
            dim,
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64], z: &mut [f64]) {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..self.dim).map(|c| self.factor[r * self.dim + c] * z[c]).sum();
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows() * m.ncols())
        .map(|k| m[(k / m.ncols(), k % m.ncols())])
        .collect()
}

/// Self-normalised importance-sampling estimate of the filtering mean.
#[derive(Clone, Debug)]
pub struct ParticleEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Standard error of each mean coordinate.
    pub std_err: DVector<f64>,
    pub effective_sample_size: f64,
}

/// Sequential importance sampling for `κ` from `state`: each particle draws
/// `h' | h, o` from the exact conditional and is weighted by the output
/// density `N(o; A_O h + c_O, Σ_OO)`. Requires `Σ_OO` positive definite.
pub fn particle_posterior<R: Rng>(
    k: &GaussMorphism,
    state: &KalmanState,
    observations: &[DVector<f64>],
    particles: usize,
    rng: &mut R,
) -> Result<ParticleEstimate> {
    let n = state.dim();
    let m = check_model(k, n)?;
    for o in observations {
        if o.len() != m {
            return Err(shape_err("observation", format!("{m}"), format!("{}", o.len())));
        }
    }
    let a_h = k.matrix.view((0, 0), (n, n)).into_owned();
    let a_o = k.matrix.view((n, 0), (m, n)).into_owned();
    let c_h = k.offset.rows(0, n).into_owned();
    let c_o = k.offset.rows(n, m).into_owned();
    let s_hh = k.noise.view((0, 0), (n, n)).into_owned();
    let s_ho = k.noise.view((0, n), (n, m)).into_owned();
    let s_oo = k.noise.view((n, n), (m, m)).into_owned();
    let chol = s_oo.clone().cholesky().ok_or(Error::NotPsd {
        min_eigenvalue: SymmetricEigen::new(s_oo.clone()).eigenvalues.min(),
        scale: max_abs(&s_oo),
    })?;
    let prec = row_major(&chol.inverse());
    let gain = &s_ho * pinv(&s_oo, PINV_RTOL);
    let cond_cov = repair_psd(&(&s_hh - &gain * s_ho.transpose()), max_abs(&k.noise))?;
    let cond = Sampler::new(&cond_cov);
    let (a_h, a_o, gain) = (row_major(&a_h), row_major(&a_o), row_major(&gain));

    let init = Sampler::new(&state.sigma_p);
    let mut hs = vec![0.0; particles * n];
    let mut logw = vec![0.0; particles];
    let mut z = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for p in 0..particles {
        init.draw(rng, &mut tmp, &mut z);
        for r in 0..n {
            hs[p * n + r] = state.hbar[r] + tmp[r];
        }
    }
    let mut resid = vec![0.0; m];
    let mut next = vec![0.0; n];
    for o in observations {
        for p in 0..particles {
            let h = &hs[p * n..(p + 1) * n];
            for r in 0..m {
                resid[r] = o[r] - c_o[r] - (0..n).map(|c| a_o[r * n + c] * h[c]).sum::<f64>();
            }
            let quad: f64 = (0..m)
                .map(|r| (0..m).map(|c| prec[r * m + c] * resid[c]).sum::<f64>() * resid[r])
                .sum();
            logw[p] -= 0.5 * quad;
            cond.draw(rng, &mut tmp, &mut z);
            for r in 0..n {
                next[r] = c_h[r]
                    + (0..n).map(|c| a_h[r * n + c] * h[c]).sum::<f64>()
                    + (0..m).map(|c| gain[r * m + c] * resid[c]).sum::<f64>()
                    + tmp[r];
            }
            hs[p * n..(p + 1) * n].copy_from_slice(&next);
        }
    }
    let lmax = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - lmax).exp()).collect();
    let total: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|x| x / total).collect();
    let mut mean = DVector::zeros(n);
    for p in 0..particles {
        for r in 0..n {
            mean[r] += w[p] * hs[p * n + r];
        }
    }
    let mut cov = DMatrix::zeros(n, n);
    let mut var_mean = DVector::zeros(n);
    for p in 0..particles {
        for r in 0..n {
            let dr = hs[p * n + r] - mean[r];
            var_mean[r] += w[p] * w[p] * dr * dr;
            for c in 0..n {
                cov[(r, c)] += w[p] * dr * (hs[p * n + c] - mean[c]);
            }
        }
    }
    let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
    Ok(ParticleEstimate {
        mean,
        cov,
        std_err: var_mean.map(f64::sqrt),
        effective_sample_size: ess,
    })
}
