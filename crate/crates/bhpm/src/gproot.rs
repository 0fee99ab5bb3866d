//! Gaussian-process machinery for the operator: exponentiated-quadratic
//! kernel with ARD lengthscales and a linear mean, exact log marginal
//! likelihood, sparse variational ELBO with inducing points, predictive
//! posterior, and sequential noiseless conditioning.
//!
//! Gradients of the exact LML and the ELBO are computed in closed form
//! (matrix-calculus adjoints mirrored against the forward pass); finite
//! difference checks live in the tests and the acceptance suite.

use crate::linalg::{
    chol_inverse, chol_logdet, chol_solve_mat, chol_solve_vec, cholesky, cholesky_jittered,
    solve_lower,
    solve_lower_mat, solve_lower_t_mat,
};
use crate::rng::{normal_vec, rng_from_seed, sample_without_replacement};
use crate::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

pub const GP_JITTER: f64 = 1e-8;

/// Kernel/mean/noise hyperparameters. Lengthscales are per input dimension.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpHyperparams {
    pub log_amplitude: f64,
    pub log_lengthscales: Vec<f64>,
    pub mean_weights: Vec<f64>,
    pub mean_bias: f64,
    pub log_noise_sd: f64,
}

impl GpHyperparams {
    /// Default initialization for an input dimension and data scale:
    /// unit lengthscales, amplitude at the output std, noise at a tenth of it.
    pub fn init(dim: usize, output_std: f64) -> Self {
        let s = output_std.max(1e-8);
        Self {
            log_amplitude: s.ln(),
            log_lengthscales: vec![0.0; dim],
            mean_weights: vec![0.0; dim],
            mean_bias: 0.0,
            log_noise_sd: (0.1 * s).ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    pub fn noise_sd(&self) -> f64 {
        self.log_noise_sd.exp()
    }

    /// Flat layout: [log_a, log_ls.., w.., b, log_noise].
    pub fn n_flat(&self) -> usize {
        2 * self.dim() + 3
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_flat());
        v.push(self.log_amplitude);
        v.extend_from_slice(&self.log_lengthscales);
        v.extend_from_slice(&self.mean_weights);
        v.push(self.mean_bias);
        v.push(self.log_noise_sd);
        v
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 2 * dim + 3 {
            return Err(Error::Shape(format!(
                "hyperparameter vector length {} != {}",
                flat.len(),
                2 * dim + 3
            )));
        }
        Ok(Self {
            log_amplitude: flat[0],
            log_lengthscales: flat[1..1 + dim].to_vec(),
            mean_weights: flat[1 + dim..1 + 2 * dim].to_vec(),
            mean_bias: flat[1 + 2 * dim],
            log_noise_sd: flat[2 + 2 * dim],
        })
    }

    pub fn kernel(&self, v: &[f64], vp: &[f64]) -> f64 {
        let a2 = (2.0 * self.log_amplitude).exp();
        let mut q = 0.0;
        for d in 0..self.dim() {
            let l = self.log_lengthscales[d].exp();
            let dd = (v[d] - vp[d]) / l;
            q += dd * dd;
        }
        a2 * (-0.5 * q).exp()
    }

    /// d k(v, v') / d v, for fixed v'.
    pub fn kernel_grad_v(&self, v: &[f64], vp: &[f64], out: &mut [f64]) -> f64 {
        let k = self.kernel(v, vp);
        for d in 0..self.dim() {
            let l2 = (2.0 * self.log_lengthscales[d]).exp();
            out[d] = -k * (v[d] - vp[d]) / l2;
        }
        k
    }

    pub fn mean(&self, v: &[f64]) -> f64 {
        self.mean_bias
            + self
                .mean_weights
                .iter()
                .zip(v.iter())
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }

    pub fn mean_vec(&self, v: &ArrayView2<f64>) -> Array1<f64> {
        Array1::from_iter(v.rows().into_iter().map(|r| self.mean(r.as_slice().unwrap())))
    }

    /// Kernel gram between row sets.
    pub fn kernel_cross(&self, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
        let mut k = Array2::<f64>::zeros((a.nrows(), b.nrows()));
        for (i, ra) in a.rows().into_iter().enumerate() {
            let ra = ra.as_slice().unwrap();
            for (j, rb) in b.rows().into_iter().enumerate() {
                k[[i, j]] = self.kernel(ra, rb.as_slice().unwrap());
            }
        }
        k
    }
}

/// Accumulator that chains kernel-matrix adjoints into hyperparameter and
/// input-coordinate gradients.
struct HyperGrad {
    d_log_a: f64,
    d_log_ls: Vec<f64>,
    d_w: Vec<f64>,
    d_b: f64,
    d_log_noise: f64,
}

impl HyperGrad {
    fn zeros(dim: usize) -> Self {
        Self {
            d_log_a: 0.0,
            d_log_ls: vec![0.0; dim],
            d_w: vec![0.0; dim],
            d_b: 0.0,
            d_log_noise: 0.0,
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.d_log_ls.len() + 3);
        v.push(self.d_log_a);
        v.extend_from_slice(&self.d_log_ls);
        v.extend_from_slice(&self.d_w);
        v.push(self.d_b);
        v.push(self.d_log_noise);
        v
    }

    /// Chain the adjoint of a cross-kernel matrix K(a, b) into hypers and,
    /// when provided, the coordinates of `a` and `b`.
    fn chain_kernel(
        &mut self,
        hyper: &GpHyperparams,
        a: &ArrayView2<f64>,
        b: &ArrayView2<f64>,
        kmat: &Array2<f64>,
        kbar: &Array2<f64>,
        mut da: Option<&mut Array2<f64>>,
        mut db: Option<&mut Array2<f64>>,
    ) {
        let dim = hyper.dim();
        let inv_l2: Vec<f64> = (0..dim)
            .map(|d| (-2.0 * hyper.log_lengthscales[d]).exp())
            .collect();
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                let kb = kbar[[i, j]];
                if kb == 0.0 {
                    continue;
                }
                let k = kmat[[i, j]];
                self.d_log_a += 2.0 * kb * k;
                for d in 0..dim {
                    let delta = a[[i, d]] - b[[j, d]];
                    let sq = delta * delta * inv_l2[d];
                    self.d_log_ls[d] += kb * k * sq;
                    let dk_dva = -k * delta * inv_l2[d];
                    if let Some(ga) = da.as_deref_mut() {
                        ga[[i, d]] += kb * dk_dva;
                    }
                    if let Some(gb) = db.as_deref_mut() {
                        gb[[j, d]] -= kb * dk_dva;
                    }
                }
            }
        }
    }

    /// Chain an adjoint of mean values mu(rows of v).
    fn chain_mean(
        &mut self,
        hyper: &GpHyperparams,
        v: &ArrayView2<f64>,
        mubar: &ArrayView1<f64>,
        mut dv: Option<&mut Array2<f64>>,
    ) {
        for (i, row) in v.rows().into_iter().enumerate() {
            let mb = mubar[i];
            if mb == 0.0 {
                continue;
            }
            self.d_b += mb;
            for d in 0..hyper.dim() {
                self.d_w[d] += mb * row[d];
                if let Some(g) = dv.as_deref_mut() {
                    g[[i, d]] += mb * hyper.mean_weights[d];
                }
            }
        }
    }
}

/// Exact log marginal likelihood log N(y | mu(V), K + sigma_f^2 I).
pub fn exact_lml(v: &ArrayView2<f64>, y: &ArrayView1<f64>, hyper: &GpHyperparams) -> Result<f64> {
    let (lml, _) = exact_lml_core(v, y, hyper, false)?;
    Ok(lml)
}

/// Exact LML and its gradient with respect to the flat hyperparameters.
pub fn exact_lml_grad(
    v: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    hyper: &GpHyperparams,
) -> Result<(f64, Vec<f64>)> {
    let (lml, grad) = exact_lml_core(v, y, hyper, true)?;
    Ok((lml, grad.unwrap()))
}

fn exact_lml_core(
    v: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    hyper: &GpHyperparams,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let n = v.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::Shape("exact_lml: empty or mismatched data".into()));
    }
    let kff = hyper.kernel_cross(v, v);
    let noise = hyper.noise_sd().powi(2);
    let mut kn = kff.clone();
    for i in 0..n {
        kn[[i, i]] += noise;
    }
    // the noise term regularizes K already; jitter only as a fallback so the
    // marginal likelihood is exact whenever the plain factorization succeeds
    let l = cholesky(&kn.view()).or_else(|_| cholesky_jittered(&kn.view(), GP_JITTER))?;
    let mu = hyper.mean_vec(v);
    let r = y - &mu;
    let alpha = chol_solve_vec(&l.view(), &r.view());
    let quad: f64 = r.dot(&alpha);
    let lml = -0.5 * quad
        - 0.5 * chol_logdet(&l.view())
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !want_grad {
        return Ok((lml, None));
    }
    // dL/dK = 0.5 (alpha alpha^T - K^{-1})
    let kinv = chol_inverse(&l.view());
    let mut kbar = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            kbar[[i, j]] = 0.5 * (alpha[i] * alpha[j] - kinv[[i, j]]);
        }
    }
    let mut hg = HyperGrad::zeros(hyper.dim());
    hg.chain_kernel(hyper, v, v, &kff, &kbar, None, None);
    // noise enters on the diagonal: dK/dlog_sigma = 2 sigma^2 I
    hg.d_log_noise = (0..n).map(|i| kbar[[i, i]]).sum::<f64>() * 2.0 * noise;
    // mean: dL/dmu_i = alpha_i
    hg.chain_mean(hyper, v, &alpha.view(), None);
    Ok((lml, Some(hg.to_flat())))
}

/// GP posterior conditioned (noiselessly) on an append-only set of
/// input/output pairs. With an empty set it is the prior.
#[derive(Debug, Clone)]
pub struct GpConditioned {
    pub hyper: GpHyperparams,
    pub v_c: Array2<f64>,
    pub f_c: Array1<f64>,
    /// chol of K_cc + jitter I
    chol: Array2<f64>,
    /// K_cc^{-1} (f_c - mu(V_c))
    alpha: Array1<f64>,
}

impl GpConditioned {
    pub fn prior(hyper: GpHyperparams) -> Self {
        let dim = hyper.dim();
        Self {
            hyper,
            v_c: Array2::zeros((0, dim)),
            f_c: Array1::zeros(0),
            chol: Array2::zeros((0, 0)),
            alpha: Array1::zeros(0),
        }
    }

    pub fn n_conditioning(&self) -> usize {
        self.v_c.nrows()
    }

    /// Append conditioning pairs, extending the Cholesky factor by a block.
    pub fn append(&mut self, v_new: &ArrayView2<f64>, f_new: &ArrayView1<f64>) -> Result<()> {
        let p = v_new.nrows();
        if p == 0 {
            return Ok(());
        }
        if f_new.len() != p || v_new.ncols() != self.hyper.dim() {
            return Err(Error::Shape("append: mismatched conditioning block".into()));
        }
        let n_old = self.n_conditioning();
        let n = n_old + p;
        let mut chol = Array2::<f64>::zeros((n, n));
        chol.slice_mut(ndarray::s![..n_old, ..n_old]).assign(&self.chol);
        // B = L^{-1} K_old_new
        let k_on = self.hyper.kernel_cross(&self.v_c.view(), v_new);
        let b = if n_old > 0 {
            solve_lower_mat(&self.chol.view(), &k_on.view())
        } else {
            Array2::zeros((0, p))
        };
        let mut k_nn = self.hyper.kernel_cross(v_new, v_new);
        for i in 0..p {
            k_nn[[i, i]] += GP_JITTER;
        }
        let schur = &k_nn - &b.t().dot(&b);
        let l_nn = crate::linalg::cholesky(&schur.view()).map_err(|_| {
            Error::Numerical("singular conditioning block (duplicate inputs?)".into())
        })?;
        chol.slice_mut(ndarray::s![n_old.., ..n_old]).assign(&b.t());
        chol.slice_mut(ndarray::s![n_old.., n_old..]).assign(&l_nn);
        let mut v_c = Array2::<f64>::zeros((n, self.hyper.dim()));
        v_c.slice_mut(ndarray::s![..n_old, ..]).assign(&self.v_c);
        v_c.slice_mut(ndarray::s![n_old.., ..]).assign(v_new);
        let mut f_c = Array1::<f64>::zeros(n);
        f_c.slice_mut(ndarray::s![..n_old]).assign(&self.f_c);
        f_c.slice_mut(ndarray::s![n_old..]).assign(f_new);
        let resid = &f_c - &self.hyper.mean_vec(&v_c.view());
        let alpha = chol_solve_vec(&chol.view(), &resid.view());
        self.chol = chol;
        self.v_c = v_c;
        self.f_c = f_c;
        self.alpha = alpha;
        Ok(())
    }

    pub fn predict_mean(&self, v: &[f64]) -> f64 {
        let mut m = self.hyper.mean(v);
        for (i, row) in self.v_c.rows().into_iter().enumerate() {
            m += self.hyper.kernel(v, row.as_slice().unwrap()) * self.alpha[i];
        }
        m
    }

    /// Posterior mean and its gradient with respect to the probe point.
    pub fn predict_mean_grad(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        let dim = self.hyper.dim();
        grad[..dim].copy_from_slice(&self.hyper.mean_weights);
        let mut m = self.hyper.mean(v);
        let mut kg = vec![0.0; dim];
        for (i, row) in self.v_c.rows().into_iter().enumerate() {
            let k = self
                .hyper
                .kernel_grad_v(v, row.as_slice().unwrap(), &mut kg);
            m += k * self.alpha[i];
            for d in 0..dim {
                grad[d] += kg[d] * self.alpha[i];
            }
        }
        m
    }

    pub fn predict_var(&self, v: &[f64]) -> f64 {
        let prior = self.hyper.kernel(v, v);
        if self.n_conditioning() == 0 {
            return prior;
        }
        let kvc = Array1::from_iter(
            self.v_c
                .rows()
                .into_iter()
                .map(|r| self.hyper.kernel(v, r.as_slice().unwrap())),
        );
        let w = solve_lower(&self.chol.view(), &kvc.view());
        (prior - w.dot(&w)).max(0.0)
    }

    /// Joint posterior mean and covariance at a block of points.
    pub fn joint_posterior(&self, v: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
        let mean_prior = self.hyper.mean_vec(v);
        let k_ss = self.hyper.kernel_cross(v, v);
        if self.n_conditioning() == 0 {
            return (mean_prior, k_ss);
        }
        let k_cs = self.hyper.kernel_cross(&self.v_c.view(), v);
        let w = solve_lower_mat(&self.chol.view(), &k_cs.view());
        let mean = &mean_prior + &k_cs.t().dot(&self.alpha);
        let cov = &k_ss - &w.t().dot(&w);
        (mean, cov)
    }

    /// Draw a joint sample of the posterior at the given points.
    pub fn sample_at(&self, v: &ArrayView2<f64>, seed: u64) -> Result<Array1<f64>> {
        let (mean, cov) = self.joint_posterior(v);
        let l = cholesky_jittered(&cov.view(), GP_JITTER)
            .map_err(|_| Error::Numerical("posterior covariance not PD (duplicate points?)".into()))?;
        let mut rng = rng_from_seed(seed);
        let z = Array1::from_vec(normal_vec(&mut rng, v.nrows()));
        Ok(&mean + &l.dot(&z))
    }
}

impl crate::operator::Operator for GpConditioned {
    fn input_dim(&self) -> usize {
        self.hyper.dim()
    }
    fn eval(&self, v: &[f64]) -> f64 {
        self.predict_mean(v)
    }
    fn eval_grad(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        self.predict_mean_grad(v, grad)
    }
}

/// Variational state: inducing inputs and the Gaussian q(f_u).
#[derive(Debug, Clone)]
pub struct InducingState {
    pub v_u: Array2<f64>,
    pub q_mean: Array1<f64>,
    /// Lower-triangular Cholesky factor of the q covariance.
    pub q_chol: Array2<f64>,
}

impl InducingState {
    pub fn n_inducing(&self) -> usize {
        self.v_u.nrows()
    }
}

/// Gradients of the ELBO with respect to everything trainable, plus the
/// coupling gradients into the batch inputs and targets (which the joint
/// training stage chains into the leaf networks).
pub struct ElboGrads {
    pub elbo: f64,
    pub d_hyper: Vec<f64>,
    pub d_v_u: Array2<f64>,
    pub d_q_mean: Array1<f64>,
    pub d_q_chol: Array2<f64>,
    pub d_v: Array2<f64>,
    pub d_y: Array1<f64>,
}

/// Sparse variational evidence lower bound (Gaussian likelihood, closed-form
/// expected likelihood, non-whitened parameterization). The likelihood term
/// is scaled by `total_n / batch_n` when minibatched.
pub fn svgp_elbo(
    v: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    state: &InducingState,
    hyper: &GpHyperparams,
    total_n: usize,
) -> Result<f64> {
    Ok(svgp_elbo_core(v, y, state, hyper, total_n, false)?.elbo)
}

pub fn svgp_elbo_grads(
    v: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    state: &InducingState,
    hyper: &GpHyperparams,
    total_n: usize,
) -> Result<ElboGrads> {
    svgp_elbo_core(v, y, state, hyper, total_n, true)
}

fn svgp_elbo_core(
    v: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    state: &InducingState,
    hyper: &GpHyperparams,
    total_n: usize,
    want_grad: bool,
) -> Result<ElboGrads> {
    let n = v.nrows();
    let m = state.n_inducing();
    if y.len() != n || n == 0 {
        return Err(Error::Shape("svgp_elbo: mismatched batch".into()));
    }
    let dim = hyper.dim();
    let scale = total_n as f64 / n as f64;
    let zu = state.v_u.view();

    let kuu_raw = hyper.kernel_cross(&zu, &zu);
    let lu = cholesky_jittered(&kuu_raw.view(), GP_JITTER)?;
    let kuf = hyper.kernel_cross(&zu, v);
    let a = chol_solve_mat(&lu.view(), &kuf.view()); // Kuu^{-1} Kuf, m x n

    let mu_z = hyper.mean_vec(&zu);
    let mu_v = hyper.mean_vec(v);
    let delta = &state.q_mean - &mu_z;

    // q(f) marginals
    let mu = &mu_v + &a.t().dot(&delta);
    let c = state.q_chol.t().dot(&a); // m x n, columns give A^T S A diagonals
    let a2 = (2.0 * hyper.log_amplitude).exp();
    let mut sig2 = Array1::<f64>::zeros(n);
    for i in 0..n {
        let qff: f64 = (0..m).map(|k| a[[k, i]] * kuf[[k, i]]).sum();
        let sas: f64 = (0..m).map(|k| c[[k, i]] * c[[k, i]]).sum();
        sig2[i] = a2 - qff + sas;
    }

    let noise = hyper.noise_sd().powi(2);
    let r = y - &mu;
    let mut ell = 0.0;
    for i in 0..n {
        ell += -0.5 * (2.0 * std::f64::consts::PI * noise).ln()
            - (r[i] * r[i] + sig2[i]) / (2.0 * noise);
    }
    ell *= scale;

    // KL(q(f_u) || p(f_u))
    let mq = solve_lower_mat(&lu.view(), &state.q_chol.view()); // Lu^{-1} Lq
    let tr_ks: f64 = mq.iter().map(|x| x * x).sum();
    let beta = chol_solve_vec(&lu.view(), &delta.view());
    let logdet_kuu = chol_logdet(&lu.view());
    let logdet_s = chol_logdet(&state.q_chol.view());
    let kl = 0.5 * (tr_ks + delta.dot(&beta) - m as f64 + logdet_kuu - logdet_s);

    let elbo = ell - kl;
    if !want_grad {
        return Ok(ElboGrads {
            elbo,
            d_hyper: vec![],
            d_v_u: Array2::zeros((0, 0)),
            d_q_mean: Array1::zeros(0),
            d_q_chol: Array2::zeros((0, 0)),
            d_v: Array2::zeros((0, 0)),
            d_y: Array1::zeros(0),
        });
    }

    // ---- reverse pass ----
    let g = r.mapv(|ri| scale * ri / noise); // dELL/dmu
    let h = -scale / (2.0 * noise); // dELL/dsig2_i (same for all i)

    // r = y - mu, so dELL/dy_i = -scale * r_i / noise
    let d_y = r.mapv(|ri| -scale * ri / noise);

    // adjoint of mu: +g into mu_v and A^T delta
    // Abar from mu-path and sigma2-path
    let s_mat = state.q_chol.dot(&state.q_chol.t());
    let sa = s_mat.dot(&a); // m x n
    let mut abar = Array2::<f64>::zeros((m, n));
    for i in 0..n {
        for k in 0..m {
            abar[[k, i]] = delta[k] * g[i] + h * (2.0 * sa[[k, i]] - kuf[[k, i]]);
        }
    }
    // Kuf adjoint from the sigma2 Qff term
    let mut kufbar = a.mapv(|x| -h * x);
    // S adjoint from sigma2: h * A diag Aᵀ summed -> symmetric
    // accumulate via d_q_chol at the end: Sbar_ell = h * A Aᵀ (columns weighted equally)
    let sbar_ell = a.dot(&a.t()).mapv(|x| h * x);

    // back through A = Kuu^{-1} Kuf
    let w_mat = chol_solve_mat(&lu.view(), &abar.view()); // Kuu^{-1} Abar
    kufbar += &w_mat;
    let mut kuubar = w_mat.dot(&a.t()).mapv(|x| -x);

    // sigma_f (likelihood noise) and amplitude diagonal term
    let sum_r2_sig: f64 = (0..n).map(|i| r[i] * r[i] + sig2[i]).sum();
    let d_log_noise_ell = scale * (-(n as f64) + sum_r2_sig / noise);
    let d_log_a_diag = h * 2.0 * a2 * n as f64; // from kdiag = a^2 per point

    // mean adjoints from ELL
    let mu_v_bar = g.clone();
    let mut mu_z_bar = a.dot(&g).mapv(|x| -x);
    let mut d_q_mean = a.dot(&g);

    // ---- KL adjoints (subtracted) ----
    let kuu_inv = chol_inverse(&lu.view());
    let p2 = solve_lower_t_mat(&lu.view(), &mq.view()); // Kuu^{-1} Lq
    // dKL/dKuu = 0.5 (Kuu^{-1} - Kuu^{-1} S Kuu^{-1} - beta beta^T)
    let kskinv = p2.dot(&p2.t());
    for i in 0..m {
        for j in 0..m {
            let dkl = 0.5 * (kuu_inv[[i, j]] - kskinv[[i, j]] - beta[i] * beta[j]);
            kuubar[[i, j]] -= dkl;
        }
    }
    for k in 0..m {
        d_q_mean[k] -= beta[k];
        mu_z_bar[k] += beta[k];
    }
    // dKL/dLq = tril(Kuu^{-1} Lq) - diag(1/diag Lq); ELBO subtracts it.
    // dELL/dLq = 2 tril(Sbar_ell Lq)
    let sl = sbar_ell.dot(&state.q_chol);
    let mut d_q_chol = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..=i {
            let mut gq = 2.0 * sl[[i, j]] - p2[[i, j]];
            if i == j {
                gq += 1.0 / state.q_chol[[i, i]];
            }
            d_q_chol[[i, j]] = gq;
        }
    }

    // ---- chain into hypers and coordinates ----
    let mut hg = HyperGrad::zeros(dim);
    let mut d_v_u = Array2::<f64>::zeros((m, dim));
    let mut d_v = Array2::<f64>::zeros((n, dim));
    hg.chain_kernel(
        hyper,
        &zu,
        &zu,
        &kuu_raw,
        &kuubar,
        Some(&mut d_v_u),
        None,
    );
    // Kuu adjoint is a full (asymmetric) matrix of independent entries;
    // each z row also appears as the second kernel argument, which for a
    // symmetric stationary kernel equals flowing the transposed adjoint
    // into the first argument.
    {
        let kuubar_t = kuubar.t().to_owned();
        let mut hg2 = HyperGrad::zeros(dim);
        let mut d_v_u2 = Array2::<f64>::zeros((m, dim));
        hg2.chain_kernel(hyper, &zu, &zu, &kuu_raw, &kuubar_t, Some(&mut d_v_u2), None);
        d_v_u += &d_v_u2;
    }
    hg.chain_kernel(hyper, &zu, v, &kuf, &kufbar, Some(&mut d_v_u), Some(&mut d_v));
    hg.d_log_a += d_log_a_diag;
    hg.d_log_noise += d_log_noise_ell;
    hg.chain_mean(hyper, v, &mu_v_bar.view(), Some(&mut d_v));
    hg.chain_mean(hyper, &zu, &mu_z_bar.view(), Some(&mut d_v_u));

    Ok(ElboGrads {
        elbo,
        d_hyper: hg.to_flat(),
        d_v_u,
        d_q_mean,
        d_q_chol,
        d_v,
        d_y,
    })
}

/// Sparse posterior marginals at probe points. The returned variance is the
/// latent one; add `noise_sd^2` for predictive probabilities.
pub fn svgp_predict(
    state: &InducingState,
    hyper: &GpHyperparams,
    v_star: &ArrayView2<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let zu = state.v_u.view();
    let kuu = hyper.kernel_cross(&zu, &zu);
    let lu = cholesky_jittered(&kuu.view(), GP_JITTER)?;
    let kus = hyper.kernel_cross(&zu, v_star);
    let a = chol_solve_mat(&lu.view(), &kus.view());
    let delta = &state.q_mean - &hyper.mean_vec(&zu);
    let mu = &hyper.mean_vec(v_star) + &a.t().dot(&delta);
    let c = state.q_chol.t().dot(&a);
    let a2 = (2.0 * hyper.log_amplitude).exp();
    let m = state.n_inducing();
    let var = Array1::from_iter((0..v_star.nrows()).map(|i| {
        let qff: f64 = (0..m).map(|k| a[[k, i]] * kus[[k, i]]).sum();
        let sas: f64 = (0..m).map(|k| c[[k, i]] * c[[k, i]]).sum();
        (a2 - qff + sas).max(0.0)
    }));
    Ok((mu, var))
}

/// k-means++ seeding followed by Lloyd iterations until the assignment
/// fixpoint (or 100 iterations).
pub fn kmeans_init(v: &ArrayView2<f64>, n_centers: usize, seed: u64) -> Result<Array2<f64>> {
    let n = v.nrows();
    let dim = v.ncols();
    if n < n_centers {
        return Err(Error::Invalid(format!(
            "kmeans: {n} points for {n_centers} centers"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut centers = Array2::<f64>::zeros((n_centers, dim));
    // k-means++ seeding
    let first = sample_without_replacement(&mut rng, n, 1)[0];
    centers.row_mut(0).assign(&v.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&v.row(i), &centers.row(0)))
        .collect();
    for c in 1..n_centers {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // all remaining points coincide with a center
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centers.row_mut(c).assign(&v.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(&v.row(i), &centers.row(c)));
        }
    }
    // Lloyd
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for c in 0..n_centers {
                let d = sq_dist(&v.row(i), &centers.row(c));
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((n_centers, dim));
        let mut counts = vec![0usize; n_centers];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += &v.row(i);
        }
        for c in 0..n_centers {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centers.row_mut(c).assign(&sums.row(c).mapv(|x| x * inv));
            }
        }
    }
    Ok(centers)
}

fn sq_dist(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean of within-cluster squared distances; used by tests to check Lloyd
/// monotonicity.
pub fn kmeans_objective(v: &ArrayView2<f64>, centers: &ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..v.nrows() {
        let mut best = f64::INFINITY;
        for c in 0..centers.nrows() {
            best = best.min(sq_dist(&v.row(i), &centers.row(c)));
        }
        total += best;
    }
    total / v.nrows().max(1) as f64
}
