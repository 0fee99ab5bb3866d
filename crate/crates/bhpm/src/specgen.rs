//! Ground-truth data factory: Fourier pseudospectral ETDRK4 integration of
//! periodic `u_t = F[u]`, periodic-GP initial conditions, spectral
//! derivative extraction, and measurement subsampling with noise.

use crate::linalg::cholesky_jittered;
use crate::operator::{ClosedForm, Operator};
use crate::rng::{normal_vec, rng_from_seed, sample_without_replacement};
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Equation {
    Burgers,
    Kdv,
    Heat,
}

impl Equation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "burgers" => Ok(Equation::Burgers),
            "kdv" => Ok(Equation::Kdv),
            "heat" => Ok(Equation::Heat),
            other => Err(Error::Invalid(format!("unknown equation '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Equation::Burgers => "burgers",
            Equation::Kdv => "kdv",
            Equation::Heat => "heat",
        }
    }

    /// Spatial order K of the operator.
    pub fn spatial_order(&self) -> usize {
        match self {
            Equation::Burgers | Equation::Heat => 2,
            Equation::Kdv => 3,
        }
    }

    pub fn operator(&self) -> ClosedForm {
        match self {
            Equation::Burgers => ClosedForm::Burgers,
            Equation::Kdv => ClosedForm::Kdv,
            Equation::Heat => ClosedForm::Heat,
        }
    }

    /// Linear symbol L(k): Burgers/heat 0.1 (ik)^2 = -0.1 k^2;
    /// K-dV -(ik)^3 = i k^3.
    pub fn linear_symbol(&self, k: f64) -> Complex64 {
        match self {
            Equation::Burgers | Equation::Heat => Complex64::new(-0.1 * k * k, 0.0),
            Equation::Kdv => Complex64::new(0.0, k * k * k),
        }
    }

    /// Whether the advection nonlinearity -u u_x is present.
    pub fn has_advection(&self) -> bool {
        !matches!(self, Equation::Heat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Domain {
    /// Spatial extent; the domain is [-l_x/2, l_x/2) with periodic wrap.
    pub l_x: f64,
    pub l_t: f64,
    /// Spatial grid size.
    pub n_s: usize,
    pub dt: f64,
    /// Number of stored snapshots, uniform in time including t=0 and t=l_t.
    pub n_save: usize,
}

impl Domain {
    /// 256 spectral elements, dt = 1e-4, (l_x, l_t) = (16, 10).
    pub fn burgers() -> Self {
        Self {
            l_x: 16.0,
            l_t: 10.0,
            n_s: 256,
            dt: 1e-4,
            n_save: 251,
        }
    }

    /// 512 spectral elements, dt = 1e-5, (l_x, l_t) = (40, 40).
    pub fn kdv() -> Self {
        Self {
            l_x: 40.0,
            l_t: 40.0,
            n_s: 512,
            dt: 1e-5,
            n_save: 251,
        }
    }

    pub fn for_equation(eq: Equation) -> Self {
        match eq {
            Equation::Burgers | Equation::Heat => Self::burgers(),
            Equation::Kdv => Self::kdv(),
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        let dx = self.l_x / self.n_s as f64;
        (0..self.n_s).map(|i| -0.5 * self.l_x + i as f64 * dx).collect()
    }

    pub fn save_times(&self) -> Vec<f64> {
        let dt_save = self.l_t / (self.n_save - 1) as f64;
        (0..self.n_save).map(|i| i as f64 * dt_save).collect()
    }

    /// Integration steps between stored snapshots; the ratio must be
    /// integral so snapshot times land exactly on step boundaries.
    pub fn steps_per_save(&self) -> Result<usize> {
        let interval = self.l_t / (self.n_save - 1) as f64;
        let ratio = interval / self.dt;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > 1e-6 || rounded < 1.0 {
            return Err(Error::Invalid(format!(
                "dt {} does not divide save interval {}",
                self.dt, interval
            )));
        }
        Ok(rounded as usize)
    }

    /// Angular wavenumbers in FFT order.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let n = self.n_s;
        let base = 2.0 * std::f64::consts::PI / self.l_x;
        (0..n)
            .map(|i| {
                let m = if i <= n / 2 { i as isize } else { i as isize - n as isize };
                base * m as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SolutionField {
    pub domain: Domain,
    pub equation: Equation,
    /// (n_save, n_s), row i is the solution at times[i].
    pub u: Array2<f64>,
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
}

/// Draw an initial condition from a zero-mean GP on the grid with periodic
/// kernel k(x,x') = exp[-sin^2(2 pi (x-x') / l_x)].
pub fn sample_initial_condition(domain: &Domain, seed: u64) -> Result<Vec<f64>> {
    if domain.n_s < 16 {
        return Err(Error::Invalid("initial-condition grid too coarse".into()));
    }
    let xs = domain.grid();
    let n = xs.len();
    let mut gram = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            gram[[i, j]] = periodic_kernel(xs[i], xs[j], domain.l_x);
        }
    }
    let l = cholesky_jittered(&gram.view(), 1e-10)?;
    let mut rng = rng_from_seed(seed);
    let z = Array1::from_vec(normal_vec(&mut rng, n));
    Ok(l.dot(&z).to_vec())
}

pub fn periodic_kernel(x: f64, xp: f64, l_x: f64) -> f64 {
    let s = (2.0 * std::f64::consts::PI * (x - xp) / l_x).sin();
    (-s * s).exp()
}

struct Spectral {
    fwd: Arc<dyn rustfft::Fft<f64>>,
    inv: Arc<dyn rustfft::Fft<f64>>,
    n: usize,
}

impl Spectral {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            n,
        }
    }

    fn fft(&self, x: &mut [Complex64]) {
        self.fwd.process(x);
    }

    fn ifft(&self, x: &mut [Complex64]) {
        self.inv.process(x);
        let s = 1.0 / self.n as f64;
        x.iter_mut().for_each(|v| *v *= s);
    }
}

/// phi-function coefficients via contour averaging over `m` points on a unit
/// circle around each stiff eigenvalue (the Kassam-Trefethen construction).
fn etdrk4_coefficients(
    lsym: &[Complex64],
    dt: f64,
    m: usize,
) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>, Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
    let n = lsym.len();
    let mut e = vec![Complex64::default(); n];
    let mut e2 = vec![Complex64::default(); n];
    let mut q = vec![Complex64::default(); n];
    let mut f1 = vec![Complex64::default(); n];
    let mut f2 = vec![Complex64::default(); n];
    let mut f3 = vec![Complex64::default(); n];
    for i in 0..n {
        let lh = lsym[i] * dt;
        e[i] = lh.exp();
        e2[i] = (lh * 0.5).exp();
        let (mut sq, mut s1, mut s2, mut s3) = (
            Complex64::default(),
            Complex64::default(),
            Complex64::default(),
            Complex64::default(),
        );
        for j in 0..m {
            let theta = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / m as f64;
            let r = Complex64::new(theta.cos(), theta.sin());
            let z = lh + r;
            let ez = z.exp();
            let z2 = z * z;
            let z3 = z2 * z;
            sq += ((z * 0.5).exp() - 1.0) / z;
            s1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z2)) / z3;
            s2 += (2.0 + z + ez * (z - 2.0)) / z3;
            s3 += (-4.0 - 3.0 * z - z2 + ez * (4.0 - z)) / z3;
        }
        let scale = dt / m as f64;
        q[i] = sq * scale;
        f1[i] = s1 * scale;
        f2[i] = s2 * scale;
        f3[i] = s3 * scale;
    }
    (e, e2, q, f1, f2, f3)
}

/// Integrate `u_t = L u + N(u)` with the fourth-order exponential time
/// differencing Runge-Kutta scheme in Fourier space, storing `n_save`
/// uniform snapshots including t = 0 and t = l_t.
pub fn etdrk4_solve(eq: Equation, domain: &Domain, u0: &[f64]) -> Result<SolutionField> {
    etdrk4_solve_opts(eq, domain, u0, false)
}

/// As `etdrk4_solve`, with an optional 2/3-rule dealiasing filter on the
/// nonlinear term.
pub fn etdrk4_solve_opts(
    eq: Equation,
    domain: &Domain,
    u0: &[f64],
    dealias: bool,
) -> Result<SolutionField> {
    let n = domain.n_s;
    if u0.len() != n {
        return Err(Error::Shape(format!("u0 length {} != n_s {}", u0.len(), n)));
    }
    let steps_per_save = domain.steps_per_save()?;
    let ks = domain.wavenumbers();
    let lsym: Vec<Complex64> = ks.iter().map(|&k| eq.linear_symbol(k)).collect();
    let (e, e2, q, f1, f2, f3) = etdrk4_coefficients(&lsym, domain.dt, 32);
    let sp = Spectral::new(n);

    // spectral state
    let mut v: Vec<Complex64> = u0.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    sp.fft(&mut v);

    let nonlinear = |vhat: &[Complex64], out: &mut Vec<Complex64>| {
        if !eq.has_advection() {
            out.clear();
            out.resize(n, Complex64::default());
            return;
        }
        // N(u) = -u u_x computed pseudospectrally
        let mut u_phys = vhat.to_vec();
        sp.ifft(&mut u_phys);
        let mut ux = vhat
            .iter()
            .zip(ks.iter())
            .map(|(vh, &k)| vh * Complex64::new(0.0, k))
            .collect::<Vec<_>>();
        sp.ifft(&mut ux);
        out.clear();
        out.extend(
            u_phys
                .iter()
                .zip(ux.iter())
                .map(|(u, uxv)| Complex64::new(-u.re * uxv.re, 0.0)),
        );
        sp.fft(out);
        if dealias {
            let cutoff = n / 3;
            for (i, o) in out.iter_mut().enumerate() {
                let m = if i <= n / 2 { i } else { n - i };
                if m > cutoff {
                    *o = Complex64::default();
                }
            }
        }
    };

    let mut field = Array2::<f64>::zeros((domain.n_save, n));
    let store = |vhat: &[Complex64], row: usize, field: &mut Array2<f64>| -> Result<()> {
        let mut phys = vhat.to_vec();
        sp.ifft(&mut phys);
        let max_im = phys.iter().map(|c| c.im.abs()).fold(0.0f64, f64::max);
        if max_im > 1e-10 {
            return Err(Error::Numerical(format!(
                "imaginary residue {max_im:.2e} at snapshot {row}"
            )));
        }
        for (j, c) in phys.iter().enumerate() {
            field[[row, j]] = c.re;
        }
        Ok(())
    };
    store(&v, 0, &mut field)?;

    let (mut nv, mut na, mut nb, mut nc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut va, mut vb, mut vc) = (
        vec![Complex64::default(); n],
        vec![Complex64::default(); n],
        vec![Complex64::default(); n],
    );
    for save in 1..domain.n_save {
        for _ in 0..steps_per_save {
            nonlinear(&v, &mut nv);
            for i in 0..n {
                va[i] = e2[i] * v[i] + q[i] * nv[i];
            }
            nonlinear(&va, &mut na);
            for i in 0..n {
                vb[i] = e2[i] * v[i] + q[i] * na[i];
            }
            nonlinear(&vb, &mut nb);
            for i in 0..n {
                vc[i] = e2[i] * va[i] + q[i] * (nb[i] * 2.0 - nv[i]);
            }
            nonlinear(&vc, &mut nc);
            for i in 0..n {
                v[i] = e[i] * v[i]
                    + f1[i] * nv[i]
                    + f2[i] * (na[i] + nb[i]) * 2.0
                    + f3[i] * nc[i];
            }
            if v.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(Error::Numerical(
                    "ETDRK4 state became non-finite; reduce dt".into(),
                ));
            }
        }
        // project back onto real fields (rounding can break conjugate symmetry)
        for i in 1..n / 2 {
            let avg = (v[i] + v[n - i].conj()) * 0.5;
            v[i] = avg;
            v[n - i] = avg.conj();
        }
        v[0] = Complex64::new(v[0].re, 0.0);
        if n % 2 == 0 {
            v[n / 2] = Complex64::new(v[n / 2].re, 0.0);
        }
        store(&v, save, &mut field)?;
    }

    Ok(SolutionField {
        domain: *domain,
        equation: eq,
        u: field,
        times: domain.save_times(),
        xs: domain.grid(),
    })
}

/// Exact spatial derivatives of every stored snapshot via multiplication by
/// (ik)^k in Fourier space, together with `u_t` computed by applying the
/// ground-truth operator to the bundle.
#[derive(Debug, Clone)]
pub struct DerivativeField {
    /// derivs[k]: (n_save, n_s) array of d^k u/dx^k, k = 0..=K.
    pub derivs: Vec<Array2<f64>>,
    /// (n_save, n_s) targets u_t = F[u].
    pub u_t: Array2<f64>,
    pub order: usize,
}

pub fn spectral_derivatives(field: &SolutionField, k_order: usize) -> Result<DerivativeField> {
    let n = field.domain.n_s;
    let sp = Spectral::new(n);
    let ks = field.domain.wavenumbers();
    let op = field.equation.operator();
    if k_order + 1 != op.input_dim() {
        return Err(Error::Invalid(format!(
            "derivative order {k_order} does not match operator input dim {}",
            op.input_dim()
        )));
    }
    let n_save = field.domain.n_save;
    let mut derivs = vec![Array2::<f64>::zeros((n_save, n)); k_order + 1];
    let mut u_t = Array2::<f64>::zeros((n_save, n));
    for row in 0..n_save {
        let mut vhat: Vec<Complex64> = field
            .u
            .row(row)
            .iter()
            .map(|&x| Complex64::new(x, 0.0))
            .collect();
        sp.fft(&mut vhat);
        for order in 0..=k_order {
            let mut d = vhat
                .iter()
                .zip(ks.iter())
                .map(|(vh, &k)| vh * Complex64::new(0.0, k).powu(order as u32))
                .collect::<Vec<_>>();
            // drop the unmatched Nyquist mode for odd derivatives
            if order % 2 == 1 && n % 2 == 0 {
                d[n / 2] = Complex64::default();
            }
            sp.ifft(&mut d);
            for (j, c) in d.iter().enumerate() {
                derivs[order][[row, j]] = c.re;
            }
        }
        let mut v = vec![0.0; k_order + 1];
        for j in 0..n {
            for (order, dkn) in derivs.iter().enumerate() {
                v[order] = dkn[[row, j]];
            }
            u_t[[row, j]] = op.eval(&v);
        }
    }
    Ok(DerivativeField {
        derivs,
        u_t,
        order: k_order,
    })
}

/// One experiment's scattered measurements.
#[derive(Debug, Clone)]
pub struct ExperimentDataset {
    /// (x, t, u_hat) triples.
    pub samples: Vec<(f64, f64, f64)>,
    /// Grid indices (snapshot, column) each sample came from.
    pub indices: Vec<(usize, usize)>,
    pub noise_sd: f64,
    pub domain: Domain,
    pub seed: u64,
}

/// Uniform subsample of the stored grid without replacement, with additive
/// Gaussian noise of standard deviation `noise_sd`.
pub fn make_dataset(
    field: &SolutionField,
    n_st: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<ExperimentDataset> {
    let total = field.domain.n_save * field.domain.n_s;
    if n_st > total {
        return Err(Error::Invalid(format!(
            "requested {n_st} samples from a grid of {total} points"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let flat = sample_without_replacement(&mut rng, total, n_st);
    let mut samples = Vec::with_capacity(n_st);
    let mut indices = Vec::with_capacity(n_st);
    for &f in &flat {
        let row = f / field.domain.n_s;
        let col = f % field.domain.n_s;
        let noise = if noise_sd > 0.0 {
            noise_sd * crate::rng::standard_normal(&mut rng)
        } else {
            0.0
        };
        samples.push((field.xs[col], field.times[row], field.u[[row, col]] + noise));
        indices.push((row, col));
    }
    Ok(ExperimentDataset {
        samples,
        indices,
        noise_sd,
        domain: field.domain,
        seed,
    })
}

/// Held-out test set for the operator: derivative bundles and exact targets
/// subsampled uniformly across a list of solution fields.
#[derive(Debug, Clone)]
pub struct RootTestSet {
    /// (n, K+1) inputs.
    pub v: Array2<f64>,
    pub u_t: Array1<f64>,
    /// (field index, snapshot, column) provenance per row.
    pub source: Vec<(usize, usize, usize)>,
}

pub fn make_root_testset(
    fields: &[SolutionField],
    k_order: usize,
    n_test_points: usize,
    seed: u64,
) -> Result<RootTestSet> {
    if fields.is_empty() {
        return Err(Error::Invalid("no held-out fields".into()));
    }
    let per_field: usize = fields[0].domain.n_save * fields[0].domain.n_s;
    let total = per_field * fields.len();
    let n_take = n_test_points.min(total);
    let mut rng = rng_from_seed(seed);
    let flat = sample_without_replacement(&mut rng, total, n_take);
    let mut v = Array2::<f64>::zeros((n_take, k_order + 1));
    let mut u_t = Array1::<f64>::zeros(n_take);
    let mut source = Vec::with_capacity(n_take);
    // compute derivative fields once per source field
    let dfields: Vec<DerivativeField> = fields
        .iter()
        .map(|f| spectral_derivatives(f, k_order))
        .collect::<Result<_>>()?;
    for (rowi, &f) in flat.iter().enumerate() {
        let fi = f / per_field;
        let rem = f % per_field;
        let snap = rem / fields[fi].domain.n_s;
        let col = rem % fields[fi].domain.n_s;
        for order in 0..=k_order {
            v[[rowi, order]] = dfields[fi].derivs[order][[snap, col]];
        }
        u_t[rowi] = dfields[fi].u_t[[snap, col]];
        source.push((fi, snap, col));
    }
    Ok(RootTestSet { v, u_t, source })
}
