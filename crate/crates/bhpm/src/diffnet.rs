//! Sine-activation MLPs with exact high-order input derivatives.
//!
//! A network maps `(x, t)` to a scalar `u`. Besides plain evaluation, the
//! forward pass can carry truncated Taylor coefficients in `x` (orders 1..K,
//! K <= 3) together with a first-order `t` channel, yielding the exact
//! derivative bundle `(u, u_x, ..., d^K u/dx^K, u_t)` at each input point.
//! A reverse pass over the stored forward state produces exact parameter
//! gradients of any scalar loss built from those bundles.
//!
//! Derivatives are propagated as derivative values (not normalized Taylor
//! coefficients); the sine nonlinearity uses the closed-form Faa di Bruno
//! expressions for orders up to three.

use crate::rng::rng_from_seed;
use crate::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub output_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_layers: 6,
            hidden_units: 64,
            output_dim: 1,
        }
    }
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_layers: usize, hidden_units: usize, output_dim: usize) -> Result<Self> {
        if input_dim < 1 || hidden_layers < 1 || hidden_units < 1 || output_dim < 1 {
            return Err(Error::Invalid("architecture counts must all be >= 1".into()));
        }
        Ok(Self {
            input_dim,
            hidden_layers,
            hidden_units,
            output_dim,
        })
    }

    /// Sizes of successive activations: input, each hidden layer, output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden_layers + 2);
        s.push(self.input_dim);
        s.extend(std::iter::repeat(self.hidden_units).take(self.hidden_layers));
        s.push(self.output_dim);
        s
    }

    pub fn n_affine(&self) -> usize {
        self.hidden_layers + 1
    }

    pub fn param_count(&self) -> usize {
        let sizes = self.layer_sizes();
        let mut n = 0;
        for l in 0..self.n_affine() {
            n += sizes[l + 1] * sizes[l] + sizes[l + 1];
        }
        n
    }
}

/// Flat parameter vector: all weight matrices (layer-major, each row-major
/// with shape `out x in`), then all bias vectors (layer-major).
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
            arch,
        }
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector length {} != architecture count {}",
                values.len(),
                arch.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite network parameter".into()));
        }
        Ok(Self { arch, values })
    }

    fn weight_offset(&self, layer: usize) -> usize {
        let sizes = self.arch.layer_sizes();
        let mut off = 0;
        for l in 0..layer {
            off += sizes[l + 1] * sizes[l];
        }
        off
    }

    fn bias_offset(&self, layer: usize) -> usize {
        let sizes = self.arch.layer_sizes();
        let mut off: usize = (0..self.arch.n_affine()).map(|l| sizes[l + 1] * sizes[l]).sum();
        for l in 0..layer {
            off += sizes[l + 1];
        }
        off
    }

    /// Weight matrix of affine layer `layer`, shape `(out, in)`.
    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let sizes = self.arch.layer_sizes();
        let (out, inp) = (sizes[layer + 1], sizes[layer]);
        let off = self.weight_offset(layer);
        ArrayView2::from_shape((out, inp), &self.values[off..off + out * inp]).unwrap()
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let sizes = self.arch.layer_sizes();
        let out = sizes[layer + 1];
        let off = self.bias_offset(layer);
        &self.values[off..off + out]
    }
}

/// Derivative bundle at one point: value, spatial derivatives of orders
/// 1..=K, and the first time derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub u: f64,
    /// du_dx[k-1] holds d^k u / dx^k; entries beyond K are zero.
    pub du_dx: [f64; 3],
    pub du_dt: f64,
    pub order: usize,
}

impl Jet {
    pub fn bundle(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.order + 1);
        v.push(self.u);
        v.extend_from_slice(&self.du_dx[..self.order]);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.du_dt.is_finite() && self.du_dx.iter().all(|d| d.is_finite())
    }
}

/// Adjoint seed for one point's jet: dLoss/d(field).
#[derive(Debug, Clone, Copy, Default)]
pub struct JetAdjoint {
    pub u: f64,
    pub du_dx: [f64; 3],
    pub du_dt: f64,
}

pub fn init_network(arch: Architecture, seed: u64) -> NetworkParams {
    let mut rng = rng_from_seed(seed);
    let mut p = NetworkParams::zeros(arch);
    let sizes = arch.layer_sizes();
    let mut off = 0;
    for l in 0..arch.n_affine() {
        let (out, inp) = (sizes[l + 1], sizes[l]);
        let scale = 1.0 / (inp as f64).sqrt();
        for i in 0..out * inp {
            p.values[off + i] = rng.gen_range(-scale..scale);
        }
        off += out * inp;
    }
    // biases stay zero
    p
}

/// Number of propagated components for spatial order `k`:
/// value, d/dx..d^k/dx^k, d/dt.
fn n_comps(k: usize) -> usize {
    k + 2
}

/// Forward state retained for the reverse pass: per affine layer the input
/// activations, and per hidden layer the pre-activations.
pub struct JetTape {
    k: usize,
    n_points: usize,
    /// inputs[l][d]: (n, in_l) input to affine layer l, component d
    inputs: Vec<Vec<Array2<f64>>>,
    /// preacts[l][d]: (n, out_l) pre-activation of hidden layer l
    preacts: Vec<Vec<Array2<f64>>>,
}

fn input_components(points: &[(f64, f64)], k: usize) -> Vec<Array2<f64>> {
    let n = points.len();
    let d = n_comps(k);
    let mut comps = vec![Array2::<f64>::zeros((n, 2)); d];
    for (i, &(x, t)) in points.iter().enumerate() {
        comps[0][[i, 0]] = x;
        comps[0][[i, 1]] = t;
        comps[1][[i, 0]] = 1.0; // d x/dx
        comps[d - 1][[i, 1]] = 1.0; // d t/dt
    }
    comps
}

fn affine_forward(params: &NetworkParams, layer: usize, comps: &[Array2<f64>]) -> Vec<Array2<f64>> {
    let w = params.weight(layer);
    let wt = w.t();
    let b = params.bias(layer);
    comps
        .iter()
        .enumerate()
        .map(|(d, a)| {
            let mut z = a.dot(&wt);
            if d == 0 {
                let bv = Array1::from_vec(b.to_vec());
                z += &bv;
            }
            z
        })
        .collect()
}

/// Apply sine (with derivative propagation) in place, returning outputs.
fn sine_forward(z: &[Array2<f64>], k: usize) -> Vec<Array2<f64>> {
    let d = n_comps(k);
    debug_assert_eq!(z.len(), d);
    let (n, w) = z[0].dim();
    let mut y = vec![Array2::<f64>::zeros((n, w)); d];
    let ti = d - 1;
    for i in 0..n {
        for j in 0..w {
            let z0 = z[0][[i, j]];
            let (s, c) = z0.sin_cos();
            y[0][[i, j]] = s;
            y[ti][[i, j]] = c * z[ti][[i, j]];
            if k >= 1 {
                let z1 = z[1][[i, j]];
                y[1][[i, j]] = c * z1;
                if k >= 2 {
                    let z2 = z[2][[i, j]];
                    y[2][[i, j]] = c * z2 - s * z1 * z1;
                    if k >= 3 {
                        let z3 = z[3][[i, j]];
                        y[3][[i, j]] = c * z3 - 3.0 * s * z1 * z2 - c * z1 * z1 * z1;
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of `sine_forward`: given ybar, accumulate zbar.
fn sine_backward(z: &[Array2<f64>], ybar: &[Array2<f64>], k: usize) -> Vec<Array2<f64>> {
    let d = n_comps(k);
    let (n, w) = z[0].dim();
    let mut zbar = vec![Array2::<f64>::zeros((n, w)); d];
    let ti = d - 1;
    for i in 0..n {
        for j in 0..w {
            let z0 = z[0][[i, j]];
            let (s, c) = z0.sin_cos();
            let zt = z[ti][[i, j]];
            let (y0b, ytb) = (ybar[0][[i, j]], ybar[ti][[i, j]]);
            let mut z0b = y0b * c + ytb * (-s * zt);
            let mut ztb = ytb * c;
            let _ = &mut ztb;
            if k >= 1 {
                let z1 = z[1][[i, j]];
                let y1b = ybar[1][[i, j]];
                z0b += y1b * (-s * z1);
                let mut z1b = y1b * c;
                if k >= 2 {
                    let z2 = z[2][[i, j]];
                    let y2b = ybar[2][[i, j]];
                    z0b += y2b * (-s * z2 - c * z1 * z1);
                    z1b += y2b * (-2.0 * s * z1);
                    let mut z2b = y2b * c;
                    if k >= 3 {
                        let z3 = z[3][[i, j]];
                        let y3b = ybar[3][[i, j]];
                        z0b += y3b * (-s * z3 - 3.0 * c * z1 * z2 + s * z1 * z1 * z1);
                        z1b += y3b * (-3.0 * s * z2 - 3.0 * c * z1 * z1);
                        z2b += y3b * (-3.0 * s * z1);
                        zbar[3][[i, j]] = y3b * c;
                    }
                    zbar[2][[i, j]] = z2b;
                }
                zbar[1][[i, j]] = z1b;
            }
            zbar[0][[i, j]] = z0b;
            zbar[ti][[i, j]] = ztb;
        }
    }
    zbar
}

fn jets_from_output(out: &[Array2<f64>], k: usize) -> Vec<Jet> {
    let n = out[0].nrows();
    let ti = n_comps(k) - 1;
    (0..n)
        .map(|i| {
            let mut du_dx = [0.0; 3];
            for o in 1..=k {
                du_dx[o - 1] = out[o][[i, 0]];
            }
            Jet {
                u: out[0][[i, 0]],
                du_dx,
                du_dt: out[ti][[i, 0]],
                order: k,
            }
        })
        .collect()
}

/// Forward pass over a batch of points, retaining state for `backward`.
pub fn forward_tape(params: &NetworkParams, points: &[(f64, f64)], k: usize) -> Result<(Vec<Jet>, JetTape)> {
    if k > 3 {
        return Err(Error::Invalid(format!("jet order {k} > 3 unsupported")));
    }
    if params.arch.input_dim != 2 || params.arch.output_dim != 1 {
        return Err(Error::Invalid("jets require a 2 -> 1 network".into()));
    }
    let n_aff = params.arch.n_affine();
    let mut inputs = Vec::with_capacity(n_aff);
    let mut preacts = Vec::with_capacity(n_aff - 1);
    let mut a = input_components(points, k);
    for l in 0..n_aff {
        let z = affine_forward(params, l, &a);
        inputs.push(std::mem::take(&mut a));
        if l + 1 < n_aff {
            a = sine_forward(&z, k);
            preacts.push(z);
        } else {
            a = z;
        }
    }
    let jets = jets_from_output(&a, k);
    Ok((
        jets,
        JetTape {
            k,
            n_points: points.len(),
            inputs,
            preacts,
        },
    ))
}

/// Reverse pass: parameter gradient of a loss whose adjoints with respect to
/// each point's jet fields are given. Returns a vector matching
/// `params.values` in length and layout.
pub fn backward(params: &NetworkParams, tape: &JetTape, adjoints: &[JetAdjoint]) -> Result<Vec<f64>> {
    if adjoints.len() != tape.n_points {
        return Err(Error::Shape(format!(
            "adjoints {} != points {}",
            adjoints.len(),
            tape.n_points
        )));
    }
    let k = tape.k;
    let d = n_comps(k);
    let ti = d - 1;
    let n = tape.n_points;
    let mut grad = vec![0.0; params.values.len()];

    // seed output adjoints (output width 1)
    let mut ybar = vec![Array2::<f64>::zeros((n, 1)); d];
    for (i, adj) in adjoints.iter().enumerate() {
        ybar[0][[i, 0]] = adj.u;
        ybar[ti][[i, 0]] = adj.du_dt;
        for o in 1..=k {
            ybar[o][[i, 0]] = adj.du_dx[o - 1];
        }
    }

    let n_aff = params.arch.n_affine();
    let sizes = params.arch.layer_sizes();
    let mut zbar = ybar;
    for l in (0..n_aff).rev() {
        // zbar is adjoint of this layer's affine output
        let a = &tape.inputs[l];
        let woff = params.weight_offset(l);
        let boff = params.bias_offset(l);
        let (out, inp) = (sizes[l + 1], sizes[l]);
        // weight grad: sum over components of zbar_d^T a_d
        let mut wg = Array2::<f64>::zeros((out, inp));
        for dcomp in 0..d {
            wg += &zbar[dcomp].t().dot(&a[dcomp]);
        }
        for (gi, gv) in wg.iter().enumerate() {
            grad[woff + gi] += gv;
        }
        // bias grad: column sums of component 0
        for j in 0..out {
            grad[boff + j] += zbar[0].column(j).sum();
        }
        if l == 0 {
            break;
        }
        // input adjoint through the affine map, then through sine
        let w = params.weight(l);
        let abar: Vec<Array2<f64>> = zbar.iter().map(|zb| zb.dot(&w)).collect();
        zbar = sine_backward(&tape.preacts[l - 1], &abar, k);
    }
    Ok(grad)
}

pub fn jet_batch(params: &NetworkParams, points: &[(f64, f64)], k: usize) -> Result<Vec<Jet>> {
    let (jets, _) = forward_tape(params, points, k)?;
    Ok(jets)
}

pub fn jet(params: &NetworkParams, x: f64, t: f64, k: usize) -> Result<Jet> {
    Ok(jet_batch(params, &[(x, t)], k)?.remove(0))
}

/// Plain evaluation `u(x, t)`; equivalent to the jet value channel but
/// without the derivative bookkeeping.
pub fn evaluate_batch(params: &NetworkParams, points: &[(f64, f64)]) -> Vec<f64> {
    let n = points.len();
    let mut a = Array2::<f64>::zeros((n, 2));
    for (i, &(x, t)) in points.iter().enumerate() {
        a[[i, 0]] = x;
        a[[i, 1]] = t;
    }
    let n_aff = params.arch.n_affine();
    for l in 0..n_aff {
        let w = params.weight(l);
        let b = Array1::from_vec(params.bias(l).to_vec());
        let mut z = a.dot(&w.t());
        z += &b;
        a = if l + 1 < n_aff { z.mapv(f64::sin) } else { z };
    }
    a.column(0).to_vec()
}

pub fn evaluate(params: &NetworkParams, x: f64, t: f64) -> f64 {
    evaluate_batch(params, &[(x, t)])[0]
}

/// Value and exact parameter gradient of a scalar loss defined over the jets
/// of a batch of points. The closure returns the loss together with the
/// adjoint (dLoss/d jet field) for every point.
pub fn loss_gradient<F>(
    params: &NetworkParams,
    points: &[(f64, f64)],
    k: usize,
    loss: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&[Jet]) -> (f64, Vec<JetAdjoint>),
{
    let (jets, tape) = forward_tape(params, points, k)?;
    let (value, adjoints) = loss(&jets);
    let grad = backward(params, &tape, &adjoints)?;
    Ok((value, grad))
}
