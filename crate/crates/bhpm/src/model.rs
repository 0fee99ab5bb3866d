//! The hidden-physics model itself: N leaf networks (one per experiment)
//! plus a sparse GP root over derivative bundles, trained in three stages —
//! per-leaf fits, exact-GP hyperparameter fit on a subsample, then joint
//! ascent of the combined objective (leaf log-likelihoods + root ELBO) with
//! gradients flowing from the root into the leaves through the bundles.

use crate::diffnet::{
    backward, forward_tape, init_network, jet_batch, Architecture, JetAdjoint, NetworkParams,
};
use crate::gproot::{
    exact_lml_grad, kmeans_init, svgp_elbo_grads, svgp_predict, GpHyperparams, InducingState,
    GP_JITTER,
};
use crate::linalg::{chol_solve_vec, cholesky_jittered, solve_lower_mat};
use crate::optim::AdamState;
use crate::rng::{child_seed, rng_from_seed, sample_without_replacement};
use crate::specgen::{ExperimentDataset, RootTestSet};
use crate::{Error, Result};
use ndarray::{Array1, Array2};

/// One experiment's observable: a network plus its learned noise level.
#[derive(Debug, Clone)]
pub struct Leaf {
    pub params: NetworkParams,
    pub log_noise_sd: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub leaf_iters: usize,
    pub leaf_lr: f64,
    pub root_iters: usize,
    pub root_lr: f64,
    pub joint_iters: usize,
    pub joint_lr: f64,
    pub root_subset: usize,
    pub n_u: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            leaf_iters: 10_000,
            leaf_lr: 1e-3,
            root_iters: 2000,
            root_lr: 1e-2,
            joint_iters: 50_000,
            joint_lr: 1e-3,
            root_subset: 1024,
            n_u: 128,
            hidden_layers: 6,
            hidden_units: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leaf_iters == 0
            || self.root_iters == 0
            || self.joint_iters == 0
            || self.root_subset == 0
            || self.n_u == 0
            || self.hidden_layers == 0
            || self.hidden_units == 0
        {
            return Err(Error::Invalid("train config: counts must be positive".into()));
        }
        if !(self.leaf_lr > 0.0 && self.root_lr > 0.0 && self.joint_lr > 0.0) {
            return Err(Error::Invalid("train config: learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(2, self.hidden_layers, self.hidden_units, 1)
    }
}

#[derive(Debug, Clone)]
pub struct BhpmModel {
    pub leaves: Vec<Leaf>,
    pub hyper: GpHyperparams,
    pub inducing: InducingState,
    pub k: usize,
}

/// Loss curves per training stage, (iteration, objective value).
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub stage1: Vec<Vec<(usize, f64)>>,
    pub stage2: Vec<(usize, f64)>,
    pub stage3: Vec<(usize, f64)>,
}

/// Negative log-likelihood of a leaf's dataset under i.i.d. Gaussian noise.
pub fn leaf_nll(leaf: &Leaf, samples: &[(f64, f64, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("leaf_nll: empty dataset".into()));
    }
    let points: Vec<(f64, f64)> = samples.iter().map(|&(x, t, _)| (x, t)).collect();
    let pred = crate::diffnet::evaluate_batch(&leaf.params, &points);
    let sd = leaf.log_noise_sd.exp();
    let mut nll = 0.0;
    for (p, &(_, _, u)) in pred.iter().zip(samples.iter()) {
        let r = u - p;
        nll += 0.5 * r * r / (sd * sd) + leaf.log_noise_sd + 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    Ok(nll)
}

/// Stage-1 training: Adam on the leaf NLL over network parameters and the
/// log noise, with cosine learning-rate decay to a tenth of the initial
/// rate. Datasets larger than `LEAF_BATCH` points are minibatched so the
/// per-step cost (and convergence per step) is independent of dataset
/// size; smaller datasets train full-batch. Deterministic per seed; the
/// noise is floored at 1e-4 of the data scale so clean data cannot
/// collapse the likelihood.
pub fn train_leaf(
    samples: &[(f64, f64, f64)],
    arch: Architecture,
    iters: usize,
    lr: f64,
    seed: u64,
) -> Result<(Leaf, Vec<(usize, f64)>)> {
    if samples.is_empty() {
        return Err(Error::Invalid("train_leaf: empty dataset".into()));
    }
    let points: Vec<(f64, f64)> = samples.iter().map(|&(x, t, _)| (x, t)).collect();
    let targets: Vec<f64> = samples.iter().map(|&(_, _, u)| u).collect();
    let n = targets.len();
    let mean = targets.iter().sum::<f64>() / n as f64;
    let scale = (targets.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / n as f64)
        .sqrt()
        .max(1e-8);
    let floor = (1e-4 * scale).ln();

    let mut params = init_network(arch, seed);
    let mut log_sd = scale.ln();
    let n_net = params.values.len();
    let mut flat = params.values.clone();
    flat.push(log_sd);
    let mut adam = AdamState::new(flat.len());
    let mut curve = Vec::new();
    let half_ln2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    const LEAF_BATCH: usize = 1024;
    let batch = n.min(LEAF_BATCH);
    let schedule = crate::optim::CosineSchedule::new(lr, 0.1 * lr, iters.max(1))?;
    let mut batch_rng = rng_from_seed(child_seed(seed, 0x1eaf));

    for iter in 0..iters {
        params.values.copy_from_slice(&flat[..n_net]);
        log_sd = flat[n_net];
        let sd2 = (2.0 * log_sd).exp();
        let mut d_log_sd = 0.0;
        let (bpoints, btargets): (Vec<(f64, f64)>, Vec<f64>) = if batch == n {
            (points.clone(), targets.clone())
        } else {
            let idx = sample_without_replacement(&mut batch_rng, n, batch);
            (
                idx.iter().map(|&i| points[i]).collect(),
                idx.iter().map(|&i| targets[i]).collect(),
            )
        };
        let (loss, mut grad) =
            crate::diffnet::loss_gradient(&params, &bpoints, 0, |jets| {
                let mut nll = 0.0;
                let mut adj = vec![JetAdjoint::default(); jets.len()];
                for (i, jet) in jets.iter().enumerate() {
                    let r = btargets[i] - jet.u;
                    nll += 0.5 * r * r / sd2 + log_sd + half_ln2pi;
                    adj[i].u = -r / sd2;
                    d_log_sd += 1.0 - r * r / sd2;
                }
                (nll, adj)
            })?;
        grad.push(d_log_sd);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iter,
                what: "leaf NLL".into(),
            });
        }
        if iter % 50 == 0 || iter + 1 == iters {
            // scaled to a full-dataset NLL estimate so curves are comparable
            curve.push((iter, loss * n as f64 / batch as f64));
        }
        crate::optim::adam_step(&mut adam, &mut flat, &grad, schedule.lr_at(iter)?)?;
        if flat[n_net] < floor {
            flat[n_net] = floor;
        }
    }
    params.values.copy_from_slice(&flat[..n_net]);
    Ok((
        Leaf {
            params,
            log_noise_sd: flat[n_net],
        },
        curve,
    ))
}

/// Derivative bundles and time-derivative targets read off the leaves at
/// their own measurement locations, concatenated across leaves and
/// subsampled to `subset_size`. Returns (V, u_t, provenance) where
/// provenance rows are (leaf index, sample index).
pub fn build_root_dataset(
    leaves: &[Leaf],
    datasets: &[ExperimentDataset],
    k: usize,
    subset_size: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array1<f64>, Vec<(usize, usize)>)> {
    let total: usize = datasets.iter().map(|d| d.samples.len()).sum();
    let provenance = pick_root_rows(datasets, subset_size, seed);
    let _ = total;
    root_rows(leaves, datasets, k, &provenance).map(|(v, y)| (v, y, provenance))
}

/// Choose which (leaf, sample) pairs feed the root term.
fn pick_root_rows(
    datasets: &[ExperimentDataset],
    subset_size: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        for j in 0..d.samples.len() {
            all.push((i, j));
        }
    }
    if all.len() <= subset_size {
        return all;
    }
    let mut rng = rng_from_seed(seed);
    sample_without_replacement(&mut rng, all.len(), subset_size)
        .into_iter()
        .map(|f| all[f])
        .collect()
}

/// Evaluate the chosen rows against the current leaves.
fn root_rows(
    leaves: &[Leaf],
    datasets: &[ExperimentDataset],
    k: usize,
    rows: &[(usize, usize)],
) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut v = Array2::<f64>::zeros((rows.len(), k + 1));
    let mut y = Array1::<f64>::zeros(rows.len());
    // group by leaf so each leaf runs one batched forward pass
    for (li, leaf) in leaves.iter().enumerate() {
        let idx: Vec<usize> = (0..rows.len()).filter(|&r| rows[r].0 == li).collect();
        if idx.is_empty() {
            continue;
        }
        let points: Vec<(f64, f64)> = idx
            .iter()
            .map(|&r| {
                let (x, t, _) = datasets[li].samples[rows[r].1];
                (x, t)
            })
            .collect();
        let jets = jet_batch(&leaf.params, &points, k)?;
        for (pos, &r) in idx.iter().enumerate() {
            let b = jets[pos].bundle();
            for d in 0..=k {
                v[[r, d]] = b[d];
            }
            y[r] = jets[pos].du_dt;
        }
    }
    Ok((v, y))
}

/// The joint objective (to be maximized): sum of leaf log-likelihoods plus
/// the root ELBO on the given subset. Returned as (total, leaf log-liks,
/// elbo) so additivity can be asserted.
pub fn joint_objective(
    model: &BhpmModel,
    datasets: &[ExperimentDataset],
    v: &Array2<f64>,
    y: &Array1<f64>,
    total_n: usize,
) -> Result<(f64, Vec<f64>, f64)> {
    let mut leaf_terms = Vec::with_capacity(model.leaves.len());
    for (leaf, d) in model.leaves.iter().zip(datasets.iter()) {
        leaf_terms.push(-leaf_nll(leaf, &d.samples)?);
    }
    let elbo = crate::gproot::svgp_elbo(&v.view(), &y.view(), &model.inducing, &model.hyper, total_n)?;
    let total = leaf_terms.iter().sum::<f64>() + elbo;
    Ok((total, leaf_terms, elbo))
}

/// Flat parameter layout for the joint stage.
struct JointLayout {
    n_net: usize,
    n_leaves: usize,
    dim: usize,
    n_u: usize,
}

impl JointLayout {
    fn leaf_off(&self, i: usize) -> usize {
        i * (self.n_net + 1)
    }
    fn hyper_off(&self) -> usize {
        self.n_leaves * (self.n_net + 1)
    }
    fn vu_off(&self) -> usize {
        self.hyper_off() + 2 * self.dim + 3
    }
    fn qmean_off(&self) -> usize {
        self.vu_off() + self.n_u * self.dim
    }
    fn qchol_off(&self) -> usize {
        self.qmean_off() + self.n_u
    }
    fn len(&self) -> usize {
        self.qchol_off() + self.n_u * (self.n_u + 1) / 2
    }
}

fn pack_qchol(l: &Array2<f64>, out: &mut [f64]) {
    let m = l.nrows();
    let mut p = 0;
    for i in 0..m {
        for j in 0..i {
            out[p] = l[[i, j]];
            p += 1;
        }
        // log-diagonal keeps the factor positive under unconstrained steps
        out[p] = l[[i, i]].ln();
        p += 1;
    }
}

fn unpack_qchol(flat: &[f64], m: usize) -> Array2<f64> {
    let mut l = Array2::<f64>::zeros((m, m));
    let mut p = 0;
    for i in 0..m {
        for j in 0..i {
            l[[i, j]] = flat[p];
            p += 1;
        }
        l[[i, i]] = flat[p].exp();
        p += 1;
    }
    l
}

/// Full three-stage training protocol.
pub fn train(
    datasets: &[ExperimentDataset],
    k: usize,
    config: &TrainConfig,
) -> Result<(BhpmModel, TrainLog)> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::Invalid("train: no datasets".into()));
    }
    let arch = config.architecture()?;
    let mut log = TrainLog::default();

    // ---- stage 1: independent leaves ----
    let mut leaves = Vec::with_capacity(datasets.len());
    for (i, d) in datasets.iter().enumerate() {
        let (leaf, curve) = train_leaf(
            &d.samples,
            arch,
            config.leaf_iters,
            config.leaf_lr,
            child_seed(config.seed, 1 + i as u64),
        )
        .map_err(|e| stage_tag("stage 1", e))?;
        log.stage1.push(curve);
        leaves.push(leaf);
    }

    // ---- stage 2: exact GP on a subsample, then sparsify ----
    let (v2, y2, _) = build_root_dataset(
        &leaves,
        datasets,
        k,
        config.root_subset,
        child_seed(config.seed, 100),
    )?;
    let n2 = y2.len();
    let y_mean = y2.sum() / n2 as f64;
    let y_std = (y2.iter().map(|t| (t - y_mean) * (t - y_mean)).sum::<f64>() / n2 as f64)
        .sqrt()
        .max(1e-8);
    let noise_floor = (1e-4 * y_std).ln();
    let mut hyper = GpHyperparams::init(k + 1, y_std);
    hyper.mean_bias = y_mean;
    // lengthscales at the per-dimension input scale
    for d in 0..=k {
        let col = v2.column(d);
        let m = col.sum() / n2 as f64;
        let s = (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n2 as f64).sqrt();
        hyper.log_lengthscales[d] = s.max(1e-3).ln();
    }
    let mut flat = hyper.to_flat();
    let mut adam = AdamState::new(flat.len());
    for iter in 0..config.root_iters {
        let h = GpHyperparams::from_flat(k + 1, &flat)?;
        let (raw_lml, mut g) =
            exact_lml_grad(&v2.view(), &y2.view(), &h).map_err(|e| stage_tag("stage 2", e))?;
        let (penalty, dpen) = mean_ridge(&h);
        let lml = raw_lml - penalty;
        for (d, dp) in dpen.iter().enumerate() {
            g[1 + (k + 1) + d] -= dp;
        }
        if !lml.is_finite() {
            return Err(Error::Diverged {
                iter,
                what: "stage 2 exact LML".into(),
            });
        }
        if iter % 10 == 0 || iter + 1 == config.root_iters {
            log.stage2.push((iter, lml));
        }
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        crate::optim::adam_step(&mut adam, &mut flat, &neg, config.root_lr)?;
        let off = flat.len() - 1;
        if flat[off] < noise_floor {
            flat[off] = noise_floor;
        }
    }
    hyper = GpHyperparams::from_flat(k + 1, &flat)?;

    // sparsification: k-means centers + the exact GP's joint posterior there
    let n_u = config.n_u.min(n2);
    let v_u = kmeans_init(&v2.view(), n_u, child_seed(config.seed, 101))?;
    let inducing = exact_posterior_state(&hyper, &v2, &y2, &v_u)?;
    let mut model = BhpmModel {
        leaves,
        hyper,
        inducing,
        k,
    };

    // ---- stage 3: joint ascent ----
    joint_stage(&mut model, datasets, config, &mut log.stage3)?;
    Ok((model, log))
}

/// Gaussian prior standard deviation on the linear-mean coefficients.
/// Hyperparameter optimization is MAP under w_d ~ N(0, MEAN_PRIOR_SD²):
/// the mean function dominates GP extrapolation outside the training
/// bundle support, where the data leave it nearly unidentified, so an
/// unshrunk fit can send out-of-distribution predictions arbitrarily far.
const MEAN_PRIOR_SD: f64 = 0.5;

fn mean_ridge(hyper: &GpHyperparams) -> (f64, Vec<f64>) {
    let var = MEAN_PRIOR_SD * MEAN_PRIOR_SD;
    let penalty = hyper.mean_weights.iter().map(|w| 0.5 * w * w / var).sum();
    let d = hyper.mean_weights.iter().map(|w| w / var).collect();
    (penalty, d)
}

fn stage_tag(stage: &str, e: Error) -> Error {
    match e {
        Error::Diverged { iter, what } => Error::Diverged {
            iter,
            what: format!("{stage}: {what}"),
        },
        other => Error::Numerical(format!("{stage}: {other}")),
    }
}

/// Exact-GP joint posterior at probe inputs, packaged as an inducing state.
pub fn exact_posterior_state(
    hyper: &GpHyperparams,
    v_train: &Array2<f64>,
    y_train: &Array1<f64>,
    v_u: &Array2<f64>,
) -> Result<InducingState> {
    let n = v_train.nrows();
    let mut kn = hyper.kernel_cross(&v_train.view(), &v_train.view());
    let noise = hyper.noise_sd().powi(2);
    for i in 0..n {
        kn[[i, i]] += noise;
    }
    let l = cholesky_jittered(&kn.view(), GP_JITTER)?;
    let r = y_train - &hyper.mean_vec(&v_train.view());
    let alpha = chol_solve_vec(&l.view(), &r.view());
    let k_tu = hyper.kernel_cross(&v_train.view(), &v_u.view());
    let q_mean = &hyper.mean_vec(&v_u.view()) + &k_tu.t().dot(&alpha);
    let w = solve_lower_mat(&l.view(), &k_tu.view());
    let k_uu = hyper.kernel_cross(&v_u.view(), &v_u.view());
    let cov = &k_uu - &w.t().dot(&w);
    let q_chol = cholesky_jittered(&cov.view(), GP_JITTER)?;
    Ok(InducingState {
        v_u: v_u.clone(),
        q_mean,
        q_chol,
    })
}

fn joint_stage(
    model: &mut BhpmModel,
    datasets: &[ExperimentDataset],
    config: &TrainConfig,
    curve: &mut Vec<(usize, f64)>,
) -> Result<()> {
    let k = model.k;
    let dim = k + 1;
    let n_u = model.inducing.n_inducing();
    let n_leaves = model.leaves.len();
    let n_net = model.leaves[0].params.values.len();
    let total_n: usize = datasets.iter().map(|d| d.samples.len()).sum();
    let layout = JointLayout {
        n_net,
        n_leaves,
        dim,
        n_u,
    };

    let mut flat = vec![0.0; layout.len()];
    for (i, leaf) in model.leaves.iter().enumerate() {
        let off = layout.leaf_off(i);
        flat[off..off + n_net].copy_from_slice(&leaf.params.values);
        flat[off + n_net] = leaf.log_noise_sd;
    }
    flat[layout.hyper_off()..layout.vu_off()].copy_from_slice(&model.hyper.to_flat());
    for (p, &x) in model.inducing.v_u.iter().enumerate() {
        flat[layout.vu_off() + p] = x;
    }
    for (p, &x) in model.inducing.q_mean.iter().enumerate() {
        flat[layout.qmean_off() + p] = x;
    }
    pack_qchol(&model.inducing.q_chol, &mut flat[layout.qchol_off()..]);

    // noise floors from the data scales seen at initialization
    let u_scales: Vec<f64> = datasets
        .iter()
        .map(|d| {
            let n = d.samples.len() as f64;
            let m = d.samples.iter().map(|s| s.2).sum::<f64>() / n;
            (d.samples.iter().map(|s| (s.2 - m) * (s.2 - m)).sum::<f64>() / n)
                .sqrt()
                .max(1e-8)
        })
        .collect();
    let sigma_f_floor = model.hyper.log_noise_sd.min((1e-4f64).ln());

    let points: Vec<Vec<(f64, f64)>> = datasets
        .iter()
        .map(|d| d.samples.iter().map(|&(x, t, _)| (x, t)).collect())
        .collect();
    let targets: Vec<Vec<f64>> = datasets
        .iter()
        .map(|d| d.samples.iter().map(|&(_, _, u)| u).collect())
        .collect();

    let mut adam = AdamState::new(flat.len());
    let mut rows: Vec<(usize, usize)> = Vec::new();
    let half_ln2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();

    for iter in 0..config.joint_iters {
        if iter % 100 == 0 {
            rows = pick_root_rows(
                datasets,
                config.root_subset,
                child_seed(config.seed, 200 + (iter / 100) as u64),
            );
        }
        // unpack
        let mut leaves: Vec<Leaf> = Vec::with_capacity(n_leaves);
        for i in 0..n_leaves {
            let off = layout.leaf_off(i);
            leaves.push(Leaf {
                params: NetworkParams::from_values(
                    model.leaves[0].params.arch,
                    flat[off..off + n_net].to_vec(),
                )?,
                log_noise_sd: flat[off + n_net],
            });
        }
        let hyper = GpHyperparams::from_flat(dim, &flat[layout.hyper_off()..layout.vu_off()])?;
        let v_u = Array2::from_shape_vec(
            (n_u, dim),
            flat[layout.vu_off()..layout.qmean_off()].to_vec(),
        )
        .unwrap();
        let q_mean = Array1::from_vec(flat[layout.qmean_off()..layout.qchol_off()].to_vec());
        let q_chol = unpack_qchol(&flat[layout.qchol_off()..], n_u);
        let state = InducingState {
            v_u,
            q_mean,
            q_chol,
        };

        // forward jets on the root subset, grouped per leaf
        let mut v_batch = Array2::<f64>::zeros((rows.len(), dim));
        let mut y_batch = Array1::<f64>::zeros(rows.len());
        let mut leaf_rows: Vec<Vec<usize>> = vec![Vec::new(); n_leaves];
        for (r, &(li, _)) in rows.iter().enumerate() {
            leaf_rows[li].push(r);
        }
        let mut tapes = Vec::with_capacity(n_leaves);
        for li in 0..n_leaves {
            let pts: Vec<(f64, f64)> = leaf_rows[li]
                .iter()
                .map(|&r| points[li][rows[r].1])
                .collect();
            let (jets, tape) = forward_tape(&leaves[li].params, &pts, k)?;
            for (pos, &r) in leaf_rows[li].iter().enumerate() {
                let b = jets[pos].bundle();
                for d in 0..dim {
                    v_batch[[r, d]] = b[d];
                }
                y_batch[r] = jets[pos].du_dt;
            }
            tapes.push(tape);
        }

        let eg = svgp_elbo_grads(&v_batch.view(), &y_batch.view(), &state, &hyper, total_n)?;

        let (penalty, dpen) = mean_ridge(&hyper);
        let mut objective = eg.elbo - penalty;
        let mut grad = vec![0.0; flat.len()];

        // root parameter gradients (minimize -objective)
        for (p, g) in eg.d_hyper.iter().enumerate() {
            grad[layout.hyper_off() + p] = -g;
        }
        for (d, dp) in dpen.iter().enumerate() {
            grad[layout.hyper_off() + 1 + dim + d] += dp;
        }
        for (p, g) in eg.d_v_u.iter().enumerate() {
            grad[layout.vu_off() + p] = -g;
        }
        for (p, g) in eg.d_q_mean.iter().enumerate() {
            grad[layout.qmean_off() + p] = -g;
        }
        {
            let out = &mut grad[layout.qchol_off()..];
            let mut p = 0;
            for i in 0..n_u {
                for j in 0..i {
                    out[p] = -eg.d_q_chol[[i, j]];
                    p += 1;
                }
                out[p] = -eg.d_q_chol[[i, i]] * state.q_chol[[i, i]];
                p += 1;
            }
        }

        // leaf gradients: NLL over all points + ELBO coupling on subset jets
        for li in 0..n_leaves {
            let leaf = &leaves[li];
            let sd2 = (2.0 * leaf.log_noise_sd).exp();
            let mut d_log_sd = 0.0;
            let tl = &targets[li];
            let (nll, nll_grad) = crate::diffnet::loss_gradient(
                &leaf.params,
                &points[li],
                0,
                |jets| {
                    let mut nll = 0.0;
                    let mut adj = vec![JetAdjoint::default(); jets.len()];
                    for (i, jet) in jets.iter().enumerate() {
                        let r = tl[i] - jet.u;
                        nll += 0.5 * r * r / sd2 + leaf.log_noise_sd + half_ln2pi;
                        adj[i].u = -r / sd2;
                        d_log_sd += 1.0 - r * r / sd2;
                    }
                    (nll, adj)
                },
            )?;
            objective -= nll;
            // ELBO adjoints into this leaf's subset jets
            let mut adjoints = vec![JetAdjoint::default(); leaf_rows[li].len()];
            for (pos, &r) in leaf_rows[li].iter().enumerate() {
                adjoints[pos].u = -eg.d_v[[r, 0]];
                for d in 1..dim {
                    adjoints[pos].du_dx[d - 1] = -eg.d_v[[r, d]];
                }
                adjoints[pos].du_dt = -eg.d_y[r];
            }
            let elbo_grad = backward(&leaf.params, &tapes[li], &adjoints)?;
            let off = layout.leaf_off(li);
            for p in 0..n_net {
                grad[off + p] = nll_grad[p] + elbo_grad[p];
            }
            grad[off + n_net] = d_log_sd;
        }

        if !objective.is_finite() {
            return Err(Error::Diverged {
                iter,
                what: "stage 3 joint objective".into(),
            });
        }
        if iter % 50 == 0 || iter + 1 == config.joint_iters {
            curve.push((iter, objective));
        }
        crate::optim::adam_step(&mut adam, &mut flat, &grad, config.joint_lr)?;
        // floors
        for li in 0..n_leaves {
            let off = layout.leaf_off(li) + n_net;
            let floor = (1e-4 * u_scales[li]).ln();
            if flat[off] < floor {
                flat[off] = floor;
            }
        }
        let noff = layout.vu_off() - 1;
        if flat[noff] < sigma_f_floor {
            flat[noff] = sigma_f_floor;
        }
    }

    // write back
    for i in 0..n_leaves {
        let off = layout.leaf_off(i);
        model.leaves[i]
            .params
            .values
            .copy_from_slice(&flat[off..off + n_net]);
        model.leaves[i].log_noise_sd = flat[off + n_net];
    }
    model.hyper = GpHyperparams::from_flat(dim, &flat[layout.hyper_off()..layout.vu_off()])?;
    model.inducing = InducingState {
        v_u: Array2::from_shape_vec(
            (n_u, dim),
            flat[layout.vu_off()..layout.qmean_off()].to_vec(),
        )
        .unwrap(),
        q_mean: Array1::from_vec(flat[layout.qmean_off()..layout.qchol_off()].to_vec()),
        q_chol: unpack_qchol(&flat[layout.qchol_off()..], n_u),
    };
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    k: usize,
    n_leaves: usize,
    hidden_layers: usize,
    hidden_units: usize,
    n_u: usize,
    /// hyperparameters as decimal strings (shortest round-trip repr)
    log_amplitude: String,
    log_lengthscales: Vec<String>,
    mean_weights: Vec<String>,
    mean_bias: String,
    log_noise_sd: String,
    leaf_log_noise_sd: Vec<String>,
}

fn f2s(x: f64) -> String {
    // Rust's float Display is the shortest string that round-trips exactly
    format!("{x}")
}

fn s2f(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| Error::Format(format!("bad float literal {s:?}: {e}")))
}

/// Write a model directory: JSON manifest plus float64 sidecars for the
/// leaf parameters and the GP state. Round-trips bit-exactly.
pub fn save_model(model: &BhpmModel, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    // a model may carry no leaves (e.g. a hand-specified operator prior);
    // record a valid architecture regardless
    let (hidden_layers, hidden_units) = model
        .leaves
        .first()
        .map(|l| (l.params.arch.hidden_layers, l.params.arch.hidden_units))
        .unwrap_or((1, 1));
    let manifest = ModelManifest {
        k: model.k,
        n_leaves: model.leaves.len(),
        hidden_layers,
        hidden_units,
        n_u: model.inducing.n_inducing(),
        log_amplitude: f2s(model.hyper.log_amplitude),
        log_lengthscales: model.hyper.log_lengthscales.iter().map(|&x| f2s(x)).collect(),
        mean_weights: model.hyper.mean_weights.iter().map(|&x| f2s(x)).collect(),
        mean_bias: f2s(model.hyper.mean_bias),
        log_noise_sd: f2s(model.hyper.log_noise_sd),
        leaf_log_noise_sd: model.leaves.iter().map(|l| f2s(l.log_noise_sd)).collect(),
    };
    std::fs::write(
        dir.join("model.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for (i, leaf) in model.leaves.iter().enumerate() {
        crate::sidecar::write_f64(
            &dir.join(format!("leaf_{i}.f64")),
            &[leaf.params.values.len()],
            &leaf.params.values,
        )?;
    }
    crate::sidecar::write_array2(&dir.join("v_u.f64"), &model.inducing.v_u.view())?;
    crate::sidecar::write_array1(&dir.join("q_mean.f64"), &model.inducing.q_mean.view())?;
    crate::sidecar::write_array2(&dir.join("q_chol.f64"), &model.inducing.q_chol.view())?;
    Ok(())
}

pub fn load_model(dir: &std::path::Path) -> Result<BhpmModel> {
    let manifest: ModelManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
    let arch = Architecture::new(2, manifest.hidden_layers, manifest.hidden_units, 1)?;
    let mut leaves = Vec::with_capacity(manifest.n_leaves);
    for i in 0..manifest.n_leaves {
        let (dims, values) = crate::sidecar::read_f64(&dir.join(format!("leaf_{i}.f64")))?;
        if dims != [arch.param_count()] {
            return Err(Error::Format(format!(
                "leaf_{i}.f64 has shape {dims:?}, expected [{}]",
                arch.param_count()
            )));
        }
        leaves.push(Leaf {
            params: NetworkParams::from_values(arch, values)?,
            log_noise_sd: s2f(&manifest.leaf_log_noise_sd[i])?,
        });
    }
    let hyper = GpHyperparams {
        log_amplitude: s2f(&manifest.log_amplitude)?,
        log_lengthscales: manifest
            .log_lengthscales
            .iter()
            .map(|s| s2f(s))
            .collect::<Result<_>>()?,
        mean_weights: manifest
            .mean_weights
            .iter()
            .map(|s| s2f(s))
            .collect::<Result<_>>()?,
        mean_bias: s2f(&manifest.mean_bias)?,
        log_noise_sd: s2f(&manifest.log_noise_sd)?,
    };
    if hyper.dim() != manifest.k + 1 {
        return Err(Error::Format("manifest K inconsistent with lengthscales".into()));
    }
    let v_u = crate::sidecar::read_array2(&dir.join("v_u.f64"))?;
    let q_mean = crate::sidecar::read_array1(&dir.join("q_mean.f64"))?;
    let q_chol = crate::sidecar::read_array2(&dir.join("q_chol.f64"))?;
    if v_u.nrows() != manifest.n_u || v_u.ncols() != manifest.k + 1 || q_mean.len() != manifest.n_u
    {
        return Err(Error::Format("GP sidecar shapes inconsistent with manifest".into()));
    }
    Ok(BhpmModel {
        leaves,
        hyper,
        inducing: InducingState { v_u, q_mean, q_chol },
        k: manifest.k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootMetrics {
    pub rmse: f64,
    pub mnlp: f64,
}

/// Lower-median: for sorted values the element at index (n-1)/2. Matches the
/// convention that an extreme high outlier added to an odd-sized set leaves
/// the median unchanged.
pub fn median_lower(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[(v.len() - 1) / 2]
}

/// Metrics from per-point predictive means and total variances.
pub fn metrics_from_predictions(
    mu: &Array1<f64>,
    var_total: &Array1<f64>,
    targets: &Array1<f64>,
) -> RootMetrics {
    let n = targets.len();
    let mut sq = 0.0;
    let mut nlp = Vec::with_capacity(n);
    for i in 0..n {
        let r = targets[i] - mu[i];
        sq += r * r;
        let s2 = var_total[i].max(1e-300);
        nlp.push(0.5 * (2.0 * std::f64::consts::PI * s2).ln() + r * r / (2.0 * s2));
    }
    RootMetrics {
        rmse: (sq / n as f64).sqrt(),
        mnlp: median_lower(&nlp),
    }
}

/// Root accuracy on a held-out test set: RMSE of the posterior mean and the
/// median negative log predictive probability (latent variance + noise).
pub fn eval_root(model: &BhpmModel, testset: &RootTestSet) -> Result<RootMetrics> {
    let (mu, var) = svgp_predict(&model.inducing, &model.hyper, &testset.v.view())?;
    let noise = model.hyper.noise_sd().powi(2);
    let var_total = var.mapv(|s| s + noise);
    Ok(metrics_from_predictions(&mu, &var_total, &testset.u_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Architecture;
    use ndarray::array;

    /// u(x,t) = sin(x) as a 2-1-1 network.
    fn sin_x_leaf() -> Leaf {
        let arch = Architecture::new(2, 1, 1, 1).unwrap();
        let mut p = NetworkParams::zeros(arch);
        p.values[0] = 1.0;
        p.values[1] = 0.0;
        p.values[2] = 1.0;
        Leaf {
            params: p,
            log_noise_sd: 0.0,
        }
    }

    fn toy_dataset(samples: Vec<(f64, f64, f64)>) -> ExperimentDataset {
        let n = samples.len();
        ExperimentDataset {
            samples,
            indices: vec![(0, 0); n],
            noise_sd: 0.0,
            domain: crate::specgen::Domain::burgers(),
            seed: 0,
        }
    }

    #[test]
    fn leaf_nll_closed_forms() {
        let leaf = sin_x_leaf();
        // perfect fit with sigma = 1
        let xs: [f64; 4] = [0.3, -0.7, 1.2, 2.5];
        let perfect: Vec<(f64, f64, f64)> = xs.iter().map(|&x| (x, 0.5, x.sin())).collect();
        let nll = leaf_nll(&leaf, &perfect).unwrap();
        let want = 4.0 * 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((nll - want).abs() < 1e-12);
        // known residuals
        let shifted: Vec<(f64, f64, f64)> =
            xs.iter().map(|&x| (x, 0.5, x.sin() + 0.3)).collect();
        let nll2 = leaf_nll(&leaf, &shifted).unwrap();
        assert!((nll2 - (want + 0.5 * 4.0 * 0.09)).abs() < 1e-12);
        // additivity under duplication
        let mut doubled = shifted.clone();
        doubled.extend_from_slice(&shifted);
        let nll3 = leaf_nll(&leaf, &doubled).unwrap();
        assert!((nll3 - 2.0 * nll2).abs() < 1e-10);
    }

    #[test]
    fn root_dataset_analytic_row() {
        let leaf = sin_x_leaf();
        let d = toy_dataset(vec![(0.0, 0.0, 0.0)]);
        let (v, y, prov) = build_root_dataset(&[leaf], &[d], 2, 10, 0).unwrap();
        assert_eq!(prov, vec![(0, 0)]);
        // u = sin x: at x=0 the bundle is (0, 1, 0) and u_t = 0
        assert!((v[[0, 0]] - 0.0).abs() < 1e-15);
        assert!((v[[0, 1]] - 1.0).abs() < 1e-15);
        assert!((v[[0, 2]] - 0.0).abs() < 1e-15);
        assert!(y[0].abs() < 1e-15);
    }

    #[test]
    fn root_dataset_subsampling() {
        let leaf = sin_x_leaf();
        let samples: Vec<(f64, f64, f64)> =
            (0..20).map(|i| (i as f64 * 0.1, 0.0, 0.0)).collect();
        let d = toy_dataset(samples);
        let (v, _, prov) = build_root_dataset(&[leaf.clone()], &[d.clone()], 2, 100, 7).unwrap();
        assert_eq!(v.nrows(), 20);
        assert_eq!(prov.len(), 20);
        let (v5a, _, p5a) = build_root_dataset(&[leaf.clone()], &[d.clone()], 2, 5, 7).unwrap();
        let (v5b, _, p5b) = build_root_dataset(&[leaf], &[d], 2, 5, 7).unwrap();
        assert_eq!(v5a, v5b);
        assert_eq!(p5a, p5b);
        assert_eq!(v5a.nrows(), 5);
    }

    #[test]
    fn metrics_closed_forms() {
        // perfect predictor, total variance 1
        let t = array![0.2, -0.5, 1.0];
        let m = metrics_from_predictions(&t.clone(), &array![1.0, 1.0, 1.0], &t);
        assert!(m.rmse < 1e-15);
        assert!((m.mnlp - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        // constant-zero predictor on +-1 targets
        let t2 = array![1.0, -1.0, 1.0, -1.0];
        let m2 = metrics_from_predictions(
            &Array1::zeros(4),
            &array![1.0, 1.0, 1.0, 1.0],
            &t2,
        );
        assert!((m2.rmse - 1.0).abs() < 1e-15);
    }

    #[test]
    fn median_outlier_invariance() {
        let odd = [0.1, 0.4, 0.2, 0.9, 0.3];
        let med = median_lower(&odd);
        assert_eq!(med, 0.3);
        let mut with_outlier = odd.to_vec();
        with_outlier.push(1e9);
        assert_eq!(median_lower(&with_outlier), med);
    }

    #[test]
    fn train_leaf_fits_clean_sine() {
        // clean u = sin(x) on scattered points
        let mut rng = rng_from_seed(3);
        let samples: Vec<(f64, f64, f64)> = (0..512)
            .map(|_| {
                let x = (crate::rng::standard_normal(&mut rng)) * 2.0;
                let t = crate::rng::standard_normal(&mut rng).abs();
                (x, t, x.sin())
            })
            .collect();
        let arch = Architecture::new(2, 3, 32, 1).unwrap();
        let (leaf, curve) = train_leaf(&samples, arch, 3000, 1e-3, 0).unwrap();
        assert!(curve.last().unwrap().1 <= curve.first().unwrap().1);
        // held-out grid
        let probes: Vec<(f64, f64)> = (0..100)
            .map(|i| (-2.0 + 4.0 * i as f64 / 99.0, 0.5))
            .collect();
        let pred = crate::diffnet::evaluate_batch(&leaf.params, &probes);
        let rmse = (probes
            .iter()
            .zip(pred.iter())
            .map(|(&(x, _), &p)| (x.sin() - p) * (x.sin() - p))
            .sum::<f64>()
            / 100.0)
            .sqrt();
        assert!(rmse < 1e-2, "held-out rmse {rmse}");
    }

    #[test]
    fn train_leaf_recovers_noise_level() {
        let mut rng = rng_from_seed(4);
        let samples: Vec<(f64, f64, f64)> = (0..1024)
            .map(|_| {
                let x = crate::rng::standard_normal(&mut rng) * 2.0;
                let t = crate::rng::standard_normal(&mut rng).abs();
                (x, t, x.sin() + 0.1 * crate::rng::standard_normal(&mut rng))
            })
            .collect();
        let arch = Architecture::new(2, 3, 32, 1).unwrap();
        let (leaf, _) = train_leaf(&samples, arch, 4000, 1e-3, 0).unwrap();
        let sd = leaf.log_noise_sd.exp();
        assert!((0.05..=0.2).contains(&sd), "learned sigma_u = {sd}");
    }

    #[test]
    fn model_round_trips_bit_exact() {
        let mut rng = rng_from_seed(9);
        let arch = Architecture::new(2, 2, 8, 1).unwrap();
        let mut p = init_network(arch, 11);
        for v in p.values.iter_mut() {
            *v += 0.01 * crate::rng::standard_normal(&mut rng);
        }
        let hyper = GpHyperparams {
            log_amplitude: -0.123456789,
            log_lengthscales: vec![0.1, -0.9, 0.33],
            mean_weights: vec![1e-17, -2.5, 0.0],
            mean_bias: f64::MIN_POSITIVE,
            log_noise_sd: -3.3,
        };
        let v_u = Array2::from_shape_vec((4, 3), crate::rng::normal_vec(&mut rng, 12)).unwrap();
        let inducing = InducingState {
            v_u: v_u.clone(),
            q_mean: Array1::from_vec(crate::rng::normal_vec(&mut rng, 4)),
            q_chol: cholesky_jittered(
                &hyper.kernel_cross(&v_u.view(), &v_u.view()).view(),
                GP_JITTER,
            )
            .unwrap(),
        };
        let model = BhpmModel {
            leaves: vec![Leaf {
                params: p,
                log_noise_sd: -2.718281828,
            }],
            hyper,
            inducing,
            k: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(model.leaves[0].params.values, back.leaves[0].params.values);
        assert_eq!(
            model.leaves[0].log_noise_sd.to_bits(),
            back.leaves[0].log_noise_sd.to_bits()
        );
        assert_eq!(model.hyper, back.hyper);
        assert_eq!(model.inducing.v_u, back.inducing.v_u);
        assert_eq!(model.inducing.q_mean, back.inducing.q_mean);
        assert_eq!(model.inducing.q_chol, back.inducing.q_chol);
    }

    #[test]
    fn joint_objective_is_additive() {
        let leaf = sin_x_leaf();
        let d = toy_dataset(vec![(0.1, 0.2, 0.05), (0.5, 0.1, 0.4)]);
        let hyper = GpHyperparams::init(3, 1.0);
        let v_u = array![[0.0, 1.0, 0.0], [0.5, 0.5, 0.2]];
        let inducing = InducingState {
            v_u: v_u.clone(),
            q_mean: hyper.mean_vec(&v_u.view()),
            q_chol: cholesky_jittered(
                &hyper.kernel_cross(&v_u.view(), &v_u.view()).view(),
                GP_JITTER,
            )
            .unwrap(),
        };
        let model = BhpmModel {
            leaves: vec![leaf],
            hyper,
            inducing,
            k: 2,
        };
        let (v, y, _) = build_root_dataset(&model.leaves, &[d.clone()], 2, 10, 0).unwrap();
        let (total, leaf_terms, elbo) = joint_objective(&model, &[d], &v, &y, 2).unwrap();
        assert!((total - (leaf_terms.iter().sum::<f64>() + elbo)).abs() < 1e-10);
    }
}
