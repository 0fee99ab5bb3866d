//! Physics-informed solver: given a deterministic operator f(v) and an
//! initial-boundary-value problem on a periodic strip, fit a network so the
//! domain residual f(v(x,t)) - u_t and the boundary/initial residuals vanish
//! in mean square over fresh uniform collocation batches.

use crate::diffnet::{forward_tape, init_network, Architecture, JetAdjoint, NetworkParams};
use crate::operator::Operator;
use crate::optim::{adam_step, AdamState, CosineSchedule};
use crate::rng::{child_seed, rng_from_seed};
use crate::specgen::Domain;
use crate::{Error, Result};
use rand::Rng;

/// Initial-boundary-value problem: periodic matching of the first K spatial
/// derivatives plus an initial profile. K must equal the operator's highest
/// derivative order (input dim - 1).
pub struct Ibvp<'a> {
    pub domain: Domain,
    pub k: usize,
    pub u0: &'a (dyn Fn(f64) -> f64 + Sync),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PinnConfig {
    pub n_domain: usize,
    pub n_boundary: usize,
    pub iters: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub seed: u64,
}

impl Default for PinnConfig {
    fn default() -> Self {
        Self {
            n_domain: 4096,
            n_boundary: 256,
            iters: 50_000,
            lr_start: 1e-3,
            lr_end: 1e-4,
            hidden_layers: 6,
            hidden_units: 64,
            seed: 0,
        }
    }
}

impl PinnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_domain == 0 || self.n_boundary == 0 || self.iters == 0 {
            return Err(Error::Invalid("pinn config: counts must be positive".into()));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Invalid("pinn config: need lr_start >= lr_end > 0".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(2, self.hidden_layers, self.hidden_units, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Interior,
    BoundaryPair,
    Initial,
}

/// Uniform collocation points. `BoundaryPair` returns 2n points: n at
/// x = -l_x/2 followed by their partners at x = +l_x/2 with the same t.
pub fn sample_collocation(domain: &Domain, n: usize, region: Region, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = rng_from_seed(seed);
    let half = domain.l_x / 2.0;
    match region {
        Region::Interior => (0..n)
            .map(|_| {
                (
                    rng.gen_range(-half..half),
                    rng.gen_range(0.0..domain.l_t),
                )
            })
            .collect(),
        Region::BoundaryPair => {
            let ts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..domain.l_t)).collect();
            let mut pts: Vec<(f64, f64)> = ts.iter().map(|&t| (-half, t)).collect();
            pts.extend(ts.iter().map(|&t| (half, t)));
            pts
        }
        Region::Initial => (0..n).map(|_| (rng.gen_range(-half..half), 0.0)).collect(),
    }
}

/// One step's collocation points.
#[derive(Debug, Clone)]
pub struct Batches {
    pub interior: Vec<(f64, f64)>,
    pub boundary: Vec<(f64, f64)>,
    pub initial: Vec<(f64, f64)>,
}

pub fn sample_batches(domain: &Domain, cfg: &PinnConfig, seed: u64) -> Batches {
    Batches {
        interior: sample_collocation(domain, cfg.n_domain, Region::Interior, child_seed(seed, 0)),
        boundary: sample_collocation(
            domain,
            cfg.n_boundary,
            Region::BoundaryPair,
            child_seed(seed, 1),
        ),
        initial: sample_collocation(domain, cfg.n_boundary, Region::Initial, child_seed(seed, 2)),
    }
}

/// Eq.-style composite loss: mean squared domain residual plus per-condition
/// mean squared boundary residuals (periodic matching of derivatives
/// 0..K-1, and the initial profile), all with weight 1.
pub fn pinn_loss(
    params: &NetworkParams,
    op: &dyn Operator,
    ibvp: &Ibvp,
    batches: &Batches,
) -> Result<f64> {
    let (loss, _) = loss_and_grad(params, op, ibvp, batches, false)?;
    Ok(loss)
}

fn loss_and_grad(
    params: &NetworkParams,
    op: &dyn Operator,
    ibvp: &Ibvp,
    batches: &Batches,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let k = ibvp.k;
    if op.input_dim() != k + 1 {
        return Err(Error::Invalid(format!(
            "operator takes {} inputs but the problem order is {k}",
            op.input_dim()
        )));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; params.values.len()];

    // domain term
    {
        let n = batches.interior.len();
        let (jets, tape) = forward_tape(params, &batches.interior, k)?;
        let mut adj = vec![JetAdjoint::default(); n];
        let mut df = vec![0.0; k + 1];
        for (i, jet) in jets.iter().enumerate() {
            let v = jet.bundle();
            let (f, rho) = if want_grad {
                let f = op.eval_grad(&v, &mut df);
                (f, f - jet.du_dt)
            } else {
                let f = op.eval(&v);
                (f, f - jet.du_dt)
            };
            let _ = f;
            total += rho * rho / n as f64;
            if want_grad {
                let w = 2.0 * rho / n as f64;
                adj[i].u = w * df[0];
                for d in 1..=k {
                    adj[i].du_dx[d - 1] = w * df[d];
                }
                adj[i].du_dt = -w;
            }
        }
        if want_grad {
            let g = crate::diffnet::backward(params, &tape, &adj)?;
            for (a, b) in grad.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
    }

    // periodic boundary terms, one condition per derivative order 0..K-1
    {
        let n2 = batches.boundary.len();
        let n = n2 / 2;
        let order = k.saturating_sub(1);
        let (jets, tape) = forward_tape(params, &batches.boundary, order)?;
        let mut adj = vec![JetAdjoint::default(); n2];
        for cond in 0..k {
            for i in 0..n {
                let (dl, dr) = if cond == 0 {
                    (jets[i].u, jets[n + i].u)
                } else {
                    (jets[i].du_dx[cond - 1], jets[n + i].du_dx[cond - 1])
                };
                let b = dl - dr;
                total += b * b / n as f64;
                if want_grad {
                    let w = 2.0 * b / n as f64;
                    if cond == 0 {
                        adj[i].u += w;
                        adj[n + i].u -= w;
                    } else {
                        adj[i].du_dx[cond - 1] += w;
                        adj[n + i].du_dx[cond - 1] -= w;
                    }
                }
            }
        }
        if want_grad {
            let g = crate::diffnet::backward(params, &tape, &adj)?;
            for (a, b) in grad.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
    }

    // initial condition
    {
        let n = batches.initial.len();
        let (jets, tape) = forward_tape(params, &batches.initial, 0)?;
        let mut adj = vec![JetAdjoint::default(); n];
        for (i, jet) in jets.iter().enumerate() {
            let b = jet.u - (ibvp.u0)(batches.initial[i].0);
            total += b * b / n as f64;
            if want_grad {
                adj[i].u = 2.0 * b / n as f64;
            }
        }
        if want_grad {
            let g = crate::diffnet::backward(params, &tape, &adj)?;
            for (a, b) in grad.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
    }

    Ok((total, grad))
}

/// Result of a solve: the solution network and its final composite loss.
pub struct PinnSolution {
    pub params: NetworkParams,
    pub final_loss: f64,
    pub curve: Vec<(usize, f64)>,
}

/// Adam with a cosine learning-rate schedule over fresh collocation batches.
/// `warm_start` reuses a previous solution's parameters (the optimizer state
/// starts fresh either way).
pub fn pinn_solve(
    op: &dyn Operator,
    ibvp: &Ibvp,
    cfg: &PinnConfig,
    warm_start: Option<&NetworkParams>,
) -> Result<PinnSolution> {
    cfg.validate()?;
    let arch = cfg.architecture()?;
    let mut params = match warm_start {
        Some(p) => {
            if p.arch != arch {
                return Err(Error::Invalid("warm start has a different architecture".into()));
            }
            p.clone()
        }
        None => init_network(arch, child_seed(cfg.seed, u64::MAX)),
    };
    let schedule = CosineSchedule::new(cfg.lr_start, cfg.lr_end, cfg.iters)?;
    let mut adam = AdamState::new(params.values.len());
    let mut curve = Vec::new();
    let mut loss = f64::NAN;
    for iter in 0..cfg.iters {
        let batches = sample_batches(&ibvp.domain, cfg, child_seed(cfg.seed, iter as u64));
        let (l, grad) = loss_and_grad(&params, op, ibvp, &batches, true)?;
        loss = l;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iter,
                what: format!(
                    "PINN loss (lr={:.3e}, n_domain={})",
                    schedule.lr_at(iter)?,
                    cfg.n_domain
                ),
            });
        }
        if iter % 100 == 0 || iter + 1 == cfg.iters {
            curve.push((iter, loss));
        }
        adam_step(&mut adam, &mut params.values, &grad, schedule.lr_at(iter)?)?;
    }
    Ok(PinnSolution {
        params,
        final_loss: loss,
        curve,
    })
}

/// Evaluate a solution network on an n_x-by-n_t uniform lattice over the
/// domain (x fastest). Returns (xs, ts, values row-major [t][x]).
pub fn grid_eval(
    params: &NetworkParams,
    domain: &Domain,
    n_x: usize,
    n_t: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let half = domain.l_x / 2.0;
    let xs: Vec<f64> = (0..n_x)
        .map(|i| -half + domain.l_x * i as f64 / n_x as f64)
        .collect();
    let ts: Vec<f64> = (0..n_t)
        .map(|j| domain.l_t * j as f64 / (n_t - 1).max(1) as f64)
        .collect();
    let mut pts = Vec::with_capacity(n_x * n_t);
    for &t in &ts {
        for &x in &xs {
            pts.push((x, t));
        }
    }
    let vals = crate::diffnet::evaluate_batch(params, &pts);
    (xs, ts, vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::ZeroOperator;

    fn small_cfg() -> PinnConfig {
        PinnConfig {
            n_domain: 256,
            n_boundary: 64,
            iters: 2000,
            lr_start: 1e-3,
            lr_end: 1e-4,
            hidden_layers: 3,
            hidden_units: 32,
            seed: 0,
        }
    }

    #[test]
    fn collocation_ranges_and_determinism() {
        let d = Domain::burgers();
        let half = d.l_x / 2.0;
        let a = sample_collocation(&d, 500, Region::Interior, 1);
        assert!(a
            .iter()
            .all(|&(x, t)| (-half..half).contains(&x) && (0.0..d.l_t).contains(&t)));
        let b = sample_collocation(&d, 500, Region::Interior, 1);
        assert_eq!(a, b);
        let bp = sample_collocation(&d, 100, Region::BoundaryPair, 2);
        assert_eq!(bp.len(), 200);
        for i in 0..100 {
            assert_eq!(bp[i].1, bp[100 + i].1);
            assert_eq!(bp[i].0, -half);
            assert_eq!(bp[100 + i].0, half);
        }
        let init = sample_collocation(&d, 100, Region::Initial, 3);
        assert!(init.iter().all(|&(_, t)| t == 0.0));
    }

    /// u(x,t) = sin(x + t) solves u_t = u_x exactly; the network is exact.
    #[test]
    fn loss_vanishes_on_exact_advection_solution() {
        struct Advect;
        impl Operator for Advect {
            fn input_dim(&self) -> usize {
                2
            }
            fn eval(&self, v: &[f64]) -> f64 {
                v[1]
            }
            fn eval_grad(&self, _v: &[f64], grad: &mut [f64]) -> f64 {
                grad[0] = 0.0;
                grad[1] = 1.0;
                unreachable!("not used in this test");
            }
        }
        let arch = Architecture::new(2, 1, 1, 1).unwrap();
        let mut p = NetworkParams::zeros(arch);
        p.values[0] = 1.0; // x weight
        p.values[1] = 1.0; // t weight
        p.values[2] = 1.0; // output weight
        let domain = Domain {
            l_x: 2.0 * std::f64::consts::PI,
            l_t: 1.0,
            n_s: 64,
            dt: 1e-3,
            n_save: 11,
        };
        let u0 = |x: f64| x.sin();
        let ibvp = Ibvp {
            domain,
            k: 1,
            u0: &u0,
        };
        let batches = sample_batches(&domain, &small_cfg(), 5);
        let loss = pinn_loss(&p, &Advect, &ibvp, &batches).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn constant_solution_zero_operator() {
        // f = 0, u = c, u0 = c: every residual is identically zero
        let arch = Architecture::new(2, 1, 1, 1).unwrap();
        let mut p = NetworkParams::zeros(arch);
        // all weights zero; output bias c
        let c = 0.7;
        *p.values.last_mut().unwrap() = c;
        let domain = Domain::burgers();
        let u0 = move |_x: f64| c;
        let ibvp = Ibvp {
            domain,
            k: 2,
            u0: &u0,
        };
        let batches = sample_batches(&domain, &small_cfg(), 6);
        let loss = pinn_loss(&p, &ZeroOperator(3), &ibvp, &batches).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_invariant_under_batch_duplication() {
        let arch = Architecture::new(2, 2, 8, 1).unwrap();
        let p = init_network(arch, 3);
        let domain = Domain::burgers();
        let u0 = |x: f64| (2.0 * std::f64::consts::PI * x / 16.0).sin();
        let ibvp = Ibvp {
            domain,
            k: 2,
            u0: &u0,
        };
        let mut batches = sample_batches(&domain, &small_cfg(), 7);
        let l1 = pinn_loss(&p, &ZeroOperator(3), &ibvp, &batches).unwrap();
        batches.interior.extend(batches.interior.clone());
        batches.initial.extend(batches.initial.clone());
        let n = batches.boundary.len() / 2;
        let (left, right) = batches.boundary.split_at(n);
        let mut doubled = left.to_vec();
        doubled.extend_from_slice(left);
        doubled.extend_from_slice(right);
        doubled.extend_from_slice(right);
        batches.boundary = doubled;
        let l2 = pinn_loss(&p, &ZeroOperator(3), &ibvp, &batches).unwrap();
        assert!((l1 - l2).abs() < 1e-12 * l1.max(1.0));
    }

    #[test]
    fn gradient_matches_fd_on_composite_loss() {
        let cfg = small_cfg();
        let arch = Architecture::new(2, 2, 6, 1).unwrap();
        let p = init_network(arch, 8);
        let domain = Domain::burgers();
        let u0 = |x: f64| (2.0 * std::f64::consts::PI * x / 16.0).sin();
        let ibvp = Ibvp {
            domain,
            k: 2,
            u0: &u0,
        };
        let op = crate::operator::ClosedForm::Heat;
        let batches = Batches {
            interior: sample_collocation(&domain, 32, Region::Interior, 1),
            boundary: sample_collocation(&domain, 8, Region::BoundaryPair, 2),
            initial: sample_collocation(&domain, 8, Region::Initial, 3),
        };
        let _ = cfg;
        let (_, grad) = loss_and_grad(&p, &op, &ibvp, &batches, true).unwrap();
        let mut rng = rng_from_seed(9);
        let h = 1e-5;
        for _ in 0..15 {
            let i = rng.gen_range(0..p.values.len());
            let mut pp = p.clone();
            pp.values[i] += h;
            let lp = pinn_loss(&pp, &op, &ibvp, &batches).unwrap();
            pp.values[i] -= 2.0 * h;
            let lm = pinn_loss(&pp, &op, &ibvp, &batches).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[i].abs().max(1e-8);
            assert!(
                ((grad[i] - fd) / denom).abs() < 1e-4,
                "param {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn solves_trivial_zero_problem() {
        let domain = Domain::burgers();
        let u0 = |_x: f64| 0.0;
        let ibvp = Ibvp {
            domain,
            k: 2,
            u0: &u0,
        };
        let sol = pinn_solve(&ZeroOperator(3), &ibvp, &small_cfg(), None).unwrap();
        let (_, _, vals) = grid_eval(&sol.params, &domain, 32, 32);
        let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-2, "max |u| = {max}");
        // determinism
        let sol2 = pinn_solve(&ZeroOperator(3), &ibvp, &small_cfg(), None).unwrap();
        assert_eq!(sol.params.values, sol2.params.values);
        assert_eq!(sol.final_loss, sol2.final_loss);
    }
}
