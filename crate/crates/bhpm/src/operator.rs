//! The differential-operator-as-function contract: anything that maps a
//! derivative bundle `v = (u, u_x, ..., d^K u/dx^K)` to `u_t` and exposes its
//! gradient with respect to `v`. Both closed-form operators and GP posterior
//! means implement this, so the PINN solver accepts either.

/// A deterministic operator `u_t = f(v)`, differentiable in `v`.
pub trait Operator: Sync {
    /// Input dimension K+1.
    fn input_dim(&self) -> usize;

    fn eval(&self, v: &[f64]) -> f64;

    /// Value and gradient with respect to `v`. `grad` has length `input_dim`.
    fn eval_grad(&self, v: &[f64], grad: &mut [f64]) -> f64;
}

/// Closed-form operators used for ground truth and synthetic priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosedForm {
    /// u_t = -u u_x + 0.1 u_xx (K = 2)
    Burgers,
    /// u_t = -u u_x - u_xxx (K = 3)
    Kdv,
    /// u_t = 0.1 u_xx (K = 2)
    Heat,
}

impl Operator for ClosedForm {
    fn input_dim(&self) -> usize {
        match self {
            ClosedForm::Burgers | ClosedForm::Heat => 3,
            ClosedForm::Kdv => 4,
        }
    }

    fn eval(&self, v: &[f64]) -> f64 {
        match self {
            ClosedForm::Burgers => -v[0] * v[1] + 0.1 * v[2],
            ClosedForm::Kdv => -v[0] * v[1] - v[3],
            ClosedForm::Heat => 0.1 * v[2],
        }
    }

    fn eval_grad(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self {
            ClosedForm::Burgers => {
                grad[0] = -v[1];
                grad[1] = -v[0];
                grad[2] = 0.1;
            }
            ClosedForm::Kdv => {
                grad[0] = -v[1];
                grad[1] = -v[0];
                grad[3] = -1.0;
            }
            ClosedForm::Heat => {
                grad[2] = 0.1;
            }
        }
        self.eval(v)
    }
}

/// Operator that is identically zero; handy in tests.
#[derive(Debug, Clone, Copy)]
pub struct ZeroOperator(pub usize);

impl Operator for ZeroOperator {
    fn input_dim(&self) -> usize {
        self.0
    }
    fn eval(&self, _v: &[f64]) -> f64 {
        0.0
    }
    fn eval_grad(&self, _v: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burgers_pointwise() {
        assert_eq!(ClosedForm::Burgers.eval(&[1.0, 1.0, 0.0]), -1.0);
        assert_eq!(ClosedForm::Kdv.eval(&[0.0, 0.7, 0.3, 0.0]), 0.0);
        assert!((ClosedForm::Heat.eval(&[5.0, -2.0, 3.0]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn grads_match_values() {
        let op = ClosedForm::Burgers;
        let v = [0.4, -1.3, 2.0];
        let mut g = [0.0; 3];
        let f = op.eval_grad(&v, &mut g);
        assert_eq!(f, op.eval(&v));
        let h = 1e-6;
        for d in 0..3 {
            let mut vp = v;
            vp[d] += h;
            let mut vm = v;
            vm[d] -= h;
            let fd = (op.eval(&vp) - op.eval(&vm)) / (2.0 * h);
            assert!((fd - g[d]).abs() < 1e-8);
        }
    }
}
