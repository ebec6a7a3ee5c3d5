//! Flow-matching primitives: the straight-line (OT) conditional path, its
//! target field, the regression loss, guidance, and fixed-step ODE solvers.
//!
//! Path between a prior sample `x0` and a data sample `x1`:
//!
//! ```text
//! x_t = t * x1 + (1 - (1 - sigma_min) * t) * x0
//! u_t = x1 - (1 - sigma_min) * x0
//! ```
//!
//! `u_t` does not depend on `t`, so integrating it from `x0` lands on
//! `x1 + sigma_min * x0` exactly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_SIGMA_MIN: f64 = 1e-5;

fn check_sigma(sigma_min: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sigma_min) {
        return Err(Error::contract(format!("sigma_min {sigma_min} outside [0, 1)")));
    }
    Ok(())
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("flow time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Point on the OT conditional path at time `t`.
pub fn ot_flow<F: Scalar>(t: F, x0: &[F], x1: &[F], sigma_min: f64) -> Result<Vec<F>> {
    ensure_same_len(x0.len(), x1.len(), "ot_flow")?;
    check_t(t.f64())?;
    check_sigma(sigma_min)?;
    let keep = F::one() - (F::one() - F::of(sigma_min)) * t;
    Ok(x0.iter().zip(x1).map(|(&a, &b)| t * b + keep * a).collect())
}

/// Target (conditional) vector field of the OT path. Constant in `t`.
pub fn ot_target_field<F: Scalar>(x0: &[F], x1: &[F], sigma_min: f64) -> Result<Vec<F>> {
    ensure_same_len(x0.len(), x1.len(), "ot_target_field")?;
    check_sigma(sigma_min)?;
    let shrink = F::one() - F::of(sigma_min);
    Ok(x0.iter().zip(x1).map(|(&a, &b)| b - shrink * a).collect())
}

/// Squared Euclidean distance between predicted and target fields.
pub fn cfm_loss<F: Scalar>(predicted: &[F], target: &[F]) -> Result<F> {
    ensure_same_len(predicted.len(), target.len(), "cfm_loss")?;
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(&p, &q)| (p - q) * (p - q))
        .sum())
}

/// Guided field `v_cond + scale * (v_cond - v_uncond)`. `scale == 0` returns
/// `v_cond` bit-for-bit.
pub fn cfg_combine<F: Scalar>(v_cond: &[F], v_uncond: &[F], scale: f64) -> Result<Vec<F>> {
    ensure_same_len(v_cond.len(), v_uncond.len(), "cfg_combine")?;
    if scale < 0.0 || !scale.is_finite() {
        return Err(Error::contract(format!("guidance scale {scale} must be finite and >= 0")));
    }
    if scale == 0.0 {
        return Ok(v_cond.to_vec());
    }
    let s = F::of(scale);
    Ok(v_cond
        .iter()
        .zip(v_uncond)
        .map(|(&c, &u)| c + s * (c - u))
        .collect())
}

/// A point on a conditional flow together with its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPoint<F> {
    pub t: F,
    pub x0: Vec<F>,
    pub x1: Vec<F>,
    pub xt: Vec<F>,
    pub ut: Vec<F>,
}

impl<F: Scalar> FlowPoint<F> {
    pub fn new(t: F, x0: Vec<F>, x1: Vec<F>, sigma_min: f64) -> Result<Self> {
        let xt = ot_flow(t, &x0, &x1, sigma_min)?;
        let ut = ot_target_field(&x0, &x1, sigma_min)?;
        Ok(Self { t, x0, x1, xt, ut })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Euler,
    Midpoint,
}

/// Fixed-step solver with an exact budget of field evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: SolverMethod,
    pub nfe: usize,
}

impl SolverSpec {
    pub fn new(method: SolverMethod, nfe: usize) -> Result<Self> {
        let spec = Self { method, nfe };
        spec.validate()?;
        Ok(spec)
    }

    pub fn euler(nfe: usize) -> Result<Self> {
        Self::new(SolverMethod::Euler, nfe)
    }

    pub fn midpoint(nfe: usize) -> Result<Self> {
        Self::new(SolverMethod::Midpoint, nfe)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::contract("solver nfe must be >= 1"));
        }
        if self.method == SolverMethod::Midpoint && self.nfe % 2 != 0 {
            return Err(Error::contract(format!(
                "midpoint solver needs an even nfe, got {}",
                self.nfe
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        match self.method {
            SolverMethod::Euler => self.nfe,
            SolverMethod::Midpoint => self.nfe / 2,
        }
    }
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            method: SolverMethod::Midpoint,
            nfe: 64,
        }
    }
}

fn check_finite<F: Scalar>(v: &[F], step: usize) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical {
            step,
            msg: format!("non-finite vector field at coordinate {i}"),
        });
    }
    Ok(())
}

/// Integrate `dx/dt = field(t, x)` from `t = 0` to `t = 1` on a uniform grid.
///
/// The field is called exactly `spec.nfe` times.
pub fn ode_sample<F, V>(mut field: V, x0: &[F], spec: SolverSpec) -> Result<Vec<F>>
where
    F: Scalar,
    V: FnMut(F, &[F]) -> Result<Vec<F>>,
{
    spec.validate()?;
    check_finite(x0, 0)?;
    let steps = spec.steps();
    let h = F::one() / F::of(steps as f64);
    let half = F::of(0.5) * h;
    let mut x = x0.to_vec();
    for step in 0..steps {
        let t = F::of(step as f64) * h;
        let v = field(t, &x)?;
        ensure_same_len(v.len(), x.len(), "ode_sample field output")?;
        check_finite(&v, step)?;
        match spec.method {
            SolverMethod::Euler => {
                x.iter_mut().zip(&v).for_each(|(xi, &vi)| *xi = *xi + h * vi);
            }
            SolverMethod::Midpoint => {
                let mid: Vec<F> = x.iter().zip(&v).map(|(&xi, &vi)| xi + half * vi).collect();
                let vm = field(t + half, &mid)?;
                ensure_same_len(vm.len(), x.len(), "ode_sample field output")?;
                check_finite(&vm, step)?;
                x.iter_mut().zip(&vm).for_each(|(xi, &vi)| *xi = *xi + h * vi);
            }
        }
    }
    Ok(x)
}

/// Draw from `N(0, temperature^2 I)`.
pub fn sample_prior<F: Scalar, R: Rng + ?Sized>(dim: usize, temperature: f64, rng: &mut R) -> Vec<F> {
    assert!(dim >= 1, "prior dimension must be >= 1");
    assert!(temperature > 0.0, "prior temperature must be > 0");
    (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            F::of(temperature * z)
        })
        .collect()
}

/// Least-squares slope of log(error) against log(step size) for
/// `dx/dt = x, x(0) = 1` integrated to `t = 1`.
pub fn convergence_slope(method: SolverMethod, nfes: &[usize]) -> f64 {
    let e = std::f64::consts::E;
    let pts: Vec<(f64, f64)> = nfes
        .iter()
        .map(|&nfe| {
            let spec = SolverSpec::new(method, nfe).expect("valid nfe");
            let x = ode_sample(|_, x: &[f64]| Ok(x.to_vec()), &[1.0], spec).expect("finite");
            ((1.0 / spec.steps() as f64).ln(), (x[0] - e).abs().ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
