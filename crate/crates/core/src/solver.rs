//! Fixed-step explicit integrators (Euler, classical RK4).
//!
//! Every stage is built from tape ops, so integrating a recorded state or a
//! field with recorded parameters yields exact gradients of the discretized
//! solution. Spans may run backwards in time (`t1 < t0`); the step size is
//! then negative.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tape::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    /// Step density per millisecond of integrated span.
    pub steps_per_ms: f64,
    pub min_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps_per_ms: 8.0,
            min_steps: 4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.steps_per_ms > 0.0) || !self.steps_per_ms.is_finite() {
            return Err(invalid("solver steps_per_ms must be positive"));
        }
        if self.min_steps == 0 {
            return Err(invalid("solver min_steps must be at least 1"));
        }
        Ok(())
    }

    /// `max(min_steps, ceil(steps_per_ms · |dt| / 1 ms))`. Products within
    /// 1e-9 of an integer are not rounded up, so spans such as
    /// `0.005 − 0.004` get the same count as `0.001`.
    pub fn step_count(&self, dt_seconds: f64) -> usize {
        let x = self.steps_per_ms * dt_seconds.abs() * 1e3;
        let n = math::ceil(x - 1e-9);
        let n = if n > 0.0 { n as usize } else { 0 };
        n.max(self.min_steps)
    }
}

/// A time-dependent derivative `dy/dt = f(y, t)` with `t` in seconds.
///
/// `times` holds either one value (the whole state sits at that time) or one
/// value per last-axis row of `state`, in which case rows are independent
/// trajectories. The output must have the shape of `state`.
pub trait VectorField {
    fn eval(&self, tape: &mut Tape, state: &Tensor, times: &[f64]) -> Result<Tensor>;
}

impl<F> VectorField for F
where
    F: Fn(&mut Tape, &Tensor, &[f64]) -> Result<Tensor>,
{
    fn eval(&self, tape: &mut Tape, state: &Tensor, times: &[f64]) -> Result<Tensor> {
        self(tape, state, times)
    }
}

/// Per-row step sizes; a single entry applies to the whole state.
struct Steps<'a> {
    h: &'a [f64],
}

impl Steps<'_> {
    fn scaled(&self, tape: &mut Tape, x: &Tensor, factor: f64) -> Result<Tensor> {
        if let [h] = self.h {
            Ok(tape.scale(x, h * factor))
        } else {
            let f: Vec<f64> = self.h.iter().map(|h| h * factor).collect();
            tape.row_scale(x, &f)
        }
    }

    fn times(&self, t: &[f64], factor: f64) -> Vec<f64> {
        t.iter().zip(self.h).map(|(t, h)| t + h * factor).collect()
    }
}

fn eval_checked<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    y: &Tensor,
    t: &[f64],
) -> Result<Tensor> {
    let k = field.eval(tape, y, t)?;
    if k.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "vector field output",
            left: y.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    Ok(k)
}

fn euler_inner<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    y: &Tensor,
    t: &[f64],
    steps: &Steps,
) -> Result<Tensor> {
    let k1 = eval_checked(field, tape, y, t)?;
    let inc = steps.scaled(tape, &k1, 1.0)?;
    tape.add(y, &inc)
}

fn rk4_inner<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    y: &Tensor,
    t: &[f64],
    steps: &Steps,
) -> Result<Tensor> {
    let t_half = steps.times(t, 0.5);
    let t_full = steps.times(t, 1.0);

    let k1 = eval_checked(field, tape, y, t)?;
    let d = steps.scaled(tape, &k1, 0.5)?;
    let y2 = tape.add(y, &d)?;
    let k2 = eval_checked(field, tape, &y2, &t_half)?;
    let d = steps.scaled(tape, &k2, 0.5)?;
    let y3 = tape.add(y, &d)?;
    let k3 = eval_checked(field, tape, &y3, &t_half)?;
    let d = steps.scaled(tape, &k3, 1.0)?;
    let y4 = tape.add(y, &d)?;
    let k4 = eval_checked(field, tape, &y4, &t_full)?;

    let mid = tape.add(&k2, &k3)?;
    let mid = tape.scale(&mid, 2.0);
    let s = tape.add(&k1, &mid)?;
    let s = tape.add(&s, &k4)?;
    let inc = steps.scaled(tape, &s, 1.0 / 6.0)?;
    tape.add(y, &inc)
}

/// One classical Runge–Kutta step: `y + (h/6)(k1 + 2k2 + 2k3 + k4)`.
pub fn rk4_step<F: VectorField + ?Sized>(field: &F, tape: &mut Tape, y: &Tensor, t: f64, h: f64) -> Result<Tensor> {
    if h == 0.0 || !h.is_finite() {
        return Err(invalid("rk4 step size must be finite and non-zero"));
    }
    rk4_inner(field, tape, y, &[t], &Steps { h: &[h] })
}

/// One forward Euler step: `y + h·f(y, t)`.
pub fn euler_step<F: VectorField + ?Sized>(field: &F, tape: &mut Tape, y: &Tensor, t: f64, h: f64) -> Result<Tensor> {
    if h == 0.0 || !h.is_finite() {
        return Err(invalid("euler step size must be finite and non-zero"));
    }
    euler_inner(field, tape, y, &[t], &Steps { h: &[h] })
}

/// Integrates independent rows from `t0[r]` to `t1[r]` with `steps` uniform
/// steps each and returns the final states.
///
/// `t0`/`t1` have one entry (shared by the whole state) or one per row.
pub fn integrate_rows<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    y0: &Tensor,
    t0: &[f64],
    t1: &[f64],
    steps: usize,
    method: Method,
) -> Result<Tensor> {
    if t0.len() != t1.len() || (t0.len() != 1 && t0.len() != y0.rows()) {
        return Err(Error::ShapeMismatch {
            op: "integrate_rows times",
            left: y0.shape().to_vec(),
            right: vec![t0.len(), t1.len()],
        });
    }
    if steps == 0 {
        return Err(invalid("step count must be positive"));
    }
    if !y0.all_finite() {
        return Err(Error::NonFiniteState { step: 0 });
    }
    let h: Vec<f64> = t0.iter().zip(t1).map(|(a, b)| (b - a) / steps as f64).collect();
    let st = Steps { h: &h };
    let mut y = y0.clone();
    let mut t = t0.to_vec();
    for k in 0..steps {
        y = match method {
            Method::Euler => euler_inner(field, tape, &y, &t, &st)?,
            Method::Rk4 => rk4_inner(field, tape, &y, &t, &st)?,
        };
        if !y.all_finite() {
            return Err(Error::NonFiniteState { step: k + 1 });
        }
        for ((tv, a), hv) in t.iter_mut().zip(t0).zip(&h) {
            *tv = a + hv * (k + 1) as f64;
        }
    }
    Ok(y)
}

/// Final state `y(t1)` starting from `y0` at `t0`, using the configured step
/// policy. A zero-length span returns `y0` untouched.
pub fn solve_final<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    y0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if t0 == t1 {
        return Ok(y0.clone());
    }
    let n = cfg.step_count(t1 - t0);
    integrate_rows(field, tape, y0, &[t0], &[t1], n, cfg.method)
}

/// `Δy ≈ ∫_{t0}^{t1} f(y(t), t) dt`; the final state is `y0 + Δy`.
/// Exactly zero when `t0 == t1`.
pub fn solve_increment<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    y0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if t0 == t1 {
        return Ok(Tensor::zeros(y0.shape().to_vec()));
    }
    let y1 = solve_final(field, tape, y0, t0, t1, cfg)?;
    tape.sub(&y1, y0)
}

/// Like [`solve_increment`] with an explicit step count.
pub fn solve_increment_steps<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    y0: &Tensor,
    t0: f64,
    t1: f64,
    steps: usize,
    method: Method,
) -> Result<Tensor> {
    if t0 == t1 {
        return Ok(Tensor::zeros(y0.shape().to_vec()));
    }
    let y1 = integrate_rows(field, tape, y0, &[t0], &[t1], steps, method)?;
    tape.sub(&y1, y0)
}
