//! Two-scale Lorenz-96 ring with seasonally modulated forcing.
//!
//! This is the deterministic chaotic teacher: `K` slow variables on a
//! ring, each coupled to `J` fast variables, with the constant forcing
//! replaced by an annual cycle so that day-of-year conditioning carries
//! real information downstream. One "teacher step" is the 6-hour analog
//! (`step_equiv` model-time units of RK4 substeps).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Parameters of the two-scale system and its integrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Slow-variable count on the ring.
    pub k: usize,
    /// Fast variables per slow variable.
    pub j: usize,
    /// Base forcing.
    pub f0: f64,
    /// Seasonal forcing amplitude.
    pub a_seas: f64,
    /// Seasonal period in model-time units.
    pub t_seas: f64,
    /// Coupling strength.
    pub h: f64,
    /// Fast timescale ratio.
    pub c: f64,
    /// Fast amplitude ratio.
    pub b: f64,
    /// Integrator step in model-time units.
    pub dt: f64,
    /// Model time advanced by one 6-hour-analog teacher step.
    pub step_equiv: f64,
}

impl Default for SystemParams {
    /// Standard chaotic regime with fast "weather" and a slow seasonal
    /// cycle. One day is 4 teacher steps of 0.05 model-time units, and
    /// the seasonal period spans exactly one 360-day year (72.0 units).
    fn default() -> Self {
        SystemParams {
            k: 40,
            j: 4,
            f0: 8.0,
            a_seas: 2.0,
            t_seas: 72.0,
            h: 1.0,
            c: 10.0,
            b: 10.0,
            dt: 0.005,
            step_equiv: 0.05,
        }
    }
}

impl SystemParams {
    /// RK4 substeps per teacher step; `step_equiv` must be an integer
    /// multiple of `dt`.
    pub fn substeps(&self) -> usize {
        (self.step_equiv / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 4 {
            return Err(Error::config(format!("K must be >= 4, got {}", self.k)));
        }
        if self.j < 1 {
            return Err(Error::config(format!("J must be >= 1, got {}", self.j)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_seas > 0.0) {
            return Err(Error::config(format!(
                "T_seas must be > 0, got {}",
                self.t_seas
            )));
        }
        let n = self.step_equiv / self.dt;
        if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
            return Err(Error::config(format!(
                "step_equiv ({}) must be an integer multiple of dt ({})",
                self.step_equiv, self.dt
            )));
        }
        Ok(())
    }
}

/// Full instantaneous state: slow ring `X`, fast ring `Y`, model time.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
}

impl SystemState {
    pub fn zeros(params: &SystemParams) -> Self {
        SystemState {
            x: vec![0.0; params.k],
            y: vec![0.0; params.k * params.j],
            t: 0.0,
        }
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "state X", index: i });
        }
        if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "state Y", index: i });
        }
        Ok(())
    }
}

/// Time derivative of a state, same layout as the state itself.
#[derive(Debug, Clone)]
pub struct Tendency {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

/// Seasonal forcing `F(t) = F0 + A_seas * sin(2 pi t / T_seas)`.
pub fn seasonal_forcing(t: f64, params: &SystemParams) -> f64 {
    params.f0 + params.a_seas * (2.0 * std::f64::consts::PI * t / params.t_seas).sin()
}

/// Right-hand side of the two-scale system with cyclic wrapping on both
/// rings:
///
/// dX_k = -X_{k-1}(X_{k-2} - X_{k+1}) - X_k + F(t) - (h c / b) sum_j Y_{k,j}
/// dY_i = -c b Y_{i+1}(Y_{i+2} - Y_{i-1}) - c Y_i + (h c / b) X_{i / J}
pub fn tendency(state: &SystemState, params: &SystemParams) -> Result<Tendency> {
    state.check_finite()?;
    let k = params.k;
    let j = params.j;
    let n_fast = k * j;
    let f = seasonal_forcing(state.t, params);
    let hcb = params.h * params.c / params.b;

    let x = &state.x;
    let mut dx = vec![0.0; k];
    for i in 0..k {
        let im1 = (i + k - 1) % k;
        let im2 = (i + k - 2) % k;
        let ip1 = (i + 1) % k;
        let fast_sum: f64 = state.y[i * j..(i + 1) * j].iter().sum();
        dx[i] = -x[im1] * (x[im2] - x[ip1]) - x[i] + f - hcb * fast_sum;
    }

    let y = &state.y;
    let mut dy = vec![0.0; n_fast];
    for i in 0..n_fast {
        let ip1 = (i + 1) % n_fast;
        let ip2 = (i + 2) % n_fast;
        let im1 = (i + n_fast - 1) % n_fast;
        dy[i] = -params.c * params.b * y[ip1] * (y[ip2] - y[im1]) - params.c * y[i]
            + hcb * x[i / j];
    }

    Ok(Tendency { dx, dy })
}

fn axpy_state(state: &SystemState, scale: f64, tend: &Tendency, dt_frac: f64) -> SystemState {
    let x = state
        .x
        .iter()
        .zip(&tend.dx)
        .map(|(v, d)| v + scale * d)
        .collect();
    let y = state
        .y
        .iter()
        .zip(&tend.dy)
        .map(|(v, d)| v + scale * d)
        .collect();
    SystemState { x, y, t: state.t + dt_frac }
}

/// One classical RK4 step of size `params.dt`.
pub fn step_rk4(state: &SystemState, params: &SystemParams) -> Result<SystemState> {
    let dt = params.dt;
    let k1 = tendency(state, params)?;
    let s2 = axpy_state(state, 0.5 * dt, &k1, 0.5 * dt);
    let k2 = tendency(&s2, params).map_err(|_| Error::Instability { t: state.t })?;
    let s3 = axpy_state(state, 0.5 * dt, &k2, 0.5 * dt);
    let k3 = tendency(&s3, params).map_err(|_| Error::Instability { t: state.t })?;
    let s4 = axpy_state(state, dt, &k3, dt);
    let k4 = tendency(&s4, params).map_err(|_| Error::Instability { t: state.t })?;

    let sixth = dt / 6.0;
    let x: Vec<f64> = (0..state.x.len())
        .map(|i| state.x[i] + sixth * (k1.dx[i] + 2.0 * k2.dx[i] + 2.0 * k3.dx[i] + k4.dx[i]))
        .collect();
    let y: Vec<f64> = (0..state.y.len())
        .map(|i| state.y[i] + sixth * (k1.dy[i] + 2.0 * k2.dy[i] + 2.0 * k3.dy[i] + k4.dy[i]))
        .collect();
    let next = SystemState { x, y, t: state.t + dt };
    next.check_finite().map_err(|_| Error::Instability { t: state.t })?;
    Ok(next)
}

/// Advance by one 6-hour-analog teacher step (`step_equiv / dt` RK4 substeps).
pub fn advance_teacher_step(state: &SystemState, params: &SystemParams) -> Result<SystemState> {
    let mut s = state.clone();
    for _ in 0..params.substeps() {
        s = step_rk4(&s, params)?;
    }
    Ok(s)
}
