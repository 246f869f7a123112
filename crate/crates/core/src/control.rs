//! Wave-dissipation control for actuator vehicles.
//!
//! Slowing an actuator below the traffic speed restricts the inflow to the
//! stop-and-go wave ahead of it below the wave's discharging flow, so the
//! wave shrinks. The commanded speed is chosen so that the vehicles trapped
//! between the actuator and the wave front run out exactly when the actuator
//! reaches the front: both the trapped count n and the gap d hit zero
//! together. If that speed would fall below the actuator's minimum, the
//! minimum is applied instead and the attempt is flagged as a predicted
//! failure so the next actuator upstream can take over the same wave.

use crate::error::{Error, Result};
use crate::lagrangian::{Cav, Wave};
use crate::params::{RoadParams, RoadState};

/// Speed command for one actuator.
#[derive(Debug, Clone, Copy)]
pub struct SpeedCommand {
    /// Applied speed, clamped to [u_min, V].
    pub speed: f64,
    /// Unclamped value of the control law.
    pub raw: f64,
    /// Set when the raw value fell below u_min: the actuator is not
    /// expected to dissipate its wave alone.
    pub predicted_failure: bool,
    /// Set when there is no net excess of vehicles to meter
    /// (average density at or below sigma − sigma_b); the command defaults
    /// to V.
    pub degenerate: bool,
}

/// Outcome of forward-integrating the trapped-vehicle balance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DissipationOutcome {
    /// Both the trapped count and the gap reach zero, at this horizon (h).
    Dissipates { horizon: f64 },
    /// The gap never closes, or vehicles remain when it does.
    Fails,
}

/// Mean reconstructed density over the inclusive cell range
/// [i_from, i_to].
pub fn average_density(rho: &[f64], i_from: usize, i_to: usize) -> Result<f64> {
    if i_from >= i_to || i_to >= rho.len() {
        return Err(Error::BadCellRange {
            from: i_from as isize,
            to: i_to as isize,
            n: rho.len(),
        });
    }
    let count = (i_to - i_from + 1) as f64;
    Ok(rho[i_from..=i_to].iter().sum::<f64>() / count)
}

/// Speed that makes the trapped vehicles and the gap to the wave front
/// vanish simultaneously:
///
/// u = [V·(rho_d − sigma + sigma_b) + lambda_d·(rho_bar − rho_d)]
///     / (rho_bar − sigma + sigma_b)
///
/// with lambda_d signed (negative for waves moving upstream). The result is
/// clamped to [u_min, V]; a raw value below u_min flags a predicted failure.
pub fn control_speed(rho_bar: f64, wave: &Wave, params: &RoadParams) -> Result<SpeedCommand> {
    if wave.dissipated() {
        return Err(Error::WaveDissipated { id: wave.id });
    }
    if !(0.0..=params.jam_density).contains(&rho_bar) {
        return Err(Error::OutOfRange {
            name: "rho_bar",
            value: rho_bar,
            min: 0.0,
            max: params.jam_density,
        });
    }
    let v = params.free_flow_speed;
    let passing = params.critical_density - params.bottleneck_offset;
    let denom = rho_bar - passing;
    if denom <= 1e-9 {
        // at or below the bottleneck's own pass-through density: nothing to
        // meter, drive with the flow
        return Ok(SpeedCommand {
            speed: v,
            raw: v,
            predicted_failure: false,
            degenerate: true,
        });
    }
    let raw = (v * (wave.discharge_density - passing)
        + wave.front_speed * (rho_bar - wave.discharge_density))
        / denom;
    let predicted_failure = raw < params.min_actuator_speed;
    Ok(SpeedCommand {
        speed: raw.clamp(params.min_actuator_speed, v),
        raw,
        predicted_failure,
        degenerate: false,
    })
}

/// Forward-integrates the trapped-vehicle count and the gap to the wave
/// front under a constant commanded speed:
///
/// dn/dt = (V − u)·(sigma − sigma_b) − (V − lambda_d)·rho_d,
/// dd/dt = lambda_d − u.
///
/// Succeeds at the first time both are zero within one vehicle and one cell
/// length.
pub fn predict_dissipation(
    n_yz: f64,
    d: f64,
    u: f64,
    wave: &Wave,
    params: &RoadParams,
) -> Result<DissipationOutcome> {
    let n_tol = 1.0;
    let d_tol = params.cell_length;
    if n_yz <= n_tol && d <= d_tol {
        return Ok(DissipationOutcome::Dissipates { horizon: 0.0 });
    }
    if d <= 0.0 {
        return Err(Error::OutOfRange {
            name: "d",
            value: d,
            min: 0.0,
            max: f64::INFINITY,
        });
    }
    let v = params.free_flow_speed;
    let passing = params.critical_density - params.bottleneck_offset;
    let n_dot = (v - u) * passing - (v - wave.front_speed) * wave.discharge_density;
    let d_dot = wave.front_speed - u;
    if d_dot >= 0.0 {
        return Ok(DissipationOutcome::Fails);
    }

    let dt = params.time_step;
    let mut n = n_yz;
    let mut dist = d;
    let mut t = 0.0;
    // the gap closes in d / |d_dot|; leave generous slack for the n-balance
    let horizon_cap = 4.0 * d / -d_dot + 1.0;
    while t < horizon_cap {
        n += n_dot * dt;
        dist += d_dot * dt;
        t += dt;
        if dist <= d_tol {
            return if n <= n_tol {
                Ok(DissipationOutcome::Dissipates { horizon: t })
            } else {
                Ok(DissipationOutcome::Fails)
            };
        }
    }
    Ok(DissipationOutcome::Fails)
}

/// One actuator's assignment for this step.
#[derive(Debug, Clone)]
pub struct FocusEntry {
    pub cav_id: u64,
    /// Wave the actuator focuses on, if any lies downstream of it.
    pub wave_id: Option<u64>,
    pub command: SpeedCommand,
    pub predicted_horizon: Option<f64>,
    /// Whether the wave was inherited from a failing actuator downstream.
    pub forced: bool,
}

/// Focus waves and speed commands for a set of actuators.
#[derive(Debug, Clone, Default)]
pub struct Assignment {
    pub entries: Vec<FocusEntry>,
}

impl Assignment {
    pub fn command_for(&self, cav_id: u64) -> Option<&FocusEntry> {
        self.entries.iter().find(|e| e.cav_id == cav_id)
    }
}

/// Assigns each actuator the first stop-and-go wave downstream of it and
/// computes its speed command from the supplied density field. When an
/// actuator is predicted to fail, the next actuator upstream is forced onto
/// the same wave. Actuators with nothing downstream are commanded V.
pub fn assign_focus(
    actuators: &[Cav],
    waves: &[Wave],
    density: &[f64],
    params: &RoadParams,
) -> Result<Assignment> {
    let mut order: Vec<&Cav> = actuators.iter().collect();
    order.sort_by(|a, b| b.pos.partial_cmp(&a.pos).unwrap().then(a.id.cmp(&b.id)));

    let v = params.free_flow_speed;
    let mut entries = Vec::with_capacity(order.len());
    let mut forced_wave: Option<&Wave> = None;
    for cav in order {
        let i_y = cav.cell(params);
        let downstream_of = |w: &&Wave| !w.dissipated() && w.head_cell > i_y && w.front_pos > cav.pos;
        let forced = forced_wave.take().filter(downstream_of);
        let was_forced = forced.is_some();
        let focus = forced.or_else(|| {
            waves
                .iter()
                .filter(downstream_of)
                .min_by(|a, b| a.front_pos.partial_cmp(&b.front_pos).unwrap())
        });

        let entry = match focus {
            None => FocusEntry {
                cav_id: cav.id,
                wave_id: None,
                command: SpeedCommand {
                    speed: v,
                    raw: v,
                    predicted_failure: false,
                    degenerate: false,
                },
                predicted_horizon: None,
                forced: false,
            },
            Some(w) => {
                let rho_bar = average_density(density, i_y, w.head_cell)?;
                let command = control_speed(rho_bar, w, params)?;
                if command.predicted_failure {
                    forced_wave = Some(w);
                }
                let gap = w.front_pos - cav.pos;
                let horizon = match predict_dissipation(
                    rho_bar * gap,
                    gap,
                    command.speed,
                    w,
                    params,
                )? {
                    DissipationOutcome::Dissipates { horizon } => Some(horizon),
                    DissipationOutcome::Fails => None,
                };
                FocusEntry {
                    cav_id: cav.id,
                    wave_id: Some(w.id),
                    command,
                    predicted_horizon: horizon,
                    forced: was_forced,
                }
            }
        };
        entries.push(entry);
    }
    Ok(Assignment { entries })
}

/// Total time spent: vehicle-hours accumulated on the segment and in the
/// upstream queue over a trace of states.
pub fn total_time_spent(trace: &[RoadState], params: &RoadParams) -> f64 {
    trace
        .iter()
        .map(|s| {
            params.time_step
                * (s.queue + s.rho.iter().sum::<f64>() * params.cell_length)
        })
        .sum()
}
