//! Traffic-state reconstruction from vehicle-borne measurements.
//!
//! Sensing vehicles report the densities of their own cell and both
//! neighbors. Sensed cells are copied into the estimate; everything else is
//! propagated open-loop by the same cell dynamics, evaluated entirely on the
//! estimate: congested stretches of the estimate are scanned into waves so
//! their reference profiles keep the believed congestion sharp, and the
//! known commands of controlled actuators contribute their bottleneck
//! profiles. The average inflow stands in for the unknown demand.
//!
//! Probe selection is adaptive: besides the always-on set, any connected
//! vehicle within a trigger distance upstream of believed congestion is
//! asked to transmit, and drops out again once the condition lapses.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::lagrangian::{
    self, bottleneck_as_wave, discharge_density_raw, wave_front_speed, Cav, Wave, WaveSource,
};
use crate::params::{RoadParams, RoadState};

/// Reconstructed per-cell densities plus bookkeeping for the probe fleet.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    /// Estimated density per cell (veh/km).
    pub rho_hat: Vec<f64>,
    /// Estimated inflow (veh/h), normally the known average demand.
    pub q_hat_in: f64,
    /// Vehicles currently transmitting.
    pub active_probes: BTreeSet<u64>,
    /// Cumulative (vehicle, step) transmissions.
    pub messages_sent: u64,
}

impl EstimatorState {
    /// Initial estimate: uniform free flow carrying the average inflow.
    pub fn new(mean_inflow: f64, params: &RoadParams) -> Self {
        Self {
            rho_hat: vec![mean_inflow / params.free_flow_speed; params.cell_count],
            q_hat_in: mean_inflow,
            active_probes: BTreeSet::new(),
            messages_sent: 0,
        }
    }

    pub fn add_messages(&mut self, n: usize) {
        self.messages_sent += n as u64;
    }
}

/// Cumulative number of measurement transmissions so far.
pub fn message_count(est: &EstimatorState) -> u64 {
    est.messages_sent
}

/// Cells covered by the active sensing vehicles: each covers its own cell
/// and both neighbors, clipped to the segment.
pub fn sensed_cells(fleet: &[Cav], active: &BTreeSet<u64>, params: &RoadParams) -> BTreeSet<usize> {
    let mut cells = BTreeSet::new();
    for cav in fleet.iter().filter(|c| active.contains(&c.id)) {
        let i = cav.cell(params) as isize;
        for j in (i - 1)..=(i + 1) {
            if j >= 0 && (j as usize) < params.cell_count {
                cells.insert(j as usize);
            }
        }
    }
    cells
}

/// Scans a density field for congested stretches and turns each into a wave
/// value: contiguous runs above the critical density, with the core taken as
/// the run's maximum and the front position recovered from the head cell's
/// interpolated value. A run ending at an actively controlled actuator is
/// that actuator's wake and is described through the bottleneck relations
/// instead (front at the vehicle, front speed equal to its command).
///
/// Single-cell runs are ignored; sub-cell congestion carries no profile.
pub fn scan_waves(density: &[f64], cavs: &[Cav], params: &RoadParams) -> Vec<Wave> {
    let n = density.len();
    let sigma = params.critical_density;
    let l = params.cell_length;
    let lambda = wave_front_speed(params);

    let mut controlled: Vec<&Cav> = cavs
        .iter()
        .filter(|c| c.is_actively_controlled(params.triangular_speed(density[c.cell(params)])))
        .collect();
    controlled.sort_by_key(|c| c.id);

    let mut waves = Vec::new();
    let mut i = 0;
    while i < n {
        if density[i] <= sigma {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && density[i] > sigma {
            i += 1;
        }
        let end = i - 1;
        if end == start {
            continue;
        }
        let rho_c = density[start..=end].iter().cloned().fold(0.0, f64::max);

        if let Some(cav) = controlled
            .iter()
            .find(|c| (c.cell(params) == end || c.cell(params) == end + 1) && c.cell(params) >= start)
        {
            let local = params.triangular_speed(density[cav.cell(params)]);
            if let Ok(w) = bottleneck_as_wave(cav, local, rho_c, start, params) {
                waves.push(w);
                continue;
            }
        }

        let rho_d = discharge_density_raw(rho_c, params);
        let frac = ((density[end] - rho_d) / (rho_c - rho_d).max(1e-9)).clamp(0.0, 1.0);
        waves.push(Wave {
            id: (1 << 32) + start as u64,
            tail_cell: start,
            head_cell: end,
            front_pos: (end as f64 + frac) * l,
            tail_pos: start as f64 * l,
            core_density: rho_c,
            discharge_density: rho_d,
            front_speed: lambda,
            source: WaveSource::Exogenous,
        });
    }
    waves
}

/// One estimator update: the previous estimate is propagated a step by the
/// cell dynamics evaluated on the estimate itself, then the sensed cells are
/// overwritten with their measurements.
///
/// The downstream boundary of the estimate is unconstrained unless the last
/// cell is believed congested, in which case the ghost cell mirrors it;
/// changes beyond the segment cannot be seen until a probe reaches their
/// spillback.
pub fn reconstruct_step(
    est: &EstimatorState,
    measurements: &BTreeMap<usize, f64>,
    fleet: &[Cav],
    params: &RoadParams,
) -> Result<EstimatorState> {
    for (&cell, &value) in measurements {
        if cell >= params.cell_count {
            return Err(Error::BadCellRange {
                from: cell as isize,
                to: cell as isize,
                n: params.cell_count,
            });
        }
        if !(0.0..=params.jam_density).contains(&value) {
            return Err(Error::OutOfRange {
                name: "measured density",
                value,
                min: 0.0,
                max: params.jam_density,
            });
        }
    }

    let waves = scan_waves(&est.rho_hat, fleet, params);
    let overrides = lagrangian::build_overrides(&waves, fleet, &est.rho_hat, params);
    let last = est.rho_hat[params.cell_count - 1];
    let supply = if last > params.critical_density {
        params.wave_speed * (params.jam_density - last)
    } else {
        params.max_flow()
    };

    let state = RoadState::new(est.rho_hat.clone(), 0.0, 0);
    let propagated = crate::ctm::step(&state, &overrides, est.q_hat_in, supply, params);

    let mut next = est.clone();
    next.rho_hat = propagated.state.rho;
    for (&cell, &value) in measurements {
        next.rho_hat[cell] = value;
    }
    Ok(next)
}

/// Adaptive probe selection: the always-on set plus every vehicle with
/// believed congestion at most `delta` ahead of it. Vehicles past the
/// congestion do not trigger, and triggered vehicles drop out on their own
/// once the condition no longer holds.
pub fn select_probes(
    est: &EstimatorState,
    fleet: &[Cav],
    always_on: &BTreeSet<u64>,
    delta: f64,
    params: &RoadParams,
) -> BTreeSet<u64> {
    let window = if delta.is_finite() {
        ((delta / params.cell_length).floor() as usize).min(params.cell_count)
    } else {
        params.cell_count
    };
    let congested: Vec<usize> = est
        .rho_hat
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > params.critical_density)
        .map(|(i, _)| i)
        .collect();

    let mut active = always_on.clone();
    if congested.is_empty() {
        return active;
    }
    for cav in fleet {
        let i_y = cav.cell(params);
        if congested.iter().any(|&c| c >= i_y && c - i_y <= window) {
            active.insert(cav.id);
        }
    }
    active
}
