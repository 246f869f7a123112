//! Cell-transmission dynamics with capacity drop and per-cell speed
//! overrides.
//!
//! Cell outflow is the usual demand/supply minimum, with two extensions:
//! a congested cell's maximum outflow drops linearly with its density
//! (capacity drop), and each cell's free-flow speed can be lowered for one
//! step to make a stretch of road track a reference density profile. The
//! reference machinery is what keeps stop-and-go waves and moving-bottleneck
//! wakes sharp instead of diffusing.

use crate::error::{Error, Result};
use crate::lagrangian::ReferenceProfile;
use crate::params::{RoadParams, RoadState, SpeedOverrides};

#[inline]
pub(crate) fn capacity_raw(rho: f64, p: &RoadParams) -> f64 {
    let drop = p.wave_speed
        * (p.jam_density
            - (1.0 - p.capacity_drop) * p.critical_density
            - p.capacity_drop * rho);
    p.max_flow().min(drop).max(0.0)
}

#[inline]
pub(crate) fn outflow_raw(rho: f64, rho_next: f64, u: f64, p: &RoadParams) -> f64 {
    let demand = u * rho;
    let supply = p.wave_speed * (p.jam_density - rho_next);
    demand.min(capacity_raw(rho, p)).min(supply).max(0.0)
}

/// Maximum outflow of a cell at density `rho_i`: the capacity ceiling
/// V·sigma, reduced once the cell is congested.
pub fn capacity(rho_i: f64, params: &RoadParams) -> Result<f64> {
    check_density("rho_i", rho_i, params)?;
    Ok(capacity_raw(rho_i, params))
}

/// Flow leaving a cell: min of its speed-limited demand, its (possibly
/// dropped) capacity, and the next cell's supply.
pub fn cell_outflow(rho_i: f64, rho_next: f64, u_i: f64, params: &RoadParams) -> Result<f64> {
    check_density("rho_i", rho_i, params)?;
    check_density("rho_next", rho_next, params)?;
    if !(0.0..=params.free_flow_speed).contains(&u_i) {
        return Err(Error::OutOfRange {
            name: "u_i",
            value: u_i,
            min: 0.0,
            max: params.free_flow_speed,
        });
    }
    Ok(outflow_raw(rho_i, rho_next, u_i, params))
}

/// Speed of the traffic in a cell, q_i/rho_i, with the empty-road convention
/// v = V at zero density.
pub fn traffic_speed(rho_i: f64, outflow_i: f64, params: &RoadParams) -> f64 {
    if rho_i <= 0.0 {
        params.free_flow_speed
    } else {
        outflow_i / rho_i
    }
}

/// Per-cell speeds for a whole state, given the flows returned by [`step`]
/// (`flows[i + 1]` is the outflow of cell `i`).
pub fn speeds_from_flows(rho: &[f64], flows: &[f64], params: &RoadParams) -> Vec<f64> {
    rho.iter()
        .enumerate()
        .map(|(i, &r)| traffic_speed(r, flows[i + 1], params))
        .collect()
}

/// Speed overrides that steer the cells under `profile` toward its next-step
/// targets.
///
/// The override of each cell is chosen so that the cell *downstream* of it
/// lands on its reference density, sweeping from the profile's downstream
/// end to one cell upstream of it. Results are clamped to [0, V]; cells
/// outside the profile keep the default V. Returned pairs are
/// (cell, speed), ascending.
pub fn reference_overrides(
    profile: &ReferenceProfile,
    rho: &[f64],
    params: &RoadParams,
) -> Result<Vec<(usize, f64)>> {
    let n = rho.len() as isize;
    profile.validate(n, params)?;
    let v = params.free_flow_speed;
    let last_target = profile.first_cell + profile.targets.len() as isize - 1;

    let mut out = Vec::with_capacity(profile.targets.len());
    let mut u_downstream = v;
    for i in ((profile.first_cell - 1)..=(last_target - 1)).rev() {
        if i < 0 {
            break;
        }
        let rho_i = rho[i as usize];
        let target_next = profile.target(i + 1);
        let raw = if rho_i <= 0.0 {
            // nothing to meter in an empty cell
            v
        } else if i == last_target - 1 {
            v * (target_next / rho_i).min(1.0)
        } else {
            let carryover = (v - u_downstream) / v * rho[(i + 1) as usize];
            v * ((target_next - carryover) / rho_i).clamp(0.0, 1.0)
        };
        let u = raw.clamp(0.0, v);
        out.push((i as usize, u));
        u_downstream = u;
    }
    out.reverse();
    Ok(out)
}

/// Result of one density update: the new state and the realized flows
/// `q_0..=q_N` (`flows[0]` is the inflow, `flows[N]` the outflow at the
/// downstream boundary).
#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: RoadState,
    pub flows: Vec<f64>,
}

/// Advances the density field one time step.
///
/// The upstream boundary is a demand/queue model: unserved demand
/// accumulates in the queue and is released as fast as the first cell and
/// the capacity ceiling allow. `supply_out` caps the last cell's outflow and
/// is how the downstream boundary (e.g. a wave entering from beyond the
/// segment) is encoded. The update is total: any valid state stays within
/// [0, P] and conserves mass up to the boundary flows.
pub fn step(
    state: &RoadState,
    overrides: &SpeedOverrides,
    demand_in: f64,
    supply_out: f64,
    params: &RoadParams,
) -> StepResult {
    let n = params.cell_count;
    debug_assert_eq!(state.rho.len(), n);
    let t_over_l = params.time_step / params.cell_length;

    let mut flows = vec![0.0; n + 1];
    flows[0] = (demand_in + state.queue / params.time_step)
        .min(params.max_flow())
        .min(params.wave_speed * (params.jam_density - state.rho[0]))
        .max(0.0);
    for i in 0..n {
        let supply = if i + 1 < n {
            params.wave_speed * (params.jam_density - state.rho[i + 1])
        } else {
            supply_out
        };
        flows[i + 1] = (overrides.get(i) * state.rho[i])
            .min(capacity_raw(state.rho[i], params))
            .min(supply)
            .max(0.0);
    }

    let mut rho = Vec::with_capacity(n);
    for i in 0..n {
        let next = state.rho[i] + t_over_l * (flows[i] - flows[i + 1]);
        rho.push(next.clamp(0.0, params.jam_density));
    }
    let queue = (state.queue + params.time_step * (demand_in - flows[0])).max(0.0);

    StepResult {
        state: RoadState::new(rho, queue, state.t + 1),
        flows,
    }
}

fn check_density(name: &'static str, value: f64, params: &RoadParams) -> Result<()> {
    if !(0.0..=params.jam_density).contains(&value) {
        return Err(Error::OutOfRange {
            name,
            value,
            min: 0.0,
            max: params.jam_density,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn params() -> RoadParams {
        RoadParams::default()
    }

    #[test]
    fn capacity_matches_hand_values() {
        let p = params();
        assert_eq!(capacity(40.0, &p).unwrap(), 4000.0);
        assert_eq!(capacity(80.0, &p).unwrap(), 3500.0);
        assert!(capacity(-1.0, &p).is_err());
        assert!(capacity(121.0, &p).is_err());
    }

    #[test]
    fn capacity_with_full_drop_reduces_to_supply_form() {
        let mut p = params();
        p.capacity_drop = 1.0;
        for rho in [0.0, 20.0, 40.0, 75.0, 120.0] {
            let expect = p.max_flow().min(p.wave_speed * (p.jam_density - rho)).max(0.0);
            assert_eq!(capacity(rho, &p).unwrap(), expect);
        }
    }

    #[test]
    fn outflow_branches() {
        let p = params();
        // demand-limited
        assert_eq!(cell_outflow(20.0, 20.0, 100.0, &p).unwrap(), 2000.0);
        // empty cell sends nothing
        assert_eq!(cell_outflow(0.0, 20.0, 100.0, &p).unwrap(), 0.0);
        // jammed receiver accepts nothing
        assert_eq!(cell_outflow(40.0, 120.0, 100.0, &p).unwrap(), 0.0);
        assert!(cell_outflow(20.0, 20.0, 150.0, &p).is_err());
    }

    #[test]
    fn outflow_monotone_in_own_density_below_critical() {
        let p = params();
        let mut prev = -1.0;
        for k in 0..=40 {
            let rho = k as f64;
            let q = cell_outflow(rho, 30.0, p.free_flow_speed, &p).unwrap();
            assert!(q >= prev);
            prev = q;
        }
    }

    #[test]
    fn outflow_monotone_nonincreasing_in_downstream_density() {
        let p = params();
        let mut prev = f64::INFINITY;
        for k in 0..=120 {
            let q = cell_outflow(60.0, k as f64, p.free_flow_speed, &p).unwrap();
            assert!(q <= prev);
            prev = q;
        }
    }

    #[test]
    fn traffic_speed_convention() {
        let p = params();
        assert_eq!(traffic_speed(20.0, 2000.0, &p), 100.0);
        assert_eq!(traffic_speed(0.0, 0.0, &p), 100.0);
        assert_eq!(traffic_speed(80.0, 2000.0, &p), 25.0);
    }

    #[test]
    fn head_override_saturates_and_scales() {
        let p = params();
        // reference at the cell past the head; head cell holds 40 veh/km
        let profile = ReferenceProfile::new(10, vec![40.0, 20.0]);
        let rho = |i: usize, val: f64| {
            let mut r = vec![32.0; 50];
            r[i] = val;
            r
        };
        // target >= current density: no restriction
        let r = rho(10, 15.0);
        let u = reference_overrides(&profile, &r, &p).unwrap();
        assert_eq!(u.last().unwrap(), &(10, 100.0));
        // target 20 with current 40 halves the speed
        let r = rho(10, 40.0);
        let u = reference_overrides(&profile, &r, &p).unwrap();
        assert_eq!(u.last().unwrap(), &(10, 50.0));
    }

    // Hand-evaluated three-cell chain: targets (80, 57.5, 35) for cells
    // 10..=12 with current densities 32, 80, 80, 40 in cells 9..=12 give
    // overrides (39.0625, 15.625, 43.75) on cells 9..=11, and one plain CTM
    // step under those overrides lands every profiled cell exactly on its
    // target.
    #[test]
    fn recursion_chain_matches_hand_evaluation_and_locks_profile() {
        let p = params();
        let profile = ReferenceProfile::new(10, vec![80.0, 57.5, 35.0]);
        let mut rho = vec![32.0; 50];
        rho[10] = 80.0;
        rho[11] = 80.0;
        rho[12] = 40.0;
        let pairs = reference_overrides(&profile, &rho, &p).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0], (9, 39.0625));
        assert_eq!(pairs[1], (10, 15.625));
        assert_eq!(pairs[2], (11, 43.75));

        let mut overrides = SpeedOverrides::none(&p);
        for (i, u) in &pairs {
            overrides.restrict(*i, *u);
        }
        let state = RoadState::new(rho, 0.0, 0);
        let next = step(&state, &overrides, 3200.0, p.max_flow(), &p);
        assert!((next.state.rho[10] - 80.0).abs() < 1e-9);
        assert!((next.state.rho[11] - 57.5).abs() < 1e-9);
        assert!((next.state.rho[12] - 35.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_degenerate_profiles() {
        let p = params();
        let rho = vec![32.0; 50];
        assert!(reference_overrides(&ReferenceProfile::new(10, vec![]), &rho, &p).is_err());
        assert!(reference_overrides(&ReferenceProfile::new(80, vec![40.0]), &rho, &p).is_err());
        assert!(reference_overrides(&ReferenceProfile::new(10, vec![150.0]), &rho, &p).is_err());
    }

    #[test]
    fn closed_road_conserves_mass() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho: Vec<f64> = (0..p.cell_count).map(|_| rng.gen_range(0.0..120.0)).collect();
        let mut state = RoadState::new(rho, 0.0, 0);
        let total0 = state.total_vehicles(&p);
        let overrides = SpeedOverrides::none(&p);
        for _ in 0..200 {
            let r = step(&state, &overrides, 0.0, 0.0, &p);
            state = r.state;
        }
        assert!((state.total_vehicles(&p) - total0).abs() < 1e-9 * total0.max(1.0));
    }

    #[test]
    fn uniform_equilibrium_is_a_fixed_point() {
        let p = params();
        let state = RoadState::uniform(32.0, &p);
        let r = step(&state, &SpeedOverrides::none(&p), 3200.0, p.max_flow(), &p);
        for (a, b) in r.state.rho.iter().zip(state.rho.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(r.state.queue.abs() < 1e-12);
    }

    #[test]
    fn free_flow_pulse_advects_one_cell_per_step() {
        let mut p = params();
        p.cell_count = 5;
        let mut state = RoadState::new(vec![0.0, 0.0, 25.0, 0.0, 0.0], 0.0, 0);
        let overrides = SpeedOverrides::none(&p);
        for k in 0..2 {
            let r = step(&state, &overrides, 0.0, p.max_flow(), &p);
            state = r.state;
            let mut expect = vec![0.0; 5];
            expect[3 + k] = 25.0;
            for (a, b) in state.rho.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-9, "step {k}: {:?}", state.rho);
            }
        }
    }

    #[test]
    fn random_states_stay_bounded_and_conserve_mass() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let rho: Vec<f64> = (0..p.cell_count).map(|_| rng.gen_range(0.0..120.0)).collect();
            let mut state = RoadState::new(rho, rng.gen_range(0.0..20.0), 0);
            let mut overrides = SpeedOverrides::none(&p);
            for i in 0..p.cell_count {
                if rng.gen_bool(0.3) {
                    overrides.restrict(i, rng.gen_range(0.0..100.0));
                }
            }
            for _ in 0..40 {
                let demand = rng.gen_range(0.0..4200.0);
                let supply = rng.gen_range(0.0..4200.0);
                let before = state.total_vehicles(&p);
                let r = step(&state, &overrides, demand, supply, &p);
                let expected_delta =
                    p.time_step * (demand - r.flows[p.cell_count]);
                let after = r.state.total_vehicles(&p);
                assert!(
                    (after - before - expected_delta).abs() < 1e-9 * before.max(1.0),
                    "mass balance broken"
                );
                for (i, &q) in r.flows.iter().enumerate() {
                    assert!(q <= p.max_flow() + 1e-9, "flux bound broken at {i}");
                    assert!(q >= 0.0);
                }
                for &rho in &r.state.rho {
                    assert!((0.0..=p.jam_density).contains(&rho));
                }
                state = r.state;
            }
        }
    }
}
