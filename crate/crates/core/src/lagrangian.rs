//! Stop-and-go waves and connected vehicles.
//!
//! A wave is a band of congestion denser than the critical density whose
//! downstream front recedes upstream while it discharges at reduced flow; a
//! slow-driving actuator vehicle is a moving bottleneck whose wake is
//! treated as a wave of its own. Both couple into the cell dynamics through
//! reference density profiles.

use crate::ctm;
use crate::error::{Error, Result};
use crate::params::RoadParams;

/// Where a tracked wave came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveSource {
    /// Entered the segment from downstream.
    Exogenous,
    /// Wake of a controlled moving bottleneck.
    Bottleneck,
}

/// One tracked stop-and-go wave.
#[derive(Debug, Clone)]
pub struct Wave {
    pub id: u64,
    /// Upstream-most cell of the band.
    pub tail_cell: usize,
    /// Cell containing the downstream front.
    pub head_cell: usize,
    /// Downstream front position z (km). May lie beyond the segment while
    /// the wave is still entering.
    pub front_pos: f64,
    /// Fractional tail position (km); the tail cell index follows it.
    pub tail_pos: f64,
    /// Density inside the band (veh/km), above critical.
    pub core_density: f64,
    /// Density discharged from the front (veh/km).
    pub discharge_density: f64,
    /// Front speed lambda_d (km/h); negative for exogenous waves, equal to
    /// the commanded speed for bottleneck wakes.
    pub front_speed: f64,
    pub source: WaveSource,
}

impl Wave {
    /// A wave is gone once its head has caught up with its tail.
    pub fn dissipated(&self) -> bool {
        self.head_cell <= self.tail_cell
    }

    /// Band width front-to-tail (km).
    pub fn width(&self) -> f64 {
        self.front_pos - self.tail_pos
    }
}

/// Role a connected vehicle can play.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CavRole {
    /// Neither sensing nor actuating.
    Inactive,
    /// Sensor only.
    Probe,
    /// Sensor and controllable moving bottleneck.
    Actuator,
}

/// One connected vehicle.
#[derive(Debug, Clone)]
pub struct Cav {
    pub id: u64,
    /// Position y (km).
    pub pos: f64,
    pub role: CavRole,
    /// Whether the vehicle is currently transmitting measurements.
    pub sensing_active: bool,
    /// Commanded speed u (km/h); V whenever the vehicle is not being
    /// actively slowed.
    pub command: f64,
    /// Wave id this actuator is focused on, if any.
    pub focus_wave: Option<u64>,
}

impl Cav {
    pub fn new(id: u64, pos: f64, role: CavRole, free_flow_speed: f64) -> Self {
        Self {
            id,
            pos,
            role,
            sensing_active: false,
            command: free_flow_speed,
            focus_wave: None,
        }
    }

    /// Cell index containing the vehicle.
    pub fn cell(&self, params: &RoadParams) -> usize {
        params.cell_of(self.pos)
    }

    /// An actuator commanded below the local traffic speed restricts the
    /// flow at its position.
    pub fn is_actively_controlled(&self, local_speed: f64) -> bool {
        self.role == CavRole::Actuator && self.command < local_speed
    }
}

/// Reference densities for a run of consecutive cells, used to build speed
/// overrides. `first_cell` may stick out of the segment at either end; the
/// values are next-step targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceProfile {
    pub first_cell: isize,
    pub targets: Vec<f64>,
}

impl ReferenceProfile {
    pub fn new(first_cell: isize, targets: Vec<f64>) -> Self {
        Self { first_cell, targets }
    }

    pub fn last_cell(&self) -> isize {
        self.first_cell + self.targets.len() as isize - 1
    }

    /// Target density for `cell`; callers stay within the profile range.
    pub fn target(&self, cell: isize) -> f64 {
        self.targets[(cell - self.first_cell) as usize]
    }

    pub(crate) fn validate(&self, n_cells: isize, params: &RoadParams) -> Result<()> {
        if self.targets.is_empty() || self.first_cell > n_cells || self.last_cell() < 1 {
            return Err(Error::BadCellRange {
                from: self.first_cell,
                to: self.last_cell(),
                n: n_cells as usize,
            });
        }
        for &t in &self.targets {
            if !(0.0..=params.jam_density).contains(&t) {
                return Err(Error::OutOfRange {
                    name: "reference density",
                    value: t,
                    min: 0.0,
                    max: params.jam_density,
                });
            }
        }
        Ok(())
    }
}

/// Density discharged from a stop-and-go wave of core density `rho_c`:
/// (W/V)·(P − (1−alpha)·sigma − alpha·rho_c). Below critical whenever the
/// capacity drop is active.
pub fn discharge_density(rho_c: f64, params: &RoadParams) -> Result<f64> {
    if !(rho_c > params.critical_density && rho_c <= params.jam_density) {
        return Err(Error::OutOfRange {
            name: "rho_c",
            value: rho_c,
            min: params.critical_density,
            max: params.jam_density,
        });
    }
    Ok(discharge_density_raw(rho_c, params))
}

pub(crate) fn discharge_density_raw(rho_c: f64, params: &RoadParams) -> f64 {
    params.wave_speed / params.free_flow_speed
        * (params.jam_density
            - (1.0 - params.capacity_drop) * params.critical_density
            - params.capacity_drop * rho_c)
}

/// Speed of an exogenous wave's downstream front:
/// −V·(1−alpha)·sigma / (P − (1−alpha)·sigma). Independent of the core
/// density, and strictly negative for alpha < 1.
pub fn wave_front_speed(params: &RoadParams) -> f64 {
    let s = (1.0 - params.capacity_drop) * params.critical_density;
    -params.free_flow_speed * s / (params.jam_density - s)
}

/// Shock speed between two density states on the triangular diagram,
/// (q(a) − q(b)) / (a − b); zero for a vanishing jump.
pub fn shock_speed(rho_a: f64, rho_b: f64, params: &RoadParams) -> f64 {
    if (rho_a - rho_b).abs() < 1e-9 {
        0.0
    } else {
        (params.triangular_flow(rho_a) - params.triangular_flow(rho_b)) / (rho_a - rho_b)
    }
}

/// Reference profile of a wave at its current geometry: core cells at
/// rho_c, the head cell interpolated by the front's position inside it, and
/// the next cell downstream at rho_d. Covers cells [tail, head + 1].
pub fn wave_reference(wave: &Wave, params: &RoadParams) -> Result<ReferenceProfile> {
    if wave.dissipated() {
        return Err(Error::WaveDissipated { id: wave.id });
    }
    let l = params.cell_length;
    let frac = ((wave.front_pos - wave.head_cell as f64 * l) / l).clamp(0.0, 1.0);
    let head_value =
        wave.discharge_density + (wave.core_density - wave.discharge_density) * frac;

    let mut targets = vec![wave.core_density; wave.head_cell - wave.tail_cell];
    targets.push(head_value);
    targets.push(wave.discharge_density);
    Ok(ReferenceProfile::new(wave.tail_cell as isize, targets))
}

/// Moves a wave one step: the front recedes at its own speed, the tail
/// follows the shock between the density just upstream and the core. Cell
/// indices track the fractional positions; once the head cell reaches the
/// tail cell the wave is dissipated.
pub fn advance_wave(wave: &Wave, upstream_density: f64, params: &RoadParams) -> Wave {
    let t = params.time_step;
    let mut next = wave.clone();
    next.front_pos += wave.front_speed * t;
    next.tail_pos =
        (wave.tail_pos + shock_speed(upstream_density, wave.core_density, params) * t).max(0.0);
    next.head_cell = params.cell_of(next.front_pos);
    next.tail_cell = params.cell_of(next.tail_pos);
    next
}

/// Density in the wake of a moving bottleneck driving at `u`:
/// (W·P − (V−u)·(sigma−sigma_b)) / (u + W).
pub fn bottleneck_density(u: f64, params: &RoadParams) -> Result<f64> {
    if !(0.0..=params.free_flow_speed).contains(&u) {
        return Err(Error::OutOfRange {
            name: "u",
            value: u,
            min: 0.0,
            max: params.free_flow_speed,
        });
    }
    Ok(bottleneck_density_raw(u, params))
}

pub(crate) fn bottleneck_density_raw(u: f64, params: &RoadParams) -> f64 {
    let passing = params.critical_density - params.bottleneck_offset;
    (params.wave_speed * params.jam_density - (params.free_flow_speed - u) * passing)
        / (u + params.wave_speed)
}

/// Reference profile around a controlled moving bottleneck: wake density
/// behind it, a reduced density ahead of it, and an interpolation in its own
/// cell. Covers cells [i_y − 1, i_y + 1].
pub fn bottleneck_reference(cav: &Cav, local_speed: f64, params: &RoadParams) -> Result<ReferenceProfile> {
    if !cav.is_actively_controlled(local_speed) {
        return Err(Error::NotActuating { id: cav.id });
    }
    let rho_b = bottleneck_density(cav.command, params)?;
    let i_y = cav.cell(params);
    let l = params.cell_length;
    let frac = ((cav.pos - i_y as f64 * l) / l).clamp(0.0, 1.0);
    let own_cell = params.bottleneck_offset + (rho_b - params.bottleneck_offset) * frac;
    let ahead = params.critical_density - params.bottleneck_offset;
    Ok(ReferenceProfile::new(
        i_y as isize - 1,
        vec![rho_b, own_cell, ahead],
    ))
}

/// Moves a vehicle one step at the lesser of the local traffic speed and
/// its command. Callers drop vehicles whose position passes the end of the
/// segment.
pub fn advance_cav(cav: &Cav, local_speed: f64, params: &RoadParams) -> Cav {
    let mut next = cav.clone();
    next.pos += local_speed.min(cav.command) * params.time_step;
    next
}

/// Caps each trailing actuator at one vehicle spacing behind the actuator
/// ahead of it, so actuators never overtake each other. `cavs` may be in any
/// order; only actuator positions are touched.
pub fn enforce_actuator_ordering(cavs: &mut [Cav], params: &RoadParams) {
    let spacing = 2.0 / params.jam_density;
    let mut idx: Vec<usize> = (0..cavs.len())
        .filter(|&i| cavs[i].role == CavRole::Actuator)
        .collect();
    idx.sort_by(|&a, &b| cavs[b].pos.partial_cmp(&cavs[a].pos).unwrap());
    for w in 1..idx.len() {
        let lead = cavs[idx[w - 1]].pos;
        let follower = &mut cavs[idx[w]];
        if follower.pos > lead - spacing {
            follower.pos = lead - spacing;
        }
    }
}

/// Combined speed overrides for one step: every non-dissipated wave inside
/// the segment and every actively controlled actuator contributes its
/// next-step reference profile, and overlapping profiles combine cell-wise
/// by minimum speed.
///
/// Waves are advanced to their next-step geometry first (front at its own
/// speed, tail at the shock speed against the density just upstream), and a
/// controlled actuator's profile is built at its predicted next position.
/// Whether an actuator restricts the flow is judged against the
/// fundamental-diagram speed of its cell, which breaks the circular
/// dependency between overrides and realized flows.
pub fn build_overrides(
    waves: &[Wave],
    cavs: &[Cav],
    density: &[f64],
    params: &RoadParams,
) -> crate::params::SpeedOverrides {
    let mut overrides = crate::params::SpeedOverrides::none(params);
    let mut apply = |profile: &ReferenceProfile| {
        if let Ok(pairs) = crate::ctm::reference_overrides(profile, density, params) {
            for (cell, speed) in pairs {
                overrides.restrict(cell, speed);
            }
        }
    };

    for wave in waves {
        if wave.dissipated() || wave.front_pos > params.segment_length() {
            continue;
        }
        let upstream = density[wave.tail_cell.saturating_sub(1)];
        let next = advance_wave(wave, upstream, params);
        if next.dissipated() {
            continue;
        }
        if let Ok(profile) = wave_reference(&next, params) {
            apply(&profile);
        }
    }

    for cav in cavs {
        let local = params.triangular_speed(density[cav.cell(params)]);
        if !cav.is_actively_controlled(local) {
            continue;
        }
        let predicted = advance_cav(cav, local, params);
        if let Ok(profile) = bottleneck_reference(&predicted, local, params) {
            apply(&profile);
        }
    }
    overrides
}

/// The congestion in the wake of a controlled bottleneck, viewed as a
/// stop-and-go wave: front at the vehicle, front speed equal to its command,
/// discharging at the wake density.
pub fn bottleneck_as_wave(
    cav: &Cav,
    local_speed: f64,
    wake_core_density: f64,
    wake_tail_cell: usize,
    params: &RoadParams,
) -> Result<Wave> {
    if !cav.is_actively_controlled(local_speed) {
        return Err(Error::NotActuating { id: cav.id });
    }
    let i_y = cav.cell(params);
    Ok(Wave {
        id: cav.id,
        tail_cell: wake_tail_cell.min(i_y),
        head_cell: i_y,
        front_pos: cav.pos,
        tail_pos: wake_tail_cell as f64 * params.cell_length,
        core_density: wake_core_density,
        discharge_density: bottleneck_density_raw(cav.command, params),
        front_speed: cav.command,
        source: WaveSource::Bottleneck,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{RoadState, SpeedOverrides};

    fn params() -> RoadParams {
        RoadParams::default()
    }

    fn wave(tail_cell: usize, front_pos: f64, rho_c: f64, p: &RoadParams) -> Wave {
        Wave {
            id: 1,
            tail_cell,
            head_cell: p.cell_of(front_pos),
            front_pos,
            tail_pos: tail_cell as f64 * p.cell_length,
            core_density: rho_c,
            discharge_density: discharge_density_raw(rho_c, p),
            front_speed: wave_front_speed(p),
            source: WaveSource::Exogenous,
        }
    }

    #[test]
    fn discharge_density_values() {
        let p = params();
        assert_eq!(discharge_density(80.0, &p).unwrap(), 35.0);
        // continuity toward the critical density
        assert!((discharge_density(40.0 + 1e-9, &p).unwrap() - 40.0).abs() < 1e-6);
        assert!(discharge_density(40.0, &p).is_err());
        let mut p0 = params();
        p0.capacity_drop = 0.0;
        for rho_c in [50.0, 80.0, 119.0] {
            assert_eq!(discharge_density(rho_c, &p0).unwrap(), 40.0);
        }
    }

    #[test]
    fn front_speed_values() {
        let p = params();
        assert!((wave_front_speed(&p) + 100.0 / 3.0).abs() < 1e-9);
        let mut p1 = params();
        p1.capacity_drop = 1.0;
        assert_eq!(wave_front_speed(&p1), 0.0);
        let mut p0 = params();
        p0.capacity_drop = 0.0;
        assert_eq!(wave_front_speed(&p0), -50.0);
    }

    #[test]
    fn wave_profile_interpolates_head_cell() {
        let p = params();
        // front exactly on the head cell's upstream boundary
        let w = wave(10, 1.4, 80.0, &p);
        assert_eq!(w.head_cell, 14);
        let prof = wave_reference(&w, &p).unwrap();
        assert_eq!(prof.first_cell, 10);
        assert_eq!(prof.targets.len(), 6);
        assert_eq!(prof.target(13), 80.0);
        assert_eq!(prof.target(14), 35.0);
        assert_eq!(prof.target(15), 35.0);

        // midway through the head cell
        let w = wave(10, 1.45, 80.0, &p);
        let prof = wave_reference(&w, &p).unwrap();
        assert_eq!(prof.target(14), 57.5);

        // front at the downstream boundary of its recorded head cell
        let mut w = wave(10, 1.4, 80.0, &p);
        w.front_pos = 1.5;
        let prof = wave_reference(&w, &p).unwrap();
        assert_eq!(prof.target(14), 80.0);
    }

    #[test]
    fn dissipated_wave_has_no_profile() {
        let p = params();
        let mut w = wave(14, 1.45, 80.0, &p);
        w.head_cell = 14;
        assert!(w.dissipated());
        assert!(wave_reference(&w, &p).is_err());
    }

    // Excess mass above the discharge baseline implied by the profile is
    // (rho_c − rho_d)·(z − tail), a continuous function of the front
    // position: sweeping z across cell boundaries never jumps.
    #[test]
    fn profile_mass_is_continuous_in_front_position() {
        let p = params();
        let mut prev: Option<f64> = None;
        let mut z = 1.401;
        while z < 2.2 {
            let mut w = wave(10, z, 80.0, &p);
            w.head_cell = p.cell_of(z);
            let prof = wave_reference(&w, &p).unwrap();
            let mass: f64 = prof
                .targets
                .iter()
                .map(|t| (t - w.discharge_density) * p.cell_length)
                .sum();
            let expect = (w.core_density - w.discharge_density) * (z - 1.0);
            assert!((mass - expect).abs() < 1e-9, "z = {z}");
            if let Some(m) = prev {
                assert!((mass - m).abs() < (80.0 - 35.0) * 0.0011, "jump at z = {z}");
            }
            prev = Some(mass);
            z += 0.001;
        }
    }

    #[test]
    fn advance_moves_front_by_lambda_t() {
        let p = params();
        let w = wave(10, 2.0, 80.0, &p);
        let n = advance_wave(&w, 32.0, &p);
        assert!((n.front_pos - (2.0 - 100.0 / 3.0 * 0.001)).abs() < 1e-12);
    }

    #[test]
    fn tail_is_stationary_against_equal_density() {
        let p = params();
        let w = wave(10, 2.0, 80.0, &p);
        let n = advance_wave(&w, 80.0, &p);
        assert_eq!(n.tail_pos, w.tail_pos);
    }

    #[test]
    fn width_shrinks_when_upstream_flow_is_below_discharge() {
        let p = params();
        let mut w = wave(10, 2.0, 80.0, &p);
        let mut width = w.width();
        for _ in 0..50 {
            w = advance_wave(&w, 32.0, &p);
            assert!(w.width() <= width + 1e-12);
            width = w.width();
        }
        assert!(width < 1.0);
    }

    #[test]
    fn dissipation_fires_exactly_when_head_reaches_tail() {
        let p = params();
        let mut w = wave(5, 2.0, 80.0, &p);
        let mut steps = 0;
        while !w.dissipated() {
            assert!(w.head_cell > w.tail_cell);
            w = advance_wave(&w, 20.0, &p);
            steps += 1;
            assert!(steps < 10_000);
        }
        assert!(w.head_cell <= w.tail_cell);
    }

    // Shock-tracked tail against a brute-force run of the plain cell
    // dynamics: the tracked tail cell stays within two cells of the actual
    // upstream edge of the congested band.
    #[test]
    fn tail_tracking_matches_brute_force_ctm() {
        let mut p = params();
        p.cell_count = 40;
        let rho_c = 90.0;
        let mut rho = vec![30.0; 40];
        for cell in 25..33 {
            rho[cell] = rho_c;
        }
        let mut state = RoadState::new(rho, 0.0, 0);
        let mut w = wave(25, 3.3, rho_c, &p);
        let overrides = SpeedOverrides::none(&p);
        for _ in 0..60 {
            let up = state.rho[w.tail_cell.saturating_sub(1)];
            let r = ctm::step(&state, &overrides, 3000.0, p.max_flow(), &p);
            w = advance_wave(&w, up, &p);
            state = r.state;
            let actual_tail = state
                .rho
                .iter()
                .position(|&d| d > (p.critical_density + rho_c) / 2.0);
            if let Some(actual) = actual_tail {
                assert!(
                    (actual as isize - w.tail_cell as isize).abs() <= 2,
                    "tracked {} vs actual {actual}",
                    w.tail_cell
                );
            }
        }
    }

    #[test]
    fn bottleneck_density_values() {
        let p = params();
        assert_eq!(bottleneck_density(100.0, &p).unwrap(), 40.0);
        assert_eq!(bottleneck_density(30.0, &p).unwrap(), 57.5);
        assert_eq!(bottleneck_density(0.0, &p).unwrap(), 80.0);
        assert!(bottleneck_density(-1.0, &p).is_err());
        assert!(bottleneck_density(101.0, &p).is_err());
    }

    #[test]
    fn bottleneck_density_is_decreasing_in_u() {
        let p = params();
        let mut prev = f64::INFINITY;
        for k in 0..=100 {
            let rho = bottleneck_density(k as f64, &p).unwrap();
            assert!(rho < prev);
            prev = rho;
        }
        assert!(bottleneck_density(100.0, &p).unwrap() <= p.critical_density);
    }

    #[test]
    fn bottleneck_profile_interpolates_own_cell() {
        let p = params();
        let mut cav = Cav::new(3, 2.0, CavRole::Actuator, 100.0);
        cav.command = 30.0;
        // left edge of cell 20
        let prof = bottleneck_reference(&cav, 100.0, &p).unwrap();
        assert_eq!(prof.first_cell, 19);
        assert_eq!(prof.target(19), 57.5);
        assert_eq!(prof.target(20), 20.0);
        assert_eq!(prof.target(21), 20.0);
        // mid-cell
        cav.pos = 2.05;
        let prof = bottleneck_reference(&cav, 100.0, &p).unwrap();
        assert_eq!(prof.target(20), 38.75);
        // right edge
        cav.pos = 2.0999999999;
        let prof = bottleneck_reference(&cav, 100.0, &p).unwrap();
        assert!((prof.target(20) - 57.5).abs() < 1e-6);
        // passive vehicles have no profile
        cav.command = 100.0;
        assert!(bottleneck_reference(&cav, 100.0, &p).is_err());
    }

    #[test]
    fn cav_advances_at_min_of_traffic_and_command() {
        let p = params();
        let mut cav = Cav::new(1, 1.0, CavRole::Actuator, 100.0);
        assert!((advance_cav(&cav, 100.0, &p).pos - 1.1).abs() < 1e-12);
        cav.command = 30.0;
        assert!((advance_cav(&cav, 100.0, &p).pos - 1.03).abs() < 1e-12);
        assert!((advance_cav(&cav, 10.0, &p).pos - 1.01).abs() < 1e-12);
    }

    #[test]
    fn actuator_ordering_is_preserved() {
        let p = params();
        let mut cavs = vec![
            Cav::new(0, 3.0, CavRole::Actuator, 100.0),
            Cav::new(1, 2.99, CavRole::Actuator, 100.0),
            Cav::new(2, 2.5, CavRole::Probe, 100.0),
        ];
        cavs[1].pos = 3.2; // would have overtaken
        enforce_actuator_ordering(&mut cavs, &p);
        assert!(cavs[1].pos <= cavs[0].pos - 2.0 / p.jam_density + 1e-12);
        // probes are untouched
        assert_eq!(cavs[2].pos, 2.5);
    }

    #[test]
    fn wake_counts_as_a_wave() {
        let p = params();
        let mut cav = Cav::new(7, 2.05, CavRole::Actuator, 100.0);
        cav.command = 30.0;
        let w = bottleneck_as_wave(&cav, 100.0, 60.0, 18, &p).unwrap();
        assert_eq!(w.front_pos, 2.05);
        assert_eq!(w.front_speed, 30.0);
        assert_eq!(w.discharge_density, 57.5);
        assert_eq!(w.source, WaveSource::Bottleneck);
        // a vehicle at free-flow speed restricts nothing
        cav.command = 100.0;
        assert!(bottleneck_as_wave(&cav, 100.0, 60.0, 18, &p).is_err());
    }
}
