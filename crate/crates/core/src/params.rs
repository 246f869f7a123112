//! Road geometry, fundamental-diagram constants and per-step simulation state.
//!
//! Units are km, hours, veh/km and veh/h throughout. Densities are two-lane
//! aggregates. The discretization is tied to the free-flow speed by L = V·T,
//! so a free-flowing cell empties exactly once per step.

use crate::error::{Error, Result};

/// Fundamental-diagram and discretization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadParams {
    /// Free-flow speed V (km/h).
    pub free_flow_speed: f64,
    /// Congestion wave speed W (km/h).
    pub wave_speed: f64,
    /// Jam density P (veh/km, two-lane aggregate).
    pub jam_density: f64,
    /// Critical density sigma (veh/km).
    pub critical_density: f64,
    /// Bottleneck critical-density offset sigma_b (veh/km).
    pub bottleneck_offset: f64,
    /// Capacity-drop coefficient alpha in [0, 1].
    pub capacity_drop: f64,
    /// Cell length L (km).
    pub cell_length: f64,
    /// Time step T (h); must satisfy L = V·T.
    pub time_step: f64,
    /// Number of cells N.
    pub cell_count: usize,
    /// Minimum speed an actuator may be commanded to (km/h).
    pub min_actuator_speed: f64,
}

impl RoadParams {
    /// Validates the parameter set; in particular L = V·T must hold exactly
    /// (to floating tolerance), since the density update relies on it.
    pub fn new(
        free_flow_speed: f64,
        wave_speed: f64,
        jam_density: f64,
        critical_density: f64,
        bottleneck_offset: f64,
        capacity_drop: f64,
        cell_length: f64,
        time_step: f64,
        cell_count: usize,
        min_actuator_speed: f64,
    ) -> Result<Self> {
        let p = Self {
            free_flow_speed,
            wave_speed,
            jam_density,
            critical_density,
            bottleneck_offset,
            capacity_drop,
            cell_length,
            time_step,
            cell_count,
            min_actuator_speed,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let mut fail = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.free_flow_speed > 0.0) {
            return fail(format!("V = {} must be positive", self.free_flow_speed));
        }
        if !(self.wave_speed > 0.0) {
            return fail(format!("W = {} must be positive", self.wave_speed));
        }
        if !(self.critical_density > 0.0 && self.critical_density < self.jam_density) {
            return fail(format!(
                "need 0 < sigma < P, got sigma = {}, P = {}",
                self.critical_density, self.jam_density
            ));
        }
        if !(self.bottleneck_offset >= 0.0 && self.bottleneck_offset < self.critical_density) {
            return fail(format!(
                "need 0 <= sigma_b < sigma, got sigma_b = {}",
                self.bottleneck_offset
            ));
        }
        if !(0.0..=1.0).contains(&self.capacity_drop) {
            return fail(format!("alpha = {} outside [0, 1]", self.capacity_drop));
        }
        if !(self.min_actuator_speed > 0.0 && self.min_actuator_speed <= self.free_flow_speed) {
            return fail(format!(
                "need 0 < u_min <= V, got u_min = {}",
                self.min_actuator_speed
            ));
        }
        if self.cell_count == 0 {
            return fail("cell count must be positive".into());
        }
        let lvt = self.free_flow_speed * self.time_step;
        if !((self.cell_length - lvt).abs() <= 1e-12 * self.cell_length.max(1.0)) {
            return fail(format!(
                "L = {} but V*T = {}; the scheme requires L = V*T",
                self.cell_length, lvt
            ));
        }
        Ok(())
    }

    /// Segment length N·L (km).
    pub fn segment_length(&self) -> f64 {
        self.cell_count as f64 * self.cell_length
    }

    /// Maximum flow V·sigma (veh/h), the capacity ceiling of the road.
    pub fn max_flow(&self) -> f64 {
        self.free_flow_speed * self.critical_density
    }

    /// Cell index containing position `pos` (km), clamped to the segment.
    pub fn cell_of(&self, pos: f64) -> usize {
        let i = (pos / self.cell_length).floor();
        (i.max(0.0) as usize).min(self.cell_count - 1)
    }

    /// Plain triangular fundamental diagram min(V·rho, W·(P−rho)).
    pub fn triangular_flow(&self, rho: f64) -> f64 {
        (self.free_flow_speed * rho).min(self.wave_speed * (self.jam_density - rho))
    }

    /// Speed implied by the triangular diagram at density `rho`; V on an
    /// empty road.
    pub fn triangular_speed(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            self.free_flow_speed
        } else {
            (self.triangular_flow(rho) / rho).min(self.free_flow_speed)
        }
    }
}

impl Default for RoadParams {
    /// Two-lane freeway defaults: V = 100 km/h, W = 50 km/h, sigma = 40
    /// veh/km, alpha = 0.25, u_min = 30 km/h, with P = sigma·(1 + V/W) so the
    /// triangular diagram is continuous at sigma, sigma_b = sigma/2, and a
    /// 5 km segment split into 50 cells of 0.1 km (T = 3.6 s).
    fn default() -> Self {
        let v = 100.0;
        let w = 50.0;
        let sigma = 40.0;
        Self {
            free_flow_speed: v,
            wave_speed: w,
            jam_density: sigma * (1.0 + v / w),
            critical_density: sigma,
            bottleneck_offset: sigma / 2.0,
            capacity_drop: 0.25,
            cell_length: 0.1,
            time_step: 0.1 / v,
            cell_count: 50,
            min_actuator_speed: 30.0,
        }
    }
}

/// Per-cell densities plus the upstream queue at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadState {
    /// Density per cell (veh/km).
    pub rho: Vec<f64>,
    /// Vehicles queuing to enter at the upstream end.
    pub queue: f64,
    /// Time-step index.
    pub t: usize,
}

impl RoadState {
    pub fn new(rho: Vec<f64>, queue: f64, t: usize) -> Self {
        Self { rho, queue, t }
    }

    /// Uniform initial state at density `rho0`.
    pub fn uniform(rho0: f64, params: &RoadParams) -> Self {
        Self::new(vec![rho0; params.cell_count], 0.0, 0)
    }

    /// Vehicles on the segment plus the queue (veh).
    pub fn total_vehicles(&self, params: &RoadParams) -> f64 {
        self.rho.iter().sum::<f64>() * params.cell_length + self.queue
    }
}

/// Per-cell free-flow speed overrides U_i(t), defaulting to V everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedOverrides {
    pub speeds: Vec<f64>,
}

impl SpeedOverrides {
    pub fn none(params: &RoadParams) -> Self {
        Self {
            speeds: vec![params.free_flow_speed; params.cell_count],
        }
    }

    /// Lowers cell `i` to `speed` if that is more restrictive. Overlapping
    /// reference profiles combine by taking the minimum, which never
    /// over-drives a cell.
    pub fn restrict(&mut self, i: usize, speed: f64) {
        if i < self.speeds.len() && speed < self.speeds[i] {
            self.speeds[i] = speed.max(0.0);
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        self.speeds[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_are_consistent() {
        let p = RoadParams::default();
        assert_eq!(p.jam_density, 120.0);
        assert_eq!(p.max_flow(), 4000.0);
        assert_eq!(p.segment_length(), 5.0);
        // continuity of the triangular diagram at sigma
        assert!((p.free_flow_speed * p.critical_density
            - p.wave_speed * (p.jam_density - p.critical_density))
            .abs()
            < 1e-9);
        p.validate().unwrap();
    }

    #[test]
    fn rejects_mismatched_discretization() {
        let err = RoadParams::new(100.0, 50.0, 120.0, 40.0, 20.0, 0.25, 0.1, 0.002, 50, 30.0);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(RoadParams::new(100.0, 50.0, 30.0, 40.0, 20.0, 0.25, 0.1, 0.001, 50, 30.0).is_err());
        assert!(RoadParams::new(100.0, 50.0, 120.0, 40.0, 45.0, 0.25, 0.1, 0.001, 50, 30.0).is_err());
        assert!(RoadParams::new(100.0, 50.0, 120.0, 40.0, 20.0, 1.25, 0.1, 0.001, 50, 30.0).is_err());
        assert!(RoadParams::new(100.0, 50.0, 120.0, 40.0, 20.0, 0.25, 0.1, 0.001, 50, 0.0).is_err());
    }

    #[test]
    fn cell_of_clamps_to_segment() {
        let p = RoadParams::default();
        assert_eq!(p.cell_of(0.55), 5);
        assert_eq!(p.cell_of(-0.2), 0);
        assert_eq!(p.cell_of(99.0), 49);
    }

    #[test]
    fn overrides_combine_by_minimum() {
        let p = RoadParams::default();
        let mut u = SpeedOverrides::none(&p);
        u.restrict(3, 60.0);
        u.restrict(3, 80.0);
        assert_eq!(u.get(3), 60.0);
        u.restrict(3, -5.0);
        assert_eq!(u.get(3), 0.0);
        assert_eq!(u.get(4), 100.0);
    }
}
