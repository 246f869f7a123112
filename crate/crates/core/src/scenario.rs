//! Seed-reproducible scenario generation.
//!
//! A scenario fixes everything random about one run: the connected-vehicle
//! arrival stream and roles, the inflow demand per step, the initial
//! densities, and the stop-and-go waves scheduled to enter from downstream.
//! Each concern draws from its own substream of the seed, so changing e.g.
//! the mean vehicle gap leaves the waves and the inflow of a given seed
//! untouched, and changing the probe probability leaves the actuator set
//! untouched.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lagrangian::{wave_front_speed, CavRole};
use crate::params::RoadParams;

/// Randomization ranges and fleet composition for scenario generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Mean gap between consecutive connected vehicles (km).
    pub mean_cav_gap: f64,
    /// Probability that an arriving vehicle is a probe.
    pub probe_prob: f64,
    /// Probability that an arriving vehicle is an actuator.
    pub actuator_prob: f64,
    /// Mean inflow demand (veh/h).
    pub mean_inflow: f64,
    /// Run duration (h).
    pub sim_duration: f64,
    /// Inflow fluctuation amplitude as a fraction of the mean, held in
    /// blocks.
    pub inflow_fluctuation: f64,
    /// Length of one inflow block (h).
    pub inflow_block: f64,
    /// Initial-density fluctuation amplitude as a fraction of the mean.
    pub init_fluctuation: f64,
    /// How many waves to schedule per run (inclusive range).
    pub wave_count: (u32, u32),
    /// Wave arrival times as fractions of the duration.
    pub wave_time_frac: (f64, f64),
    /// Wave core density range (veh/km).
    pub wave_core: (f64, f64),
    /// Wave initial width range (km).
    pub wave_width: (f64, f64),
    /// Fixed wave schedule; overrides the randomized one when set.
    pub scripted_waves: Option<Vec<WaveInjection>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mean_cav_gap: 0.5,
            probe_prob: 0.3,
            actuator_prob: 0.3,
            mean_inflow: 3200.0,
            sim_duration: 1.0,
            inflow_fluctuation: 0.1,
            inflow_block: 5.0 / 60.0,
            init_fluctuation: 0.2,
            wave_count: (1, 3),
            wave_time_frac: (0.2, 0.8),
            wave_core: (70.0, 110.0),
            wave_width: (0.2, 0.6),
            scripted_waves: None,
        }
    }
}

/// One stop-and-go wave scheduled to reach the downstream end of the
/// segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveInjection {
    /// Time the wave's upstream edge reaches the segment exit (h).
    pub arrival_time: f64,
    /// Core density (veh/km).
    pub core_density: f64,
    /// Width of the band when it arrives (km).
    pub width: f64,
}

/// One connected vehicle joining the simulation: either on the road at time
/// zero (`pos > 0`) or entering upstream later.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub time: f64,
    pub pos: f64,
    pub role: CavRole,
}

/// A fully realized scenario; a pure function of its config and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub mean_inflow: f64,
    pub steps: usize,
    pub arrivals: Vec<Arrival>,
    /// Demand at the upstream boundary, per step (veh/h).
    pub demand: Vec<f64>,
    pub initial_density: Vec<f64>,
    pub waves: Vec<WaveInjection>,
}

const STREAM_INIT: u64 = 0x696e6974;
const STREAM_INFLOW: u64 = 0x666c6f77;
const STREAM_WAVES: u64 = 0x77617665;
const STREAM_ARRIVALS: u64 = 0x61727276;
const STREAM_ROLES: u64 = 0x726f6c65;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn stream(seed: u64, domain: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ domain))
}

fn sample_exp(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    -mean * (1.0 - rng.gen::<f64>()).ln()
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Generates the scenario for `(config, seed)`; identical inputs give a
/// bit-identical scenario.
pub fn generate(config: &ScenarioConfig, seed: u64, params: &RoadParams) -> Result<Scenario> {
    validate(config)?;
    let steps = (config.sim_duration / params.time_step).round() as usize;
    let length = params.segment_length();

    let mut init_rng = stream(seed, STREAM_INIT);
    let base = config.mean_inflow / params.free_flow_speed;
    let f = config.init_fluctuation;
    let initial_density: Vec<f64> = (0..params.cell_count)
        .map(|_| (base * sample_range(&mut init_rng, 1.0 - f, 1.0 + f)).clamp(0.0, params.jam_density))
        .collect();

    let mut inflow_rng = stream(seed, STREAM_INFLOW);
    let block_steps = ((config.inflow_block / params.time_step).round() as usize).max(1);
    let f = config.inflow_fluctuation;
    let mut demand = Vec::with_capacity(steps);
    while demand.len() < steps {
        let level = config.mean_inflow * sample_range(&mut inflow_rng, 1.0 - f, 1.0 + f);
        for _ in 0..block_steps {
            if demand.len() == steps {
                break;
            }
            demand.push(level);
        }
    }

    let waves = match &config.scripted_waves {
        Some(list) => {
            let mut w = list.clone();
            w.sort_by(|a, b| a.arrival_time.partial_cmp(&b.arrival_time).unwrap());
            w
        }
        None => {
            let mut wave_rng = stream(seed, STREAM_WAVES);
            let count = wave_rng.gen_range(config.wave_count.0..=config.wave_count.1);
            let mut w: Vec<WaveInjection> = (0..count)
                .map(|_| WaveInjection {
                    arrival_time: config.sim_duration
                        * sample_range(&mut wave_rng, config.wave_time_frac.0, config.wave_time_frac.1),
                    core_density: sample_range(&mut wave_rng, config.wave_core.0, config.wave_core.1)
                        .min(params.jam_density),
                    width: sample_range(&mut wave_rng, config.wave_width.0, config.wave_width.1),
                })
                .collect();
            w.sort_by(|a, b| a.arrival_time.partial_cmp(&b.arrival_time).unwrap());
            w
        }
    };

    let mut arrival_rng = stream(seed, STREAM_ARRIVALS);
    let mut role_rng = stream(seed, STREAM_ROLES);
    let mut roll = |rng: &mut ChaCha8Rng| -> CavRole {
        let r: f64 = rng.gen();
        if r < config.actuator_prob {
            CavRole::Actuator
        } else if r < config.actuator_prob + config.probe_prob {
            CavRole::Probe
        } else {
            CavRole::Inactive
        }
    };

    let mut arrivals = Vec::new();
    // fleet already on the road, downstream-most first
    let mut x = length - sample_exp(&mut arrival_rng, config.mean_cav_gap);
    while x > 0.0 {
        arrivals.push(Arrival {
            time: 0.0,
            pos: x,
            role: roll(&mut role_rng),
        });
        x -= sample_exp(&mut arrival_rng, config.mean_cav_gap);
    }
    // vehicles entering upstream; gaps convert to times at the free-flow speed
    let mut t = sample_exp(&mut arrival_rng, config.mean_cav_gap) / params.free_flow_speed;
    while t < config.sim_duration {
        arrivals.push(Arrival {
            time: t,
            pos: 0.0,
            role: roll(&mut role_rng),
        });
        t += sample_exp(&mut arrival_rng, config.mean_cav_gap) / params.free_flow_speed;
    }

    Ok(Scenario {
        seed,
        mean_inflow: config.mean_inflow,
        steps,
        arrivals,
        demand,
        initial_density,
        waves,
    })
}

fn validate(config: &ScenarioConfig) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidParams(msg));
    if !(config.probe_prob >= 0.0
        && config.actuator_prob >= 0.0
        && config.probe_prob + config.actuator_prob <= 1.0 + 1e-12)
    {
        return bad(format!(
            "need p_p, p_a >= 0 and p_p + p_a <= 1, got p_p = {}, p_a = {}",
            config.probe_prob, config.actuator_prob
        ));
    }
    if !(config.mean_cav_gap > 0.0) {
        return bad(format!("mean CAV gap {} must be positive", config.mean_cav_gap));
    }
    if !(config.sim_duration > 0.0) {
        return bad(format!("duration {} must be positive", config.sim_duration));
    }
    if !(config.mean_inflow > 0.0) {
        return bad(format!("mean inflow {} must be positive", config.mean_inflow));
    }
    for (name, (lo, hi)) in [
        ("wave_time_frac", config.wave_time_frac),
        ("wave_core", config.wave_core),
        ("wave_width", config.wave_width),
    ] {
        if lo > hi {
            return bad(format!("{name} range [{lo}, {hi}] is inverted"));
        }
    }
    if config.wave_count.0 > config.wave_count.1 {
        return bad("wave count range is inverted".into());
    }
    Ok(())
}

impl Scenario {
    /// Step interval `[start, end)` during which an injected wave straddles
    /// the downstream boundary and restricts the exit supply.
    pub fn injection_window(&self, wave: &WaveInjection, params: &RoadParams) -> (usize, usize) {
        let start = (wave.arrival_time / params.time_step).round() as usize;
        let lambda = wave_front_speed(params);
        if lambda >= 0.0 {
            return (start, usize::MAX);
        }
        let entry_steps = (wave.width / -lambda / params.time_step).ceil() as usize;
        (start, start.saturating_add(entry_steps))
    }

    /// Supply cap at the downstream boundary for one step. While a scheduled
    /// wave straddles the exit, the boundary mirrors the wave's core density
    /// so its congestion spills back into the segment; otherwise the exit is
    /// unconstrained.
    pub fn downstream_supply(&self, step: usize, params: &RoadParams) -> Result<f64> {
        if step >= self.steps {
            return Err(Error::StepOutOfRange {
                step,
                steps: self.steps,
            });
        }
        let mut supply = params.max_flow();
        for w in &self.waves {
            let (start, end) = self.injection_window(w, params);
            if step >= start && step < end {
                supply = supply.min(params.wave_speed * (params.jam_density - w.core_density));
            }
        }
        Ok(supply.max(0.0))
    }

    /// Demand at the upstream boundary for one step.
    pub fn demand_at(&self, step: usize) -> f64 {
        self.demand[step.min(self.demand.len() - 1)]
    }

    /// Writes the scenario as a self-describing text document, one record
    /// per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cavflow-scenario v1");
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "mean-inflow {:.6}", self.mean_inflow);
        let _ = writeln!(out, "steps {}", self.steps);
        for (i, d) in self.initial_density.iter().enumerate() {
            let _ = writeln!(out, "init {} {:.9}", i, d);
        }
        for (i, q) in self.demand.iter().enumerate() {
            let _ = writeln!(out, "demand {} {:.9}", i, q);
        }
        for a in &self.arrivals {
            let role = match a.role {
                CavRole::Inactive => "inactive",
                CavRole::Probe => "probe",
                CavRole::Actuator => "actuator",
            };
            let _ = writeln!(out, "arrival {:.9} {:.9} {}", a.time, a.pos, role);
        }
        for w in &self.waves {
            let _ = writeln!(
                out,
                "wave {:.9} {:.9} {:.9}",
                w.arrival_time, w.core_density, w.width
            );
        }
        out
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Config(format!("scenario line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "cavflow-scenario v1" => {}
            _ => return Err(Error::Config("not a cavflow scenario file".into())),
        }
        let mut scenario = Scenario {
            seed: 0,
            mean_inflow: 0.0,
            steps: 0,
            arrivals: Vec::new(),
            demand: Vec::new(),
            initial_density: Vec::new(),
            waves: Vec::new(),
        };
        for (no, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap();
            let mut next_f64 = || -> Result<f64> {
                parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(no + 1, "expected a number"))
            };
            match tag {
                "seed" => scenario.seed = next_f64()? as u64,
                "mean-inflow" => scenario.mean_inflow = next_f64()?,
                "steps" => scenario.steps = next_f64()? as usize,
                "init" => {
                    let _idx = next_f64()?;
                    scenario.initial_density.push(next_f64()?);
                }
                "demand" => {
                    let _idx = next_f64()?;
                    scenario.demand.push(next_f64()?);
                }
                "arrival" => {
                    let time = next_f64()?;
                    let pos = next_f64()?;
                    let role = match parts.next() {
                        Some("inactive") => CavRole::Inactive,
                        Some("probe") => CavRole::Probe,
                        Some("actuator") => CavRole::Actuator,
                        _ => return Err(bad(no + 1, "unknown role")),
                    };
                    scenario.arrivals.push(Arrival { time, pos, role });
                }
                "wave" => scenario.waves.push(WaveInjection {
                    arrival_time: next_f64()?,
                    core_density: next_f64()?,
                    width: next_f64()?,
                }),
                other => return Err(bad(no + 1, &format!("unknown record '{other}'"))),
            }
        }
        if scenario.demand.len() != scenario.steps {
            return Err(Error::Config(format!(
                "scenario declares {} steps but carries {} demand records",
                scenario.steps,
                scenario.demand.len()
            )));
        }
        Ok(scenario)
    }
}
