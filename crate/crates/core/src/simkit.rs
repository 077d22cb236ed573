//! Synthetic detector events: charged particles spiralling through a solenoid
//! field while losing energy, plus uncorrelated and structured noise.
//!
//! Motion is integrated non-relativistically in SI units; emitted points are
//! in millimetres with charge in keV of deposited energy.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::seed::{self, Rng};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
const MEV_PER_C2_IN_KG: f64 = 1.782_661_921e-30;
const MEV_IN_JOULE: f64 = 1.602_176_634e-13;

pub const PROTON_MASS_MEV: f64 = 938.272_088;
/// Bare carbon-12 nucleus.
pub const CARBON_MASS_MEV: f64 = 11_174.862;

/// Integration stops once the speed falls below this fraction of the initial speed.
pub const STOP_SPEED_FRACTION: f64 = 1e-3;
pub const MAX_STEPS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Proton,
    Carbon,
    Other,
}

impl Species {
    pub const ALL: [Species; 3] = [Species::Proton, Species::Carbon, Species::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Species::Proton => "proton",
            Species::Carbon => "carbon",
            Species::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Species> {
        match s.trim().to_ascii_lowercase().as_str() {
            "proton" => Some(Species::Proton),
            "carbon" => Some(Species::Carbon),
            "other" => Some(Species::Other),
            _ => None,
        }
    }

    /// Dense integer id used by the metrics.
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleSpec {
    /// MeV/c².
    pub mass: f64,
    /// Elementary-charge units.
    pub charge: f64,
    /// Kinetic energy in MeV.
    pub initial_energy: f64,
    pub polar_angle: f64,
    pub azimuthal_angle: f64,
    /// mm.
    pub vertex: [f64; 3],
}

impl ParticleSpec {
    pub fn new(
        mass: f64,
        charge: f64,
        initial_energy: f64,
        polar_angle: f64,
        azimuthal_angle: f64,
        vertex: [f64; 3],
    ) -> Result<Self> {
        let spec = ParticleSpec { mass, charge, initial_energy, polar_angle, azimuthal_angle, vertex };
        spec.validate()?;
        Ok(spec)
    }

    pub fn proton(energy: f64, polar: f64, azimuth: f64, vertex: [f64; 3]) -> Result<Self> {
        Self::new(PROTON_MASS_MEV, 1.0, energy, polar, azimuth, vertex)
    }

    pub fn carbon(energy: f64, polar: f64, azimuth: f64, vertex: [f64; 3]) -> Result<Self> {
        Self::new(CARBON_MASS_MEV, 6.0, energy, polar, azimuth, vertex)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::contract(format!("particle mass must be > 0, got {}", self.mass)));
        }
        if self.charge == 0.0 || !self.charge.is_finite() {
            return Err(Error::contract("particle charge must be nonzero"));
        }
        if !(self.initial_energy > 0.0 && self.initial_energy.is_finite()) {
            return Err(Error::contract(format!("initial energy must be > 0, got {}", self.initial_energy)));
        }
        if !(0.0..=PI).contains(&self.polar_angle) {
            return Err(Error::contract(format!("polar angle must lie in [0, pi], got {}", self.polar_angle)));
        }
        if !self.azimuthal_angle.is_finite() || self.vertex.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("particle angles and vertex must be finite"));
        }
        Ok(())
    }

    pub fn mass_kg(&self) -> f64 {
        self.mass * MEV_PER_C2_IN_KG
    }

    pub fn charge_coulomb(&self) -> f64 {
        self.charge * ELEMENTARY_CHARGE
    }

    /// Non-relativistic speed in m/s.
    pub fn initial_speed(&self) -> f64 {
        (2.0 * self.initial_energy * MEV_IN_JOULE / self.mass_kg()).sqrt()
    }

    /// Momentum magnitude in kg·m/s.
    pub fn momentum(&self) -> f64 {
        self.mass_kg() * self.initial_speed()
    }

    /// Kinetic energy (MeV) that gives this species the requested momentum in kg·m/s.
    pub fn energy_for_momentum(mass_mev: f64, momentum: f64) -> f64 {
        let m = mass_mev * MEV_PER_C2_IN_KG;
        momentum * momentum / (2.0 * m) / MEV_IN_JOULE
    }

    /// Bending radius in metres of the transverse motion in field `b` (Tesla).
    pub fn bending_radius(&self, b: f64) -> f64 {
        let p_perp = self.momentum() * self.polar_angle.sin();
        p_perp / (self.charge_coulomb().abs() * b)
    }

    /// Cyclotron period in seconds.
    pub fn cyclotron_period(&self, b: f64) -> f64 {
        2.0 * PI * self.mass_kg() / (self.charge_coulomb().abs() * b)
    }

    fn initial_state(&self) -> [f64; 6] {
        let v = self.initial_speed();
        let (st, ct) = self.polar_angle.sin_cos();
        let (sp, cp) = self.azimuthal_angle.sin_cos();
        [self.vertex[0] * 1e-3, self.vertex[1] * 1e-3, self.vertex[2] * 1e-3, v * st * cp, v * st * sp, v * ct]
    }

    /// Drag scaling relative to a proton: stopping force grows with charge
    /// squared, deceleration shrinks with mass.
    fn drag_scale(&self) -> f64 {
        self.charge * self.charge * PROTON_MASS_MEV / self.mass
    }
}

/// Solenoid field along +z and the energy-loss model
/// `a = -k * (c / 1 m) * c * (|v|/c)^n * v_hat`, scaled per species by
/// charge²/mass in proton units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Tesla.
    pub b_field: f64,
    pub drag_coefficient: f64,
    pub drag_exponent: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { b_field: 2.0, drag_coefficient: 0.15, drag_exponent: 1.0 }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_field >= 0.0 && self.b_field.is_finite()) {
            return Err(Error::contract("b_field must be >= 0"));
        }
        if !(self.drag_coefficient >= 0.0 && self.drag_coefficient.is_finite()) {
            return Err(Error::contract("drag_coefficient must be >= 0"));
        }
        if !self.drag_exponent.is_finite() {
            return Err(Error::contract("drag_exponent must be finite"));
        }
        Ok(())
    }

    /// Acceleration (m/s²) on `particle` moving with velocity `v` (m/s).
    pub fn acceleration(&self, particle: &ParticleSpec, v: &[f64; 3]) -> [f64; 3] {
        let qm = particle.charge_coulomb() / particle.mass_kg();
        let b = self.b_field;
        let mut a = [qm * v[1] * b, -qm * v[0] * b, 0.0];
        if self.drag_coefficient > 0.0 {
            let speed = norm3(v);
            if speed > 0.0 {
                let mag = self.drag_coefficient
                    * particle.drag_scale()
                    * (SPEED_OF_LIGHT * SPEED_OF_LIGHT)
                    * (speed / SPEED_OF_LIGHT).powf(self.drag_exponent);
                for (ai, vi) in a.iter_mut().zip(v) {
                    *ai -= mag * vi / speed;
                }
            }
        }
        a
    }

    /// Initial deceleration timescale (seconds) v0 / |a_drag(v0)|.
    fn drag_timescale(&self, particle: &ParticleSpec) -> f64 {
        if self.drag_coefficient == 0.0 {
            return f64::INFINITY;
        }
        let v0 = particle.initial_speed();
        let a0 = self.drag_coefficient
            * particle.drag_scale()
            * SPEED_OF_LIGHT
            * SPEED_OF_LIGHT
            * (v0 / SPEED_OF_LIGHT).powf(self.drag_exponent);
        v0 / a0
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// One classical fourth-order Runge-Kutta step of `d(pos)/dt = vel`,
/// `d(vel)/dt = accel(pos, vel)`.
pub fn rk4_step<F>(state: &[f64; 6], dt: f64, accel: F) -> Result<[f64; 6]>
where
    F: Fn(&[f64; 3], &[f64; 3]) -> [f64; 3],
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::NumericDomain(format!("rk4 step requires dt > 0, got {dt}")));
    }
    if state.iter().any(|s| !s.is_finite()) {
        return Err(Error::NumericDomain(format!("non-finite integrator state {state:?}")));
    }
    let deriv = |s: &[f64; 6]| -> [f64; 6] {
        let p = [s[0], s[1], s[2]];
        let v = [s[3], s[4], s[5]];
        let a = accel(&p, &v);
        [v[0], v[1], v[2], a[0], a[1], a[2]]
    };
    let offset = |s: &[f64; 6], k: &[f64; 6], h: f64| -> [f64; 6] { std::array::from_fn(|i| s[i] + h * k[i]) };
    let k1 = deriv(state);
    let k2 = deriv(&offset(state, &k1, dt / 2.0));
    let k3 = deriv(&offset(state, &k2, dt / 2.0));
    let k4 = deriv(&offset(state, &k3, dt));
    let next: [f64; 6] = std::array::from_fn(|i| state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    if next.iter().any(|s| !s.is_finite()) {
        return Err(Error::NumericDomain("rk4 step produced a non-finite state".into()));
    }
    Ok(next)
}

/// Cylindrical detector volume centred on the beam (z) axis, z in [0, length].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorGeometry {
    /// mm.
    pub radius: f64,
    /// mm.
    pub length: f64,
}

impl DetectorGeometry {
    pub fn contains_mm(&self, p: &[f64; 3]) -> bool {
        p[0] * p[0] + p[1] * p[1] <= self.radius * self.radius && p[2] >= 0.0 && p[2] <= self.length
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationOptions {
    /// Time step as a fraction of the fastest physical timescale
    /// (cyclotron period, drag timescale or detector crossing time).
    pub steps_per_timescale: f64,
    /// Path length between emitted points, mm.
    pub point_spacing: f64,
    pub max_steps: usize,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        IntegrationOptions { steps_per_timescale: 200.0, point_spacing: 2.0, max_steps: MAX_STEPS }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Stopped,
    ExitedDetector,
    /// Step cap reached before the particle stopped or left; the track is truncated.
    StepCap,
}

/// Full integrator output: one SI state (m, m/s) per step, starting at the vertex.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<[f64; 6]>,
    pub dt: f64,
    pub stop: StopReason,
}

impl Trajectory {
    pub fn truncated(&self) -> bool {
        self.stop == StopReason::StepCap
    }
}

pub fn step_size(particle: &ParticleSpec, field: &FieldConfig, geom: &DetectorGeometry, steps: f64) -> f64 {
    let cyclotron = if field.b_field > 0.0 { particle.cyclotron_period(field.b_field) } else { f64::INFINITY };
    let crossing = geom.radius.max(geom.length) * 1e-3 / particle.initial_speed();
    cyclotron.min(field.drag_timescale(particle)).min(crossing) / steps
}

pub fn integrate_track(
    particle: &ParticleSpec,
    field: &FieldConfig,
    geom: &DetectorGeometry,
    opts: &IntegrationOptions,
) -> Result<Trajectory> {
    particle.validate()?;
    field.validate()?;
    let dt = step_size(particle, field, geom, opts.steps_per_timescale);
    let v0 = particle.initial_speed();
    let accel = |_: &[f64; 3], v: &[f64; 3]| field.acceleration(particle, v);

    let mut state = particle.initial_state();
    let mut states = vec![state];
    let mut stop = StopReason::StepCap;
    for _ in 0..opts.max_steps {
        state = rk4_step(&state, dt, accel)?;
        let pos_mm = [state[0] * 1e3, state[1] * 1e3, state[2] * 1e3];
        if !geom.contains_mm(&pos_mm) {
            stop = StopReason::ExitedDetector;
            break;
        }
        states.push(state);
        if norm3(&[state[3], state[4], state[5]]) < STOP_SPEED_FRACTION * v0 {
            stop = StopReason::Stopped;
            break;
        }
    }
    Ok(Trajectory { states, dt, stop })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub charge: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, charge: f64) -> Self {
        Point { x, y, z, charge }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 4]> for Point {
    fn from(a: [f64; 4]) -> Self {
        Point::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Point> for [f64; 4] {
    fn from(p: Point) -> Self {
        [p.x, p.y, p.z, p.charge]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventCloud {
    pub id: String,
    pub label: Option<Species>,
    pub points: Vec<Point>,
}

impl EventCloud {
    pub fn new(id: impl Into<String>, label: Option<Species>, points: Vec<Point>) -> Self {
        EventCloud { id: id.into(), label, points }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.charge.is_finite()) {
                return Err(Error::contract(format!("event {}: point {i} is not finite", self.id)));
            }
            if p.charge < 0.0 {
                return Err(Error::contract(format!("event {}: point {i} has negative charge", self.id)));
            }
        }
        Ok(())
    }

    pub fn total_charge(&self) -> f64 {
        self.points.iter().map(|p| p.charge).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub uniform_count: usize,
    pub structured_arc_count: usize,
    pub charge_jitter: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { uniform_count: 0, structured_arc_count: 0, charge_jitter: 0.0 }
    }
}

impl NoiseConfig {
    pub fn is_identity(&self) -> bool {
        self.uniform_count == 0 && self.structured_arc_count == 0 && self.charge_jitter == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassCounts {
    pub proton: usize,
    pub carbon: usize,
    pub other: usize,
}

impl Default for ClassCounts {
    fn default() -> Self {
        ClassCounts { proton: 500, carbon: 500, other: 0 }
    }
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.proton + self.carbon + self.other
    }
}

/// Ranges from which per-event kinematics are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KinematicsConfig {
    /// MeV.
    pub proton_energy: [f64; 2],
    /// MeV.
    pub carbon_energy: [f64; 2],
    pub polar_angle: [f64; 2],
    /// Vertex z as a fraction of detector length.
    pub vertex_z_fraction: [f64; 2],
    /// Transverse vertex spread (std-dev, mm) around the beam axis.
    pub vertex_xy_sigma: f64,
    /// Noise recipe that realizes the amorphous "other" class.
    pub other_noise: NoiseConfig,
    pub integration: IntegrationOptions,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        KinematicsConfig {
            proton_energy: [0.5, 3.0],
            carbon_energy: [0.5, 3.0],
            polar_angle: [0.2 * PI, 0.8 * PI],
            vertex_z_fraction: [0.1, 0.9],
            vertex_xy_sigma: 2.0,
            other_noise: NoiseConfig { uniform_count: 60, structured_arc_count: 3, charge_jitter: 0.2 },
            integration: IntegrationOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDatasetConfig {
    pub counts: ClassCounts,
    /// mm.
    pub detector_radius: f64,
    /// mm.
    pub detector_length: f64,
    /// Number of drift-time buckets; z coordinates are quantized to bucket centres.
    pub time_buckets: usize,
    pub rng_seed: u64,
    pub kinematics: KinematicsConfig,
}

impl Default for SimDatasetConfig {
    fn default() -> Self {
        SimDatasetConfig {
            counts: ClassCounts::default(),
            detector_radius: 275.0,
            detector_length: 1000.0,
            time_buckets: 512,
            rng_seed: 0,
            kinematics: KinematicsConfig::default(),
        }
    }
}

impl SimDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.detector_radius > 0.0 && self.detector_length > 0.0) {
            return Err(Error::contract("detector dimensions must be > 0"));
        }
        if self.time_buckets == 0 {
            return Err(Error::contract("time_buckets must be > 0"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> DetectorGeometry {
        DetectorGeometry { radius: self.detector_radius, length: self.detector_length }
    }

    fn quantize_z(&self, z: f64) -> f64 {
        let width = self.detector_length / self.time_buckets as f64;
        let bucket = (z / width).floor().clamp(0.0, (self.time_buckets - 1) as f64);
        (bucket + 0.5) * width
    }
}

/// Label for a particle by its mass and charge, if it is one of the simulated species.
fn species_of(particle: &ParticleSpec) -> Option<Species> {
    if (particle.mass - PROTON_MASS_MEV).abs() < 1.0 && particle.charge == 1.0 {
        Some(Species::Proton)
    } else if (particle.mass - CARBON_MASS_MEV).abs() < 10.0 && particle.charge == 6.0 {
        Some(Species::Carbon)
    } else {
        None
    }
}

/// Integrates one particle and samples charge-weighted points along its path.
///
/// A point is emitted every `point_spacing` mm of path; its charge is the
/// kinetic energy (keV) lost since the previous point, jittered by a few
/// percent with `rng`.
pub fn simulate_track(
    particle: &ParticleSpec,
    field: &FieldConfig,
    detector: &SimDatasetConfig,
    rng: &mut Rng,
) -> Result<(EventCloud, StopReason)> {
    detector.validate()?;
    let opts = &detector.kinematics.integration;
    let traj = integrate_track(particle, field, &detector.geometry(), opts)?;
    let m = particle.mass_kg();
    let kinetic_kev = |s: &[f64; 6]| 0.5 * m * (s[3] * s[3] + s[4] * s[4] + s[5] * s[5]) / MEV_IN_JOULE * 1e3;

    let mut points = Vec::new();
    let mut path = 0.0;
    let mut last_energy = kinetic_kev(&traj.states[0]);
    let last = traj.states.len() - 1;
    for (i, pair) in traj.states.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        let d = [(b[0] - a[0]) * 1e3, (b[1] - a[1]) * 1e3, (b[2] - a[2]) * 1e3];
        path += norm3(&d);
        if path >= opts.point_spacing || i + 1 == last {
            path = 0.0;
            let energy = kinetic_kev(b);
            let deposit = (last_energy - energy).max(0.0);
            last_energy = energy;
            let g: f64 = StandardNormal.sample(rng);
            let jitter = 1.0 + 0.02 * g;
            points.push(Point::new(
                b[0] * 1e3,
                b[1] * 1e3,
                detector.quantize_z(b[2] * 1e3),
                (deposit * jitter).max(0.0),
            ));
        }
    }
    Ok((EventCloud::new("", species_of(particle), points), traj.stop))
}

fn uniform_in_cylinder(geom: &DetectorGeometry, rng: &mut Rng) -> [f64; 3] {
    let r = geom.radius * rng.gen::<f64>().sqrt();
    let phi = rng.gen::<f64>() * 2.0 * PI;
    [r * phi.cos(), r * phi.sin(), rng.gen::<f64>() * geom.length]
}

/// Appends uncorrelated points and random circular-arc chains, then jitters
/// every charge multiplicatively. Existing points keep their coordinates and
/// order.
pub fn inject_noise(cloud: &EventCloud, noise: &NoiseConfig, geom: &DetectorGeometry, rng: &mut Rng) -> EventCloud {
    if noise.is_identity() {
        return cloud.clone();
    }
    let mut out = cloud.clone();
    let reference_charge = if cloud.points.is_empty() { 1.0 } else { cloud.total_charge() / cloud.points.len() as f64 };

    for _ in 0..noise.uniform_count {
        let [x, y, z] = uniform_in_cylinder(geom, rng);
        out.points.push(Point::new(x, y, z, reference_charge * rng.gen::<f64>()));
    }

    for _ in 0..noise.structured_arc_count {
        let [cx, cy, _] =
            uniform_in_cylinder(&DetectorGeometry { radius: 0.8 * geom.radius, length: geom.length }, rng);
        let radius = rng.gen_range(10.0..100.0);
        let arc_len: f64 = rng.gen_range(20.0..150.0);
        let start = rng.gen::<f64>() * 2.0 * PI;
        let z0 = rng.gen::<f64>() * geom.length;
        let slope = rng.gen_range(-0.5..0.5);
        let charge = reference_charge * rng.gen_range(0.2..1.0);
        let n = (arc_len / 2.0).ceil() as usize;
        for j in 0..n {
            let s = j as f64 * 2.0;
            let phi = start + s / radius;
            let p = [cx + radius * phi.cos(), cy + radius * phi.sin(), z0 + slope * s];
            if geom.contains_mm(&p) {
                out.points.push(Point::new(p[0], p[1], p[2], charge));
            }
        }
    }

    if noise.charge_jitter > 0.0 {
        for p in &mut out.points {
            let g: f64 = StandardNormal.sample(rng);
            p.charge = (p.charge * (1.0 + noise.charge_jitter * g)).max(0.0);
        }
    }
    out
}

fn sample_range(rng: &mut Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Draws kinematics for one event of the given class.
pub fn sample_particle(species: Species, config: &SimDatasetConfig, rng: &mut Rng) -> Result<Option<ParticleSpec>> {
    let k = &config.kinematics;
    let polar = sample_range(rng, k.polar_angle).clamp(0.0, PI);
    let azimuth = rng.gen::<f64>() * 2.0 * PI;
    let gx: f64 = StandardNormal.sample(rng);
    let gy: f64 = StandardNormal.sample(rng);
    let vertex = [
        gx * k.vertex_xy_sigma,
        gy * k.vertex_xy_sigma,
        sample_range(rng, k.vertex_z_fraction) * config.detector_length,
    ];
    match species {
        Species::Proton => ParticleSpec::proton(sample_range(rng, k.proton_energy), polar, azimuth, vertex).map(Some),
        Species::Carbon => ParticleSpec::carbon(sample_range(rng, k.carbon_energy), polar, azimuth, vertex).map(Some),
        Species::Other => Ok(None),
    }
}

/// One labelled event, a pure function of `(config, field, noise, index, species)`.
pub fn generate_event(
    index: usize,
    species: Species,
    config: &SimDatasetConfig,
    field: &FieldConfig,
    noise: &NoiseConfig,
) -> Result<EventCloud> {
    let mut rng = seed::rng_for(config.rng_seed, "simkit/event", &[index as u64]);
    let geom = config.geometry();
    let base = match sample_particle(species, config, &mut rng)? {
        Some(particle) => simulate_track(&particle, field, config, &mut rng)?.0,
        None => {
            let empty = EventCloud::new("", None, Vec::new());
            let mut cloud = inject_noise(&empty, &config.kinematics.other_noise, &geom, &mut rng);
            for p in &mut cloud.points {
                p.z = config.quantize_z(p.z);
            }
            cloud
        }
    };
    let mut cloud = inject_noise(&base, noise, &geom, &mut rng);
    cloud.id = format!("evt{index:06}");
    cloud.label = Some(species);
    Ok(cloud)
}

/// Class sequence of a dataset: the configured multiset in seeded random order.
pub fn label_sequence(config: &SimDatasetConfig) -> Vec<Species> {
    let c = &config.counts;
    let mut labels: Vec<Species> = std::iter::repeat(Species::Proton)
        .take(c.proton)
        .chain(std::iter::repeat(Species::Carbon).take(c.carbon))
        .chain(std::iter::repeat(Species::Other).take(c.other))
        .collect();
    let mut rng = seed::rng_for(config.rng_seed, "simkit/labels", &[]);
    labels.shuffle(&mut rng);
    labels
}

pub fn generate_dataset(
    config: &SimDatasetConfig,
    field: &FieldConfig,
    noise: &NoiseConfig,
) -> Result<Vec<EventCloud>> {
    config.validate()?;
    field.validate()?;
    let labels = label_sequence(config);
    let jobs: Vec<(usize, Species)> = labels.into_iter().enumerate().collect();
    par::map(jobs, |(i, species)| generate_event(i, species, config, field, noise)).into_iter().collect()
}
