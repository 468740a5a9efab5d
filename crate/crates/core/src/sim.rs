//! Fixed-step simulation of the arm with domain randomization, reference
//! trajectories, and episode rollouts.
//!
//! Integration is semi-implicit Euler at the physics rate; controllers run
//! at a slower control rate and their torque is held across the sub-steps in
//! between. Everything random flows through one seeded generator per
//! episode, so a rollout is a pure function of (config, seed).

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

use crate::controller::{ControlContext, Controller, ControllerError, OscCommand};
use crate::dynamics::{
    self, forward_dynamics, ArmModel, JointState, ModelError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("controller failed at step {step}: {source}")]
    Controller {
        step: usize,
        source: ControllerError,
    },
    #[error("non-finite torque commanded at step {step}")]
    NonFiniteTorque { step: usize },
    #[error("state diverged at step {step}")]
    Diverged { step: usize },
    #[error("randomization range for {name} is inverted: [{lo}, {hi}]")]
    InvertedRange { name: &'static str, lo: f64, hi: f64 },
    #[error("control_dt {control_dt} is not an integer multiple of sim_dt {sim_dt}")]
    BadDecimation { control_dt: f64, sim_dt: f64 },
    #[error("{0}")]
    BadConfig(String),
    #[error("trajectory leaves the reachable workspace at waypoint {index}")]
    UnreachableWaypoint { index: usize },
}

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RandRange {
    pub lo: f64,
    pub hi: f64,
}

impl RandRange {
    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn check(&self, name: &'static str) -> Result<(), SimError> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(SimError::InvertedRange {
                name,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

/// Per-episode randomization: friction and armature per joint, payload mass,
/// and a perturbation added to the initial configuration. Applied at reset
/// in a fixed order (per link: damping, coulomb, armature; payload; initial
/// offsets) so the random stream is stable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationSpec {
    pub viscous_damping: RandRange,
    pub coulomb_friction: RandRange,
    pub armature: RandRange,
    pub payload_mass: RandRange,
    pub initial_q_offset: RandRange,
}

impl Default for RandomizationSpec {
    fn default() -> Self {
        Self {
            viscous_damping: RandRange::new(0.01, 0.2),
            coulomb_friction: RandRange::new(0.0, 0.1),
            armature: RandRange::new(1e-3, 1e-2),
            payload_mass: RandRange::new(0.0, 0.5),
            initial_q_offset: RandRange::new(-0.05, 0.05),
        }
    }
}

impl RandomizationSpec {
    /// Every parameter pinned to the nominal model, no initial perturbation.
    pub fn none(model: &ArmModel) -> Self {
        Self {
            viscous_damping: RandRange::fixed(model.links[0].viscous_damping),
            coulomb_friction: RandRange::fixed(model.links[0].coulomb_friction),
            armature: RandRange::fixed(model.links[0].armature),
            payload_mass: RandRange::fixed(0.0),
            initial_q_offset: RandRange::fixed(0.0),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.viscous_damping.check("viscous_damping")?;
        self.coulomb_friction.check("coulomb_friction")?;
        self.armature.check("armature")?;
        self.payload_mass.check("payload_mass")?;
        self.initial_q_offset.check("initial_q_offset")?;
        Ok(())
    }

    fn apply(&self, nominal: &ArmModel, rng: &mut ChaCha8Rng) -> ArmModel {
        let mut model = nominal.clone();
        for link in &mut model.links {
            link.viscous_damping = self.viscous_damping.sample(rng);
            link.coulomb_friction = self.coulomb_friction.sample(rng);
            link.armature = self.armature.sample(rng);
        }
        model.payload.mass = self.payload_mass.sample(rng);
        model
    }
}

/// Annular sector of the plane the references are drawn from, radii as
/// fractions of total reach, angles in radians.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Workspace {
    pub radius_frac: RandRange,
    pub angle: RandRange,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            radius_frac: RandRange::new(0.35, 0.80),
            angle: RandRange::new(-2.356194490192345, -0.7853981633974483),
        }
    }
}

impl Workspace {
    fn sample_point(&self, reach: f64, rng: &mut ChaCha8Rng) -> Vector2<f64> {
        let r = self.radius_frac.sample(rng) * reach;
        let a = self.angle.sample(rng);
        Vector2::new(r * a.cos(), r * a.sin())
    }
}

/// Timing, horizon, observation noise, and the history window length.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Physics step, seconds.
    pub sim_dt: f64,
    /// Control step, seconds; must be an integer multiple of `sim_dt`.
    pub control_dt: f64,
    /// Episode length in control steps.
    pub horizon: usize,
    /// Standard deviation of the noise added to observed accelerations.
    pub accel_noise_std: f64,
    /// Number of past control steps kept for the history window.
    pub history_len: usize,
    pub workspace: Workspace,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sim_dt: 1e-3,
            control_dt: 0.05,
            horizon: 200,
            accel_noise_std: 0.0,
            history_len: 10,
            workspace: Workspace::default(),
        }
    }
}

impl SimConfig {
    pub fn decimation(&self) -> usize {
        (self.control_dt / self.sim_dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sim_dt > 0.0 && self.control_dt > 0.0) {
            return Err(SimError::BadConfig("time steps must be positive".into()));
        }
        let k = self.decimation();
        if k == 0 || (k as f64 * self.sim_dt - self.control_dt).abs() > 1e-9 {
            return Err(SimError::BadDecimation {
                control_dt: self.control_dt,
                sim_dt: self.sim_dt,
            });
        }
        if self.horizon == 0 {
            return Err(SimError::BadConfig("horizon must be at least 1".into()));
        }
        if self.history_len == 0 {
            return Err(SimError::BadConfig("history_len must be at least 1".into()));
        }
        if self.accel_noise_std < 0.0 || !self.accel_noise_std.is_finite() {
            return Err(SimError::BadConfig("accel_noise_std must be non-negative".into()));
        }
        self.workspace.radius_frac.check("workspace.radius_frac")?;
        self.workspace.angle.check("workspace.angle")?;
        Ok(())
    }
}

/// One past control step as seen by the history window.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStep {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub tau: DVector<f64>,
}

/// State plus the window of the K control steps strictly before it.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: JointState,
    pub history: Vec<HistoryStep>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Line,
    Circle,
    Lissajous,
}

/// Dense reference: one waypoint per control boundary, `horizon + 1` total.
#[derive(Debug, Clone)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub waypoints: Vec<Vector2<f64>>,
}

impl TrajectorySpec {
    pub fn validate(&self, model: &ArmModel) -> Result<(), SimError> {
        let reach = model.reach();
        let r_min = inner_radius(model);
        for (i, w) in self.waypoints.iter().enumerate() {
            let r = w.norm();
            if r > 0.98 * reach || r < r_min {
                return Err(SimError::UnreachableWaypoint { index: i });
            }
        }
        Ok(())
    }
}

/// Smallest reachable radius of the chain (zero unless the first link
/// out-reaches the rest).
pub fn inner_radius(model: &ArmModel) -> f64 {
    let reach = model.reach();
    let longest = model
        .links
        .iter()
        .map(|l| l.length)
        .fold(0.0_f64, f64::max);
    (2.0 * longest - reach).max(0.0)
}

/// Cubic ease `3t^2 - 2t^3`: zero slope at both ends, so references start
/// and stop at rest.
fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Draw a reference path of the given kind inside the configured workspace
/// sector. Circle radii and figure amplitudes are drawn from [0.05, 0.2] m
/// capped to what the sector can hold.
pub fn sample_trajectory(
    model: &ArmModel,
    cfg: &SimConfig,
    kind: TrajectoryKind,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectorySpec, SimError> {
    let reach = model.reach();
    let ws = &cfg.workspace;
    let n_pts = cfg.horizon + 1;
    let mut waypoints = Vec::with_capacity(n_pts);
    match kind {
        TrajectoryKind::Line => {
            let a = ws.sample_point(reach, rng);
            let b = ws.sample_point(reach, rng);
            for i in 0..n_pts {
                let s = smoothstep(i as f64 / cfg.horizon as f64);
                waypoints.push(a + (b - a) * s);
            }
        }
        TrajectoryKind::Circle => {
            let (center, radius) = sample_center_and_extent(reach, ws, RandRange::new(0.05, 0.2), rng);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for i in 0..n_pts {
                let s = smoothstep(i as f64 / cfg.horizon as f64);
                let th = std::f64::consts::TAU * s + phase;
                waypoints.push(center + Vector2::new(radius * th.cos(), radius * th.sin()));
            }
        }
        TrajectoryKind::Lissajous => {
            // 2:3 frequency ratio with a quarter-turn phase lead traces the
            // square-like figure once per episode.
            let (center, amp) = sample_center_and_extent(reach, ws, RandRange::new(0.05, 0.15), rng);
            let ax = amp;
            let ay = 0.75 * amp;
            for i in 0..n_pts {
                let s = smoothstep(i as f64 / cfg.horizon as f64);
                let th = std::f64::consts::TAU * s;
                waypoints.push(
                    center
                        + Vector2::new(
                            ax * (2.0 * th + std::f64::consts::FRAC_PI_2).sin(),
                            ay * (3.0 * th).sin(),
                        ),
                );
            }
        }
    }
    let spec = TrajectorySpec { kind, waypoints };
    spec.validate(model)?;
    Ok(spec)
}

/// Pick a figure extent and a center such that the whole figure stays inside
/// the workspace sector.
fn sample_center_and_extent(
    reach: f64,
    ws: &Workspace,
    extent_range: RandRange,
    rng: &mut ChaCha8Rng,
) -> (Vector2<f64>, f64) {
    let r_lo = ws.radius_frac.lo * reach;
    let r_hi = ws.radius_frac.hi * reach;
    let max_fit = 0.45 * (r_hi - r_lo);
    let extent = extent_range
        .sample(rng)
        .min(max_fit)
        .max(extent_range.lo.min(max_fit));
    let rc = RandRange::new(r_lo + extent, r_hi - extent).sample(rng);
    let ang_margin = (extent / rc).asin();
    let ac = RandRange::new(ws.angle.lo + ang_margin, (ws.angle.hi - ang_margin).max(ws.angle.lo + ang_margin))
        .sample(rng);
    (Vector2::new(rc * ac.cos(), rc * ac.sin()), extent)
}

/// The randomized model a reset with this seed will produce. Mirrors the
/// draw order inside [`Environment::reset`], so a controller that needs the
/// episode's exact model (the analytical oracle) can be built up front.
pub fn episode_model(nominal: &ArmModel, spec: &RandomizationSpec, seed: u64) -> ArmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.apply(nominal, &mut rng)
}

/// The simulated arm between resets: current randomized model, state, and
/// the rolling history window.
pub struct Environment {
    pub nominal: ArmModel,
    pub model: ArmModel,
    pub cfg: SimConfig,
    pub state: JointState,
    history: VecDeque<HistoryStep>,
    rng: ChaCha8Rng,
    step_index: usize,
}

impl Environment {
    pub fn new(nominal: ArmModel, cfg: SimConfig) -> Result<Self, SimError> {
        nominal.validate()?;
        cfg.validate()?;
        let n = nominal.dof();
        Ok(Self {
            model: nominal.clone(),
            nominal,
            cfg,
            state: JointState::at_rest(DVector::zeros(n)),
            history: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            step_index: 0,
        })
    }

    /// Re-randomize the model, move to `q0` plus the sampled perturbation,
    /// and left-pad the history window with the reset state.
    pub fn reset(
        &mut self,
        seed: u64,
        spec: &RandomizationSpec,
        q0: &DVector<f64>,
    ) -> Result<(), SimError> {
        spec.validate()?;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.model = spec.apply(&self.nominal, &mut self.rng);
        let n = self.model.dof();
        let mut q = q0.clone();
        for i in 0..n {
            q[i] += spec.initial_q_offset.sample(&mut self.rng);
        }
        self.state = JointState::at_rest(q);
        self.history.clear();
        for _ in 0..self.cfg.history_len {
            self.history.push_back(HistoryStep {
                q: self.state.q.clone(),
                qd: self.state.qd.clone(),
                tau: DVector::zeros(n),
            });
        }
        self.step_index = 0;
        Ok(())
    }

    /// History window for the current state: the K steps strictly before it.
    pub fn history(&self) -> Vec<HistoryStep> {
        self.history.iter().cloned().collect()
    }

    /// Hold `tau` for one control step of physics sub-steps. The observed
    /// acceleration is the forward dynamics evaluated at the resulting
    /// state under the held torque, plus optional noise.
    pub fn step(&mut self, tau: &DVector<f64>) -> Result<(), SimError> {
        if tau.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteTorque {
                step: self.step_index,
            });
        }
        self.history.push_back(HistoryStep {
            q: self.state.q.clone(),
            qd: self.state.qd.clone(),
            tau: tau.clone(),
        });
        while self.history.len() > self.cfg.history_len {
            self.history.pop_front();
        }
        let k = self.cfg.decimation();
        let dt = self.cfg.sim_dt;
        let mut q = self.state.q.clone();
        let mut qd = self.state.qd.clone();
        for _ in 0..k {
            let qdd = forward_dynamics(&self.model, &q, &qd, tau);
            qd += qdd * dt;
            q += &qd * dt;
        }
        let mut qdd = forward_dynamics(&self.model, &q, &qd, tau);
        if self.cfg.accel_noise_std > 0.0 {
            for i in 0..qdd.len() {
                // Box-Muller from two uniform draws keeps the dependency
                // surface small for the one optional noise source.
                let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = self.rng.gen_range(0.0..std::f64::consts::TAU);
                qdd[i] += self.cfg.accel_noise_std * (-2.0 * u1.ln()).sqrt() * u2.cos();
            }
        }
        self.state = JointState {
            q,
            qd,
            qdd,
            tau: tau.clone(),
            t: self.state.t + self.cfg.control_dt,
        };
        self.step_index += 1;
        if !self.state.is_finite() {
            return Err(SimError::Diverged {
                step: self.step_index,
            });
        }
        Ok(())
    }
}

/// One recorded episode: transitions for learning, the tracked and target
/// paths, and summary statistics.
#[derive(Debug, Clone)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub targets: Vec<Vector2<f64>>,
    pub positions: Vec<Vector2<f64>>,
    /// Task-space tracking RMSE in meters.
    pub rmse: f64,
    pub mean_abs_tau: f64,
    /// Mass-matrix floor activations reported by the controller.
    pub guard_count: u64,
    /// Payload mass the episode was rolled out with.
    pub payload_mass: f64,
}

impl Episode {
    pub fn rmse_mm(&self) -> f64 {
        self.rmse * 1000.0
    }
}

/// Roll one episode: sample a reference of the given kind, reset near its
/// start, then run the controller at the control rate.
///
/// Everything is derived from `seed`: the reference, the randomized model,
/// and the initial perturbation. Identical inputs reproduce the episode
/// bit for bit.
pub fn rollout(
    nominal: &ArmModel,
    cfg: &SimConfig,
    rand_spec: &RandomizationSpec,
    kind: TrajectoryKind,
    controller: &mut dyn Controller,
    seed: u64,
) -> Result<Episode, SimError> {
    let mut traj_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6a65_6374_6f72);
    let traj = sample_trajectory(nominal, cfg, kind, &mut traj_rng)?;
    rollout_on(nominal, cfg, rand_spec, &traj, controller, seed)
}

/// Roll one episode on an already sampled reference.
pub fn rollout_on(
    nominal: &ArmModel,
    cfg: &SimConfig,
    rand_spec: &RandomizationSpec,
    traj: &TrajectorySpec,
    controller: &mut dyn Controller,
    seed: u64,
) -> Result<Episode, SimError> {
    let mut env = Environment::new(nominal.clone(), cfg.clone())?;
    let q0 = crate::controller::ik_solve(nominal, &traj.waypoints[0], 200);
    env.reset(seed, rand_spec, &q0)?;

    let guard_before = controller.guard_count();
    let mut transitions = Vec::with_capacity(cfg.horizon);
    let mut targets = Vec::with_capacity(cfg.horizon);
    let mut positions = Vec::with_capacity(cfg.horizon);
    let mut err_sq = 0.0;
    let mut abs_tau = 0.0;
    for i in 0..cfg.horizon {
        let x_d = traj.waypoints[i + 1];
        let xd_d = (traj.waypoints[i + 1] - traj.waypoints[i]) / cfg.control_dt;
        let cmd = OscCommand { x_d, xd_d };
        let history = env.history();
        let tau = {
            let ctx = ControlContext {
                state: &env.state,
                history: &history,
            };
            controller
                .torque(&ctx, &cmd)
                .map_err(|source| SimError::Controller { step: i, source })?
        };
        env.step(&tau)?;
        let (x, _) = dynamics::end_effector(nominal, &env.state.q, &env.state.qd);
        err_sq += (x - x_d).norm_squared();
        abs_tau += tau.iter().map(|v| v.abs()).sum::<f64>() / tau.len() as f64;
        targets.push(x_d);
        positions.push(x);
        transitions.push(Transition {
            state: env.state.clone(),
            history: env.history(),
        });
    }
    Ok(Episode {
        transitions,
        targets,
        positions,
        rmse: (err_sq / cfg.horizon as f64).sqrt(),
        mean_abs_tau: abs_tau / cfg.horizon as f64,
        guard_count: controller.guard_count() - guard_before,
        payload_mass: env.model.payload.mass,
    })
}

/// Episode log with one row per control step.
pub fn episode_csv(ep: &Episode) -> String {
    let n = ep
        .transitions
        .first()
        .map(|t| t.state.q.len())
        .unwrap_or(0);
    let mut out = String::new();
    out.push('t');
    for name in ["q", "qd", "qdd", "tau"] {
        for i in 0..n {
            out.push_str(&format!(",{name}{i}"));
        }
    }
    out.push_str(",x,y,x_d,y_d,err\n");
    for (i, tr) in ep.transitions.iter().enumerate() {
        out.push_str(&format!("{}", tr.state.t));
        for v in tr
            .state
            .q
            .iter()
            .chain(tr.state.qd.iter())
            .chain(tr.state.qdd.iter())
            .chain(tr.state.tau.iter())
        {
            out.push_str(&format!(",{v}"));
        }
        let x = ep.positions[i];
        let d = ep.targets[i];
        out.push_str(&format!(",{},{},{},{},{}\n", x.x, x.y, d.x, d.y, (x - d).norm()));
    }
    out
}
