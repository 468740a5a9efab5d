//! Task-space control of the arm, generic over where the mass matrix comes
//! from, plus the joint-space baselines it is compared against.
//!
//! The main law maps a task-space position and velocity target to joint
//! torques through the task-space inertia. Mass providers supply the joint
//! mass matrix and the torque that compensates configuration and velocity
//! dependent effects; swapping the provider switches between the analytical
//! oracle, rough baselines, and learned models without touching the law.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use thiserror::Error;

use crate::dynamics::{
    self, com_jacobian, effective_masses, jacobian, ArmModel, JointState,
};
use crate::sim::HistoryStep;

/// Regularization added to the task-space inertia inversion.
pub const TASK_DAMPING: f64 = 1e-2;

/// Actuator limit applied to every controller's output, N m per joint.
pub const TAU_MAX: f64 = 50.0;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("command is not finite")]
    NonFiniteCommand,
    #[error("state is not finite")]
    NonFiniteState,
    #[error("mass provider returned a non-finite quantity")]
    NonFiniteProvider,
    #[error("task-space inertia solve failed")]
    TaskInertiaSolve,
    #[error("mass provider failed: {0}")]
    Provider(String),
}

/// Task-space target for one control step.
#[derive(Debug, Clone, Copy)]
pub struct OscCommand {
    pub x_d: Vector2<f64>,
    pub xd_d: Vector2<f64>,
}

impl OscCommand {
    pub fn is_finite(&self) -> bool {
        self.x_d.iter().chain(self.xd_d.iter()).all(|v| v.is_finite())
    }
}

/// What a controller sees each step: the current state and the window of
/// control steps strictly before it.
pub struct ControlContext<'a> {
    pub state: &'a JointState,
    pub history: &'a [HistoryStep],
}

/// Anything that turns a context and command into joint torques.
pub trait Controller {
    fn torque(
        &mut self,
        ctx: &ControlContext,
        cmd: &OscCommand,
    ) -> Result<DVector<f64>, ControllerError>;

    /// Cumulative count of mass-matrix floor activations, for providers
    /// that guard a learned matrix.
    fn guard_count(&self) -> u64 {
        0
    }
}

/// Joint mass matrix and the compensation torque paired with it.
#[derive(Debug, Clone)]
pub struct MassInfo {
    pub h: DMatrix<f64>,
    pub tau_cg: DVector<f64>,
}

/// Source of the mass matrix and compensation torque.
pub trait MassProvider: Send + Sync {
    fn provide(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        history: &[HistoryStep],
    ) -> Result<MassInfo, ControllerError>;

    fn guard_count(&self) -> u64 {
        0
    }
}

/// Exact rigid-body quantities of the given model.
pub struct AnalyticalProvider {
    pub model: ArmModel,
}

impl MassProvider for AnalyticalProvider {
    fn provide(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        _history: &[HistoryStep],
    ) -> Result<MassInfo, ControllerError> {
        Ok(MassInfo {
            h: dynamics::mass_matrix(&self.model, q),
            tau_cg: dynamics::coriolis_torque(&self.model, q, qd)
                + dynamics::gravity_torque(&self.model, q),
        })
    }
}

/// Unit mass matrix with first-moment gravity compensation from the nominal
/// model. The cheapest thing that still stands up under gravity.
pub struct IdentityProvider {
    pub nominal: ArmModel,
}

impl MassProvider for IdentityProvider {
    fn provide(
        &self,
        q: &DVector<f64>,
        _qd: &DVector<f64>,
        _history: &[HistoryStep],
    ) -> Result<MassInfo, ControllerError> {
        let n = self.nominal.dof();
        Ok(MassInfo {
            h: DMatrix::identity(n, n),
            tau_cg: gravity_comp_baseline(&self.nominal, q),
        })
    }
}

/// Gravity compensation assembled from per-link first moments,
/// `sum_i J_i' (m_i (-g))` over the link center-of-mass Jacobians.
pub fn gravity_comp_baseline(model: &ArmModel, q: &DVector<f64>) -> DVector<f64> {
    let n = model.dof();
    let masses = effective_masses(model);
    let mut tau = DVector::zeros(n);
    let g = model.gravity;
    for (i, m) in masses.iter().enumerate() {
        let j = com_jacobian(model, q, i);
        let f = Vector2::new(-m * g.x, -m * g.y);
        tau += j.transpose() * DVector::from_vec(vec![f.x, f.y]);
    }
    tau
}

/// Gains of the task-space law, per axis.
#[derive(Debug, Clone, Copy)]
pub struct OscGains {
    pub kp: Vector2<f64>,
    pub kv: Vector2<f64>,
}

impl OscGains {
    pub fn isotropic(kp: f64, kv: f64) -> Self {
        Self {
            kp: Vector2::new(kp, kp),
            kv: Vector2::new(kv, kv),
        }
    }
}

/// The task-space controller: desired accelerations from PD on the task
/// error, mapped through the task-space inertia, plus the provider's
/// compensation torque.
pub struct OscController<P: MassProvider> {
    pub provider: P,
    /// Kinematic model used for the Jacobian and forward kinematics;
    /// lengths are assumed known exactly.
    pub kin: ArmModel,
    pub gains: OscGains,
    pub lambda: f64,
    pub tau_max: f64,
    /// Sign applied to the velocity-error term. +1 damps the velocity
    /// error; -1 reproduces the flipped convention for comparison runs.
    pub damping_sign: f64,
}

impl<P: MassProvider> OscController<P> {
    pub fn new(provider: P, kin: ArmModel, gains: OscGains) -> Self {
        Self {
            provider,
            kin,
            gains,
            lambda: TASK_DAMPING,
            tau_max: TAU_MAX,
            damping_sign: 1.0,
        }
    }
}

/// Task-space inertia `(J H^-1 J' + lambda^2 I)^-1` for a 2D task.
pub fn task_inertia(
    h: &DMatrix<f64>,
    j: &DMatrix<f64>,
    lambda: f64,
) -> Result<Matrix2<f64>, ControllerError> {
    let chol = h
        .clone()
        .cholesky()
        .ok_or(ControllerError::TaskInertiaSolve)?;
    let hinv_jt = chol.solve(&j.transpose());
    let mut a = j * hinv_jt;
    a[(0, 0)] += lambda * lambda;
    a[(1, 1)] += lambda * lambda;
    // Round-off symmetrization keeps the PD check meaningful.
    let s = 0.5 * (a[(0, 1)] + a[(1, 0)]);
    let m = Matrix2::new(a[(0, 0)], s, s, a[(1, 1)]);
    let det = m.determinant();
    if !(det > 0.0 && m.trace() > 0.0) || !det.is_finite() {
        return Err(ControllerError::TaskInertiaSolve);
    }
    Ok(Matrix2::new(m[(1, 1)], -s, -s, m[(0, 0)]) / det)
}

fn clamp_torque(mut tau: DVector<f64>, limit: f64) -> DVector<f64> {
    for v in tau.iter_mut() {
        *v = v.clamp(-limit, limit);
    }
    tau
}

impl<P: MassProvider> Controller for OscController<P> {
    fn torque(
        &mut self,
        ctx: &ControlContext,
        cmd: &OscCommand,
    ) -> Result<DVector<f64>, ControllerError> {
        if !cmd.is_finite() {
            return Err(ControllerError::NonFiniteCommand);
        }
        if !ctx.state.is_finite() {
            return Err(ControllerError::NonFiniteState);
        }
        let q = &ctx.state.q;
        let qd = &ctx.state.qd;
        let info = self.provider.provide(q, qd, ctx.history)?;
        if info.h.iter().any(|v| !v.is_finite()) || info.tau_cg.iter().any(|v| !v.is_finite()) {
            return Err(ControllerError::NonFiniteProvider);
        }
        let j = jacobian(&self.kin, q);
        let (x, xd) = dynamics::end_effector(&self.kin, q, qd);
        let lambda_m = task_inertia(&info.h, &j, self.lambda)?;
        debug_assert!(
            lambda_m.determinant() > 0.0 && lambda_m.trace() > 0.0,
            "task inertia must stay positive definite"
        );
        let e = cmd.x_d - x;
        let ev = cmd.xd_d - xd;
        let f = Vector2::new(
            self.gains.kp.x * e.x + self.damping_sign * self.gains.kv.x * ev.x,
            self.gains.kp.y * e.y + self.damping_sign * self.gains.kv.y * ev.y,
        );
        let force = lambda_m * f;
        let tau = j.transpose() * DVector::from_vec(vec![force.x, force.y]) + info.tau_cg;
        Ok(clamp_torque(tau, self.tau_max))
    }

    fn guard_count(&self) -> u64 {
        self.provider.guard_count()
    }
}

/// Joint-space PD gains.
#[derive(Debug, Clone, Copy)]
pub struct JointGains {
    pub kp: f64,
    pub kv: f64,
}

/// Joint PD about a target configuration, with nominal gravity
/// compensation. At the target with zero velocity the output is the
/// compensation alone.
pub fn joint_pd_torque(
    nominal: &ArmModel,
    state: &JointState,
    q_target: &DVector<f64>,
    gains: JointGains,
) -> DVector<f64> {
    let pd = (q_target - &state.q) * gains.kp - &state.qd * gains.kv;
    clamp_torque(pd + gravity_comp_baseline(nominal, &state.q), TAU_MAX)
}

/// One damped-least-squares step toward the task target.
pub fn ik_dls_step(model: &ArmModel, q: &DVector<f64>, x_d: &Vector2<f64>) -> DVector<f64> {
    let j = jacobian(model, q);
    let (x, _) = dynamics::end_effector(model, q, &DVector::zeros(q.len()));
    let err = x_d - x;
    let mut a = &j * j.transpose();
    a[(0, 0)] += TASK_DAMPING * TASK_DAMPING;
    a[(1, 1)] += TASK_DAMPING * TASK_DAMPING;
    let rhs = Vector2::new(err.x, err.y);
    let sol = Matrix2::new(a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)])
        .lu()
        .solve(&rhs)
        .unwrap_or_else(Vector2::zeros);
    q + j.transpose() * DVector::from_vec(vec![sol.x, sol.y])
}

/// Iterated damped-least-squares inverse kinematics from a fixed elbow-bent
/// guess pointing at the target. Deterministic in all inputs.
pub fn ik_solve(model: &ArmModel, x_d: &Vector2<f64>, iters: usize) -> DVector<f64> {
    let n = model.dof();
    let base = x_d.y.atan2(x_d.x);
    let mut q = DVector::zeros(n);
    q[0] = base - 0.35;
    for i in 1..n {
        q[i] = if i % 2 == 1 { 0.45 } else { 0.25 };
    }
    for _ in 0..iters {
        q = ik_dls_step(model, &q, x_d);
    }
    q
}

/// Joint PD following a myopic DLS retarget each control step.
pub struct JointPdController {
    pub nominal: ArmModel,
    pub gains: JointGains,
}

impl Controller for JointPdController {
    fn torque(
        &mut self,
        ctx: &ControlContext,
        cmd: &OscCommand,
    ) -> Result<DVector<f64>, ControllerError> {
        if !cmd.is_finite() {
            return Err(ControllerError::NonFiniteCommand);
        }
        let q_target = ik_dls_step(&self.nominal, &ctx.state.q, &cmd.x_d);
        Ok(joint_pd_torque(&self.nominal, ctx.state, &q_target, self.gains))
    }
}

/// Joint PD following a converged inverse-kinematics target each step.
pub struct IkDlsController {
    pub nominal: ArmModel,
    pub gains: JointGains,
    pub ik_iters: usize,
}

impl Controller for IkDlsController {
    fn torque(
        &mut self,
        ctx: &ControlContext,
        cmd: &OscCommand,
    ) -> Result<DVector<f64>, ControllerError> {
        if !cmd.is_finite() {
            return Err(ControllerError::NonFiniteCommand);
        }
        let mut q_target = ctx.state.q.clone();
        for _ in 0..self.ik_iters {
            q_target = ik_dls_step(&self.nominal, &q_target, &cmd.x_d);
        }
        Ok(joint_pd_torque(&self.nominal, ctx.state, &q_target, self.gains))
    }
}
