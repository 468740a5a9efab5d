//! Ground-truth rigid-body dynamics of a planar N-link revolute arm.
//!
//! Links are chained along x of their parent frame; joint i rotates the
//! chain by `q[i]`. Gravity is an arbitrary in-plane acceleration vector, so
//! the same model covers hanging, sideways, and gravity-free setups. An
//! optional point-mass payload attached beyond the last link tip is folded
//! into that link's mass, center of mass, and rotational inertia before any
//! dynamics quantity is evaluated.
//!
//! The implementation favors closed forms where they are cheap (mass matrix,
//! gravity) and finite differences of the mass matrix for the velocity
//! terms, which keeps one well-tested code path for everything derived from
//! `dH/dq`.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Central-difference step for configuration derivatives of the mass matrix.
pub const MASS_PARTIAL_FD_STEP: f64 = 1e-6;

/// Velocity scale of the tanh smoothing applied to Coulomb friction, rad/s.
pub const COULOMB_SMOOTHING: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("arm must have at least one link")]
    NoLinks,
    #[error("link {link}: {name} must be finite and non-negative, got {value}")]
    BadLinkParam {
        link: usize,
        name: &'static str,
        value: f64,
    },
    #[error("link {link}: com_offset {com} exceeds link length {len}")]
    ComBeyondTip { link: usize, com: f64, len: f64 },
    #[error("payload {name} must be finite and non-negative, got {value}")]
    BadPayload { name: &'static str, value: f64 },
    #[error("gravity vector must be finite")]
    BadGravity,
    #[error("{what} has length {got}, expected {want}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        want: usize,
    },
    #[error("{what} contains a non-finite value")]
    NonFinite { what: &'static str },
}

/// One revolute link. Lengths in meters, masses in kilograms, inertia about
/// the link's own center of mass in kg m^2. Viscous damping is N m s/rad,
/// Coulomb friction N m, armature the reflected rotor inertia in kg m^2.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LinkParams {
    pub length: f64,
    pub com_offset: f64,
    pub mass: f64,
    pub rot_inertia: f64,
    pub viscous_damping: f64,
    pub coulomb_friction: f64,
    pub armature: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            length: 0.3,
            com_offset: 0.15,
            mass: 1.0,
            rot_inertia: 0.0075,
            viscous_damping: 0.05,
            coulomb_friction: 0.02,
            armature: 5e-3,
        }
    }
}

/// Point mass rigidly attached `offset` meters beyond the last link tip,
/// along the link axis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Payload {
    pub mass: f64,
    pub offset: f64,
}

impl Default for Payload {
    fn default() -> Self {
        Self {
            mass: 0.0,
            offset: 0.05,
        }
    }
}

/// Full arm description: per-link parameters, in-plane gravity acceleration,
/// and the payload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ArmModel {
    pub links: Vec<LinkParams>,
    pub gravity: Vector2<f64>,
    pub payload: Payload,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self {
            links: vec![
                LinkParams {
                    length: 0.40,
                    com_offset: 0.20,
                    mass: 6.0,
                    rot_inertia: 6.0 * 0.40 * 0.40 / 12.0,
                    ..LinkParams::default()
                },
                LinkParams {
                    length: 0.30,
                    com_offset: 0.15,
                    mass: 4.0,
                    rot_inertia: 4.0 * 0.30 * 0.30 / 12.0,
                    ..LinkParams::default()
                },
                LinkParams {
                    length: 0.20,
                    com_offset: 0.10,
                    mass: 2.5,
                    rot_inertia: 2.5 * 0.20 * 0.20 / 12.0,
                    ..LinkParams::default()
                },
            ],
            gravity: Vector2::new(0.0, -9.81),
            payload: Payload::default(),
        }
    }
}

impl ArmModel {
    pub fn dof(&self) -> usize {
        self.links.len()
    }

    /// Total reach from the base to the last link tip.
    pub fn reach(&self) -> f64 {
        self.links.iter().map(|l| l.length).sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.links.is_empty() {
            return Err(ModelError::NoLinks);
        }
        for (i, l) in self.links.iter().enumerate() {
            for (name, v) in [
                ("length", l.length),
                ("com_offset", l.com_offset),
                ("mass", l.mass),
                ("rot_inertia", l.rot_inertia),
                ("viscous_damping", l.viscous_damping),
                ("coulomb_friction", l.coulomb_friction),
                ("armature", l.armature),
            ] {
                if !v.is_finite() || v < 0.0 {
                    return Err(ModelError::BadLinkParam {
                        link: i,
                        name,
                        value: v,
                    });
                }
            }
            if l.com_offset > l.length {
                return Err(ModelError::ComBeyondTip {
                    link: i,
                    com: l.com_offset,
                    len: l.length,
                });
            }
        }
        for (name, v) in [("mass", self.payload.mass), ("offset", self.payload.offset)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::BadPayload { name, value: v });
            }
        }
        if !self.gravity.x.is_finite() || !self.gravity.y.is_finite() {
            return Err(ModelError::BadGravity);
        }
        Ok(())
    }
}

/// Joint-space state sampled at the control rate: positions, velocities,
/// the acceleration observed over the last step, the torque that produced
/// it, and the simulation clock.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
    pub tau: DVector<f64>,
    pub t: f64,
}

impl JointState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qd: DVector::zeros(n),
            qdd: DVector::zeros(n),
            tau: DVector::zeros(n),
            t: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|v| v.is_finite())
            && self.qd.iter().all(|v| v.is_finite())
            && self.qdd.iter().all(|v| v.is_finite())
            && self.tau.iter().all(|v| v.is_finite())
            && self.t.is_finite()
    }
}

/// Mass, center-of-mass offset from the joint, and inertia about the center
/// of mass for one link after the payload has been folded in.
#[derive(Debug, Clone, Copy)]
struct EffectiveLink {
    mass: f64,
    com_offset: f64,
    inertia: f64,
    armature: f64,
}

fn effective_links(model: &ArmModel) -> Vec<EffectiveLink> {
    let n = model.links.len();
    let mut out: Vec<EffectiveLink> = model
        .links
        .iter()
        .map(|l| EffectiveLink {
            mass: l.mass,
            com_offset: l.com_offset,
            inertia: l.rot_inertia,
            armature: l.armature,
        })
        .collect();
    let p = model.payload;
    if p.mass > 0.0 {
        let last = &model.links[n - 1];
        let eff = &mut out[n - 1];
        let total = last.mass + p.mass;
        let p_at = last.length + p.offset;
        let com = (last.mass * last.com_offset + p.mass * p_at) / total;
        let d_link = last.com_offset - com;
        let d_payload = p_at - com;
        eff.mass = total;
        eff.com_offset = com;
        eff.inertia = last.rot_inertia + last.mass * d_link * d_link + p.mass * d_payload * d_payload;
    }
    out
}

/// Joint positions, link center-of-mass positions, and the tip, all in the
/// base frame at configuration `q`.
struct Frames {
    joints: Vec<Vector2<f64>>,
    coms: Vec<Vector2<f64>>,
    tip: Vector2<f64>,
}

fn frames(model: &ArmModel, q: &DVector<f64>, eff: &[EffectiveLink]) -> Frames {
    let n = model.links.len();
    let mut joints = Vec::with_capacity(n);
    let mut coms = Vec::with_capacity(n);
    let mut pos = Vector2::zeros();
    let mut angle = 0.0;
    for i in 0..n {
        joints.push(pos);
        angle += q[i];
        let dir = Vector2::new(angle.cos(), angle.sin());
        coms.push(pos + dir * eff[i].com_offset);
        pos += dir * model.links[i].length;
    }
    Frames {
        joints,
        coms,
        tip: pos,
    }
}

/// Rotate a vector by +90 degrees; the velocity direction of a point
/// revolving about the origin.
#[inline]
fn perp(v: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

/// Joint-space mass matrix, including payload and armature. Symmetric and
/// positive definite for any configuration when armature is positive.
pub fn mass_matrix(model: &ArmModel, q: &DVector<f64>) -> DMatrix<f64> {
    let eff = effective_links(model);
    mass_matrix_with(model, q, &eff)
}

fn mass_matrix_with(model: &ArmModel, q: &DVector<f64>, eff: &[EffectiveLink]) -> DMatrix<f64> {
    let n = model.dof();
    let fr = frames(model, q, eff);
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        // Columns of the link-i com Jacobian; only joints up to i move it.
        for j in 0..=i {
            let cj = perp(fr.coms[i] - fr.joints[j]);
            for k in 0..=i {
                let ck = perp(fr.coms[i] - fr.joints[k]);
                h[(j, k)] += eff[i].mass * cj.dot(&ck);
            }
        }
        // Angular velocity of link i is the sum of the first i+1 joint rates.
        for j in 0..=i {
            for k in 0..=i {
                h[(j, k)] += eff[i].inertia;
            }
        }
    }
    for j in 0..n {
        h[(j, j)] += eff[j].armature;
    }
    // Round-off in the dot products is the only source of asymmetry; remove
    // it so downstream symmetry checks can be exact.
    for j in 0..n {
        for k in 0..j {
            let s = 0.5 * (h[(j, k)] + h[(k, j)]);
            h[(j, k)] = s;
            h[(k, j)] = s;
        }
    }
    h
}

/// Gravity torque `g(q)`, the configuration gradient of the potential.
pub fn gravity_torque(model: &ArmModel, q: &DVector<f64>) -> DVector<f64> {
    let n = model.dof();
    let eff = effective_links(model);
    let fr = frames(model, q, &eff);
    let mut g = DVector::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let col = perp(fr.coms[i] - fr.joints[j]);
            g[j] -= eff[i].mass * model.gravity.dot(&col);
        }
    }
    g
}

/// Potential energy `V(q)` with the base as reference height.
pub fn potential_energy(model: &ArmModel, q: &DVector<f64>) -> f64 {
    let eff = effective_links(model);
    let fr = frames(model, q, &eff);
    let mut v = 0.0;
    for i in 0..model.dof() {
        v -= eff[i].mass * model.gravity.dot(&fr.coms[i]);
    }
    v
}

/// Kinetic energy computed from link velocities, `T = 1/2 qd' H qd`
/// evaluated without assembling H.
pub fn kinetic_energy(model: &ArmModel, q: &DVector<f64>, qd: &DVector<f64>) -> f64 {
    let eff = effective_links(model);
    let fr = frames(model, q, &eff);
    let mut t = 0.0;
    let mut omega = 0.0;
    for i in 0..model.dof() {
        omega += qd[i];
        let mut vel = Vector2::zeros();
        for j in 0..=i {
            vel += perp(fr.coms[i] - fr.joints[j]) * qd[j];
        }
        t += 0.5 * eff[i].mass * vel.norm_squared() + 0.5 * eff[i].inertia * omega * omega;
        t += 0.5 * eff[i].armature * qd[i] * qd[i];
    }
    t
}

/// Total mechanical energy `T + V`.
pub fn total_energy(model: &ArmModel, q: &DVector<f64>, qd: &DVector<f64>) -> f64 {
    kinetic_energy(model, q, qd) + potential_energy(model, q)
}

/// Central-difference configuration derivatives of the mass matrix,
/// `dH/dq[k]` for each joint.
pub fn mass_matrix_partials(model: &ArmModel, q: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let eff = effective_links(model);
    let n = model.dof();
    let mut out = Vec::with_capacity(n);
    let mut probe = q.clone();
    for k in 0..n {
        probe[k] = q[k] + MASS_PARTIAL_FD_STEP;
        let hp = mass_matrix_with(model, &probe, &eff);
        probe[k] = q[k] - MASS_PARTIAL_FD_STEP;
        let hm = mass_matrix_with(model, &probe, &eff);
        probe[k] = q[k];
        out.push((hp - hm) / (2.0 * MASS_PARTIAL_FD_STEP));
    }
    out
}

/// Velocity-product torque (Coriolis and centrifugal terms),
/// `Hdot qd - 1/2 d(qd' H qd)/dq`, built from the mass matrix partials.
pub fn coriolis_torque(model: &ArmModel, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
    let partials = mass_matrix_partials(model, q);
    coriolis_from_partials(&partials, qd)
}

/// The same velocity-product torque given precomputed `dH/dq`.
pub fn coriolis_from_partials(partials: &[DMatrix<f64>], qd: &DVector<f64>) -> DVector<f64> {
    let n = qd.len();
    let mut c = DVector::zeros(n);
    for k in 0..n {
        c.axpy(qd[k], &(&partials[k] * qd), 1.0);
        c[k] -= 0.5 * (qd.transpose() * &partials[k] * qd)[(0, 0)];
    }
    c
}

/// Joint friction torque: viscous plus tanh-smoothed Coulomb.
pub fn friction_torque(model: &ArmModel, qd: &DVector<f64>) -> DVector<f64> {
    let n = model.dof();
    let mut f = DVector::zeros(n);
    for i in 0..n {
        let l = &model.links[i];
        f[i] = l.viscous_damping * qd[i] + l.coulomb_friction * (qd[i] / COULOMB_SMOOTHING).tanh();
    }
    f
}

/// Joint accelerations under applied torque `tau`, with friction removed
/// before the rigid-body solve.
pub fn forward_dynamics(
    model: &ArmModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    tau: &DVector<f64>,
) -> DVector<f64> {
    let h = mass_matrix(model, q);
    let rhs = tau - friction_torque(model, qd) - coriolis_torque(model, q, qd) - gravity_torque(model, q);
    solve_spd(&h, &rhs)
}

/// Torque that produces `qdd` at `(q, qd)`, conservative terms only.
/// Adding `friction_torque(qd)` gives the torque an actuator must apply.
pub fn inverse_dynamics(
    model: &ArmModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    qdd: &DVector<f64>,
) -> DVector<f64> {
    let h = mass_matrix(model, q);
    &h * qdd + coriolis_torque(model, q, qd) + gravity_torque(model, q)
}

/// Solve `H x = b` for symmetric positive definite H, falling back to LU if
/// the Cholesky factorization fails near the definiteness boundary.
pub fn solve_spd(h: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    match h.clone().cholesky() {
        Some(chol) => chol.solve(b),
        None => h
            .clone()
            .lu()
            .solve(b)
            .unwrap_or_else(|| DVector::zeros(b.len())),
    }
}

/// End-effector position Jacobian, 2 x N.
pub fn jacobian(model: &ArmModel, q: &DVector<f64>) -> DMatrix<f64> {
    let eff = effective_links(model);
    let fr = frames(model, q, &eff);
    let n = model.dof();
    let mut j = DMatrix::zeros(2, n);
    for k in 0..n {
        let col = perp(fr.tip - fr.joints[k]);
        j[(0, k)] = col.x;
        j[(1, k)] = col.y;
    }
    j
}

/// Position Jacobian of link `i`'s center of mass (payload folded in), 2 x N.
pub fn com_jacobian(model: &ArmModel, q: &DVector<f64>, link: usize) -> DMatrix<f64> {
    let eff = effective_links(model);
    let fr = frames(model, q, &eff);
    let n = model.dof();
    let mut j = DMatrix::zeros(2, n);
    for k in 0..=link {
        let col = perp(fr.coms[link] - fr.joints[k]);
        j[(0, k)] = col.x;
        j[(1, k)] = col.y;
    }
    j
}

/// Effective mass of each link after payload folding. Pairs with
/// [`com_jacobian`] for gravity compensation built from first moments.
pub fn effective_masses(model: &ArmModel) -> Vec<f64> {
    effective_links(model).iter().map(|l| l.mass).collect()
}

/// End-effector position and velocity.
pub fn end_effector(
    model: &ArmModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
) -> (Vector2<f64>, Vector2<f64>) {
    let eff = effective_links(model);
    let fr = frames(model, q, &eff);
    let j = jacobian(model, q);
    let v = &j * qd;
    (fr.tip, Vector2::new(v[0], v[1]))
}
