//! Learned inertia and potential with exact input derivatives.
//!
//! A shared softplus core feeds three linear heads: the strict lower triangle
//! of the mass matrix, a softplus-floored diagonal, and a scalar potential.
//! Every layer of the forward pass carries its Jacobian with respect to the
//! joint positions, so the mass-matrix partials that the Coriolis contraction
//! needs come out analytically rather than by finite differences. The reverse
//! pass is hand-rolled and accumulates parameter gradients through both the
//! value chain and the Jacobian chain.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::controller::{ControllerError, MassInfo, MassProvider};
use crate::dynamics::{coriolis_from_partials, solve_spd};
use crate::sim::HistoryStep;

/// Offset added to the softplus diagonal so it stays strictly positive.
pub const DIAG_FLOOR: f64 = 1e-3;
/// Eigenvalue floor enforced before a learned mass matrix is inverted.
pub const EIG_FLOOR: f64 = 1e-4;
/// Hidden width of the core stack.
pub const HIDDEN_WIDTH: usize = 128;
/// Hidden layer count of the core stack.
pub const CORE_DEPTH: usize = 4;
/// Weight scale for fresh networks.
pub const INIT_SCALE: f64 = 1e-2;

/// ln(1 + e^x) without overflowing for large inputs.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the softplus derivative.
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`softplus`] on positive inputs.
pub fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Standard normal draw by Box-Muller, keeping the dependency footprint at
/// the plain `rand` crate.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// One dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: DMatrix::zeros(out_dim, in_dim),
            b: DVector::zeros(out_dim),
        }
    }

    /// Normal weights at the given scale, zero bias.
    pub fn random(out_dim: usize, in_dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: DMatrix::from_fn(out_dim, in_dim, |_, _| scale * standard_normal(rng)),
            b: DVector::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x + &self.b
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|x| x.is_finite()) && self.b.iter().all(|x| x.is_finite())
    }
}

/// Uniform access to a network's parameter blocks.
///
/// Flattening visits the slot list in order, each weight matrix in its
/// column-major storage order followed by its bias. Checkpoints and the
/// optimizer both rely on this order being fixed.
pub trait Parameterized {
    fn slots(&self) -> Vec<(String, &Linear)>;
    fn slots_mut(&mut self) -> Vec<(String, &mut Linear)>;

    fn param_count(&self) -> usize {
        self.slots().iter().map(|(_, l)| l.w.len() + l.b.len()).sum()
    }

    fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, l) in self.slots() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        DVector::from_vec(out)
    }

    fn assign_flat(&mut self, flat: &DVector<f64>) {
        let mut at = 0;
        for (_, l) in self.slots_mut() {
            for v in l.w.iter_mut() {
                *v = flat[at];
                at += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[at];
                at += 1;
            }
        }
        assert_eq!(at, flat.len(), "parameter vector length mismatch");
    }

    fn params_finite(&self) -> bool {
        self.slots().iter().all(|(_, l)| l.is_finite())
    }
}

/// Softplus hidden stack that carries input Jacobians alongside values.
#[derive(Debug, Clone)]
pub struct Stack {
    pub layers: Vec<Linear>,
}

/// Caches of one traced stack pass.
///
/// `a[0]` is the stack input and `d[0]` the seed Jacobian; `a[i + 1]` and
/// `d[i + 1]` belong to hidden layer `i`, as do `s[i]` (pre-activations) and
/// `m[i] = W·d[i]` (the pre-activation Jacobian).
pub struct StackTrace {
    pub a: Vec<DVector<f64>>,
    pub s: Vec<DVector<f64>>,
    pub m: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
}

impl Stack {
    /// `dims` lists the input width followed by each hidden width.
    pub fn random(dims: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: dims
                .windows(2)
                .map(|w| Linear::random(w[1], w[0], scale, rng))
                .collect(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims
                .windows(2)
                .map(|w| Linear::zeros(w[1], w[0]))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
        }
    }

    /// Value-only pass.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut a = x.clone();
        for layer in &self.layers {
            a = layer.forward(&a).map(softplus);
        }
        a
    }

    /// Value-and-Jacobian pass. `seed` is the Jacobian of `x` with respect to
    /// the differentiation variables, one column per variable; a zero-column
    /// seed turns the Jacobian chain into a no-op.
    pub fn forward_traced(&self, x: &DVector<f64>, seed: DMatrix<f64>) -> StackTrace {
        let depth = self.layers.len();
        let mut trace = StackTrace {
            a: Vec::with_capacity(depth + 1),
            s: Vec::with_capacity(depth),
            m: Vec::with_capacity(depth),
            d: Vec::with_capacity(depth + 1),
        };
        trace.a.push(x.clone());
        trace.d.push(seed);
        for layer in &self.layers {
            let s = layer.forward(trace.a.last().unwrap());
            let m = &layer.w * trace.d.last().unwrap();
            let mut d = m.clone();
            for r in 0..s.len() {
                d.row_mut(r).scale_mut(logistic(s[r]));
            }
            trace.a.push(s.map(softplus));
            trace.s.push(s);
            trace.m.push(m);
            trace.d.push(d);
        }
        trace
    }

    /// Reverse pass. `a_bar` and `d_bar` are the adjoints of the final
    /// activation and of its Jacobian; parameter gradients accumulate into
    /// `grad`, and the adjoints of the stack input and seed Jacobian come
    /// back for upstream composition.
    pub fn backward(
        &self,
        trace: &StackTrace,
        mut a_bar: DVector<f64>,
        mut d_bar: DMatrix<f64>,
        grad: &mut Stack,
    ) -> (DVector<f64>, DMatrix<f64>) {
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let s = &trace.s[i];
            let m = &trace.m[i];
            let a_prev = &trace.a[i];
            let d_prev = &trace.d[i];

            // The pre-activation influences the output twice: through the
            // value chain a = softplus(s), and through the Jacobian chain
            // d = diag(logistic(s))·m whose row scale curves with s.
            let mut s_bar = DVector::zeros(s.len());
            let mut m_bar = d_bar.clone();
            for r in 0..s.len() {
                let sig = logistic(s[r]);
                let curve = sig * (1.0 - sig);
                s_bar[r] = a_bar[r] * sig + d_bar.row(r).dot(&m.row(r)) * curve;
                m_bar.row_mut(r).scale_mut(sig);
            }

            let g = &mut grad.layers[i];
            g.w += &m_bar * d_prev.transpose() + &s_bar * a_prev.transpose();
            g.b += &s_bar;
            d_bar = layer.w.transpose() * m_bar;
            a_bar = layer.w.transpose() * s_bar;
        }
        (a_bar, d_bar)
    }
}

/// Reverse step through a linear head that produced `y = W·a + b` and the
/// Jacobian `J = W·D`: accumulates the head's own gradient and pushes the
/// adjoints back onto the stack output.
pub(crate) fn linear_head_backward(
    head: &Linear,
    a_last: &DVector<f64>,
    d_last: &DMatrix<f64>,
    y_bar: &DVector<f64>,
    j_bar: &DMatrix<f64>,
    grad: &mut Linear,
    a_bar: &mut DVector<f64>,
    d_bar: &mut DMatrix<f64>,
) {
    grad.w += y_bar * a_last.transpose() + j_bar * d_last.transpose();
    grad.b += y_bar;
    *a_bar += head.w.transpose() * y_bar;
    *d_bar += head.w.transpose() * j_bar;
}

/// Strictly-lower-triangular index pairs in head output order.
pub fn lower_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 1..n {
        for j in 0..i {
            out.push((i, j));
        }
    }
    out
}

/// Inertia, its joint-position partials, gravity torque, and potential.
#[derive(Debug, Clone)]
pub struct MassEval {
    pub h: DMatrix<f64>,
    /// `dh[k]` is the partial of `h` with respect to joint `k`.
    pub dh: Vec<DMatrix<f64>>,
    pub g: DVector<f64>,
    pub v: f64,
}

impl MassEval {
    pub fn is_finite(&self) -> bool {
        self.h.iter().all(|x| x.is_finite())
            && self.dh.iter().all(|m| m.iter().all(|x| x.is_finite()))
            && self.g.iter().all(|x| x.is_finite())
            && self.v.is_finite()
    }
}

/// Adjoint seeds for a reverse pass; same shapes as [`MassEval`].
pub struct MassAdjoint {
    pub h: DMatrix<f64>,
    pub dh: Vec<DMatrix<f64>>,
    pub g: DVector<f64>,
    pub v: f64,
}

impl MassAdjoint {
    pub fn zeros(n: usize) -> Self {
        Self {
            h: DMatrix::zeros(n, n),
            dh: vec![DMatrix::zeros(n, n); n],
            g: DVector::zeros(n),
            v: 0.0,
        }
    }
}

/// τ = H·q̈ + c(q, q̇) + g for an already evaluated model.
pub fn predicted_torque(eval: &MassEval, qd: &DVector<f64>, qdd: &DVector<f64>) -> DVector<f64> {
    &eval.h * qdd + coriolis_from_partials(&eval.dh, qd) + &eval.g
}

/// Mass-and-potential network.
#[derive(Debug, Clone)]
pub struct DelanBase {
    pub dof: usize,
    pub core: Stack,
    pub lower: Linear,
    pub diag: Linear,
    pub potential: Linear,
}

/// Layer caches of one traced base pass.
pub struct BaseTrace {
    pub core: StackTrace,
    /// Diagonal head outputs before the softplus.
    pub diag_raw: DVector<f64>,
    /// Jacobian of `diag_raw` with respect to the joint positions.
    pub diag_jac: DMatrix<f64>,
}

impl DelanBase {
    fn core_dims(dof: usize) -> Vec<usize> {
        let mut dims = vec![dof];
        dims.extend(std::iter::repeat(HIDDEN_WIDTH).take(CORE_DEPTH));
        dims
    }

    /// Fresh network: small random weights, with the diagonal-head bias
    /// placed so the assembled inertia starts near the identity.
    pub fn new(dof: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut net = Self::zeros(dof);
        net.core = Stack::random(&Self::core_dims(dof), INIT_SCALE, rng);
        net.lower = Linear::random(dof * (dof - 1) / 2, HIDDEN_WIDTH, INIT_SCALE, rng);
        net.diag = Linear::random(dof, HIDDEN_WIDTH, INIT_SCALE, rng);
        net.potential = Linear::random(1, HIDDEN_WIDTH, INIT_SCALE, rng);
        net.diag.b.fill(softplus_inv(1.0 - DIAG_FLOOR));
        net
    }

    /// All-zero network of the same shape; doubles as the gradient
    /// accumulator.
    pub fn zeros(dof: usize) -> Self {
        Self {
            dof,
            core: Stack::zeros(&Self::core_dims(dof)),
            lower: Linear::zeros(dof * (dof - 1) / 2, HIDDEN_WIDTH),
            diag: Linear::zeros(dof, HIDDEN_WIDTH),
            potential: Linear::zeros(1, HIDDEN_WIDTH),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dof)
    }

    pub fn forward(&self, q: &DVector<f64>) -> MassEval {
        self.forward_traced(q).0
    }

    /// Forward pass that also returns the caches the reverse pass needs.
    pub fn forward_traced(&self, q: &DVector<f64>) -> (MassEval, BaseTrace) {
        let n = self.dof;
        let core = self.core.forward_traced(q, DMatrix::identity(n, n));
        let a_last = core.a.last().unwrap();
        let d_last = core.d.last().unwrap();

        let l = self.lower.forward(a_last);
        let l_jac = &self.lower.w * d_last;
        let r = self.diag.forward(a_last);
        let r_jac = &self.diag.w * d_last;
        let v = self.potential.forward(a_last)[0];
        let g_row = &self.potential.w * d_last;
        let g = DVector::from_iterator(n, g_row.iter().copied());

        let mut h = DMatrix::zeros(n, n);
        let mut dh = vec![DMatrix::zeros(n, n); n];
        for (k, &(i, j)) in lower_pairs(n).iter().enumerate() {
            h[(i, j)] = l[k];
            h[(j, i)] = l[k];
            for (m, dh_m) in dh.iter_mut().enumerate() {
                dh_m[(i, j)] = l_jac[(k, m)];
                dh_m[(j, i)] = l_jac[(k, m)];
            }
        }
        for i in 0..n {
            h[(i, i)] = softplus(r[i]) + DIAG_FLOOR;
            let slope = logistic(r[i]);
            for (m, dh_m) in dh.iter_mut().enumerate() {
                dh_m[(i, i)] = slope * r_jac[(i, m)];
            }
        }

        (
            MassEval { h, dh, g, v },
            BaseTrace {
                core,
                diag_raw: r,
                diag_jac: r_jac,
            },
        )
    }

    /// Accumulate parameter gradients for the given output adjoints.
    pub fn backward(&self, trace: &BaseTrace, adj: &MassAdjoint, grad: &mut DelanBase) {
        let n = self.dof;
        let a_last = trace.core.a.last().unwrap();
        let d_last = trace.core.d.last().unwrap();
        let width = a_last.len();
        let mut a_bar = DVector::zeros(width);
        let mut d_bar = DMatrix::zeros(width, n);

        // Lower head: each output lands at (i, j) and its mirror.
        let pairs = lower_pairs(n);
        let mut l_bar = DVector::zeros(pairs.len());
        let mut l_jac_bar = DMatrix::zeros(pairs.len(), n);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            l_bar[k] = adj.h[(i, j)] + adj.h[(j, i)];
            for m in 0..n {
                l_jac_bar[(k, m)] = adj.dh[m][(i, j)] + adj.dh[m][(j, i)];
            }
        }
        linear_head_backward(
            &self.lower,
            a_last,
            d_last,
            &l_bar,
            &l_jac_bar,
            &mut grad.lower,
            &mut a_bar,
            &mut d_bar,
        );

        // Diagonal head: the value path runs through the softplus, and the
        // partial path both scales by its slope and curves with it.
        let mut r_bar = DVector::zeros(n);
        let mut r_jac_bar = DMatrix::zeros(n, n);
        for i in 0..n {
            let sig = logistic(trace.diag_raw[i]);
            let curve = sig * (1.0 - sig);
            r_bar[i] = adj.h[(i, i)] * sig;
            for m in 0..n {
                r_jac_bar[(i, m)] = adj.dh[m][(i, i)] * sig;
                r_bar[i] += adj.dh[m][(i, i)] * trace.diag_jac[(i, m)] * curve;
            }
        }
        linear_head_backward(
            &self.diag,
            a_last,
            d_last,
            &r_bar,
            &r_jac_bar,
            &mut grad.diag,
            &mut a_bar,
            &mut d_bar,
        );

        // Potential head: scalar value; the gravity adjoint rides the
        // Jacobian row.
        let v_bar = DVector::from_element(1, adj.v);
        let g_bar = DMatrix::from_fn(1, n, |_, c| adj.g[c]);
        linear_head_backward(
            &self.potential,
            a_last,
            d_last,
            &v_bar,
            &g_bar,
            &mut grad.potential,
            &mut a_bar,
            &mut d_bar,
        );

        self.core.backward(&trace.core, a_bar, d_bar, &mut grad.core);
    }

    /// Torque that, per the learned model, produces `qdd` at (`q`, `qd`).
    pub fn predict_tau(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        qdd: &DVector<f64>,
    ) -> DVector<f64> {
        predicted_torque(&self.forward(q), qd, qdd)
    }

    /// Acceleration under `tau`, guarding the inertia before the solve.
    pub fn predict_qdd(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        tau: &DVector<f64>,
        guard_hits: &AtomicU64,
    ) -> DVector<f64> {
        let e = self.forward(q);
        let rhs = tau - coriolis_from_partials(&e.dh, qd) - &e.g;
        let mut h = e.h;
        if guard_spd(&mut h).is_some() {
            guard_hits.fetch_add(1, Ordering::Relaxed);
        }
        solve_spd(&h, &rhs)
    }

    /// Velocity-product plus gravity torque, the compensation a controller
    /// feeds forward. Identical to [`Self::predict_tau`] at zero
    /// acceleration.
    pub fn coriolis_gravity(&self, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
        self.predict_tau(q, qd, &DVector::zeros(self.dof))
    }
}

impl Parameterized for DelanBase {
    fn slots(&self) -> Vec<(String, &Linear)> {
        let mut out: Vec<(String, &Linear)> = self
            .core
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("core.{i}"), l))
            .collect();
        out.push(("head_lower".into(), &self.lower));
        out.push(("head_diag".into(), &self.diag));
        out.push(("head_potential".into(), &self.potential));
        out
    }

    fn slots_mut(&mut self) -> Vec<(String, &mut Linear)> {
        let mut out: Vec<(String, &mut Linear)> = self
            .core
            .layers
            .iter_mut()
            .enumerate()
            .map(|(i, l)| (format!("core.{i}"), l))
            .collect();
        out.push(("head_lower".into(), &mut self.lower));
        out.push(("head_diag".into(), &mut self.diag));
        out.push(("head_potential".into(), &mut self.potential));
        out
    }
}

/// Shift a symmetric matrix onto the eigenvalue floor if it sits below it,
/// returning the applied shift.
pub fn guard_spd(h: &mut DMatrix<f64>) -> Option<f64> {
    let min_eig = h.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < EIG_FLOOR {
        let shift = EIG_FLOOR - min_eig;
        for i in 0..h.nrows() {
            h[(i, i)] += shift;
        }
        Some(shift)
    } else {
        None
    }
}

/// Feeds the learned base to the operational space controller.
pub struct LearnedBaseProvider {
    pub base: DelanBase,
    guard_hits: AtomicU64,
}

impl LearnedBaseProvider {
    pub fn new(base: DelanBase) -> Self {
        Self {
            base,
            guard_hits: AtomicU64::new(0),
        }
    }
}

impl MassProvider for LearnedBaseProvider {
    fn provide(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        _history: &[HistoryStep],
    ) -> Result<MassInfo, ControllerError> {
        let e = self.base.forward(q);
        if !e.is_finite() {
            return Err(ControllerError::NonFiniteProvider);
        }
        let tau_cg = coriolis_from_partials(&e.dh, qd) + &e.g;
        let mut h = e.h;
        if guard_spd(&mut h).is_some() {
            self.guard_hits.fetch_add(1, Ordering::Relaxed);
        }
        Ok(MassInfo { h, tau_cg })
    }

    fn guard_count(&self) -> u64 {
        self.guard_hits.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn scaled_net(dof: usize, seed: u64, factor: f64) -> DelanBase {
        let mut r = rng(seed);
        let mut net = DelanBase::new(dof, &mut r);
        for (_, l) in net.slots_mut() {
            l.w *= factor;
        }
        net
    }

    /// Training-style init scaled up so derivatives have real magnitude.
    fn wide_net(dof: usize, seed: u64) -> DelanBase {
        scaled_net(dof, seed, 30.0)
    }

    fn random_q(r: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(3, |_, _| r.gen_range(-3.0..3.0))
    }

    #[test]
    fn zero_weight_network_gives_identity_inertia() {
        let mut net = DelanBase::zeros(3);
        net.diag.b.fill(softplus_inv(1.0 - DIAG_FLOOR));
        let e = net.forward(&DVector::from_vec(vec![0.3, -1.2, 2.0]));
        assert!((e.h - DMatrix::identity(3, 3)).abs().max() < 1e-12);
        for k in 0..3 {
            assert_eq!(e.dh[k].abs().max(), 0.0);
        }
        assert_eq!(e.g.abs().max(), 0.0);
        assert_eq!(e.v, 0.0);
    }

    #[test]
    fn inertia_is_symmetric_with_floored_diagonal() {
        for seed in 0..5 {
            let net = wide_net(3, seed);
            let mut r = rng(seed ^ 0xabc);
            for _ in 0..50 {
                let e = net.forward(&random_q(&mut r));
                assert_eq!(e.h, e.h.transpose());
                for i in 0..3 {
                    assert!(e.h[(i, i)] >= DIAG_FLOOR);
                }
            }
        }
    }

    #[test]
    fn mass_partials_match_finite_differences() {
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        // 1e3 (network, position) probes.
        for seed in 0..20 {
            let net = wide_net(3, 1000 + seed);
            let mut r = rng(seed);
            for _ in 0..50 {
                let q = random_q(&mut r);
                let e = net.forward(&q);
                for k in 0..3 {
                    let mut qp = q.clone();
                    qp[k] += step;
                    let mut qm = q.clone();
                    qm[k] -= step;
                    let fd = (net.forward(&qp).h - net.forward(&qm).h) / (2.0 * step);
                    let scale = e.dh[k].abs().max().max(1e-6);
                    worst = worst.max((fd - &e.dh[k]).abs().max() / scale);
                }
            }
        }
        assert!(worst < 1e-5, "worst relative partial error {worst:.2e}");
    }

    #[test]
    fn gravity_head_is_the_potential_gradient() {
        let net = wide_net(3, 7);
        let mut r = rng(99);
        let step = 1e-6;
        for _ in 0..100 {
            let q = random_q(&mut r);
            let e = net.forward(&q);
            for k in 0..3 {
                let mut qp = q.clone();
                qp[k] += step;
                let mut qm = q.clone();
                qm[k] -= step;
                let fd = (net.forward(&qp).v - net.forward(&qm).v) / (2.0 * step);
                assert_relative_eq!(fd, e.g[k], epsilon = 1e-7, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn backward_matches_directional_derivatives() {
        let net = wide_net(3, 11);
        let mut r = rng(5);
        let q = random_q(&mut r);
        // Fixed random coefficients contract the full output to one scalar.
        let adj = MassAdjoint {
            h: DMatrix::from_fn(3, 3, |_, _| r.gen_range(-1.0..1.0)),
            dh: (0..3)
                .map(|_| DMatrix::from_fn(3, 3, |_, _| r.gen_range(-1.0..1.0)))
                .collect(),
            g: DVector::from_fn(3, |_, _| r.gen_range(-1.0..1.0)),
            v: r.gen_range(-1.0..1.0),
        };
        let probe = |net: &DelanBase| {
            let e = net.forward(&q);
            let mut acc = e.v * adj.v + e.g.dot(&adj.g);
            acc += e.h.component_mul(&adj.h).sum();
            for k in 0..3 {
                acc += e.dh[k].component_mul(&adj.dh[k]).sum();
            }
            acc
        };

        let mut grad = net.zeros_like();
        let (_, trace) = net.forward_traced(&q);
        net.backward(&trace, &adj, &mut grad);
        let grad_flat = grad.flatten();
        let theta = net.flatten();

        // Directions are left unnormalized so the directional derivative
        // stays well above the finite-difference roundoff floor.
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for dir_seed in 0..30 {
            let mut dr = rng(400 + dir_seed);
            let u = DVector::from_fn(theta.len(), |_, _| dr.gen_range(-1.0..1.0));
            let mut plus = net.clone();
            plus.assign_flat(&(&theta + &u * h));
            let mut minus = net.clone();
            minus.assign_flat(&(&theta - &u * h));
            let fd = (probe(&plus) - probe(&minus)) / (2.0 * h);
            let an = grad_flat.dot(&u);
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
        }
        assert!(worst < 1e-5, "worst directional gradient error {worst:.2e}");
    }

    #[test]
    fn torque_acceleration_round_trip() {
        let net = scaled_net(3, 2, 6.0);
        let hits = AtomicU64::new(0);
        let mut r = rng(14);
        let mut tested = 0;
        for _ in 0..50 {
            let q = random_q(&mut r);
            let qd = DVector::from_fn(3, |_, _| r.gen_range(-2.0..2.0));
            let qdd = DVector::from_fn(3, |_, _| r.gen_range(-5.0..5.0));
            // The inversion only cancels the forward map where the raw
            // inertia is already above the guard floor.
            let e = net.forward(&q);
            if e.h.clone().symmetric_eigen().eigenvalues.min() < EIG_FLOOR {
                continue;
            }
            let tau = net.predict_tau(&q, &qd, &qdd);
            let back = net.predict_qdd(&q, &qd, &tau, &hits);
            assert!((back - &qdd).abs().max() < 1e-8);
            tested += 1;
        }
        assert!(tested >= 25, "only {tested} well-conditioned probes");
        assert_eq!(hits.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn compensation_equals_zero_acceleration_torque() {
        let net = wide_net(3, 3);
        let mut r = rng(8);
        let q = random_q(&mut r);
        let qd = DVector::from_fn(3, |_, _| r.gen_range(-2.0..2.0));
        assert_eq!(
            net.coriolis_gravity(&q, &qd),
            net.predict_tau(&q, &qd, &DVector::zeros(3))
        );
    }

    #[test]
    fn guard_lifts_indefinite_inertia() {
        let mut net = DelanBase::zeros(3);
        net.diag.b.fill(softplus_inv(1.0 - DIAG_FLOOR));
        net.lower.b[0] = 5.0;
        let q = DVector::zeros(3);
        let e = net.forward(&q);
        let mut h = e.h.clone();
        let shift = guard_spd(&mut h).expect("strong off-diagonal coupling is indefinite");
        assert!(shift > 3.9);
        let min_eig = h.symmetric_eigen().eigenvalues.min();
        assert_relative_eq!(min_eig, EIG_FLOOR, epsilon = 1e-12, max_relative = 1e-8);

        let provider = LearnedBaseProvider::new(net);
        provider.provide(&q, &DVector::zeros(3), &[]).unwrap();
        assert_eq!(provider.guard_count(), 1);

        let mut healthy = DMatrix::identity(3, 3);
        assert!(guard_spd(&mut healthy).is_none());
        assert_eq!(healthy, DMatrix::identity(3, 3));
    }

    #[test]
    fn parameter_vector_round_trips() {
        let net = wide_net(3, 21);
        let flat = net.flatten();
        assert_eq!(flat.len(), net.param_count());
        let mut copy = DelanBase::zeros(3);
        copy.assign_flat(&flat);
        let q = DVector::from_vec(vec![0.4, -0.9, 1.7]);
        let (a, b) = (net.forward(&q), copy.forward(&q));
        assert_eq!(a.h, b.h);
        assert_eq!(a.g, b.g);
        assert_eq!(a.v, b.v);
    }
}
