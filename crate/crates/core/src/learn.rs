//! Dynamics losses, their gradients, the optimizer, and the training loops.
//!
//! Three L2 terms tie a model to observed transitions: inverse (torque it
//! assigns to the observed motion), forward (acceleration it assigns to the
//! applied torque), and an energy-rate residual along the trajectory. The
//! gradients run by explicit reverse-mode accumulation through the loss, the
//! matrix assembly, and the per-layer Jacobian chain, so no autodiff crate is
//! involved. Training alternates parallel data collection with gradient
//! epochs over a replay window; every number is reproducible from the seed
//! because workers are seeded and merged by index, not by completion order.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{AnalyticalProvider, Controller, OscController, OscGains};
use crate::delan::{
    guard_spd, BaseTrace, DelanBase, LearnedBaseProvider, MassAdjoint, MassEval, Parameterized,
};
use crate::dynamics::{
    coriolis_from_partials, gravity_torque, mass_matrix, mass_matrix_partials, potential_energy,
    solve_spd, ArmModel,
};
use crate::residual::{ComposedModel, ComposedProvider, ComposedTrace, ExtrinsicsEncoder, ResidualNet};
use crate::sim::{
    rollout, Episode, RandomizationSpec, SimConfig, SimError, TrajectoryKind, Transition,
};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("non-finite loss at sample {sample}: q {q:?} qd {qd:?} qdd {qdd:?} tau {tau:?}")]
    NonFiniteLoss {
        sample: usize,
        q: Vec<f64>,
        qd: Vec<f64>,
        qdd: Vec<f64>,
        tau: Vec<f64>,
    },
    #[error("training diverged at round {round}: loss {loss:.3e}")]
    Diverged { round: usize, loss: f64 },
    #[error("replay buffer is empty")]
    EmptyReplay,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Relative weight of each loss term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub inverse: f64,
    pub forward: f64,
    pub energy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            inverse: 1.0,
            forward: 0.1,
            energy: 0.1,
        }
    }
}

/// Batch-mean value of each unweighted term.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossTerms {
    pub inverse: f64,
    pub forward: f64,
    pub energy: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.inverse * self.inverse + w.forward * self.forward + w.energy * self.energy
    }
}

/// A dynamics model the loss pipeline can train: the pretraining base, the
/// composed task-specific model, or the exact plant injected as an oracle
/// (no trainable parameters; it pins down what zero loss means).
#[derive(Debug, Clone)]
pub enum Learner {
    Base(DelanBase),
    Composed(ComposedModel),
    Oracle(ArmModel),
}

pub enum LearnerTrace {
    Base(BaseTrace),
    Composed(ComposedTrace),
    Oracle,
}

/// Gradient holder matching a learner's trainable blocks.
pub enum LearnerGrads {
    Base(DelanBase),
    Composed {
        residual: ResidualNet,
        encoder: ExtrinsicsEncoder,
    },
    Oracle,
}

impl LearnerGrads {
    pub fn flatten(&self) -> DVector<f64> {
        match self {
            LearnerGrads::Base(b) => b.flatten(),
            LearnerGrads::Composed { residual, encoder } => {
                let r = residual.flatten();
                let e = encoder.flatten();
                DVector::from_iterator(r.len() + e.len(), r.iter().chain(e.iter()).copied())
            }
            LearnerGrads::Oracle => DVector::zeros(0),
        }
    }
}

impl Learner {
    pub fn dof(&self) -> usize {
        match self {
            Learner::Base(b) => b.dof,
            Learner::Composed(m) => m.base.dof,
            Learner::Oracle(m) => m.dof(),
        }
    }

    pub fn forward_traced(
        &self,
        q: &DVector<f64>,
        history: &[crate::sim::HistoryStep],
    ) -> (MassEval, LearnerTrace) {
        match self {
            Learner::Base(b) => {
                let (eval, trace) = b.forward_traced(q);
                (eval, LearnerTrace::Base(trace))
            }
            Learner::Composed(m) => {
                let (eval, trace) = m.forward_traced(q, history);
                (eval, LearnerTrace::Composed(trace))
            }
            Learner::Oracle(m) => {
                let eval = MassEval {
                    h: mass_matrix(m, q),
                    dh: mass_matrix_partials(m, q),
                    g: gravity_torque(m, q),
                    v: potential_energy(m, q),
                };
                (eval, LearnerTrace::Oracle)
            }
        }
    }

    pub fn backward(&self, trace: &LearnerTrace, adj: &MassAdjoint, grads: &mut LearnerGrads) {
        match (self, trace, grads) {
            (Learner::Base(b), LearnerTrace::Base(t), LearnerGrads::Base(g)) => {
                b.backward(t, adj, g);
            }
            (
                Learner::Composed(m),
                LearnerTrace::Composed(t),
                LearnerGrads::Composed { residual, encoder },
            ) => {
                m.backward(t, adj, residual, encoder);
            }
            (Learner::Oracle(_), LearnerTrace::Oracle, LearnerGrads::Oracle) => {}
            _ => panic!("learner, trace, and gradient holder kinds disagree"),
        }
    }

    pub fn zero_grads(&self) -> LearnerGrads {
        match self {
            Learner::Base(b) => LearnerGrads::Base(b.zeros_like()),
            Learner::Composed(m) => LearnerGrads::Composed {
                residual: m.residual.zeros_like(),
                encoder: m.encoder.zeros_like(),
            },
            Learner::Oracle(_) => LearnerGrads::Oracle,
        }
    }

    /// Trainable parameters as one flat vector. The frozen base of a
    /// composed model is excluded.
    pub fn flatten(&self) -> DVector<f64> {
        match self {
            Learner::Base(b) => b.flatten(),
            Learner::Composed(m) => {
                let r = m.residual.flatten();
                let e = m.encoder.flatten();
                DVector::from_iterator(r.len() + e.len(), r.iter().chain(e.iter()).copied())
            }
            Learner::Oracle(_) => DVector::zeros(0),
        }
    }

    pub fn assign_flat(&mut self, flat: &DVector<f64>) {
        match self {
            Learner::Base(b) => b.assign_flat(flat),
            Learner::Composed(m) => {
                let r_len = m.residual.param_count();
                m.residual.assign_flat(&flat.rows(0, r_len).into_owned());
                m.encoder
                    .assign_flat(&flat.rows(r_len, flat.len() - r_len).into_owned());
            }
            Learner::Oracle(_) => assert_eq!(flat.len(), 0),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Learner::Base(b) => b.param_count(),
            Learner::Composed(m) => m.residual.param_count() + m.encoder.param_count(),
            Learner::Oracle(_) => 0,
        }
    }

    /// Operational space controller sourcing its model from this learner.
    pub fn controller(&self, kin: &ArmModel, gains: OscGains) -> Box<dyn Controller> {
        match self {
            Learner::Base(b) => Box::new(OscController::new(
                LearnedBaseProvider::new(b.clone()),
                kin.clone(),
                gains,
            )),
            Learner::Composed(m) => Box::new(OscController::new(
                ComposedProvider::new(m.clone()),
                kin.clone(),
                gains,
            )),
            Learner::Oracle(m) => Box::new(OscController::new(
                AnalyticalProvider { model: m.clone() },
                kin.clone(),
                gains,
            )),
        }
    }
}

/// Adjoint of r·c(∂H, q̇) with respect to each mass-matrix partial, scaled by
/// `s`: the velocity-product torque is linear in the partials, with one term
/// per contraction index and the quadratic correction on the diagonal slot.
fn coriolis_partial_adjoint(
    dh_bar: &mut [DMatrix<f64>],
    r: &DVector<f64>,
    qd: &DVector<f64>,
    s: f64,
) {
    let n = qd.len();
    let r_qdt = r * qd.transpose();
    let qd_qdt = qd * qd.transpose();
    for k in 0..n {
        dh_bar[k] += &r_qdt * (s * qd[k]);
        dh_bar[k] -= &qd_qdt * (0.5 * s * r[k]);
    }
}

/// Batch-mean losses; with `grads` present, also the gradients of the
/// weighted total. `guard_hits` counts eigenvalue-floor activations in the
/// forward term's solve (the shift is treated as a constant when
/// differentiating).
pub fn loss_and_grad(
    learner: &Learner,
    batch: &[&Transition],
    weights: &LossWeights,
    mut grads: Option<&mut LearnerGrads>,
    guard_hits: &AtomicU64,
) -> Result<LossTerms, LearnError> {
    assert!(!batch.is_empty(), "empty batch");
    let b = batch.len() as f64;
    let n = learner.dof();
    let mut terms = LossTerms::default();

    for (idx, tr) in batch.iter().enumerate() {
        let st = &tr.state;
        let (eval, trace) = learner.forward_traced(&st.q, &tr.history);

        let c = coriolis_from_partials(&eval.dh, &st.qd);
        let tau_hat = &eval.h * &st.qdd + &c + &eval.g;
        let r_inv = &tau_hat - &st.tau;

        let mut h_guarded = eval.h.clone();
        if guard_spd(&mut h_guarded).is_some() {
            guard_hits.fetch_add(1, Ordering::Relaxed);
        }
        let rho = &st.tau - &c - &eval.g;
        let qdd_hat = solve_spd(&h_guarded, &rho);
        let r_fwd = &qdd_hat - &st.qdd;

        let mut hdot = DMatrix::zeros(n, n);
        for k in 0..n {
            hdot += &eval.dh[k] * st.qd[k];
        }
        let energy_rate = st.qd.dot(&(&eval.h * &st.qdd))
            + 0.5 * st.qd.dot(&(&hdot * &st.qd))
            + st.qd.dot(&eval.g)
            - st.qd.dot(&st.tau);

        let li = r_inv.norm_squared();
        let lf = r_fwd.norm_squared();
        let le = energy_rate * energy_rate;
        if !(li.is_finite() && lf.is_finite() && le.is_finite()) {
            return Err(LearnError::NonFiniteLoss {
                sample: idx,
                q: st.q.as_slice().to_vec(),
                qd: st.qd.as_slice().to_vec(),
                qdd: st.qdd.as_slice().to_vec(),
                tau: st.tau.as_slice().to_vec(),
            });
        }
        terms.inverse += li / b;
        terms.forward += lf / b;
        terms.energy += le / b;

        if let Some(holder) = grads.as_deref_mut() {
            let mut adj = MassAdjoint::zeros(n);

            let si = 2.0 * weights.inverse / b;
            adj.h += (&r_inv * st.qdd.transpose()) * si;
            coriolis_partial_adjoint(&mut adj.dh, &r_inv, &st.qd, si);
            adj.g += &r_inv * si;

            // The forward term differentiates through the linear solve:
            // with y = H⁻¹ρ and x̄ = H⁻¹ȳ, the inertia adjoint is −x̄·yᵀ and
            // ρ inherits x̄.
            let sf = 2.0 * weights.forward / b;
            let y_bar = &r_fwd * sf;
            let x_bar = solve_spd(&h_guarded, &y_bar);
            adj.h -= &x_bar * qdd_hat.transpose();
            let c_bar = -&x_bar;
            coriolis_partial_adjoint(&mut adj.dh, &c_bar, &st.qd, 1.0);
            adj.g += &c_bar;

            let se = 2.0 * weights.energy * energy_rate / b;
            adj.h += (&st.qd * st.qdd.transpose()) * se;
            let qd_qdt = &st.qd * st.qd.transpose();
            for k in 0..n {
                adj.dh[k] += &qd_qdt * (0.5 * se * st.qd[k]);
            }
            adj.g += &st.qd * se;

            learner.backward(&trace, &adj, holder);
        }
    }
    Ok(terms)
}

/// Adaptive-moment optimizer over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    step: u32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: DVector::zeros(len),
            v: DVector::zeros(len),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>) {
        assert_eq!(params.len(), self.m.len(), "optimizer length mismatch");
        assert_eq!(params.len(), grad.len(), "gradient length mismatch");
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Outcome of comparing reverse-mode gradients with central directional
/// derivatives of the loss.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    pub worst_rel: f64,
    pub directions: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel < self.tolerance
    }
}

/// Probe the loss gradient along random parameter directions. `mask`
/// restricts the directions to a slice of the flat vector (e.g. only the
/// encoder block of a composed learner); `corrupt` injects a deliberate
/// error into the analytic gradient so the failure path can be exercised.
pub fn gradcheck(
    learner: &Learner,
    batch: &[&Transition],
    weights: &LossWeights,
    directions: usize,
    seed: u64,
    mask: Option<std::ops::Range<usize>>,
    corrupt: bool,
) -> Result<GradcheckReport, LearnError> {
    let guard = AtomicU64::new(0);
    let mut grads = learner.zero_grads();
    loss_and_grad(learner, batch, weights, Some(&mut grads), &guard)?;
    let mut grad_flat = grads.flatten();
    if corrupt {
        for (i, g) in grad_flat.iter_mut().enumerate() {
            *g += 1e-3 + 1e-3 * ((i as f64) * 0.7).sin();
        }
    }

    let theta = learner.flatten();
    let step = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut u = DVector::zeros(theta.len());
        for i in mask.clone().unwrap_or(0..theta.len()) {
            u[i] = rng.gen_range(-1.0..1.0);
        }
        let mut plus = learner.clone();
        plus.assign_flat(&(&theta + &u * step));
        let mut minus = learner.clone();
        minus.assign_flat(&(&theta - &u * step));
        let lp = loss_and_grad(&plus, batch, weights, None, &guard)?.total(weights);
        let lm = loss_and_grad(&minus, batch, weights, None, &guard)?.total(weights);
        let fd = (lp - lm) / (2.0 * step);
        let an = grad_flat.dot(&u);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-10));
    }
    Ok(GradcheckReport {
        worst_rel: worst,
        directions,
        tolerance: 1e-4,
    })
}

/// Sliding window of recent episodes, sampled uniformly at the transition
/// level.
pub struct Replay {
    episodes: VecDeque<Episode>,
    capacity: usize,
}

impl Replay {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            episodes: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }

    pub fn sample<'a>(
        &'a self,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<&'a Transition>, LearnError> {
        let total = self.transition_count();
        if total == 0 {
            return Err(LearnError::EmptyReplay);
        }
        Ok((0..batch)
            .map(|_| {
                let mut at = rng.gen_range(0..total);
                for ep in &self.episodes {
                    if at < ep.transitions.len() {
                        return &ep.transitions[at];
                    }
                    at -= ep.transitions.len();
                }
                unreachable!("cumulative episode lengths cover the index range")
            })
            .collect())
    }
}

/// Deterministic seed mixer so worker and round seeds never collide by
/// accident.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Roll one episode per worker in parallel. Workers get seeds from their
/// index and results merge in index order, so the outcome is identical to a
/// serial run no matter how the threads are scheduled.
pub fn collect_parallel<F>(
    nominal: &ArmModel,
    sim: &SimConfig,
    spec: &RandomizationSpec,
    kind: TrajectoryKind,
    workers: usize,
    round_seed: u64,
    make_controller: F,
) -> Result<Vec<Episode>, SimError>
where
    F: Fn(usize) -> Box<dyn Controller> + Sync,
{
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let make = &make_controller;
                scope.spawn(move || {
                    let mut ctrl = make(w);
                    rollout(
                        nominal,
                        sim,
                        spec,
                        kind,
                        ctrl.as_mut(),
                        mix_seed(round_seed, w as u64),
                    )
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("collection worker panicked"))
            .collect()
    })
}

/// Knobs of a training run. Budgets default to a desk-scale run: 16 rounds of
/// 16 straight-line episodes give 51 200 transitions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub workers: usize,
    pub steps_per_round: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub replay_capacity: usize,
    pub weights: LossWeights,
    /// Task-space stiffness of the collecting controller.
    pub kp: f64,
    /// Task-space damping of the collecting controller.
    pub kv: f64,
    pub divergence_limit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 16,
            workers: 16,
            steps_per_round: 50,
            batch: 256,
            learning_rate: 1e-3,
            replay_capacity: 200,
            weights: LossWeights::default(),
            kp: 120.0,
            kv: 2.0 * 120.0_f64.sqrt(),
            divergence_limit: 1e6,
        }
    }
}

/// One collection-plus-training round in a loss curve.
#[derive(Debug, Clone, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub episodes: usize,
    pub transitions: usize,
    pub mean_rmse_mm: f64,
    pub inverse: f64,
    pub forward: f64,
    pub energy: f64,
    pub total: f64,
    /// Eigenvalue-floor activations inside the loss so far.
    pub train_guard_hits: u64,
}

fn mean_rmse_mm(episodes: &[Episode]) -> f64 {
    episodes.iter().map(|e| e.rmse_mm()).sum::<f64>() / episodes.len().max(1) as f64
}

fn train_rounds(
    learner: &mut Learner,
    nominal: &ArmModel,
    sim: &SimConfig,
    spec: &RandomizationSpec,
    kind: TrajectoryKind,
    cfg: &TrainConfig,
    seed: u64,
    collector_tracks_learner: bool,
) -> Result<Vec<RoundLog>, LearnError> {
    let gains = OscGains::isotropic(cfg.kp, cfg.kv);
    let mut replay = Replay::new(cfg.replay_capacity);
    let mut adam = Adam::new(learner.param_count(), cfg.learning_rate);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6261_7463_68));
    let guard = AtomicU64::new(0);
    let mut logs = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let snapshot = learner.clone();
        let episodes = collect_parallel(
            nominal,
            sim,
            spec,
            kind,
            cfg.workers,
            mix_seed(seed, round as u64),
            |_| {
                if collector_tracks_learner {
                    snapshot.controller(nominal, gains)
                } else {
                    Box::new(OscController::new(
                        AnalyticalProvider {
                            model: nominal.clone(),
                        },
                        nominal.clone(),
                        gains,
                    ))
                }
            },
        )?;
        let rmse = mean_rmse_mm(&episodes);
        let collected = episodes.len();
        for ep in episodes {
            replay.push(ep);
        }

        let mut last = LossTerms::default();
        for _ in 0..cfg.steps_per_round {
            let batch = replay.sample(cfg.batch, &mut batch_rng)?;
            let mut grads = learner.zero_grads();
            last = loss_and_grad(learner, &batch, &cfg.weights, Some(&mut grads), &guard)?;
            let total = last.total(&cfg.weights);
            if !total.is_finite() || total > cfg.divergence_limit {
                return Err(LearnError::Diverged { round, loss: total });
            }
            let mut theta = learner.flatten();
            adam.step(&mut theta, &grads.flatten());
            learner.assign_flat(&theta);
        }

        logs.push(RoundLog {
            round,
            episodes: collected,
            transitions: replay.transition_count(),
            mean_rmse_mm: rmse,
            inverse: last.inverse,
            forward: last.forward,
            energy: last.energy,
            total: last.total(&cfg.weights),
            train_guard_hits: guard.load(Ordering::Relaxed),
        });
    }
    Ok(logs)
}

/// Result of the task-agnostic phase.
pub struct PretrainOutcome {
    pub base: DelanBase,
    pub rounds: Vec<RoundLog>,
    /// Inverse-dynamics NRMSE on held-out episodes, as a fraction.
    pub heldout_nrmse: f64,
}

/// Task-agnostic phase: an exact-model controller follows random straight
/// lines on the unrandomized plant with no payload, and the base trains on
/// the growing replay of those transitions.
pub fn pretrain(
    nominal: &ArmModel,
    sim: &SimConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PretrainOutcome, LearnError> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x696e_6974));
    let mut learner = Learner::Base(DelanBase::new(nominal.dof(), &mut init_rng));
    let spec = RandomizationSpec::none(nominal);
    let rounds = train_rounds(
        &mut learner,
        nominal,
        sim,
        &spec,
        TrajectoryKind::Line,
        cfg,
        seed,
        false,
    )?;

    let gains = OscGains::isotropic(cfg.kp, cfg.kv);
    let heldout = collect_parallel(
        nominal,
        sim,
        &spec,
        TrajectoryKind::Line,
        cfg.workers.max(2),
        mix_seed(seed, 0x6865_6c64_6f75_74),
        |_| {
            Box::new(OscController::new(
                AnalyticalProvider {
                    model: nominal.clone(),
                },
                nominal.clone(),
                gains,
            ))
        },
    )?;
    let heldout_nrmse = inverse_nrmse(&learner, &heldout);

    match learner {
        Learner::Base(base) => Ok(PretrainOutcome {
            base,
            rounds,
            heldout_nrmse,
        }),
        _ => unreachable!(),
    }
}

/// Result of the task-specific phase.
pub struct FinetuneOutcome {
    pub learner: Learner,
    pub rounds: Vec<RoundLog>,
}

/// Task-specific phase: the learner itself drives the collecting controller,
/// refreshed with the newest weights each round, and only its trainable
/// blocks move (a composed learner keeps its base frozen by construction).
pub fn finetune(
    mut learner: Learner,
    nominal: &ArmModel,
    sim: &SimConfig,
    spec: &RandomizationSpec,
    kind: TrajectoryKind,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneOutcome, LearnError> {
    let rounds = train_rounds(&mut learner, nominal, sim, spec, kind, cfg, seed, true)?;
    Ok(FinetuneOutcome { learner, rounds })
}

/// Root-mean-square inverse-dynamics error over every transition, normalized
/// by the standard deviation of the observed torques.
pub fn inverse_nrmse(learner: &Learner, episodes: &[Episode]) -> f64 {
    let n = learner.dof();
    let mut count = 0usize;
    let mut tau_sum = DVector::zeros(n);
    for ep in episodes {
        for tr in &ep.transitions {
            tau_sum += &tr.state.tau;
            count += 1;
        }
    }
    assert!(count > 0, "no held-out transitions");
    let tau_mean = tau_sum / count as f64;

    let mut err2 = 0.0;
    let mut dev2 = 0.0;
    for ep in episodes {
        for tr in &ep.transitions {
            let st = &tr.state;
            let (eval, _) = learner.forward_traced(&st.q, &tr.history);
            let tau_hat = crate::delan::predicted_torque(&eval, &st.qd, &st.qdd);
            err2 += (&tau_hat - &st.tau).norm_squared();
            dev2 += (&st.tau - &tau_mean).norm_squared();
        }
    }
    (err2 / dev2.max(1e-12)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{forward_dynamics, inverse_dynamics, JointState};
    use crate::sim::HistoryStep;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn frictionless(model: &ArmModel) -> ArmModel {
        let mut m = model.clone();
        for link in &mut m.links {
            link.viscous_damping = 0.0;
            link.coulomb_friction = 0.0;
        }
        m
    }

    fn state_transition(q: DVector<f64>, qd: DVector<f64>, qdd: DVector<f64>, tau: DVector<f64>) -> Transition {
        Transition {
            state: JointState {
                q,
                qd,
                qdd,
                tau,
                t: 0.0,
            },
            history: Vec::new(),
        }
    }

    /// Consistent frictionless rows: torque drawn first, acceleration from
    /// the exact plant.
    fn oracle_rows(model: &ArmModel, count: usize, seed: u64) -> Vec<Transition> {
        let mut r = rng(seed);
        (0..count)
            .map(|_| {
                let q = DVector::from_fn(3, |_, _| r.gen_range(-2.5..2.5));
                let qd = DVector::from_fn(3, |_, _| r.gen_range(-1.5..1.5));
                let tau = DVector::from_fn(3, |_, _| r.gen_range(-8.0..8.0));
                let qdd = forward_dynamics(model, &q, &qd, &tau);
                state_transition(q, qd, qdd, tau)
            })
            .collect()
    }

    fn rows_with_history(learner_window: usize, count: usize, seed: u64) -> Vec<Transition> {
        let model = frictionless(&ArmModel::default());
        let mut r = rng(seed);
        oracle_rows(&model, count, seed)
            .into_iter()
            .map(|mut tr| {
                tr.history = (0..learner_window)
                    .map(|_| HistoryStep {
                        q: DVector::from_fn(3, |_, _| r.gen_range(-2.0..2.0)),
                        qd: DVector::from_fn(3, |_, _| r.gen_range(-1.0..1.0)),
                        tau: DVector::from_fn(3, |_, _| r.gen_range(-5.0..5.0)),
                    })
                    .collect();
                tr
            })
            .collect()
    }

    #[test]
    fn exact_model_zeroes_every_term() {
        let model = frictionless(&ArmModel::default());
        let rows = oracle_rows(&model, 64, 4);
        let batch: Vec<&Transition> = rows.iter().collect();
        let guard = AtomicU64::new(0);
        let terms = loss_and_grad(
            &Learner::Oracle(model),
            &batch,
            &LossWeights::default(),
            None,
            &guard,
        )
        .unwrap();
        assert!(terms.inverse < 1e-12, "inverse {:.2e}", terms.inverse);
        assert!(terms.forward < 1e-12, "forward {:.2e}", terms.forward);
        assert!(terms.energy < 1e-12, "energy {:.2e}", terms.energy);
    }

    #[test]
    fn doubled_inertia_is_invisible_on_static_rows() {
        // Doubling every mass while halving gravity doubles the inertia
        // matrix but leaves the gravity torque untouched, so nothing in the
        // loss can see the difference on motionless data.
        let truth = frictionless(&ArmModel::default());
        let mut doubled = truth.clone();
        for link in &mut doubled.links {
            link.mass *= 2.0;
            link.rot_inertia *= 2.0;
            link.armature *= 2.0;
        }
        doubled.gravity /= 2.0;

        let mut r = rng(7);
        let rows: Vec<Transition> = (0..32)
            .map(|_| {
                let q = DVector::from_fn(3, |_, _| r.gen_range(-2.5..2.5));
                let zero = DVector::zeros(3);
                let tau = inverse_dynamics(&truth, &q, &zero, &zero);
                state_transition(q, zero.clone(), zero.clone(), tau)
            })
            .collect();
        let batch: Vec<&Transition> = rows.iter().collect();
        let guard = AtomicU64::new(0);
        let terms = loss_and_grad(
            &Learner::Oracle(doubled),
            &batch,
            &LossWeights::default(),
            None,
            &guard,
        )
        .unwrap();
        assert_eq!(terms.inverse, 0.0);
        assert_eq!(terms.forward, 0.0);
        assert_eq!(terms.energy, 0.0);
    }

    #[test]
    fn blank_model_pays_the_gravity_norm_on_static_rows() {
        let truth = frictionless(&ArmModel::default());
        let mut blank = DelanBase::zeros(3);
        blank
            .diag
            .b
            .fill(crate::delan::softplus_inv(1.0 - crate::delan::DIAG_FLOOR));

        let mut r = rng(11);
        let mut expected = 0.0;
        let rows: Vec<Transition> = (0..32)
            .map(|_| {
                let q = DVector::from_fn(3, |_, _| r.gen_range(-2.5..2.5));
                let zero = DVector::zeros(3);
                let tau = inverse_dynamics(&truth, &q, &zero, &zero);
                expected += tau.norm_squared() / 32.0;
                state_transition(q, zero.clone(), zero.clone(), tau)
            })
            .collect();
        let batch: Vec<&Transition> = rows.iter().collect();
        let guard = AtomicU64::new(0);
        let terms = loss_and_grad(
            &Learner::Base(blank),
            &batch,
            &LossWeights::default(),
            None,
            &guard,
        )
        .unwrap();
        assert!((terms.inverse - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let mut adam = Adam::new(1, 1e-3);
        let mut p = DVector::from_vec(vec![0.5]);
        let g = DVector::from_vec(vec![0.3]);
        adam.step(&mut p, &g);
        let m_hat = 0.3;
        let v_hat: f64 = 0.3 * 0.3;
        let expect = 0.5 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
        assert_eq!(p[0], expect);

        // Zero gradient leaves the parameter where it sits.
        let mut quiet = Adam::new(1, 1e-3);
        let mut p2 = DVector::from_vec(vec![0.5]);
        quiet.step(&mut p2, &DVector::zeros(1));
        assert_eq!(p2[0], 0.5);
    }

    #[test]
    fn adam_runs_are_bit_identical() {
        let run = || {
            let mut adam = Adam::new(4, 3e-3);
            let mut p = DVector::from_vec(vec![0.1, -0.2, 0.3, -0.4]);
            let mut r = rng(5);
            for _ in 0..50 {
                let g = DVector::from_fn(4, |_, _| r.gen_range(-1.0..1.0));
                adam.step(&mut p, &g);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradients_match_loss_slope_for_base_and_composed() {
        let rows = rows_with_history(4, 6, 21);
        let batch: Vec<&Transition> = rows.iter().collect();
        let weights = LossWeights::default();

        let mut r = rng(31);
        let base = DelanBase::new(3, &mut r);
        let report = gradcheck(&Learner::Base(base.clone()), &batch, &weights, 20, 9, None, false)
            .unwrap();
        assert!(report.passed(), "base worst {:.2e}", report.worst_rel);

        let mut composed = ComposedModel::new(base, 4, &mut r);
        // Wake the residual heads so its gradient path is exercised too.
        composed.residual.lower = crate::delan::Linear::random(3, 64, 0.2, &mut r);
        composed.residual.diag = crate::delan::Linear::random(3, 64, 0.2, &mut r);
        let learner = Learner::Composed(composed);
        let report = gradcheck(&learner, &batch, &weights, 20, 10, None, false).unwrap();
        assert!(report.passed(), "composed worst {:.2e}", report.worst_rel);

        // Masked to the encoder block only.
        let res_len = match &learner {
            Learner::Composed(m) => m.residual.param_count(),
            _ => unreachable!(),
        };
        let total_len = learner.param_count();
        let report = gradcheck(
            &learner,
            &batch,
            &weights,
            10,
            11,
            Some(res_len..total_len),
            false,
        )
        .unwrap();
        assert!(report.passed(), "encoder worst {:.2e}", report.worst_rel);

        let corrupted = gradcheck(&learner, &batch, &weights, 10, 12, None, true).unwrap();
        assert!(!corrupted.passed(), "corruption went undetected");
    }

    #[test]
    fn replay_evicts_oldest_and_samples_deterministically() {
        let model = frictionless(&ArmModel::default());
        let mut replay = Replay::new(2);
        for seed in 0..3 {
            let rows = oracle_rows(&model, 4, seed);
            replay.push(Episode {
                transitions: rows,
                targets: Vec::new(),
                positions: Vec::new(),
                rmse: seed as f64,
                mean_abs_tau: 0.0,
                guard_count: 0,
                payload_mass: 0.0,
            });
        }
        assert_eq!(replay.episode_count(), 2);
        assert_eq!(replay.transition_count(), 8);

        let a: Vec<f64> = replay
            .sample(6, &mut rng(3))
            .unwrap()
            .iter()
            .map(|t| t.state.q[0])
            .collect();
        let b: Vec<f64> = replay
            .sample(6, &mut rng(3))
            .unwrap()
            .iter()
            .map(|t| t.state.q[0])
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_collection_is_schedule_independent() {
        let nominal = ArmModel::default();
        let sim = SimConfig {
            horizon: 30,
            ..SimConfig::default()
        };
        let spec = RandomizationSpec::none(&nominal);
        let gains = OscGains::isotropic(120.0, 2.0 * 120.0_f64.sqrt());
        let collect = || {
            collect_parallel(
                &nominal,
                &sim,
                &spec,
                TrajectoryKind::Line,
                4,
                77,
                |_| {
                    Box::new(OscController::new(
                        AnalyticalProvider {
                            model: nominal.clone(),
                        },
                        nominal.clone(),
                        gains,
                    ))
                },
            )
            .unwrap()
        };
        let a = collect();
        let b = collect();
        let key = |eps: &[Episode]| -> Vec<f64> { eps.iter().map(|e| e.rmse).collect() };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn non_finite_row_is_named_in_the_error() {
        let model = frictionless(&ArmModel::default());
        let mut rows = oracle_rows(&model, 3, 2);
        rows[2].state.tau[1] = f64::NAN;
        let batch: Vec<&Transition> = rows.iter().collect();
        let guard = AtomicU64::new(0);
        let err = loss_and_grad(
            &Learner::Oracle(model),
            &batch,
            &LossWeights::default(),
            None,
            &guard,
        )
        .unwrap_err();
        match err {
            LearnError::NonFiniteLoss { sample, .. } => assert_eq!(sample, 2),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn short_pretraining_run_learns_and_reproduces() {
        let nominal = ArmModel::default();
        let sim = SimConfig {
            horizon: 40,
            ..SimConfig::default()
        };
        let cfg = TrainConfig {
            rounds: 3,
            workers: 2,
            steps_per_round: 8,
            batch: 48,
            ..TrainConfig::default()
        };
        let out1 = pretrain(&nominal, &sim, &cfg, 123).unwrap();
        assert_eq!(out1.rounds.len(), 3);
        assert!(out1.heldout_nrmse.is_finite());
        assert!(
            out1.rounds.last().unwrap().total < out1.rounds[0].total,
            "loss failed to move: {:?} -> {:?}",
            out1.rounds[0].total,
            out1.rounds.last().unwrap().total
        );

        let out2 = pretrain(&nominal, &sim, &cfg, 123).unwrap();
        assert_eq!(out1.heldout_nrmse, out2.heldout_nrmse);
        assert_eq!(out1.base.flatten(), out2.base.flatten());
    }
}
