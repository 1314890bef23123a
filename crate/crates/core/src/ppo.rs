//! Clipped-surrogate policy optimization and the staged training driver.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gym::{DoneReason, Env, EnvConfig, GymError, SamplerConfig, Stage, Task, TaskSampler};
use crate::policy::{unit_to_control, ActionDist, Actor, PolicyError, PolicyParams, PolicyShape, ACT_DIM};
use crate::world::WorldMap;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("non-finite loss in epoch {epoch}; parameters restored")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gym(#[from] GymError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// Steps collected per worker per update.
    pub horizon: usize,
    pub n_workers: usize,
    pub max_steps_per_stage: u64,
    /// Let value-regression gradients update the shared trunk.
    pub critic_trains_trunk: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            epochs: 10,
            minibatch: 64,
            lr: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            horizon: 2048,
            n_workers: 1,
            max_steps_per_stage: 5_000_000,
            critic_trains_trunk: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.minibatch == 0 || self.horizon == 0 || self.n_workers == 0 {
            return bad("minibatch, horizon and n_workers must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Environments and rollouts

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeStatus {
    Running,
    /// Ended by the dynamics (goal, collision); no bootstrapping.
    Terminated { success: bool },
    /// Cut off by the step limit; bootstraps from the final state.
    Truncated,
}

/// An episodic environment with the policy's observation/action shape.
pub trait Environment {
    fn observe(&self) -> Vec<f64>;
    /// Applies an action in `(-1, 1)^2`.
    fn step(&mut self, unit_action: [f64; ACT_DIM]) -> (f64, EpisodeStatus);
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<(), PpoError>;
}

/// The steering task, resampling a task from one curriculum stage per episode.
#[derive(Debug, Clone)]
pub struct StageEnv {
    sampler: TaskSampler,
    cfg: EnvConfig,
    env: Option<Env>,
}

impl StageEnv {
    pub fn new(sampler: TaskSampler, cfg: EnvConfig) -> Self {
        Self {
            sampler,
            cfg,
            env: None,
        }
    }

    pub fn env(&self) -> Option<&Env> {
        self.env.as_ref()
    }
}

impl Environment for StageEnv {
    fn observe(&self) -> Vec<f64> {
        self.env.as_ref().expect("reset before observe").observe().to_vec()
    }

    fn step(&mut self, unit_action: [f64; ACT_DIM]) -> (f64, EpisodeStatus) {
        let env = self.env.as_mut().expect("reset before step");
        let c = unit_to_control(unit_action, env.params());
        let r = env.step(c).expect("stepping a live episode");
        let status = match r.done {
            DoneReason::Running => EpisodeStatus::Running,
            DoneReason::GoalReached => EpisodeStatus::Terminated { success: true },
            DoneReason::Collision | DoneReason::Runaway => EpisodeStatus::Terminated { success: false },
            DoneReason::Timeout => EpisodeStatus::Truncated,
        };
        (r.reward, status)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<(), PpoError> {
        let task = self.sampler.sample(rng)?;
        self.env = Some(Env::new(task, self.cfg));
        Ok(())
    }
}

/// How a recorded step ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepEnd {
    Continue,
    Terminal,
    /// Timed out; carries the value estimate of the final observation.
    Truncated(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub ret: f64,
    pub len: usize,
    pub success: bool,
}

/// One worker's contiguous slice of experience.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segment {
    /// Row-major `len x obs_dim`.
    pub obs: Vec<f64>,
    pub z: Vec<[f64; ACT_DIM]>,
    pub log_prob: Vec<f64>,
    pub reward: Vec<f64>,
    pub value: Vec<f64>,
    pub end: Vec<StepEnd>,
    pub episode: Vec<u64>,
    /// Value of the observation following the last step.
    pub bootstrap: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub segments: Vec<Segment>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A private environment plus RNG stream.
#[derive(Debug, Clone)]
pub struct Worker<E> {
    pub env: E,
    rng: ChaCha8Rng,
    obs: Option<Vec<f64>>,
    episode: u64,
    ep_return: f64,
    ep_len: usize,
}

impl<E: Environment> Worker<E> {
    pub fn new(env: E, seed: u64) -> Self {
        Self {
            env,
            rng: ChaCha8Rng::seed_from_u64(seed),
            obs: None,
            episode: 0,
            ep_return: 0.0,
            ep_len: 0,
        }
    }

    fn run(&mut self, params: &PolicyParams, horizon: usize) -> Result<(Segment, Vec<EpisodeSummary>), PpoError> {
        let mut seg = Segment::default();
        let mut episodes = Vec::new();
        for _ in 0..horizon {
            let obs = match self.obs.take() {
                Some(o) => o,
                None => {
                    self.env.reset(&mut self.rng)?;
                    self.env.observe()
                }
            };
            let (dist, value) = params.forward(&obs)?;
            let a = dist.sample(&mut self.rng);
            let (r, status) = self.env.step(a.unit);
            self.ep_return += r;
            self.ep_len += 1;
            seg.obs.extend_from_slice(&obs);
            seg.z.push(a.z);
            seg.log_prob.push(a.log_prob);
            seg.reward.push(r);
            seg.value.push(value);
            seg.episode.push(self.episode);
            let end = match status {
                EpisodeStatus::Running => {
                    self.obs = Some(self.env.observe());
                    StepEnd::Continue
                }
                EpisodeStatus::Terminated { .. } => StepEnd::Terminal,
                EpisodeStatus::Truncated => StepEnd::Truncated(params.forward(&self.env.observe())?.1),
            };
            seg.end.push(end);
            if end != StepEnd::Continue {
                episodes.push(EpisodeSummary {
                    ret: self.ep_return,
                    len: self.ep_len,
                    success: status == EpisodeStatus::Terminated { success: true },
                });
                self.episode += 1;
                self.ep_return = 0.0;
                self.ep_len = 0;
            }
        }
        seg.bootstrap = match &self.obs {
            Some(o) => params.forward(o)?.1,
            None => 0.0,
        };
        Ok((seg, episodes))
    }
}

/// Gathers `horizon` steps from every worker under a frozen policy.
pub fn collect_rollouts<E: Environment + Send>(
    params: &PolicyParams,
    workers: &mut [Worker<E>],
    horizon: usize,
) -> Result<RolloutBuffer, PpoError> {
    let parts: Vec<_> = if workers.len() == 1 {
        vec![workers[0].run(params, horizon)]
    } else {
        workers.par_iter_mut().map(|w| w.run(params, horizon)).collect()
    };
    let mut buf = RolloutBuffer {
        obs_dim: params.shape().obs_dim,
        ..RolloutBuffer::default()
    };
    for part in parts {
        let (seg, eps) = part?;
        buf.segments.push(seg);
        buf.episodes.extend(eps);
    }
    Ok(buf)
}

/// Backward generalized-advantage recursion over one segment.
pub fn gae(rewards: &[f64], values: &[f64], ends: &[StepEnd], bootstrap: f64, discount: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    assert!(values.len() == n && ends.len() == n);
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let (next_value, next_carry) = match ends[t] {
            StepEnd::Terminal => (0.0, 0.0),
            StepEnd::Truncated(v) => (v, 0.0),
            StepEnd::Continue if t + 1 < n => (values[t + 1], carry),
            StepEnd::Continue => (bootstrap, 0.0),
        };
        let delta = rewards[t] + discount * next_value - values[t];
        adv[t] = delta + discount * lambda * next_carry;
        carry = adv[t];
    }
    adv
}

/// Advantages and value targets for the whole buffer, in buffer order.
pub fn compute_gae(buf: &RolloutBuffer, discount: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = Vec::with_capacity(buf.len());
    let mut ret = Vec::with_capacity(buf.len());
    for s in &buf.segments {
        let a = gae(&s.reward, &s.value, &s.end, s.bootstrap, discount, lambda);
        ret.extend(a.iter().zip(&s.value).map(|(a, v)| a + v));
        adv.extend(a);
    }
    (adv, ret)
}

/// Shifts and scales to zero mean and unit variance; constant input maps to
/// zeros.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x = if std > 1e-12 { (*x - mean) / std } else { 0.0 };
    }
}

// ---------------------------------------------------------------------------
// Loss and update

#[derive(Debug, Clone)]
pub struct Minibatch {
    pub x: Array2<f64>,
    pub z: Vec<[f64; ACT_DIM]>,
    pub old_log_prob: Vec<f64>,
    pub advantage: Vec<f64>,
    pub ret: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    /// Mean clipped surrogate objective (to be maximized).
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// `-surrogate + c_v * value_loss - c_e * entropy`.
    pub total: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Loss and its gradient on one minibatch.
pub fn minibatch_loss(params: &PolicyParams, mb: &Minibatch, cfg: &PpoConfig) -> (LossParts, Vec<f64>) {
    let b = mb.z.len();
    let bf = b as f64;
    let fwd = params.forward_batch(mb.x.view());
    let log_std = params.log_std();
    let std = log_std.map(f64::exp);
    let mut d_mean = Array2::zeros((b, ACT_DIM));
    let mut d_value = Array1::zeros(b);
    let mut d_log_std = [0.0; ACT_DIM];
    let mut parts = LossParts::default();
    for i in 0..b {
        let dist = ActionDist {
            mean: [fwd.mean[[i, 0]], fwd.mean[[i, 1]]],
            log_std,
        };
        let logp = dist.log_prob(&mb.z[i]);
        let log_ratio = logp - mb.old_log_prob[i];
        let ratio = log_ratio.exp();
        let a = mb.advantage[i];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
        parts.surrogate += unclipped.min(clipped) / bf;
        if (ratio - 1.0).abs() > cfg.clip {
            parts.clip_fraction += 1.0 / bf;
        }
        parts.approx_kl += ((ratio - 1.0) - log_ratio) / bf;
        // d(-surrogate)/d(logp)
        let g = if unclipped <= clipped { -a * ratio / bf } else { 0.0 };
        for k in 0..ACT_DIM {
            let u = (mb.z[i][k] - dist.mean[k]) / std[k];
            d_mean[[i, k]] = g * u / std[k];
            d_log_std[k] += g * (u * u - 1.0);
        }
        let err = fwd.value[i] - mb.ret[i];
        parts.value_loss += err * err / bf;
        d_value[i] = cfg.value_coef * 2.0 * err / bf;
    }
    parts.entropy = ActionDist {
        mean: [0.0; ACT_DIM],
        log_std,
    }
    .entropy();
    for d in &mut d_log_std {
        *d -= cfg.entropy_coef;
    }
    parts.total = -parts.surrogate + cfg.value_coef * parts.value_loss - cfg.entropy_coef * parts.entropy;
    let grad = params.backward(
        mb.x.view(),
        &fwd,
        d_mean.view(),
        d_value.view(),
        d_log_std,
        cfg.critic_trains_trunk,
    );
    (parts, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub params: PolicyParams,
    pub adam: Adam,
    pub cfg: PpoConfig,
}

impl PpoLearner {
    pub fn new(params: PolicyParams, cfg: PpoConfig) -> Self {
        let adam = Adam::new(params.len());
        Self { params, adam, cfg }
    }

    pub fn update<R: Rng + ?Sized>(&mut self, buf: &RolloutBuffer, rng: &mut R) -> Result<UpdateStats, PpoError> {
        let cfg = self.cfg;
        let (mut adv, ret) = compute_gae(buf, cfg.discount, cfg.gae_lambda);
        normalize(&mut adv);
        let obs: Vec<&[f64]> = buf.segments.iter().flat_map(|s| s.obs.chunks(buf.obs_dim)).collect();
        let z: Vec<[f64; ACT_DIM]> = buf.segments.iter().flat_map(|s| s.z.iter().copied()).collect();
        let old: Vec<f64> = buf.segments.iter().flat_map(|s| s.log_prob.iter().copied()).collect();
        let n = adv.len();
        let snapshot = (self.params.clone(), self.adam.clone());
        let mut stats = UpdateStats::default();
        let mut idx: Vec<usize> = (0..n).collect();
        for epoch in 0..cfg.epochs {
            idx.shuffle(rng);
            for chunk in idx.chunks(cfg.minibatch) {
                let mb = Minibatch {
                    x: Array2::from_shape_fn((chunk.len(), buf.obs_dim), |(r, c)| obs[chunk[r]][c]),
                    z: chunk.iter().map(|&i| z[i]).collect(),
                    old_log_prob: chunk.iter().map(|&i| old[i]).collect(),
                    advantage: chunk.iter().map(|&i| adv[i]).collect(),
                    ret: chunk.iter().map(|&i| ret[i]).collect(),
                };
                let (parts, mut grad) = minibatch_loss(&self.params, &mb, &cfg);
                if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    (self.params, self.adam) = snapshot;
                    return Err(PpoError::NonFiniteLoss { epoch });
                }
                clip_grad_norm(&mut grad, cfg.max_grad_norm);
                self.adam.step(self.params.as_mut_slice(), &grad, cfg.lr);
                self.params.clamp_log_std();
                stats.policy_loss += -parts.surrogate;
                stats.value_loss += parts.value_loss;
                stats.entropy += parts.entropy;
                stats.approx_kl += parts.approx_kl;
                stats.clip_fraction += parts.clip_fraction;
                stats.minibatches += 1;
            }
        }
        if !self.params.is_finite() {
            (self.params, self.adam) = snapshot;
            return Err(PpoError::NonFiniteLoss { epoch: cfg.epochs });
        }
        if stats.minibatches > 0 {
            let k = stats.minibatches as f64;
            stats.policy_loss /= k;
            stats.value_loss /= k;
            stats.entropy /= k;
            stats.approx_kl /= k;
            stats.clip_fraction /= k;
        }
        Ok(stats)
    }
}

pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    if !(max_norm > 0.0) {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
}

// ---------------------------------------------------------------------------
// Evaluation and curriculum

/// Outcome of one deterministic evaluation episode.
pub fn run_episode(actor: &dyn Actor, task: &Task, cfg: &EnvConfig) -> DoneReason {
    let mut env = Env::new(task.clone(), *cfg);
    let p = *env.params();
    let mut obs = env.observe();
    loop {
        let r = env.step(actor.act(&obs, &p)).expect("live episode");
        if r.done.is_done() {
            return r.done;
        }
        obs = r.observation;
    }
}

/// Fraction of tasks in which `actor` reaches the goal without collision.
pub fn evaluate(actor: &dyn Actor, tasks: &[Task], cfg: &EnvConfig) -> Result<f64, GymError> {
    if tasks.is_empty() {
        return Err(GymError::NoTasks);
    }
    let solved = tasks
        .par_iter()
        .filter(|t| run_episode(actor, t, cfg) == DoneReason::GoalReached)
        .count();
    Ok(solved as f64 / tasks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateOutcome {
    Stay,
    Advance(Stage),
    Completed,
}

/// Stage bookkeeping with the success-rate gate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurriculumState {
    pub stage: Stage,
    pub history: Vec<(Stage, f64)>,
    pub threshold: f64,
    /// Last stage of this run; passing its gate completes training.
    pub last: Stage,
    pub completed: bool,
}

impl CurriculumState {
    pub fn new(threshold: f64, last: Stage) -> Self {
        Self {
            stage: Stage::Empty,
            history: Vec::new(),
            threshold,
            last,
            completed: false,
        }
    }

    pub fn record(&mut self, sr: f64) -> GateOutcome {
        assert!(!self.completed, "curriculum already completed");
        self.history.push((self.stage, sr));
        if sr < self.threshold {
            return GateOutcome::Stay;
        }
        match self.stage.next() {
            Some(next) if self.stage != self.last => {
                self.stage = next;
                GateOutcome::Advance(next)
            }
            _ => {
                self.completed = true;
                GateOutcome::Completed
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageSpec {
    pub stage: Stage,
    pub sampler: SamplerConfig,
    pub env: EnvConfig,
    pub pool: Vec<Arc<WorldMap>>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub shape: PolicyShape,
    pub init_log_std: f64,
    /// Updates between validation runs.
    pub eval_interval: usize,
    pub validation_tasks: usize,
    pub gate: f64,
    /// Must start at `Empty` and list consecutive stages.
    pub stages: Vec<StageSpec>,
}

impl TrainConfig {
    pub fn new(stages: Vec<StageSpec>) -> Self {
        Self {
            ppo: PpoConfig::default(),
            shape: PolicyShape::default(),
            init_log_std: 0.0,
            eval_interval: 20,
            validation_tasks: 100,
            gate: 0.8,
            stages,
        }
    }

    fn validate(&self) -> Result<(), PpoError> {
        self.ppo.validate()?;
        if self.stages.is_empty() {
            return Err(PpoError::Config("no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.stage != Stage::ALL[i.min(2)] || i > 2 {
                return Err(PpoError::Config(format!(
                    "stages must run empty, static, dynamic in order (entry {i} is {:?})",
                    s.stage
                )));
            }
        }
        if self.eval_interval == 0 || self.validation_tasks == 0 {
            return Err(PpoError::Config("eval_interval and validation_tasks must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub stage: Stage,
    /// Mean return of episodes finished during the rollout, if any.
    pub mean_return: Option<f64>,
    /// Validation success rate, on updates that ran validation.
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub converged: bool,
    pub final_stage: Stage,
    pub stages_passed: Vec<Stage>,
    pub total_steps: u64,
    pub best_success_rate: f64,
    pub gate_history: Vec<(Stage, f64)>,
    pub curve: Vec<CurvePoint>,
}

/// Validation hook: `(params, tasks, env config) -> success rate`.
pub type Evaluator<'a> = dyn FnMut(&PolicyParams, &[Task], &EnvConfig) -> f64 + 'a;

/// Runs the staged curriculum. When `out_dir` is given, writes stage and
/// best checkpoints, `curve.csv` and `manifest.json` there.
pub fn curriculum_train(
    cfg: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(PolicyParams, TrainReport), PpoError> {
    let mut eval = |p: &PolicyParams, tasks: &[Task], env: &EnvConfig| {
        evaluate(p, tasks, env).expect("validation set is non-empty")
    };
    curriculum_train_with(cfg, seed, out_dir, &mut eval)
}

pub fn curriculum_train_with(
    cfg: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
    evaluator: &mut Evaluator<'_>,
) -> Result<(PolicyParams, TrainReport), PpoError> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|source| PpoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_file(&dir.join("manifest.json"), &run_manifest(cfg, seed))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = PolicyParams::init(cfg.shape, cfg.init_log_std, &mut rng);
    let mut learner = PpoLearner::new(params, cfg.ppo);
    let last = cfg.stages.last().unwrap().stage;
    let mut cur = CurriculumState::new(cfg.gate, last);
    let mut report = TrainReport {
        converged: false,
        final_stage: Stage::Empty,
        stages_passed: Vec::new(),
        total_steps: 0,
        best_success_rate: 0.0,
        gate_history: Vec::new(),
        curve: Vec::new(),
    };
    let mut best: Option<(Stage, f64, PolicyParams)> = None;

    'stages: for spec in &cfg.stages {
        report.final_stage = spec.stage;
        let sampler = TaskSampler::new(spec.stage, spec.pool.clone(), spec.sampler)?;
        let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + spec.stage as u64));
        let validation: Vec<Task> = (0..cfg.validation_tasks)
            .map(|_| sampler.sample(&mut val_rng))
            .collect::<Result<_, _>>()?;
        let mut workers: Vec<Worker<StageEnv>> = (0..cfg.ppo.n_workers)
            .map(|w| Worker::new(StageEnv::new(sampler.clone(), spec.env), rng.random::<u64>() ^ w as u64))
            .collect();
        let mut stage_steps = 0u64;
        let mut updates = 0usize;
        while stage_steps < cfg.ppo.max_steps_per_stage {
            let buf = collect_rollouts(&learner.params, &mut workers, cfg.ppo.horizon)?;
            stage_steps += buf.len() as u64;
            report.total_steps += buf.len() as u64;
            if let Err(e) = learner.update(&buf, &mut rng) {
                log::warn!("update skipped: {e}");
            }
            updates += 1;
            let mean_return = (!buf.episodes.is_empty())
                .then(|| buf.episodes.iter().map(|e| e.ret).sum::<f64>() / buf.episodes.len() as f64);
            let mut point = CurvePoint {
                step: report.total_steps,
                stage: spec.stage,
                mean_return,
                success_rate: None,
            };
            if updates.is_multiple_of(cfg.eval_interval) {
                let sr = evaluator(&learner.params, &validation, &spec.env);
                point.success_rate = Some(sr);
                log::info!(
                    "stage {} step {} success rate {sr:.3}",
                    spec.stage.name(),
                    report.total_steps
                );
                let better = best.as_ref().is_none_or(|(s, b, _)| (spec.stage, sr) > (*s, *b));
                if better {
                    best = Some((spec.stage, sr, learner.params.clone()));
                    report.best_success_rate = sr;
                    if let Some(dir) = out_dir {
                        learner.params.save(dir.join("best.kpw"))?;
                    }
                }
                let outcome = cur.record(sr);
                report.curve.push(point);
                if outcome != GateOutcome::Stay {
                    report.stages_passed.push(spec.stage);
                    if let Some(dir) = out_dir {
                        learner.params.save(dir.join(format!("stage-{}.kpw", spec.stage.name())))?;
                    }
                    if outcome == GateOutcome::Completed {
                        report.converged = true;
                        break 'stages;
                    }
                    continue 'stages;
                }
                continue;
            }
            report.curve.push(point);
        }
        break;
    }
    report.gate_history = cur.history.clone();
    if let Some(dir) = out_dir {
        write_file(&dir.join("curve.csv"), &curve_csv(&report.curve))?;
    }
    let params = if report.converged {
        learner.params
    } else {
        best.map(|(_, _, p)| p).unwrap_or(learner.params)
    };
    Ok((params, report))
}

fn write_file(path: &Path, text: &str) -> Result<(), PpoError> {
    fs::write(path, text).map_err(|source| PpoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("step,mean_return,success_rate,stage\n");
    for p in curve {
        s.push_str(&format!(
            "{},{},{},{}\n",
            p.step,
            opt(p.mean_return),
            opt(p.success_rate),
            p.stage.name()
        ));
    }
    s
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn run_manifest(cfg: &TrainConfig, seed: u64) -> String {
    #[derive(Serialize)]
    struct StageEntry<'a> {
        stage: Stage,
        sampler: &'a SamplerConfig,
        env: &'a EnvConfig,
        maps: usize,
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        seed: u64,
        git_describe: String,
        ppo: &'a PpoConfig,
        shape: PolicyShape,
        init_log_std: f64,
        eval_interval: usize,
        validation_tasks: usize,
        gate: f64,
        stages: Vec<StageEntry<'a>>,
    }
    let m = Manifest {
        seed,
        git_describe: git_describe(),
        ppo: &cfg.ppo,
        shape: cfg.shape,
        init_log_std: cfg.init_log_std,
        eval_interval: cfg.eval_interval,
        validation_tasks: cfg.validation_tasks,
        gate: cfg.gate,
        stages: cfg
            .stages
            .iter()
            .map(|s| StageEntry {
                stage: s.stage,
                sampler: &s.sampler,
                env: &s.env,
                maps: s.pool.len(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&m).expect("manifest serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gym::goal_reached;
    use crate::gym::Observation;
    use crate::{Control, RobotState, VehicleParams};

    #[test]
    fn gae_terminal_single_step() {
        let a = gae(&[2.0], &[0.5], &[StepEnd::Terminal], 9.0, 0.99, 0.95);
        assert_eq!(a, vec![1.5]);
    }

    #[test]
    fn gae_lambda_zero_is_td() {
        let r = [1.0, -0.5, 2.0, 0.3];
        let v = [0.2, 0.4, -0.1, 0.7];
        let ends = [StepEnd::Continue, StepEnd::Terminal, StepEnd::Continue, StepEnd::Continue];
        let a = gae(&r, &v, &ends, 1.5, 0.9, 0.0);
        assert!((a[0] - (1.0 + 0.9 * 0.4 - 0.2)).abs() < 1e-15);
        assert!((a[1] - (-0.5 - 0.4)).abs() < 1e-15);
        assert!((a[2] - (2.0 + 0.9 * 0.7 + 0.1)).abs() < 1e-15);
        assert!((a[3] - (0.3 + 0.9 * 1.5 - 0.7)).abs() < 1e-15);
    }

    #[test]
    fn gae_truncation_bootstraps() {
        let a = gae(&[1.0, 1.0], &[0.0, 0.0], &[StepEnd::Truncated(10.0), StepEnd::Terminal], 0.0, 0.5, 1.0);
        assert_eq!(a, vec![6.0, 1.0]);
    }

    #[test]
    fn normalize_moments() {
        let mut x = vec![1.0, 2.0, 3.0, 10.0];
        normalize(&mut x);
        let m: f64 = x.iter().sum::<f64>() / 4.0;
        let v: f64 = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        let mut z = vec![3.0; 5];
        normalize(&mut z);
        assert_eq!(z, vec![0.0; 5]);
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        for bad in [
            PpoConfig { clip: 1.0, ..PpoConfig::default() },
            PpoConfig { discount: 0.0, ..PpoConfig::default() },
            PpoConfig { minibatch: 0, ..PpoConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(PpoError::Config(_))));
        }
    }

    #[test]
    fn gate_sequence() {
        let mut c = CurriculumState::new(0.8, Stage::Dynamic);
        assert_eq!(c.record(0.5), GateOutcome::Stay);
        assert_eq!(c.record(0.79), GateOutcome::Stay);
        assert_eq!(c.record(0.81), GateOutcome::Advance(Stage::Static));
        assert_eq!(c.record(0.8), GateOutcome::Advance(Stage::Dynamic));
        assert_eq!(c.record(0.9), GateOutcome::Completed);
        assert!(c.completed);
        let mut single = CurriculumState::new(0.8, Stage::Empty);
        assert_eq!(single.record(0.85), GateOutcome::Completed);
    }

    /// Drives straight at the goal using the world-frame goal offset.
    struct Straight;
    impl Actor for Straight {
        fn act(&self, obs: &Observation, p: &VehicleParams) -> Control {
            let dist = obs.features[0] * 40.0;
            let v = obs.features[6] * p.v_max;
            let target_v = (0.8 * dist).min(2.0);
            Control::new((2.0 * (target_v - v)).clamp(-p.a_max, p.a_max), 0.0)
        }
    }

    struct Stop;
    impl Actor for Stop {
        fn act(&self, _: &Observation, _: &VehicleParams) -> Control {
            Control::zero()
        }
    }

    fn straight_task(d: f64) -> Task {
        Task {
            start: RobotState::at_rest(5.0, 20.0, 0.0),
            goal: RobotState::at_rest(5.0 + d, 20.0, 0.0),
            map: Arc::new(WorldMap::empty(40.0, 40.0, true)),
            stage: Stage::Empty,
        }
    }

    #[test]
    fn evaluate_examples() {
        let cfg = EnvConfig::default();
        assert!(matches!(evaluate(&Straight, &[], &cfg), Err(GymError::NoTasks)));
        let easy: Vec<Task> = [3.0, 4.0, 5.0].map(straight_task).into();
        assert_eq!(evaluate(&Straight, &easy, &cfg).unwrap(), 1.0);
        let far: Vec<Task> = [15.0, 20.0, 25.0].map(straight_task).into();
        assert_eq!(evaluate(&Stop, &far, &cfg).unwrap(), 0.0);
        let t = straight_task(3.0);
        assert!(!goal_reached(&t.start, &t.goal, &cfg.tolerance));
    }
}
