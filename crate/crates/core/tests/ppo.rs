use std::sync::Arc;

use kinoplan::gym::{reward, EnvConfig, SamplerConfig, Stage, StepEvents, TaskSampler};
use kinoplan::policy::{unit_to_control, PolicyParams, PolicyShape, Tensor, ACT_DIM};
use kinoplan::ppo::*;
use kinoplan::vehicle::step;
use kinoplan::world::WorldMap;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One-step episodes scored by how close the first action is to 0.5.
#[derive(Clone)]
struct Bandit;

impl Environment for Bandit {
    fn observe(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn step(&mut self, u: [f64; ACT_DIM]) -> (f64, EpisodeStatus) {
        (-(u[0] - 0.5).abs(), EpisodeStatus::Terminated { success: false })
    }

    fn reset(&mut self, _: &mut ChaCha8Rng) -> Result<(), PpoError> {
        Ok(())
    }
}

fn tiny() -> PolicyShape {
    PolicyShape { obs_dim: 1, hidden: 16 }
}

#[test]
fn bandit_mean_action_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = PpoConfig {
        horizon: 64,
        entropy_coef: 0.0,
        ..PpoConfig::default()
    };
    let mut learner = PpoLearner::new(PolicyParams::init(tiny(), -1.0, &mut rng), cfg);
    let mut workers = vec![Worker::new(Bandit, 1)];
    for _ in 0..200 {
        let buf = collect_rollouts(&learner.params, &mut workers, cfg.horizon).unwrap();
        let stats = learner.update(&buf, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&stats.clip_fraction));
        assert!(stats.approx_kl.is_finite());
    }
    let (dist, _) = learner.params.forward(&[1.0]).unwrap();
    let mean_action = dist.mode()[0];
    assert!((mean_action - 0.5).abs() < 0.1, "mean action {mean_action}");
}

#[test]
fn rollout_count_and_reproducibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = PolicyParams::init(tiny(), 0.0, &mut rng);
    let mut w = vec![Worker::new(Bandit, 5)];
    assert_eq!(collect_rollouts(&p, &mut w, 8).unwrap().len(), 8);

    p.tensor_mut(Tensor::LogStd).fill(-5.0);
    let a = collect_rollouts(&p, &mut [Worker::new(Bandit, 9)], 16).unwrap();
    let b = collect_rollouts(&p, &mut [Worker::new(Bandit, 9)], 16).unwrap();
    assert_eq!(a, b);
    let multi = collect_rollouts(&p, &mut [Worker::new(Bandit, 1), Worker::new(Bandit, 2)], 4).unwrap();
    assert_eq!(multi.len(), 8);
    assert_eq!(multi.segments.len(), 2);
}

#[test]
fn stored_rewards_match_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sampler = TaskSampler::new(Stage::Empty, vec![], SamplerConfig::default()).unwrap();
    let env_cfg = EnvConfig::default();
    let p = PolicyParams::init(PolicyShape::default(), 0.0, &mut rng);
    let mut workers = vec![Worker::new(StageEnv::new(sampler, env_cfg), 3)];
    let buf = collect_rollouts(&p, &mut workers, 40).unwrap();
    // replay the first episode from its task's start state
    let env = workers[0].env.env().unwrap();
    let seg = &buf.segments[0];
    assert!(seg.episode.iter().all(|&e| e == 0), "a 40-step rollout stays in one episode");
    let task = env.task();
    let vp = *task.map.vehicle();
    let mut s = task.start;
    for k in 0..seg.len() {
        let c = unit_to_control(seg.z[k].map(f64::tanh), &vp);
        let next = step(&s, c, vp.dt, &vp);
        let r = reward(&s, &next, &task.goal, StepEvents::default(), &vp, &env_cfg.reward).0;
        assert!((r - seg.reward[k]).abs() < 1e-12, "step {k}");
        s = next;
    }
}

fn single(params: &PolicyParams, adv: f64, log_ratio: f64) -> Minibatch {
    let x = Array2::from_elem((1, 1), 1.0);
    let (dist, _) = params.forward(&[1.0]).unwrap();
    let z = [0.3, -0.2];
    Minibatch {
        x,
        z: vec![z],
        old_log_prob: vec![dist.log_prob(&z) - log_ratio],
        advantage: vec![adv],
        ret: vec![0.0],
    }
}

#[test]
fn surrogate_ratio_identity_and_clip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = PolicyParams::init(tiny(), -0.3, &mut rng);
    let cfg = PpoConfig::default();

    let (parts, _) = minibatch_loss(&p, &single(&p, 1.7, 0.0), &cfg);
    assert!((parts.surrogate - 1.7).abs() < 1e-12);
    assert_eq!(parts.clip_fraction, 0.0);

    let ratio: f64 = 1.0 + 2.0 * cfg.clip;
    let (parts, _) = minibatch_loss(&p, &single(&p, 1.7, ratio.ln()), &cfg);
    assert!((parts.surrogate - (1.0 + cfg.clip) * 1.7).abs() < 1e-12);
    assert_eq!(parts.clip_fraction, 1.0);

    // ratio identity over a batch: surrogate = mean advantage
    let x = Array2::from_shape_fn((5, 1), |(i, _)| i as f64 * 0.3 - 0.6);
    let z: Vec<[f64; 2]> = (0..5).map(|i| [0.1 * i as f64, -0.05 * i as f64]).collect();
    let f = p.forward_batch(x.view());
    let old: Vec<f64> = (0..5)
        .map(|i| {
            kinoplan::policy::ActionDist {
                mean: [f.mean[[i, 0]], f.mean[[i, 1]]],
                log_std: p.log_std(),
            }
            .log_prob(&z[i])
        })
        .collect();
    let adv = vec![0.5, -1.0, 2.0, 0.25, -0.75];
    let mb = Minibatch {
        x,
        z,
        old_log_prob: old,
        advantage: adv.clone(),
        ret: vec![0.0; 5],
    };
    let (parts, _) = minibatch_loss(&p, &mb, &cfg);
    assert!((parts.surrogate - adv.iter().sum::<f64>() / 5.0).abs() < 1e-12);
    assert!(parts.approx_kl.abs() < 1e-12);
}

#[test]
fn zero_advantage_gives_no_actor_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = PolicyParams::init(tiny(), 0.0, &mut rng);
    let cfg = PpoConfig {
        value_coef: 0.0,
        entropy_coef: 0.0,
        ..PpoConfig::default()
    };
    let (_, g) = minibatch_loss(&p, &single(&p, 0.0, 0.05), &cfg);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-10, "{norm}");
}

#[test]
fn zero_epochs_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = PpoConfig {
        epochs: 0,
        ..PpoConfig::default()
    };
    let p = PolicyParams::init(tiny(), 0.0, &mut rng);
    let mut learner = PpoLearner::new(p.clone(), cfg);
    let buf = collect_rollouts(&p, &mut [Worker::new(Bandit, 1)], 32).unwrap();
    learner.update(&buf, &mut rng).unwrap();
    assert_eq!(learner.params, p);
}

#[test]
fn non_finite_loss_restores_snapshot() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = PolicyParams::init(tiny(), 0.0, &mut rng);
    let mut buf = collect_rollouts(&p, &mut [Worker::new(Bandit, 1)], 8).unwrap();
    buf.segments[0].reward[3] = f64::NAN;
    let mut learner = PpoLearner::new(p.clone(), PpoConfig::default());
    assert!(matches!(learner.update(&buf, &mut rng), Err(PpoError::NonFiniteLoss { epoch: 0 })));
    assert_eq!(learner.params, p);
}

#[test]
fn value_gradient_can_bypass_trunk() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = PolicyParams::init(tiny(), 0.0, &mut rng);
    let mut mb = single(&p, 0.0, 0.0);
    mb.ret = vec![3.0];
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        critic_trains_trunk: false,
        ..PpoConfig::default()
    };
    let (_, g) = minibatch_loss(&p, &mb, &cfg);
    assert!(g[p.range(Tensor::W1)].iter().all(|&v| v == 0.0));
    assert!(g[p.range(Tensor::ValueW)].iter().any(|&v| v != 0.0));
    let (_, g) = minibatch_loss(&p, &mb, &PpoConfig { critic_trains_trunk: true, ..cfg });
    assert!(g[p.range(Tensor::W1)].iter().any(|&v| v != 0.0));
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let stages = vec![StageSpec {
            stage: Stage::Empty,
            sampler: SamplerConfig {
                distance: (3.0, 6.0),
                empty_map_size: 10.0,
                ..SamplerConfig::default()
            },
            env: EnvConfig {
                max_steps: 50,
                ..EnvConfig::default()
            },
            pool: Vec::<Arc<WorldMap>>::new(),
        }];
        let mut cfg = TrainConfig::new(stages);
        cfg.shape.hidden = 16;
        cfg.ppo.horizon = 128;
        cfg.ppo.epochs = 2;
        cfg.ppo.max_steps_per_stage = 512;
        cfg.eval_interval = 2;
        cfg.validation_tasks = 5;
        curriculum_train(&cfg, 42, None).unwrap()
    };
    let (pa, ra) = run();
    let (pb, rb) = run();
    assert_eq!(pa, pb);
    assert_eq!(ra, rb);
    assert_eq!(ra.total_steps, 512);
    assert!(!ra.converged || ra.stages_passed == vec![Stage::Empty]);
}

#[test]
fn mocked_gate_walks_all_stages_in_order() {
    let pool = vec![Arc::new(WorldMap::empty(40.0, 40.0, true))];
    let spec = |stage| StageSpec {
        stage,
        sampler: SamplerConfig::default(),
        env: EnvConfig {
            max_steps: 20,
            ..EnvConfig::default()
        },
        pool: pool.clone(),
    };
    let mut cfg = TrainConfig::new(vec![spec(Stage::Empty), spec(Stage::Static), spec(Stage::Dynamic)]);
    cfg.shape.hidden = 8;
    cfg.ppo.horizon = 16;
    cfg.ppo.epochs = 1;
    cfg.ppo.max_steps_per_stage = 10_000;
    cfg.eval_interval = 1;
    cfg.validation_tasks = 3;
    let script = [0.5, 0.79, 0.81, 0.2, 0.9, 0.85];
    let mut k = 0;
    let mut seen = Vec::new();
    let mut eval = |_: &PolicyParams, tasks: &[kinoplan::gym::Task], _: &EnvConfig| {
        seen.push(tasks[0].stage);
        k += 1;
        script[k - 1]
    };
    let dir = tempfile::tempdir().unwrap();
    let (_, report) = curriculum_train_with(&cfg, 1, Some(dir.path()), &mut eval).unwrap();
    assert!(report.converged);
    assert_eq!(report.stages_passed, vec![Stage::Empty, Stage::Static, Stage::Dynamic]);
    assert_eq!(
        seen,
        vec![Stage::Empty, Stage::Empty, Stage::Empty, Stage::Static, Stage::Static, Stage::Dynamic]
    );
    for f in ["manifest.json", "curve.csv", "best.kpw", "stage-empty.kpw", "stage-static.kpw", "stage-dynamic.kpw"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(csv.starts_with("step,mean_return,success_rate,stage\n"));
    assert_eq!(csv.lines().count(), 7);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert!(manifest["git_describe"].is_string());

    let mut bad = cfg.clone();
    bad.stages.remove(1);
    assert!(matches!(curriculum_train(&bad, 1, None), Err(PpoError::Config(_))));
}
