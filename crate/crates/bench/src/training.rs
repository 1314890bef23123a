//! Training presets for the command line and the desk-scale check.

use std::f64::consts::PI;
use std::sync::Arc;

use kinoplan::gym::{EnvConfig, SamplerConfig, Stage};
use kinoplan::ppo::{StageSpec, TrainConfig};
use kinoplan::world::{ObstacleTrack, WorldMap};
use kinoplan::Pose2;
use serde::{Deserialize, Serialize};

use crate::scenario::parking_a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Empty stage only: 10×10 m maps, 3–6 m tasks.
    Desk,
    /// All three stages on 40×40 m maps.
    Full,
}

/// Training settings file; unset fields keep the preset's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub preset: Preset,
    pub stage_budget: Option<u64>,
    pub horizon: Option<usize>,
    pub lr: Option<f64>,
    pub n_workers: Option<usize>,
    pub eval_interval: Option<usize>,
    pub validation_tasks: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            stage_budget: None,
            horizon: None,
            lr: None,
            n_workers: None,
            eval_interval: None,
            validation_tasks: None,
        }
    }
}

impl TrainSettings {
    pub fn build(&self) -> TrainConfig {
        let mut cfg = match self.preset {
            Preset::Desk => desk_train_config(),
            Preset::Full => full_train_config(),
        };
        if let Some(b) = self.stage_budget {
            cfg.ppo.max_steps_per_stage = b;
        }
        if let Some(h) = self.horizon {
            cfg.ppo.horizon = h;
        }
        if let Some(lr) = self.lr {
            cfg.ppo.lr = lr;
        }
        if let Some(n) = self.n_workers {
            cfg.ppo.n_workers = n;
        }
        if let Some(e) = self.eval_interval {
            cfg.eval_interval = e;
        }
        if let Some(v) = self.validation_tasks {
            cfg.validation_tasks = v;
        }
        cfg
    }
}

/// Empty-stage run on 10×10 m maps with 3–6 m tasks in the forward cone,
/// 200k environment steps.
pub fn desk_train_config() -> TrainConfig {
    let sampler = SamplerConfig {
        distance: (3.0, 6.0),
        empty_map_size: 10.0,
        max_bearing: PI / 6.0,
        ..SamplerConfig::default()
    };
    let mut env = EnvConfig {
        max_steps: 200,
        ..EnvConfig::default()
    };
    env.obs.d_norm = 10.0;
    let mut cfg = TrainConfig::new(vec![StageSpec {
        stage: Stage::Empty,
        sampler,
        env,
        pool: vec![],
    }]);
    cfg.ppo.horizon = 512;
    cfg.ppo.lr = 1e-3;
    cfg.ppo.max_steps_per_stage = 200_000;
    cfg.init_log_std = -0.5;
    cfg
}

/// The three-stage curriculum on 40×40 m maps; static and dynamic stages
/// use fragments of the first parking lot.
pub fn full_train_config() -> TrainConfig {
    let pool: Vec<Arc<WorldMap>> = lot_fragments().into_iter().map(Arc::new).collect();
    let stages = Stage::ALL
        .iter()
        .map(|&stage| StageSpec {
            stage,
            sampler: SamplerConfig::default(),
            env: EnvConfig::default(),
            pool: if stage == Stage::Empty { vec![] } else { pool.clone() },
        })
        .collect();
    TrainConfig::new(stages)
}

/// Twelve 40×40 m windows of the first parking lot, shifted to the origin.
/// Parked cars cut by a window edge are dropped.
pub fn lot_fragments() -> Vec<WorldMap> {
    let lot = parking_a();
    let side = 40.0;
    let mut out = Vec::new();
    for y0 in [0.0, 10.0, 20.0] {
        for x0 in [0.0, 20.0, 40.0, 60.0] {
            let statics = lot
                .statics()
                .iter()
                .filter(|s| {
                    s.obb_at(0.0)
                        .corners()
                        .iter()
                        .all(|c| c.x >= x0 && c.x <= x0 + side && c.y >= y0 && c.y <= y0 + side)
                })
                .map(|s| {
                    let p = s.pose_at(0.0);
                    ObstacleTrack::fixed(Pose2::new(p.x - x0, p.y - y0, p.theta()), s.half_length, s.half_width)
                })
                .collect();
            out.push(WorldMap::new(side, side, true, *lot.vehicle(), statics, vec![]).expect("window inside the lot"));
        }
    }
    out
}
