//! Policy-gradient fine-tuning of an adapted model under dynamic prefix
//! steering.

mod lora;
mod policy;
mod trainer;

pub use lora::{lora_wrap, AdaptedModel, LoraAdapter};
pub use policy::Policy;
pub use trainer::{
    control_reward, fluency_reward, ppo_update, rollout, total_reward, train, write_log, Algorithm, CheckpointHook,
    EpisodeLog, RLDAFConfig, RunningBaseline, Trajectory, UpdateStats,
};
