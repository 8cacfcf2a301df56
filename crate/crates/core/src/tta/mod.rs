//! Test-time adaptation: losses, momentum schedule, online and offline
//! runners, and the comparison baselines.

mod engine;
mod losses;
mod momentum;
mod report;

pub use engine::{
    adapt_offline, adapt_online, adapt_online_observed, baseline_adapt, Baseline, BaselineConfig, OfflineConfig,
    OnlineConfig, OnlineEvent, UpdateScheme, DEFAULT_LR,
};
pub use losses::{adaptation_loss, loss_bnstat, loss_class_ratio, loss_tent, LossContext, LossKind, SourceStats};
pub use momentum::{ema_update, MomentumSchedule, DEFAULT_FLOOR, DEFAULT_M0};
pub use report::{AdaptReport, ItemMetrics, RunManifest, SampleRecord};
