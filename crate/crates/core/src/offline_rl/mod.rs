//! Offline policy learning on reward-annotated behavioral data.
//!
//! Two backbones share one [`PolicyBundle`]: an expectile-regression learner
//! with advantage-weighted actor extraction, and a twin-critic actor-critic
//! whose actor BC penalty is weighted per transition by the normalized
//! surrogate reward. Plain BC serves as the unweighted baseline.

mod bc;
mod buffer;
mod eval;
mod iql;
mod networks;
mod rebrac;
mod train;

pub use bc::{bc_train, bc_train_buffer, BCConfig};
pub use buffer::{Batch, TransitionBuffer};
pub use eval::{evaluate_policy, EvalResult};
pub use iql::{
    awr_weight, expectile_loss, expectile_loss_graph, expectile_weight, iql_train,
    iql_train_buffer, IQLConfig, MAX_AWR_WEIGHT,
};
pub use networks::{
    Architecture, Backbone, Net, Policy, PolicyBundle, ScriptedPolicy, LOG_STD_MAX, LOG_STD_MIN,
    POLICY_FORMAT,
};
pub use rebrac::{bc_weights, rebrac_train, rebrac_train_buffer, ReBRACConfig, BETA_ACTOR_GRID};
pub use train::{log_to_csv, write_log_csv, LogRow, TrainOptions, TrainOutput, LOG_COLUMNS};
