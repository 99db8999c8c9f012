//! One module per subcommand; `evaluate` also hosts the metric-row helpers
//! shared by `pipeline` and `ablation`.

pub mod ablation;
pub mod evaluate;
pub mod loss;
pub mod mesh;
pub mod optimize;
pub mod phantom;
pub mod pipeline;
pub mod register;
