//! Classification metrics, attention-based interpretation and ablations.

mod ablation;
mod interpret;
mod metrics;
mod tables;

pub use ablation::{run_ablation_suite, run_variants, AblationRow, AblationTable, Variant};
pub use interpret::{
    interpret, top_subnetworks, top_tokens, write_report, InteractionReport, InterpretConfig, SalienceMode, Scored,
    Subnetwork, SubnetworkReport, TokenEntry, TokenInfluence, TokenReport, Vote, INTERACTIONS_CSV, REPORT_FILE,
    SALIENCE_CSV, TOKEN_CSV,
};
pub use metrics::{compute_metrics, MetricsReport};
pub use tables::{metrics_lines, metrics_table};
