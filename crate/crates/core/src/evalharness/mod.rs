//! Subject-independent cross-validation, training, statistics and the
//! adapter ablation grids.

pub mod ablation;
pub mod cv;
pub mod folds;
pub mod report;
pub mod stats;
pub mod train;

pub use ablation::{default_combos, run_ablation, AblationReport, AblationSpec, DropoutRow, GridRow};
pub use cv::{cross_validate, data_fingerprint, fingerprint, run_fingerprint, CvContext, FoldResults, RunCache};
pub use folds::{assert_disjoint, split_subject_kfold, FoldPlan};
pub use stats::{aggregate, paired_ttest, student_t_cdf, student_t_two_sided, Degenerate, StatTest, Summary};
pub use report::{RunSet, RunSetRecord};
pub use train::{evaluate, prepare, train_run, RunResult, TrainConfig, Variant};
