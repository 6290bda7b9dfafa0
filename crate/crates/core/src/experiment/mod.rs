//! End-to-end runs built from the library pieces: pretraining and the
//! downstream experiments shared by the command-line tool and the test
//! suites.

mod downstream;
mod pretrain;
mod toy;

pub use downstream::{
    backbone, median, probe_run, radar_scales, train_classifier, train_joint, train_separation, ClassReport, Classifier,
    JointModel, JointReport, JointSet, Labeled, SeparationOptions, SeparationReport, SeparationSet, Separator, RADAR_PARAMS,
};
pub use pretrain::{pretrain, reconstruction_loss, Dataset, EvalLog, PretrainConfig, PretrainRun, StepLog};
pub use toy::{
    mixture_task, modulation_task, radar_task, reference_records, regroup_mixtures, split_holdout, toy_mixtures,
    toy_pretrain_config, ToyCorpus, TOY_SPS,
};
