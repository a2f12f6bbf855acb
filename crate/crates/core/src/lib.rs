//! Continuation multiple-instance learning for weakly supervised localization.
//!
//! A bag (an image) holds many instances (box proposals with feature vectors)
//! and only bag-level class labels. Plain MIL trains on the single top-scoring
//! instance, which tends to lock onto a small discriminative part of an
//! object. The continuation objective instead trains on the best *subset* of
//! spatially related instances, starting from one subset per bag
//! (`lambda = 0`, a convex problem) and refining toward singletons
//! (`lambda = 1`, plain MIL) as training progresses.
//!
//! Modules:
//! - [`geometry`]: boxes, IoU, NMS.
//! - [`model`]: bags, the selector and detector heads, checkpoints.
//! - [`objective`]: subset partition, selection and detector losses, gradients.
//! - [`schedule`]: `lambda` schedules.
//! - [`train`]: SGD training loop and gradient checking.
//! - [`synthdata`] and [`dataset`]: synthetic benchmark and dataset files.
//! - [`eval`]: AP, mAP, CorLoc.
//! - [`experiment`]: multi-seed trials, schedule sweeps, ablation grids.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod model;
pub mod objective;
pub mod schedule;
pub mod synthdata;
pub mod train;

pub use dataset::{read_dataset, write_dataset, Dataset};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, MetricReport};
pub use geometry::{iou, nms, BBox};
pub use model::{Architecture, Bag, GroundTruth, Instance, Label, ModelParams};
pub use objective::{
    assign_labels, detector_loss, mil_objective, mil_selection_loss, partition_subsets,
    selection_loss, total_loss, total_loss_with, LossSettings, Reduction,
};
pub use schedule::{Schedule, ScheduleKind};
pub use synthdata::{generate, SynthConfig};
pub use train::{check_gradients, train, Objective, TrainConfig, TrainLog};
