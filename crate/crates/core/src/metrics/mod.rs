//! Classification and counterfactual quality metrics.

mod auroc;
mod isoforest;
mod lof;
mod quality;
mod report;

pub use auroc::{auroc, auroc_binary};
pub use isoforest::{average_path_length, harmonic, IsoForest};
pub use lof::LofIndex;
pub use quality::{coverage_validity, plausibility, proximity, Proximity};
pub use report::{
    cf_report, classif_report, format_cf_table, timed, CfReport, ClassifReport, OutlierProbes,
    ISOFOREST_SAMPLE, ISOFOREST_TREES, LOF_NEIGHBORS,
};
