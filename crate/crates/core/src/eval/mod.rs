//! Stage 4: detection mAP, binarized-map cIoU/AUC and cluster-to-class matching.

pub mod ap;
pub mod ciou;
pub mod matching;
pub mod report;

pub use ap::{average_precision, class_agnostic, ground_truth, mean_ap, recall, ClassAp, GtBox, MapReport};
pub use ciou::{binarized_ciou, binarized_ciou_per_class, localization_auc};
pub use matching::{argmax_match, hungarian_match, kshot_match, purity, ClusterItem, ContingencyTable, Matching};
pub use report::{evaluate, text_table, EvalInputs, EvalReport};
