//! Cross-domain AUC evaluation for forgery detectors, plus desk-scale reference
//! kernels for mask-guided augmentation, patch-level alignment losses and
//! facial-region mixture-of-experts routing.

pub mod alignment_losses;
pub mod augmentation;
pub mod cross_auc;
pub mod farmoe;
pub mod fixtures;
pub mod roc_auc;
pub mod score_store;
pub mod shift_sim;
pub mod toy_trainer;
