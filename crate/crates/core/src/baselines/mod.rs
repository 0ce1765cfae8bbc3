//! Comparison models: logistic regression on demographics and code counts,
//! and recurrent networks over the raw code sequence.

mod features;
mod logistic;
mod sequence;

pub use features::{
    bag_of_codes, features, fit_logistic_baseline, FeatureLayout, FeatureVector, LogisticBaseline, LogisticVariant,
};
pub use logistic::{coefficients_csv, logit_fit, logit_predict, LogitFit, LogitOptions, LogitWarning};
pub use sequence::{
    code_sequence, encode_sequences, sequence_baseline_train, train_sequence_model, CodeSequence, SequenceConfig,
    SequenceKind, SequenceModel,
};
