//! The temporal graph CNN: elapsed-time transform, two strided sparse 3-D
//! convolution streams, batch norm, LSTM, dense head with demographics,
//! and its training, search and ablation machinery.

mod checkpoint;
mod config;
mod network;
mod search;
mod train;

use std::rc::Rc;

use crate::autodiff::{Array, ConvLayout, FilterDims, Graph};
use crate::error::{Error, Result};
use crate::graph::TemporalGraphTensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ablation_config, apply_ablation, ModelConfig, ABLATIONS, MODEL_KEYS};
pub use network::{
    compute_loss, cross_entropy, encode_patients, l2_covered, penalty_value, time_transform, EncodedPatient,
    LossBreakdown, TgcnnModel, GAMMA_RAW_INIT,
};
pub use search::{
    cross_validate, encode_pair, mean_sd, model_vocabulary, random_search, sample_trials, select_best, CvSummary,
    FoldResult, SearchOutcome, SearchRanges,
};
pub use train::{
    history_csv, parse_history_csv, predict, train_tgcnn, EpochRecord, Fitted, TrainOptions, HISTORY_HEADER,
};

pub(crate) use network::{init_lstm, uniform, BnStats, Binder, GATES};
pub(crate) use train::{fit, Trainable};

pub use crate::metrics::Prediction;

/// Convolves one tensor, using each entry's stored value, with a `[F, V, V, d]`
/// filter bank. Returns the `F x L` feature sequence.
pub fn sparse_conv3d(tensor: &TemporalGraphTensor, filters: &Array, stride: usize) -> Result<Array> {
    sparse_conv3d_with_values(tensor, &tensor.months(), filters, stride)
}

/// [`sparse_conv3d`] with entry values supplied separately, one per entry
/// in storage order.
pub fn sparse_conv3d_with_values(
    tensor: &TemporalGraphTensor,
    values: &[f64],
    filters: &Array,
    stride: usize,
) -> Result<Array> {
    if filters.shape().len() != 4 || filters.shape()[1] != filters.shape()[2] {
        return Err(Error::Shape(format!("filter bank shape {:?}", filters.shape())));
    }
    let dims = FilterDims::of(filters);
    if dims.n_nodes != tensor.n_nodes {
        return Err(Error::Shape(format!(
            "filters cover {} nodes, tensor has {}",
            dims.n_nodes, tensor.n_nodes
        )));
    }
    if values.len() != tensor.nnz() {
        return Err(Error::Shape(format!("{} values for {} entries", values.len(), tensor.nnz())));
    }
    let layout = Rc::new(ConvLayout::new(&[tensor], dims.depth, stride)?);
    let (f, l) = (dims.n_filters, layout.out_len());
    let mut g = Graph::new();
    let v = g.constant(Array::vector(values.to_vec()));
    let w = g.param("filters", filters);
    let out = g.sparse_conv3d(v, w, layout);
    let rows = g.value(out).data();
    let mut t = vec![0.0; f * l];
    for pos in 0..l {
        for k in 0..f {
            t[k * l + pos] = rows[pos * f + k];
        }
    }
    Ok(Array::matrix(f, l, t))
}

#[cfg(test)]
mod tests;
