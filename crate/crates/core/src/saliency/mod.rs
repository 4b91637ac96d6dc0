//! Saliency prediction: encoder/decoder network, KL objective, pre-training
//! and map-agreement metrics.

mod loss;
mod metrics;
mod predictor;

pub use loss::{kld_loss, kld_value, DEFAULT_EPSILON};
pub use metrics::{saliency_metrics, SaliencyMetrics};
pub use predictor::{
    evaluate_saliency, pretrain_saliency, saliency_step, track_saliency_over_tasks, Decoder,
    PretrainConfig, PretrainReport, SaliencyOutput, SaliencyPredictor,
};
