//! Measures of generated data: distribution and paired image metrics,
//! writer fidelity, and recognizer error rates.

mod ctc;
mod edit;
mod htr;
mod image;
mod regen;
mod report;
mod writer;

pub use ctc::{ctc_feasible, ctc_loss, ctc_loss_per_item, greedy_decode, BLANK};
pub use edit::{cer, corpus_error_rates, levenshtein, wer, ErrorRates};
pub use htr::{ctc_train, HtrTrainReport, Recognizer};
pub use image::{
    compute_fid, frechet_distance, gaussian_moments, mean_perceptual, mssim, rmse, ssim,
    FeatureExtractor, PerceptualMetric, PixelFeatures, PooledPixels, SSIM_WINDOW,
};
pub use regen::{regenerate_corpus, GeneratedCorpus, RegenFailure, RegenOptions};
pub use report::{evaluate, htr_error_rates, Metric, MeanStd, MetricReport};
pub use writer::{train_writer_classifier, writer_fidelity, WriterClassifier, WriterPredictor};
