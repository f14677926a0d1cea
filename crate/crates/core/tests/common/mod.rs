use std::path::Path;

use drgrade::pipeline::PipelineConfig;
use drgrade::preprocess::GaussianKernelSpec;

/// 32 px synthetic data, a handful of images and one or two epochs.
pub fn tiny_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::smoke(out);
    cfg.data.synthetic_per_class = 4;
    cfg.data.synthetic_size = 32;
    cfg.preprocess.target_size = 32;
    cfg.preprocess.kernel = GaussianKernelSpec::for_sigma(1.5, 32);
    cfg.resample_target = 8;
    cfg.head.dense_width = 16;
    cfg.train_base.epochs = 1;
    cfg.train_meta.epochs = 2;
    cfg
}
