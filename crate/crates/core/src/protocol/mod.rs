//! Experiment choreography: pretraining, target rescaling, shot
//! extraction, two-phase adaptation and the baseline grid.

mod adapt;
mod augment;
mod experiment;
mod report;
mod scale;
mod train;

pub use adapt::{adapt, pair_schedule, AdaptEpochLog, AdaptSchedule, Adapted, Phase};
pub use augment::{adjust_intensity, augment, Dihedral};
pub use scale::{
    extract_shots, extract_shots_with_origins, mean_diameter, rescale_dataset, resize_bilinear, resize_nearest,
    ShotOrigin, ShotSet, MIN_SHOT,
};
pub use train::{accumulate_is, dataset_loss, pretrain, random_crop, EpochLog, TrainConfig, Trained};
pub use experiment::{
    parse_results_csv, results_csv, run_experiment, write_adapt_log, write_epoch_log, ExperimentConfig,
    ExperimentOutput, ResultRow, Variant,
    RESULTS_HEADER,
};
pub use report::{seed_means, summary_markdown, svg_chart, trend_checks, TrendCheck};
