//! The reference toy model and classifier bank: default scene spec, linear
//! 1000-step schedule, default U-Net, toy parameter policy.

use crate::classifier::{train_bank, ClassifierBank, ClassifierConfig, DEFAULT_MULTI_STEPS};
use crate::dataset::default_splits;
use crate::diffusion::ScheduleConfig;
use crate::edit::ParamPolicy;
use crate::error::Result;
use crate::scene::{generate_dataset, SceneSpec};
use crate::train::{train_ddpm, TrainConfig};
use crate::unet::{DiffusionModel, UNetConfig};

pub const TOY_STEPS: usize = 4000;
pub const TOY_IMAGES: usize = 500;
pub const TOY_TIMESTEPS: usize = 1000;

/// First scene index and count of a default split.
pub fn split_range(name: &str) -> (u64, usize) {
    default_splits()
        .into_iter()
        .find(|s| s.name == name)
        .map(|s| (s.start, s.count))
        .expect("default split")
}

/// Trains the noise estimator on `images` scenes of the train split.
pub fn train_toy_model(
    steps: usize,
    images: usize,
    tc: TrainConfig,
    on_step: impl FnMut(usize, f64),
) -> Result<DiffusionModel> {
    let spec = SceneSpec::default();
    let (start, _) = split_range("train");
    let data: Vec<_> = generate_dataset(&spec, start, images)?
        .into_iter()
        .map(|(x, _)| x)
        .collect();
    let sched = ScheduleConfig::linear(TOY_TIMESTEPS).build()?;
    let tc = TrainConfig { steps, ..tc };
    Ok(train_ddpm(&data, UNetConfig::default(), &sched, &tc, on_step)?.model)
}

/// Classifiers at every timestep the toy policy visits, plus `G_multi`, on the annotated split.
pub fn train_toy_bank(model: &DiffusionModel) -> Result<ClassifierBank> {
    let (start, count) = split_range("annotated");
    let annotated = generate_dataset(&SceneSpec::default(), start, count)?;
    let ts = ParamPolicy::toy().visited_timesteps(&model.sched)?;
    train_bank(
        &annotated,
        &ts,
        &DEFAULT_MULTI_STEPS,
        model,
        &ClassifierConfig::default(),
    )
}
