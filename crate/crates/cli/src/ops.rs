//! Pipeline operations shared by the command line and the job service.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pixguide::classifier::{
    estimate_map, train_bank, ClassifierBank, ClassifierConfig, DEFAULT_MULTI_STEPS,
};
use pixguide::dataset::{encode_png_colored, read_manifest, read_split, write_image, write_labels};
use pixguide::diffusion::ScheduleConfig;
use pixguide::edit::{
    guided_sample, select_params, EditMetrics, EditObserver, EditResult, GuidanceParams,
    ParamPolicy, SamplerOptions, Selection, TracePoint,
};
use pixguide::evaluation::{random_cases, run_case, summarize, BenchmarkReport, CaseResult};
use pixguide::metrics::EVAL_SEED;
use pixguide::scene::{benchmark_edits, BenchmarkEdit, SceneSpec};
use pixguide::segmap::{build_roi_mask, RoiMask, SegMap};
use pixguide::train::{train_ddpm, TrainConfig};
use pixguide::unet::{DiffusionModel, UNetConfig};
use pixguide::{Error, Result, Tensor};

/// Classes whose pixels differ between two maps of equal size.
pub fn changed_classes(y: &SegMap, y_edited: &SegMap) -> BTreeSet<u8> {
    y.labels()
        .iter()
        .zip(y_edited.labels())
        .filter(|(a, b)| a != b)
        .flat_map(|(&a, &b)| [a, b])
        .collect()
}

#[derive(Clone, Debug)]
pub struct EditInputs {
    pub image: Tensor,
    pub y_edited: SegMap,
    /// Map of the source image; estimated with `G_multi` when absent.
    pub source_map: Option<SegMap>,
    /// Edit-related classes; defaults to the classes changed by the edit.
    pub q_edit: Option<BTreeSet<u8>>,
    /// Explicit parameters; chosen by ROI size when absent.
    pub params: Option<GuidanceParams>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PreparedEdit {
    pub y: SegMap,
    pub y_edited: SegMap,
    pub q_edit: BTreeSet<u8>,
    pub m: RoiMask,
    pub params: GuidanceParams,
}

/// Resolves the source map, ROI and parameters, rejecting empty ROIs and
/// invalid parameters before any sampling.
pub fn prepare_edit(
    model: &DiffusionModel,
    bank: &ClassifierBank,
    policy: &ParamPolicy,
    inp: &EditInputs,
) -> Result<PreparedEdit> {
    let s = inp.image.shape();
    let (h, w) = (s[2], s[3]);
    if inp.y_edited.height() != h || inp.y_edited.width() != w {
        return Err(Error::InvalidArgument(format!(
            "map is {}x{}, image {h}x{w}",
            inp.y_edited.height(),
            inp.y_edited.width()
        )));
    }
    if inp.y_edited.num_classes() != bank.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "map palette has {} classes, classifiers {}",
            inp.y_edited.num_classes(),
            bank.n_classes()
        )));
    }
    let y = match &inp.source_map {
        Some(y) if !y.same_dims(&inp.y_edited) => {
            return Err(Error::InvalidArgument(
                "source and edited maps differ in size".into(),
            ))
        }
        Some(y) => y.clone(),
        None => estimate_map(model, bank, &inp.image, EVAL_SEED)?,
    };
    let q_edit = inp
        .q_edit
        .clone()
        .unwrap_or_else(|| changed_classes(&y, &inp.y_edited));
    if q_edit.is_empty() {
        return Err(Error::EmptyRoi);
    }
    let m = build_roi_mask(&y, &inp.y_edited, &q_edit)?;
    if m.count() == 0 {
        return Err(Error::EmptyRoi);
    }
    let params = match &inp.params {
        Some(p) => p.clone(),
        None => select_params(&m, policy, inp.seed),
    };
    params.validate(model.sched.steps())?;
    Ok(PreparedEdit {
        y,
        y_edited: inp.y_edited.clone(),
        q_edit,
        m,
        params,
    })
}

pub fn run_edit(
    model: &DiffusionModel,
    bank: &ClassifierBank,
    x: &Tensor,
    prep: &PreparedEdit,
    opts: &SamplerOptions,
    selection: Selection,
    observer: &dyn EditObserver,
) -> Result<EditResult> {
    guided_sample(
        x,
        &prep.y_edited,
        &prep.m,
        &prep.params,
        model,
        bank,
        opts,
        selection,
        observer,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub index: usize,
    pub metrics: EditMetrics,
    pub trace: Vec<TracePoint>,
    /// Content hash of the image, when stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub params: GuidanceParams,
    pub q_edit: BTreeSet<u8>,
    pub roi_pixels: usize,
    pub chosen: usize,
    pub candidates: Vec<CandidateSummary>,
    pub failures: Vec<(usize, String)>,
}

impl EditSummary {
    pub fn new(prep: &PreparedEdit, r: &EditResult) -> Self {
        EditSummary {
            params: r.params.clone(),
            q_edit: prep.q_edit.clone(),
            roi_pixels: prep.m.count(),
            chosen: r.chosen,
            candidates: r
                .candidates
                .iter()
                .enumerate()
                .map(|(i, c)| CandidateSummary {
                    index: i,
                    metrics: c.metrics,
                    trace: c.trace.clone(),
                    image: None,
                })
                .collect(),
            failures: r.failures.clone(),
        }
    }
}

#[derive(Serialize)]
struct TraceRow {
    candidate: usize,
    t: usize,
    snr: f64,
    accuracy: f64,
}

/// Writes candidates, the chosen edit, the ROI mask, `metrics.json` and `trace.csv`.
pub fn write_edit_dir(dir: &Path, prep: &PreparedEdit, r: &EditResult) -> Result<EditSummary> {
    fs::create_dir_all(dir)?;
    for (i, c) in r.candidates.iter().enumerate() {
        write_image(dir.join(format!("candidate_{i}.png")), &c.image)?;
    }
    write_image(dir.join("edited.png"), &r.best().image)?;
    let mask = Tensor::from_fn([1, 3, prep.m.height(), prep.m.width()], |i| {
        if prep.m.bits()[i % prep.m.bits().len()] {
            1.0
        } else {
            -1.0
        }
    });
    write_image(dir.join("mask.png"), &mask)?;
    write_labels(dir.join("source_map.png"), &prep.y)?;
    fs::write(
        dir.join("edited_map_color.png"),
        encode_png_colored(&prep.y_edited)?,
    )?;
    let summary = EditSummary::new(prep, r);
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &summary.candidates {
        for p in &c.trace {
            w.serialize(TraceRow {
                candidate: c.index,
                t: p.t,
                snr: p.snr,
                accuracy: p.accuracy,
            })
            .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    fs::write(
        dir.join("trace.csv"),
        w.into_inner().map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpmRequest {
    pub split: String,
    pub timesteps: usize,
    pub unet: Option<UNetConfig>,
    pub train: TrainConfig,
}

impl Default for DdpmRequest {
    fn default() -> Self {
        DdpmRequest {
            split: "train".into(),
            timesteps: 1000,
            unet: None,
            train: TrainConfig::default(),
        }
    }
}

/// Trains a noise estimator on one split of a dataset directory.
pub fn train_ddpm_on(
    data: &Path,
    req: &DdpmRequest,
    on_step: impl FnMut(usize, f64),
) -> Result<DiffusionModel> {
    let manifest = read_manifest(data)?;
    let images: Vec<Tensor> = read_split(data, &req.split)?
        .into_iter()
        .map(|p| p.0)
        .collect();
    let unet = req.unet.clone().unwrap_or(UNetConfig {
        image_size: manifest.spec.image_size,
        ..UNetConfig::default()
    });
    let sched = ScheduleConfig::linear(req.timesteps).build()?;
    Ok(train_ddpm(&images, unet, &sched, &req.train, on_step)?.model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierRequest {
    pub split: String,
    pub policy: ParamPolicy,
    pub config: ClassifierConfig,
    pub multi_steps: Vec<usize>,
}

impl Default for ClassifierRequest {
    fn default() -> Self {
        ClassifierRequest {
            split: "annotated".into(),
            policy: ParamPolicy::toy(),
            config: ClassifierConfig::default(),
            multi_steps: DEFAULT_MULTI_STEPS.to_vec(),
        }
    }
}

/// Trains classifiers at every timestep the policy's presets visit, plus `G_multi`.
pub fn train_classifiers_on(
    data: &Path,
    model: &DiffusionModel,
    req: &ClassifierRequest,
) -> Result<ClassifierBank> {
    let annotated = read_split(data, &req.split)?;
    let ts = req.policy.visited_timesteps(&model.sched)?;
    train_bank(&annotated, &ts, &req.multi_steps, model, &req.config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRequest {
    pub n_images: usize,
    pub edits: Vec<BenchmarkEdit>,
    pub spec: SceneSpec,
    /// First scene index of the evaluation images.
    pub start: u64,
    pub seed: u64,
    /// Seed of random candidate selection.
    pub selection_seed: u64,
}

impl Default for EvalRequest {
    fn default() -> Self {
        EvalRequest {
            n_images: 50,
            edits: benchmark_edits(),
            spec: SceneSpec::default(),
            start: 10_000,
            seed: 0,
            selection_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub quantitative: BenchmarkReport,
    pub random: BenchmarkReport,
    pub cases: Vec<CaseResult>,
}

/// Benchmark over `n_images` scenes with edits drawn uniformly from the list,
/// summarised under both candidate-selection strategies.
pub fn run_eval(
    model: &DiffusionModel,
    bank: &ClassifierBank,
    policy: &ParamPolicy,
    req: &EvalRequest,
    mut on_case: impl FnMut(usize, usize),
) -> Result<EvalReport> {
    let cases = random_cases(&req.spec, req.start, req.n_images, &req.edits, req.seed)?;
    let mut results = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let params = select_params(&c.m, policy, req.seed ^ c.index);
        results.push(run_case(
            model,
            bank,
            c,
            &params,
            &SamplerOptions::default(),
        )?);
        on_case(i + 1, cases.len());
    }
    Ok(EvalReport {
        quantitative: summarize(&results, Selection::Quantitative),
        random: summarize(
            &results,
            Selection::Random {
                seed: req.selection_seed,
            },
        ),
        cases: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pixguide::scene::{default_palette, MOUTH};

    #[test]
    fn changed_classes_lists_both_sides() {
        let p = default_palette();
        let a = SegMap::new(1, 3, vec![0, 1, 2], p.clone()).unwrap();
        let b = SegMap::new(1, 3, vec![0, MOUTH, 2], p).unwrap();
        assert_eq!(changed_classes(&a, &b), BTreeSet::from([1, MOUTH]));
        assert!(changed_classes(&a, &a).is_empty());
    }
}
