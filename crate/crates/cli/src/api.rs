//! HTTP API under `/v1`: dataset generation, training, map estimation,
//! guided edits and interpolation as queued jobs, with server-sent progress.

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use pixguide::classifier::{estimate_map, ClassifierBank};
use pixguide::dataset::{
    default_splits, encode_png_colored, encode_png_rgb, write_dataset, SplitSpec,
};
use pixguide::diffusion::respace;
use pixguide::edit::{
    interpolate_latents, GuidanceParams, ParamPolicy, SamplerOptions, Selection, StepEvent,
};
use pixguide::scene::SceneSpec;
use pixguide::unet::DiffusionModel;
use pixguide::Error;

use crate::jobs::{EventBody, JobError, JobKind, JobManager, JobView};
use crate::ops::{
    prepare_edit, run_edit, run_eval, train_classifiers_on, train_ddpm_on, ClassifierRequest,
    DdpmRequest, EditInputs, EditSummary, EvalRequest,
};
use crate::payload::{image_from_b64, MapPayload};
use crate::workspace::{request_key, Artifacts};

#[derive(Clone)]
pub struct AppState {
    pub jobs: JobManager,
    pub policy: ParamPolicy,
    /// Preview thumbnails per candidate.
    pub previews: usize,
}

/// Stable code for an error, shared by HTTP responses and job failures.
pub fn error_code(e: &Error) -> &'static str {
    match e {
        Error::EmptyRoi => "empty_roi",
        Error::InvalidArgument(_)
        | Error::TimestepRange { .. }
        | Error::LabelRange { .. }
        | Error::Shape { .. }
        | Error::Ordering(_) => "invalid_params",
        Error::Format(_) | Error::Json(_) | Error::Image(_) => "malformed",
        Error::Missing(_) => "not_found",
        Error::Empty(_) => "empty_input",
        Error::NonFinite(_) | Error::Diverged { .. } => "numerical",
        Error::NotInGraph | Error::Io(_) => "internal",
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
        }
    }

    fn not_found(what: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("unknown {what}"),
        )
    }

    fn conflict(code: &str, message: &str) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = error_code(&e);
        let status = match code {
            "malformed" => StatusCode::BAD_REQUEST,
            "not_found" => StatusCode::NOT_FOUND,
            "internal" | "numerical" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"code": self.code, "error": self.message})),
        )
            .into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Parses a JSON body; any syntax or schema error is a 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<(T, serde_json::Value)> {
    let value: serde_json::Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed", e.to_string()))?;
    let parsed = serde_json::from_value(value.clone())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed", e.to_string()))?;
    Ok((parsed, value))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn accepted(v: JobView) -> Response {
    let status = if v.state.is_terminal() {
        StatusCode::OK
    } else {
        StatusCode::ACCEPTED
    };
    (status, Json(v)).into_response()
}

fn no_training(st: &AppState) -> ApiResult<()> {
    if st.jobs.training_in_flight() {
        return Err(ApiError::conflict(
            "training_in_progress",
            "a training job is queued or running; retry when it finishes",
        ));
    }
    Ok(())
}

fn ready(st: &AppState) -> ApiResult<(Artifacts, Arc<ClassifierBank>, String)> {
    no_training(st)?;
    let a =
        st.jobs.workspace().artifacts().ok_or_else(|| {
            ApiError::conflict("model_missing", "no trained model in the workspace")
        })?;
    let (bank, bank_hash) = a.bank.clone().ok_or_else(|| {
        ApiError::conflict(
            "classifiers_missing",
            "no trained classifiers in the workspace",
        )
    })?;
    Ok((a, bank, bank_hash))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetBody {
    #[serde(default)]
    spec: Option<SceneSpec>,
    #[serde(default)]
    splits: Option<Vec<SplitSpec>>,
}

async fn post_dataset(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let (b, raw): (DatasetBody, _) = parse(&body)?;
    let key = request_key("dataset", &raw, &[]);
    let ws = st.jobs.workspace().clone();
    blocking(move || {
        let spec = b.spec.unwrap_or_default();
        let splits = b.splits.unwrap_or_else(default_splits);
        let status = if ws.dataset_dir(&key).is_some() {
            StatusCode::OK
        } else {
            write_dataset(ws.dataset_slot(&key), &spec, &splits)?;
            ws.register_dataset(&key)?;
            StatusCode::CREATED
        };
        let counts: Vec<_> = splits
            .iter()
            .map(|s| json!({"name": s.name, "count": s.count}))
            .collect();
        Ok((status, Json(json!({"dataset": key, "splits": counts}))).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct DdpmBody {
    dataset: String,
    #[serde(flatten)]
    req: DdpmRequest,
}

async fn post_train_ddpm(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let (mut b, raw): (DdpmBody, _) = parse(&body)?;
    no_training(&st)?;
    let ws = st.jobs.workspace().clone();
    let dir = ws
        .dataset_dir(&b.dataset)
        .ok_or_else(|| ApiError::not_found("dataset"))?;
    b.req.train.checkpoint = None;
    let key = request_key("train_ddpm", &raw, &[]);
    let steps = b.req.train.steps.max(1);
    Ok(accepted(st.jobs.submit(
        JobKind::TrainDdpm,
        key,
        Box::new(move |ctx| {
            let mut last = 0.0;
            let model = train_ddpm_on(&dir, &b.req, |step, loss| {
                last = loss;
                if (step + 1) % (steps / 100).max(1) == 0 {
                    ctx.progress((step + 1) as f64 / steps as f64, format!("loss {loss:.4}"));
                }
            })?;
            let hash = ctx.workspace().install_model(model)?;
            Ok(json!({"model": hash, "final_loss": last}))
        }),
    )))
}

#[derive(Deserialize)]
struct ClassifierBody {
    dataset: String,
    #[serde(flatten)]
    req: ClassifierRequest,
}

async fn post_train_classifiers(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let (b, raw): (ClassifierBody, _) = parse(&body)?;
    no_training(&st)?;
    let ws = st.jobs.workspace().clone();
    let dir = ws
        .dataset_dir(&b.dataset)
        .ok_or_else(|| ApiError::not_found("dataset"))?;
    let a = ws
        .artifacts()
        .ok_or_else(|| ApiError::conflict("model_missing", "no trained model in the workspace"))?;
    let key = request_key("train_classifiers", &raw, &[&a.model_hash]);
    Ok(accepted(st.jobs.submit(
        JobKind::TrainClassifiers,
        key,
        Box::new(move |ctx| {
            ctx.progress(0.0, "training classifiers");
            let bank = train_classifiers_on(&dir, &a.model, &b.req)?;
            let ts = bank.trained_ts();
            let hash = ctx.workspace().install_bank(bank)?;
            Ok(json!({"bank": hash, "timesteps": ts}))
        }),
    )))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateBody {
    image: String,
    #[serde(default)]
    seed: Option<u64>,
}

async fn post_estimate(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let (b, raw): (EstimateBody, _) = parse(&body)?;
    let (a, bank, bank_hash) = ready(&st)?;
    let x = image_from_b64(&b.image)?;
    check_image(&a.model, &x)?;
    let key = request_key("estimate", &raw, &[&a.model_hash, &bank_hash]);
    let seed = b.seed.unwrap_or(pixguide::metrics::EVAL_SEED);
    Ok(accepted(st.jobs.submit(
        JobKind::EstimateMap,
        key,
        Box::new(move |ctx| {
            let y = estimate_map(&a.model, &bank, &x, seed)?;
            let colored = ctx.workspace().put_blob(&encode_png_colored(&y)?)?;
            Ok(json!({
                "map": MapPayload::png(&y)?,
                "rle": MapPayload::rle(&y),
                "colored": colored,
            }))
        }),
    )))
}

fn check_image(model: &DiffusionModel, x: &pixguide::Tensor) -> ApiResult<()> {
    let c = &model.net.cfg;
    if x.shape()[2] != c.image_size || x.shape()[3] != c.image_size {
        return Err(Error::InvalidArgument(format!(
            "image is {}x{}, model expects {}x{}",
            x.shape()[2],
            x.shape()[3],
            c.image_size,
            c.image_size
        ))
        .into());
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    image: String,
    /// The edited map.
    map: MapPayload,
    #[serde(default)]
    source_map: Option<MapPayload>,
    #[serde(default)]
    q_edit: Option<BTreeSet<u8>>,
    /// Explicit parameters; omit (or set `auto_params`) for ROI-size presets.
    #[serde(default)]
    params: Option<GuidanceParams>,
    #[serde(default)]
    auto_params: bool,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    selection: Selection,
    #[serde(default)]
    previews: Option<usize>,
}

#[derive(Serialize)]
struct EditOutput {
    #[serde(flatten)]
    summary: EditSummary,
    edited: String,
    mask: String,
}

async fn post_edit(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let (b, raw): (EditBody, _) = parse(&body)?;
    let (a, bank, bank_hash) = ready(&st)?;
    let x = image_from_b64(&b.image)?;
    check_image(&a.model, &x)?;
    let inputs = EditInputs {
        image: x.clone(),
        y_edited: b.map.decode()?,
        source_map: b.source_map.as_ref().map(MapPayload::decode).transpose()?,
        q_edit: b.q_edit.clone(),
        params: if b.auto_params {
            None
        } else {
            b.params.clone()
        },
        seed: b.seed,
    };
    let (model, bk, policy) = (a.model.clone(), bank.clone(), st.policy.clone());
    let prep = blocking(move || Ok(prepare_edit(&model, &bk, &policy, &inputs)?)).await?;
    let key = request_key("edit", &raw, &[&a.model_hash, &bank_hash]);
    let opts = SamplerOptions {
        previews: b.previews.unwrap_or(st.previews),
        ..Default::default()
    };
    let selection = b.selection;
    Ok(accepted(st.jobs.submit(
        JobKind::Edit,
        key,
        Box::new(move |ctx| {
            let total = (prep.params.batch * prep.params.n_steps) as f64;
            let seen = std::sync::atomic::AtomicUsize::new(0);
            let observer = |ev: &StepEvent| {
                let thumbnail = ev
                    .preview
                    .as_ref()
                    .and_then(|p| encode_png_rgb(p).ok())
                    .and_then(|png| ctx.workspace().put_blob(&png).ok());
                ctx.emit(EventBody::Step {
                    candidate: ev.candidate,
                    t: ev.t,
                    snr: ev.snr,
                    accuracy: ev.accuracy,
                    thumbnail,
                });
                let n = seen.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                if n.is_multiple_of(prep.params.n_steps) {
                    ctx.progress(n as f64 / total, "sampling");
                }
            };
            let r = run_edit(&a.model, &bank, &x, &prep, &opts, selection, &observer)?;
            let ws = ctx.workspace();
            let mut summary = EditSummary::new(&prep, &r);
            for (c, s) in r.candidates.iter().zip(summary.candidates.iter_mut()) {
                s.image = Some(ws.put_blob(&encode_png_rgb(&c.image)?)?);
            }
            let edited = summary.candidates[r.chosen]
                .image
                .clone()
                .unwrap_or_default();
            let mask_img =
                pixguide::Tensor::from_fn([1, 3, prep.m.height(), prep.m.width()], |i| {
                    if prep.m.bits()[i % prep.m.bits().len()] {
                        1.0
                    } else {
                        -1.0
                    }
                });
            let mask = ws.put_blob(&encode_png_rgb(&mask_img)?)?;
            serde_json::to_value(EditOutput {
                summary,
                edited,
                mask,
            })
            .map_err(|e| JobError::from(Error::from(e)))
        }),
    )))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InterpolationBody {
    image_a: String,
    image_b: String,
    t0: usize,
    #[serde(default = "default_points")]
    n: usize,
    #[serde(default = "default_steps")]
    n_steps: usize,
}

fn default_points() -> usize {
    5
}

fn default_steps() -> usize {
    50
}

async fn post_interpolation(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let (b, raw): (InterpolationBody, _) = parse(&body)?;
    no_training(&st)?;
    let a =
        st.jobs.workspace().artifacts().ok_or_else(|| {
            ApiError::conflict("model_missing", "no trained model in the workspace")
        })?;
    let (xa, xb) = (image_from_b64(&b.image_a)?, image_from_b64(&b.image_b)?);
    check_image(&a.model, &xa)?;
    check_image(&a.model, &xb)?;
    respace(&a.model.sched, b.n_steps, b.t0)?;
    if b.n < 2 {
        return Err(Error::InvalidArgument("need at least two interpolation points".into()).into());
    }
    let key = request_key("interpolate", &raw, &[&a.model_hash]);
    Ok(accepted(st.jobs.submit(
        JobKind::Interpolate,
        key,
        Box::new(move |ctx| {
            let frames = interpolate_latents(&xa, &xb, b.t0, b.n, b.n_steps, &a.model)?;
            let hashes = frames
                .iter()
                .map(|f| ctx.workspace().put_blob(&encode_png_rgb(f)?))
                .collect::<pixguide::Result<Vec<_>>>()?;
            Ok(json!({"images": hashes}))
        }),
    )))
}

async fn post_evaluation(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let (req, raw): (EvalRequest, _) = parse(&body)?;
    let (a, bank, bank_hash) = ready(&st)?;
    let key = request_key("eval", &raw, &[&a.model_hash, &bank_hash]);
    let policy = st.policy.clone();
    Ok(accepted(st.jobs.submit(
        JobKind::Eval,
        key,
        Box::new(move |ctx| {
            let report = run_eval(&a.model, &bank, &policy, &req, |i, n| {
                ctx.progress(i as f64 / n as f64, format!("case {i}/{n}"))
            })?;
            serde_json::to_value(report).map_err(|e| JobError::from(Error::from(e)))
        }),
    )))
}

async fn get_job(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    st.jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found("job"))
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: Option<u64>,
}

/// Server-sent events from the job's log, resuming after `Last-Event-ID`
/// (or from `?from=`); the stream ends after the terminal event.
async fn get_events(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    st.jobs.get(&id).ok_or_else(|| ApiError::not_found("job"))?;
    let from = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
        .map(|v| v + 1)
        .or(q.from)
        .unwrap_or(0);
    let rx = st.jobs.subscribe();
    let s = stream::unfold(
        (st.jobs.clone(), id, from, rx, false),
        |(jobs, id, mut from, mut rx, finished)| async move {
            if finished {
                return None;
            }
            loop {
                let batch = jobs.events_since(&id, from).unwrap_or_default();
                if !batch.is_empty() {
                    from += batch.len() as u64;
                    let terminal = batch.iter().any(|e| e.body.is_terminal());
                    let events: Vec<Result<Event, Infallible>> = batch
                        .iter()
                        .map(|e| {
                            Ok(Event::default()
                                .id(e.seq.to_string())
                                .event(e.body.name())
                                .json_data(e)
                                .unwrap_or_default())
                        })
                        .collect();
                    return Some((stream::iter(events), (jobs, id, from, rx, terminal)));
                }
                if jobs.get(&id).is_none_or(|v| v.state.is_terminal()) {
                    return None;
                }
                if rx.changed().await.is_err() {
                    return None;
                }
            }
        },
    );
    Ok(Sse::new(futures::StreamExt::flatten(s)).keep_alive(KeepAlive::default()))
}

async fn get_result(
    State(st): State<AppState>,
    Path(key): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    st.jobs
        .workspace()
        .result(&key)
        .map(Json)
        .ok_or_else(|| ApiError::not_found("result"))
}

async fn get_image(State(st): State<AppState>, Path(hash): Path<String>) -> ApiResult<Response> {
    let bytes = st
        .jobs
        .workspace()
        .blob(&hash)
        .ok_or_else(|| ApiError::not_found("image"))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_status(State(st): State<AppState>) -> Json<serde_json::Value> {
    let reg = st.jobs.workspace().registry();
    Json(json!({
        "model": reg.model,
        "bank": reg.bank,
        "datasets": reg.datasets.keys().collect::<Vec<_>>(),
        "policy": st.policy,
        "training": st.jobs.training_in_flight(),
    }))
}

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/status", get(get_status))
        .route("/datasets", post(post_dataset))
        .route("/train/ddpm", post(post_train_ddpm))
        .route("/train/classifiers", post(post_train_classifiers))
        .route("/segmentation/estimate", post(post_estimate))
        .route("/edits", post(post_edit))
        .route("/interpolations", post(post_interpolation))
        .route("/evaluations", post(post_evaluation))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/events", get(get_events))
        .route("/results/{key}", get(get_result))
        .route("/images/{hash}", get(get_image));
    Router::new().nest("/v1", v1).with_state(state)
}
