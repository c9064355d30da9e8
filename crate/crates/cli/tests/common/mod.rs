#![allow(dead_code)]

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pixguide::classifier::{train_bank, ClassifierBank, ClassifierConfig};
use pixguide::diffusion::ScheduleConfig;
use pixguide::edit::ParamPolicy;
use pixguide::scene::{generate_dataset, SceneSpec};
use pixguide::unet::{DiffusionModel, UNet, UNetConfig};
use pixguide_service::api::{router, AppState};
use pixguide_service::jobs::JobManager;
use pixguide_service::workspace::Workspace;

pub const SIZE: usize = 8;

pub fn tiny_unet() -> UNetConfig {
    UNetConfig {
        image_size: SIZE,
        channels: 3,
        base_width: 8,
        channel_mult: vec![1, 2],
        decoder_block_ids: vec![0, 1],
        time_embed_dim: 16,
        groups: 4,
    }
}

pub fn spec() -> SceneSpec {
    SceneSpec::with_size(SIZE)
}

/// Untrained 8×8 model with a 1000-step schedule and a quickly fitted bank.
pub fn tiny_artifacts() -> (DiffusionModel, ClassifierBank) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = DiffusionModel {
        net: UNet::new(tiny_unet(), &mut rng).unwrap(),
        sched: ScheduleConfig::linear(1000).build().unwrap(),
    };
    let annotated = generate_dataset(&spec(), 5000, 4).unwrap();
    let cfg = ClassifierConfig {
        hidden: [8, 4],
        epochs: 1,
        ..ClassifierConfig::default()
    };
    let bank = train_bank(
        &annotated,
        &[10, 50, 100, 250, 500],
        &[10, 50],
        &model,
        &cfg,
    )
    .unwrap();
    (model, bank)
}

pub fn tiny_policy() -> ParamPolicy {
    ParamPolicy {
        small: (100, 5.0),
        large: (200, 5.0),
        threshold: 20.0,
        reference_size: SIZE,
        n_steps: 10,
        batch: 2,
    }
}

pub struct Server {
    pub base: String,
    pub dir: tempfile::TempDir,
    pub jobs: JobManager,
}

/// Serves a fresh workspace on an ephemeral port, optionally with artifacts installed.
pub async fn server(with_artifacts: bool) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let ws = Arc::new(Workspace::open(dir.path()).unwrap());
    if with_artifacts {
        let (m, b) = tiny_artifacts();
        ws.install_model(m).unwrap();
        ws.install_bank(b).unwrap();
    }
    let jobs = JobManager::new(ws, 2);
    let app = router(AppState {
        jobs: jobs.clone(),
        policy: tiny_policy(),
        previews: 2,
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { base, dir, jobs }
}

pub async fn wait_job(client: &reqwest::Client, base: &str, id: &str) -> serde_json::Value {
    for _ in 0..6000 {
        let v: serde_json::Value = client
            .get(format!("{base}/jobs/{id}"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        if v["state"] == "done" || v["state"] == "failed" {
            return v;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    panic!("job {id} did not finish");
}

/// `(event name, data)` pairs of a complete server-sent event stream.
pub fn parse_sse(text: &str) -> Vec<(String, serde_json::Value)> {
    let mut out = Vec::new();
    for block in text.split("\n\n") {
        let mut name = String::new();
        let mut data = String::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                name = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.trim());
            }
        }
        if !data.is_empty() {
            out.push((name, serde_json::from_str(&data).unwrap()));
        }
    }
    out
}
