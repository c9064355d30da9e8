mod common;

use std::collections::BTreeMap;

use serde_json::{json, Value};

use common::{parse_sse, server, spec, wait_job};
use pixguide::scene::{scene_at, FACE, MOUTH};
use pixguide::segmap::SegMap;
use pixguide_service::payload::{image_to_b64, MapPayload};

fn edit_body(y_edited: &SegMap, q_edit: &[u8], params: Value) -> Value {
    let (x, y) = scene_at(&spec(), 3).unwrap();
    json!({
        "image": image_to_b64(&x).unwrap(),
        "map": MapPayload::png(y_edited).unwrap(),
        "source_map": MapPayload::rle(&y),
        "q_edit": q_edit,
        "params": params,
        "seed": 1,
    })
}

fn params(t0: usize, n_steps: usize) -> Value {
    json!({"t0": t0, "s": 5.0, "n_steps": n_steps, "batch": 2, "seed": 1})
}

#[tokio::test(flavor = "multi_thread")]
async fn noop_edit_streams_descending_steps_and_preserves_background() {
    let srv = server(true).await;
    let c = reqwest::Client::new();
    let (_, y) = scene_at(&spec(), 3).unwrap();
    let r = c
        .post(format!("{}/edits", srv.base))
        .json(&edit_body(&y, &[FACE], params(100, 10)))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 202);
    let job: Value = r.json().await.unwrap();
    let id = job["id"].as_str().unwrap().to_string();
    let done = wait_job(&c, &srv.base, &id).await;
    assert_eq!(done["state"], "done");

    let key = done["result"].as_str().unwrap();
    let res: Value = c
        .get(format!("{}/results/{key}", srv.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let cands = res["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 2);
    for cand in cands {
        assert_eq!(cand["metrics"]["mae_outside"], 0.0);
        let img = c
            .get(format!(
                "{}/images/{}",
                srv.base,
                cand["image"].as_str().unwrap()
            ))
            .send()
            .await
            .unwrap();
        assert_eq!(img.status(), 200);
        assert_eq!(img.headers()["content-type"], "image/png");
    }

    let text = c
        .get(format!("{}/jobs/{id}/events", srv.base))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let events = parse_sse(&text);
    assert_eq!(events.last().unwrap().0, "done");
    let mut per_cand: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    let mut thumbs = 0;
    for (name, d) in &events {
        if name == "step" {
            per_cand
                .entry(d["candidate"].as_u64().unwrap())
                .or_default()
                .push(d["t"].as_u64().unwrap());
            thumbs += d.get("thumbnail").is_some() as usize;
        }
    }
    assert_eq!(per_cand.len(), 2);
    for ts in per_cand.values() {
        assert_eq!(ts.len(), 10);
        assert!(ts.windows(2).all(|w| w[0] > w[1]), "{ts:?}");
    }
    assert_eq!(thumbs, 4);
    let seqs: Vec<u64> = events
        .iter()
        .map(|e| e.1["seq"].as_u64().unwrap())
        .collect();
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));

    // Resuming after an event id replays only the rest of the log.
    let resumed = c
        .get(format!("{}/jobs/{id}/events", srv.base))
        .header("Last-Event-ID", "5")
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let resumed = parse_sse(&resumed);
    assert_eq!(resumed.first().unwrap().1["seq"], 6);
    assert_eq!(resumed.len(), events.len() - 6);

    // An identical request is served from the result cache.
    let again: Value = c
        .post(format!("{}/edits", srv.base))
        .json(&edit_body(&y, &[FACE], params(100, 10)))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(again["state"], "done");
    assert_eq!(again["result"], done["result"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn request_errors_map_to_status_codes() {
    let srv = server(true).await;
    let c = reqwest::Client::new();
    let (_, y) = scene_at(&spec(), 3).unwrap();
    let post = |body: Value| {
        let c = c.clone();
        let url = format!("{}/edits", srv.base);
        async move { c.post(url).json(&body).send().await.unwrap() }
    };

    let r = post(edit_body(&y, &[], params(100, 10))).await;
    assert_eq!(r.status(), 422);
    assert_eq!(r.json::<Value>().await.unwrap()["code"], "empty_roi");

    let r = post(edit_body(&y, &[MOUTH], params(20, 50))).await;
    assert_eq!(r.status(), 422);
    assert_eq!(r.json::<Value>().await.unwrap()["code"], "invalid_params");

    let mut bad = edit_body(&y, &[MOUTH], params(100, 10));
    bad["image"] = json!("not base64!");
    assert_eq!(post(bad).await.status(), 400);

    let r = c
        .post(format!("{}/edits", srv.base))
        .header("content-type", "application/json")
        .body("{\"image\":")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);

    for path in [
        "jobs/nope",
        "jobs/nope/events",
        "results/nope",
        "images/nope",
    ] {
        let r = c.get(format!("{}/{path}", srv.base)).send().await.unwrap();
        assert_eq!(r.status(), 404, "{path}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn estimate_and_interpolate() {
    let srv = server(true).await;
    let c = reqwest::Client::new();
    let (xa, _) = scene_at(&spec(), 1).unwrap();
    let (xb, _) = scene_at(&spec(), 2).unwrap();

    let job: Value = c
        .post(format!("{}/segmentation/estimate", srv.base))
        .json(&json!({"image": image_to_b64(&xa).unwrap()}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let done = wait_job(&c, &srv.base, job["id"].as_str().unwrap()).await;
    let res: Value = c
        .get(format!(
            "{}/results/{}",
            srv.base,
            done["result"].as_str().unwrap()
        ))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let png: MapPayload = serde_json::from_value(res["map"].clone()).unwrap();
    let rle: MapPayload = serde_json::from_value(res["rle"].clone()).unwrap();
    let y = png.decode().unwrap();
    assert_eq!(rle.decode().unwrap(), y);
    assert_eq!((y.height(), y.width()), (8, 8));

    let body = json!({
        "image_a": image_to_b64(&xa).unwrap(),
        "image_b": image_to_b64(&xb).unwrap(),
        "t0": 100, "n": 3, "n_steps": 10,
    });
    let job: Value = c
        .post(format!("{}/interpolations", srv.base))
        .json(&body)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let done = wait_job(&c, &srv.base, job["id"].as_str().unwrap()).await;
    let res: Value = c
        .get(format!(
            "{}/results/{}",
            srv.base,
            done["result"].as_str().unwrap()
        ))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(res["images"].as_array().unwrap().len(), 3);

    let mut bad = body.clone();
    bad["n_steps"] = json!(200);
    let r = c
        .post(format!("{}/interpolations", srv.base))
        .json(&bad)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 422);
}

#[tokio::test(flavor = "multi_thread")]
async fn dataset_training_and_conflicts() {
    let srv = server(false).await;
    let c = reqwest::Client::new();
    let (x, y) = scene_at(&spec(), 3).unwrap();

    let r = c
        .post(format!("{}/edits", srv.base))
        .json(&edit_body(&y, &[FACE], params(100, 10)))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 409);
    assert_eq!(r.json::<Value>().await.unwrap()["code"], "model_missing");

    let ds = json!({
        "spec": spec(),
        "splits": [{"name": "train", "start": 0, "count": 6}, {"name": "annotated", "start": 50, "count": 3}],
    });
    let r = c
        .post(format!("{}/datasets", srv.base))
        .json(&ds)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 201);
    let key = r.json::<Value>().await.unwrap()["dataset"]
        .as_str()
        .unwrap()
        .to_string();
    let r = c
        .post(format!("{}/datasets", srv.base))
        .json(&ds)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);

    let r = c
        .post(format!("{}/train/ddpm", srv.base))
        .json(&json!({"dataset": "missing"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 404);

    let train = json!({
        "dataset": key,
        "timesteps": 1000,
        "unet": common::tiny_unet(),
        "train": {"steps": 150, "batch": 2, "lr": 1e-3, "warmup": 10, "grad_clip": 1.0, "seed": 0, "checkpoint": null},
    });
    let r = c
        .post(format!("{}/train/ddpm", srv.base))
        .json(&train)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 202);
    let job: Value = r.json().await.unwrap();

    // Requests that depend on the model are refused while training is in flight.
    let r = c
        .post(format!("{}/segmentation/estimate", srv.base))
        .json(&json!({"image": image_to_b64(&x).unwrap()}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 409);
    assert_eq!(
        r.json::<Value>().await.unwrap()["code"],
        "training_in_progress"
    );

    // Status stays queryable while the job runs.
    let status: Value = c
        .get(format!("{}/jobs/{}", srv.base, job["id"].as_str().unwrap()))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(["queued", "running"].contains(&status["state"].as_str().unwrap()));

    let done = wait_job(&c, &srv.base, job["id"].as_str().unwrap()).await;
    assert_eq!(done["state"], "done", "{done}");

    let r = c
        .post(format!("{}/edits", srv.base))
        .json(&edit_body(&y, &[FACE], params(100, 10)))
        .send()
        .await
        .unwrap();
    assert_eq!(
        r.json::<Value>().await.unwrap()["code"],
        "classifiers_missing"
    );

    let clf = json!({
        "dataset": key,
        "policy": common::tiny_policy(),
        "config": {"hidden": [8, 4], "lr": 1e-3, "epochs": 1, "batch": 64, "seed": 0},
        "multi_steps": [10, 50],
    });
    let r = c
        .post(format!("{}/train/classifiers", srv.base))
        .json(&clf)
        .send()
        .await
        .unwrap();
    let job: Value = r.json().await.unwrap();
    let done = wait_job(&c, &srv.base, job["id"].as_str().unwrap()).await;
    assert_eq!(done["state"], "done", "{done}");

    let status: Value = c
        .get(format!("{}/status", srv.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(status["model"].is_string() && status["bank"].is_string());

    // Automatic parameters pick the tiny policy's preset.
    let mut body = edit_body(&y, &[FACE], Value::Null);
    body["auto_params"] = json!(true);
    let job: Value = c
        .post(format!("{}/edits", srv.base))
        .json(&body)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let done = wait_job(&c, &srv.base, job["id"].as_str().unwrap()).await;
    let res: Value = c
        .get(format!(
            "{}/results/{}",
            srv.base,
            done["result"].as_str().unwrap()
        ))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(res["params"]["n_steps"], 10);
    assert!([100, 200].contains(&res["params"]["t0"].as_u64().unwrap()));
    drop(srv.jobs);
}
