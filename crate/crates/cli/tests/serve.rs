use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use fundus_guide::data::{generate_corpus, read_annotations, write_cases, CorpusSpec};
use fundus_guide::geometry::{rasterize, Landmarks, Point, RegionLabelMap, RegionPartition};
use fundus_guide_cli::serve::{router, AppState, ImageSummary, PartitionResponse};
use tower::ServiceExt;

struct Fixture {
    dir: tempfile::TempDir,
    app: Router,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cases = generate_corpus(&CorpusSpec {
        count: 4,
        ..Default::default()
    })
    .unwrap();
    write_cases(dir.path(), &cases, "train").unwrap();
    let sink = dir.path().join("ui.jsonl");
    let state = AppState::load(dir.path(), Some(&sink)).unwrap();
    Fixture {
        app: router(Arc::new(state), None),
        dir,
    }
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: String) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap()
}

#[tokio::test]
async fn findings_vocabulary() {
    let f = fixture();
    let (s, body) = call(&f.app, get("/api/findings")).await;
    assert_eq!(s, StatusCode::OK);
    let names: Vec<String> = serde_json::from_slice(&body).unwrap();
    assert_eq!(names.len(), 8);
    assert!(names.contains(&"hemorrhage".to_string()));
}

#[tokio::test]
async fn images_listed_and_served() {
    let f = fixture();
    let (s, body) = call(&f.app, get("/api/images")).await;
    assert_eq!(s, StatusCode::OK);
    let list: Vec<ImageSummary> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.len(), 4);
    let (s, png) = call(&f.app, get(&list[0].url)).await;
    assert_eq!(s, StatusCode::OK);
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!(img.width() as usize, list[0].width);
    let (s, _) = call(&f.app, get("/api/images/nope")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn partition_matches_library_label_map() {
    let f = fixture();
    let list: Vec<ImageSummary> =
        serde_json::from_slice(&call(&f.app, get("/api/images")).await.1).unwrap();
    let im = &list[0];
    let body = serde_json::json!({ "image_id": im.image_id, "od": [20.0, 33.0], "fovea": [44.0, 31.0] });
    let (s, resp) = call(&f.app, post("/api/partition", body.to_string())).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&resp));
    let p: PartitionResponse = serde_json::from_slice(&resp).unwrap();
    assert_eq!(p.boundary_polylines.len(), 8);
    for b in &p.boundary_polylines {
        for line in &b.polylines {
            for w in line.windows(2) {
                let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
                assert!(d <= 1.0 + 1e-12, "polyline spacing {d}");
            }
        }
    }
    let (s, png) = call(&f.app, get(&p.label_map_url)).await;
    assert_eq!(s, StatusCode::OK);
    let served = RegionLabelMap::from_gray(&image::load_from_memory(&png).unwrap().to_luma8()).unwrap();
    let lm = Landmarks::new(Point::new(20.0, 33.0), Point::new(44.0, 31.0), im.width, im.height).unwrap();
    let local = rasterize(&RegionPartition::derive(lm).unwrap(), im.width, im.height).unwrap();
    assert_eq!(served, local);
}

#[tokio::test]
async fn partition_rejects_coincident_landmarks() {
    let f = fixture();
    let list: Vec<ImageSummary> =
        serde_json::from_slice(&call(&f.app, get("/api/images")).await.1).unwrap();
    let body = serde_json::json!({ "image_id": list[0].image_id, "od": [30.0, 30.0], "fovea": [30.0, 30.0] });
    let (s, resp) = call(&f.app, post("/api/partition", body.to_string())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(String::from_utf8_lossy(&resp).contains("coincide"));
}

#[tokio::test]
async fn annotations_append_and_round_trip() {
    let f = fixture();
    let list: Vec<ImageSummary> =
        serde_json::from_slice(&call(&f.app, get("/api/images")).await.1).unwrap();
    let id = &list[1].image_id;
    let marked = serde_json::json!({
        "image_id": id, "annotator_id": "ui-1",
        "findings": [{ "name": "hemorrhage", "regions": [3, 5] }, { "name": "drusen", "regions": [5] }]
    });
    let normal = serde_json::json!({ "image_id": id, "annotator_id": "ui-2", "findings": [] });
    for body in [&marked, &normal] {
        let (s, resp) = call(&f.app, post("/api/annotations", body.to_string())).await;
        assert_eq!(s, StatusCode::CREATED, "{}", String::from_utf8_lossy(&resp));
    }
    let saved = read_annotations(&f.dir.path().join("ui.jsonl")).unwrap();
    assert_eq!(saved.len(), 2);
    let back: serde_json::Value = serde_json::from_str(&saved[0].to_json()).unwrap();
    assert_eq!(back["findings"].as_array().unwrap().len(), 2);
    assert_eq!(saved[0].marks("hemorrhage").unwrap().to_vec(), vec![3, 5]);
    assert!(saved[1].findings.is_empty());
}

#[tokio::test]
async fn bad_annotations_rejected() {
    let f = fixture();
    let list: Vec<ImageSummary> =
        serde_json::from_slice(&call(&f.app, get("/api/images")).await.1).unwrap();
    let id = &list[0].image_id;
    let cases = [
        serde_json::json!({ "image_id": id, "annotator_id": "", "findings": [] }),
        serde_json::json!({ "image_id": id, "annotator_id": "a", "findings": [{ "name": "glaucoma", "regions": [1] }] }),
        serde_json::json!({ "image_id": id, "annotator_id": "a", "findings": [{ "name": "drusen", "regions": [9] }] }),
        serde_json::json!({ "image_id": id, "annotator_id": "a", "findings": [], "extra": 1 }),
    ];
    for c in &cases {
        let (s, _) = call(&f.app, post("/api/annotations", c.to_string())).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{c}");
    }
    let unknown = serde_json::json!({ "image_id": "ghost", "annotator_id": "a", "findings": [] });
    let (s, _) = call(&f.app, post("/api/annotations", unknown.to_string())).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(!f.dir.path().join("ui.jsonl").exists());
}

#[tokio::test]
async fn concurrent_posts_are_all_written_whole() {
    let f = fixture();
    let list: Vec<ImageSummary> =
        serde_json::from_slice(&call(&f.app, get("/api/images")).await.1).unwrap();
    let id = list[2].image_id.clone();
    let tasks: Vec<_> = (0..16)
        .map(|i| {
            let app = f.app.clone();
            let body = serde_json::json!({ "image_id": id, "annotator_id": format!("u{i}"), "findings": [] });
            tokio::spawn(async move { call(&app, post("/api/annotations", body.to_string())).await.0 })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::CREATED);
    }
    assert_eq!(read_annotations(&f.dir.path().join("ui.jsonl")).unwrap().len(), 16);
}
