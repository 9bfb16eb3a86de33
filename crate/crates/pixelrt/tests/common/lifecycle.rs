//! The create / ask / memory / delete scenario against a live router.

#![allow(dead_code)]

use std::collections::BTreeSet;

use axum::http::StatusCode;
use axum::Router;
use pixelrt_model::data::ToySample;
use serde_json::{json, Value};

use super::http::{self, png};

fn expect(status: StatusCode, want: StatusCode, what: &str, body: &Value) -> Result<(), String> {
    if status != want {
        return Err(format!("{what}: {status} (wanted {want}): {body}"));
    }
    Ok(())
}

fn ids(objects: &Value) -> BTreeSet<u64> {
    objects
        .as_array()
        .map(|a| a.iter().filter_map(|o| o["object_id"].as_u64()).collect())
        .unwrap_or_default()
}

/// With `trained`, the first answer must segment at least one object and
/// the follow-up must leave the bank as it was.
pub async fn lifecycle(app: &Router, sample: &ToySample, trained: bool) -> Result<String, String> {
    let frames: Vec<Vec<u8>> = sample.frames.iter().map(png).collect();
    let size = sample.record.frame_size;
    let (st, created) = http::create(app, &frames).await;
    expect(st, StatusCode::CREATED, "create", &created)?;
    if created["memory_size"] != json!(0) || created["frames"] != json!(frames.len()) {
        return Err(format!("create returned {created}"));
    }
    let id = created["session_id"].as_str().ok_or("no session_id")?.to_string();
    let (st, mem) = http::memory(app, &id).await;
    expect(st, StatusCode::OK, "memory", &mem)?;
    if !ids(&mem["objects"]).is_empty() {
        return Err(format!("fresh session has memory {mem}"));
    }

    let question = &sample.record.conversation[0].text;
    let body = json!({"question": question, "prompts": sample.record.prompts, "want_masks": true});
    let (st, first) = http::ask(app, &id, &body).await;
    expect(st, StatusCode::OK, "ask", &first)?;
    let rles = http::check_rles(&first["objects"], size)?;
    let (st, mem) = http::memory(app, &id).await;
    expect(st, StatusCode::OK, "memory", &mem)?;
    http::check_rles(&mem["objects"], size)?;
    let bank = ids(&mem["objects"]);
    if !ids(&first["objects"]).is_subset(&bank) {
        return Err(format!("answer objects {first} missing from memory {mem}"));
    }
    if trained && bank.is_empty() {
        return Err(format!("trained model segmented nothing: {first}"));
    }

    let (st, follow) = http::ask(app, &id, &json!({"question": "What color is [1]?"})).await;
    expect(st, StatusCode::OK, "follow-up", &follow)?;
    let (_, mem2) = http::memory(app, &id).await;
    if trained && ids(&mem2["objects"]) != bank {
        return Err(format!("follow-up changed the bank from {bank:?} to {mem2}"));
    }

    let bad = json!({"question": "What is [1]?", "prompts": [{"kind": "point", "t": frames.len(), "xy": [0.5, 0.5]}]});
    let (st, err) = http::ask(app, &id, &bad).await;
    expect(st, StatusCode::BAD_REQUEST, "out-of-range prompt", &err)?;
    if http::error_code(&err) != ("validation", Some("prompts[0].t")) {
        return Err(format!("out-of-range prompt gave {err}"));
    }

    let (st, v) = http::delete(app, &id).await;
    expect(st, StatusCode::NO_CONTENT, "delete", &v)?;
    let (st, v) = http::memory(app, &id).await;
    expect(st, StatusCode::NOT_FOUND, "memory after delete", &v)?;
    let (st, v) = http::ask(app, &id, &json!({"question": "hi"})).await;
    expect(st, StatusCode::NOT_FOUND, "ask after delete", &v)?;
    Ok(format!(
        "answer {:?}, {} object(s) in memory, {rles} RLE frames decoded",
        first["answer"].as_str().unwrap_or(""),
        bank.len()
    ))
}
