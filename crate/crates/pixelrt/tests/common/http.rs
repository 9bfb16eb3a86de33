//! In-process HTTP helpers: requests go straight into the router.

#![allow(dead_code)]

use std::io::Cursor;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use image::RgbImage;
use pixelrt_core::mask::{decode_rle, RleMask};
use serde_json::Value;
use tower::ServiceExt;

pub fn png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

const BOUNDARY: &str = "pixelrt-test-boundary";

pub fn multipart(frames: &[Vec<u8>]) -> Vec<u8> {
    let mut body = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"frames\"; filename=\"frame_{i:03}.png\"\r\nContent-Type: image/png\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(f);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, json)
}

pub async fn create(app: &Router, frames: &[Vec<u8>]) -> (StatusCode, Value) {
    let req = Request::post("/sessions")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(frames)))
        .unwrap();
    call(app, req).await
}

pub async fn ask(app: &Router, id: &str, body: &Value) -> (StatusCode, Value) {
    let req = Request::post(format!("/sessions/{id}/ask"))
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

pub async fn memory(app: &Router, id: &str) -> (StatusCode, Value) {
    call(app, Request::get(format!("/sessions/{id}/memory")).body(Body::empty()).unwrap()).await
}

pub async fn delete(app: &Router, id: &str) -> (StatusCode, Value) {
    call(app, Request::delete(format!("/sessions/{id}")).body(Body::empty()).unwrap()).await
}

/// Every RLE under `objects[*].masks` decodes at `[h, w]`.
pub fn check_rles(objects: &Value, size: [usize; 2]) -> Result<usize, String> {
    let mut n = 0;
    for o in objects.as_array().ok_or("objects is not an array")? {
        let Some(masks) = o.get("masks") else { continue };
        for (t, rle) in masks.as_object().ok_or("masks is not an object")? {
            let rle: RleMask = serde_json::from_value(rle.clone()).map_err(|e| e.to_string())?;
            let m = decode_rle(&rle).map_err(|e| format!("frame {t}: {e}"))?;
            if [m.height(), m.width()] != size {
                return Err(format!("frame {t} decodes to {}x{}", m.height(), m.width()));
            }
            n += 1;
        }
    }
    Ok(n)
}

pub fn error_code(v: &Value) -> (&str, Option<&str>) {
    (
        v["error"]["code"].as_str().unwrap_or(""),
        v["error"]["field"].as_str(),
    )
}
