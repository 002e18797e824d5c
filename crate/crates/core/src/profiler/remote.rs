//! Client for an external image-text embedding service.
//!
//! Wire protocol: `POST {endpoint}/embed` with
//! `{"image_b64": <base64 8-bit PNG>, "labels": [...]}`, answered by
//! `{"scores": [...]}` (one raw similarity per label, same order).

use super::{profile_builtin, ProfileSource, ProfilerError, Result, StructureProfile, LABELS};
use crate::preprocess::{normalize_hu, HuSlice};
use base64::Engine;
use image::ImageEncoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub attempts: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8089".into(),
            timeout_ms: 10_000,
            attempts: 3,
            backoff_ms: 200,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    image_b64: String,
    labels: &'a [&'a str],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    scores: Vec<f64>,
}

/// Window-mapped 8-bit grayscale PNG, base64 encoded.
pub fn encode_png_b64(slice: &HuSlice) -> Result<String> {
    let g = normalize_hu(slice);
    let bytes: Vec<u8> = g.data.iter().map(|v| (v * 255.0).round() as u8).collect();
    let mut png = Vec::new();
    image::codecs::png::PngEncoder::new(&mut png)
        .write_image(
            bytes.as_slice(),
            g.width as u32,
            g.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| ProfilerError::Encode(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

fn parse_response(slice_id: &str, body: &str) -> Result<StructureProfile> {
    let resp: EmbedResponse = serde_json::from_str(body).map_err(|e| ProfilerError::Protocol {
        reason: e.to_string(),
        excerpt: excerpt(body),
    })?;
    if resp.scores.len() != LABELS.len() || resp.scores.iter().any(|s| !s.is_finite()) {
        return Err(ProfilerError::Protocol {
            reason: format!("expected {} finite scores, got {}", LABELS.len(), resp.scores.len()),
            excerpt: excerpt(body),
        });
    }
    StructureProfile::from_scores(slice_id, &resp.scores, ProfileSource::Remote)
}

fn post_once(agent: &ureq::Agent, url: &str, payload: &str) -> std::result::Result<String, String> {
    let mut resp = agent
        .post(url)
        .header("Content-Type", "application/json")
        .send(payload)
        .map_err(|e| e.to_string())?;
    resp.body_mut().read_to_string().map_err(|e| e.to_string())
}

/// Profiles through the service, retrying transport failures with
/// exponential backoff and falling back to the builtin probe once the
/// attempts are exhausted. Malformed responses are not retried.
pub fn profile_remote(slice: &HuSlice, cfg: &RemoteConfig) -> Result<StructureProfile> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .build()
        .into();
    let url = format!("{}/embed", cfg.endpoint.trim_end_matches('/'));
    let payload = serde_json::to_string(&EmbedRequest {
        image_b64: encode_png_b64(slice)?,
        labels: &LABELS,
    })
    .map_err(|e| ProfilerError::Encode(e.to_string()))?;
    let mut last_err = String::new();
    for attempt in 0..cfg.attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(cfg.backoff_ms << (attempt - 1)));
        }
        match post_once(&agent, &url, &payload) {
            Ok(body) => return parse_response(&slice.slice_id, &body),
            Err(e) => {
                log::debug!("embed attempt {} for {} failed: {e}", attempt + 1, slice.slice_id);
                last_err = e;
            }
        }
    }
    log::warn!(
        "embedding service unavailable for {} after {} attempts ({last_err}); using builtin probe",
        slice.slice_id,
        cfg.attempts
    );
    Ok(profile_builtin(slice))
}

/// Profiles many slices with at most `max_in_flight` concurrent requests.
/// Output order follows the input.
pub fn profile_remote_all(slices: &[HuSlice], cfg: &RemoteConfig) -> Result<Vec<StructureProfile>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight.max(1))
        .build()
        .map_err(|e| ProfilerError::Transport(e.to_string()))?;
    pool.install(|| slices.par_iter().map(|s| profile_remote(s, cfg)).collect())
}
