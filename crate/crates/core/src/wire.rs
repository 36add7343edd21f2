//! JSON payloads of the HTTP inference service.
//!
//! `POST /inpaint` accepts either `multipart/form-data` with parts `image`,
//! `mask` and optional `checkpoint_id`, or `application/json` shaped like
//! [`InpaintRequest`] with base64 (standard alphabet) image bytes. Images may
//! use any common raster format; masks are 8-bit grayscale where values
//! above 127 mark holes. The reply is always [`InpaintResponse`] with a PNG
//! result.
//!
//! Status codes: 200 success, 400 malformed payload or image/mask size
//! mismatch, 409 `checkpoint_id` differs from the loaded model, 503 no model
//! loaded, 500 inference failure. Errors carry [`ErrorBody`].
//!
//! `GET /healthz` returns [`Health`] with 200 once a model is loaded and
//! 503 before.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

pub use base64::DecodeError as Base64DecodeError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_id: Option<String>,
}

impl InpaintRequest {
    pub fn from_bytes(image: &[u8], mask: &[u8], checkpoint_id: Option<String>) -> Self {
        InpaintRequest {
            image: STANDARD.encode(image),
            mask: STANDARD.encode(mask),
            checkpoint_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintResponse {
    /// Base64 PNG of the composed result, same size as the request image.
    pub result: String,
    pub latency_ms: f64,
    pub model_id: String,
    pub width: u32,
    pub height: u32,
}

impl InpaintResponse {
    pub fn result_bytes(&self) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(&self.result)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    /// `ready` or `loading`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn decode_base64(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    STANDARD.decode(text.trim())
}

pub fn encode_base64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}
