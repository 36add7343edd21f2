//! Blocking client for the inpainting service's `/healthz` and `/inpaint`.

use std::time::{Duration, Instant};

use pennet_core::wire::{ErrorBody, Health, InpaintRequest, InpaintResponse};
use reqwest::blocking::Client as Http;
use reqwest::StatusCode;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("service answered {status}: {message}")]
    Status { status: u16, message: String },
    #[error("result is not valid base64: {0}")]
    Payload(#[from] pennet_core::wire::Base64DecodeError),
    #[error("service not ready after {0:?}")]
    NotReady(Duration),
}

/// A finished inpainting call with the decoded PNG result.
#[derive(Clone, Debug)]
pub struct Inpainted {
    pub png: Vec<u8>,
    pub response: InpaintResponse,
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: Http,
}

impl Client {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        Ok(Client {
            base: base_url.trim_end_matches('/').to_string(),
            http: Http::builder().timeout(Duration::from_secs(600)).build()?,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    /// Readiness: `Ok(health)` on 200, `Status` with 503 while loading.
    pub fn health(&self) -> Result<Health, ClientError> {
        let resp = self.http.get(format!("{}/healthz", self.base)).send()?;
        let status = resp.status();
        let health: Health = resp.json()?;
        if status == StatusCode::OK {
            Ok(health)
        } else {
            Err(ClientError::Status {
                status: status.as_u16(),
                message: health.status,
            })
        }
    }

    /// Polls `/healthz` until the model is loaded.
    pub fn wait_ready(&self, timeout: Duration) -> Result<Health, ClientError> {
        let start = Instant::now();
        loop {
            match self.health() {
                Ok(h) => return Ok(h),
                Err(ClientError::Status { status: 503, .. }) | Err(ClientError::Transport(_))
                    if start.elapsed() < timeout =>
                {
                    std::thread::sleep(Duration::from_millis(50))
                }
                Err(ClientError::Status { status: 503, .. }) | Err(ClientError::Transport(_)) => {
                    return Err(ClientError::NotReady(timeout))
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Sends encoded image and mask bytes; holes are mask values above 127.
    pub fn inpaint(
        &self,
        image: &[u8],
        mask: &[u8],
        checkpoint_id: Option<&str>,
    ) -> Result<Inpainted, ClientError> {
        let req = InpaintRequest::from_bytes(image, mask, checkpoint_id.map(String::from));
        let resp = self
            .http
            .post(format!("{}/inpaint", self.base))
            .json(&req)
            .send()?;
        let status = resp.status();
        if !status.is_success() {
            let message = resp
                .json::<ErrorBody>()
                .map(|b| b.error)
                .unwrap_or_else(|_| status.to_string());
            return Err(ClientError::Status {
                status: status.as_u16(),
                message,
            });
        }
        let response: InpaintResponse = resp.json()?;
        Ok(Inpainted {
            png: response.result_bytes()?,
            response,
        })
    }
}
