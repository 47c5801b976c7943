//! Blocking HTTP client for the `/api/v1` endpoints.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde_json::Value;
use sha2::{Digest, Sha256};
use sigil_core::BlobKey;
use ureq::http::{Request, Response};
use ureq::{Agent, Body};

use crate::error::{CliError, CliResult};

#[derive(Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    agent: Agent,
}

/// Strips trailing slashes so credentials are keyed consistently.
pub fn normalize_server_url(url: &str) -> String {
    url.trim().trim_end_matches('/').to_string()
}

fn transport(e: ureq::Error, url: &str) -> CliError {
    CliError::transport(format!("cannot reach {url}: {e}"))
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Self {
        let agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(Duration::from_secs(10)))
            .timeout_recv_response(Some(Duration::from_secs(120)))
            .build()
            .into();
        Client {
            base: normalize_server_url(base),
            token,
            agent,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api/v1{}", self.base, path)
    }

    fn builder(&self, method: &str, path: &str) -> ureq::http::request::Builder {
        let b = Request::builder().method(method).uri(self.url(path));
        match &self.token {
            Some(t) => b.header("Authorization", format!("Bearer {t}")),
            None => b,
        }
    }

    fn check(&self, mut resp: Response<Body>) -> CliResult<Response<Body>> {
        let status = resp.status().as_u16();
        if (200..300).contains(&status) {
            return Ok(resp);
        }
        let body: Value = resp
            .body_mut()
            .with_config()
            .limit(16 * 1024 * 1024)
            .read_json()
            .unwrap_or(Value::Null);
        Err(CliError::from_envelope(status, &body))
    }

    /// Sends a request with an optional JSON body and decodes a JSON reply.
    /// `204 No Content` decodes as `null`.
    pub fn json(&self, method: &str, path: &str, body: Option<&Value>) -> CliResult<Value> {
        let url = self.url(path);
        let builder = self.builder(method, path);
        let resp = match body {
            Some(b) => {
                let bytes = serde_json::to_vec(b).expect("json value serializes");
                let req = builder
                    .header("Content-Type", "application/json")
                    .body(bytes)
                    .map_err(|e| CliError::usage(e.to_string()))?;
                self.agent.run(req)
            }
            None => {
                let req = builder.body(()).map_err(|e| CliError::usage(e.to_string()))?;
                self.agent.run(req)
            }
        }
        .map_err(|e| transport(e, &url))?;
        let mut resp = self.check(resp)?;
        if resp.status().as_u16() == 204 {
            return Ok(Value::Null);
        }
        resp.body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_json()
            .map_err(|e| CliError::transport(format!("bad reply from {url}: {e}")))
    }

    pub fn typed<T: DeserializeOwned>(&self, method: &str, path: &str, body: Option<&Value>) -> CliResult<T> {
        let v = self.json(method, path, body)?;
        serde_json::from_value(v).map_err(|e| CliError::new("BAD_RESPONSE", format!("unexpected reply: {e}")))
    }

    pub fn has_blob(&self, key: &BlobKey) -> CliResult<bool> {
        let path = format!("/blobs/{key}");
        let url = self.url(&path);
        let req = self
            .builder("HEAD", &path)
            .body(())
            .map_err(|e| CliError::usage(e.to_string()))?;
        let resp = self.agent.run(req).map_err(|e| transport(e, &url))?;
        match resp.status().as_u16() {
            404 => Ok(false),
            _ => self.check(resp).map(|_| true),
        }
    }

    /// Streams a local file to the blob store under its digest.
    pub fn put_blob(&self, key: &BlobKey, file: &Path) -> CliResult<Value> {
        let path = format!("/blobs/{key}");
        let url = self.url(&path);
        let f = File::open(file).map_err(|e| CliError::io(&file.display().to_string(), e))?;
        let len = f.metadata().map(|m| m.len()).unwrap_or(0);
        let req = self
            .builder("PUT", &path)
            .header("Content-Type", "application/octet-stream")
            .header("Content-Length", len)
            .body(f)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let resp = self.agent.run(req).map_err(|e| transport(e, &url))?;
        let mut resp = self.check(resp)?;
        resp.body_mut()
            .read_json()
            .map_err(|e| CliError::transport(format!("bad reply from {url}: {e}")))
    }

    /// Downloads a blob into `dest`, verifying size and digest. On mismatch
    /// the partial file is removed and `CORRUPT_DOWNLOAD` is returned.
    pub fn download_blob(&self, key: &BlobKey, expected_size: u64, dest: &Path) -> CliResult<()> {
        let path = format!("/blobs/{key}");
        let url = self.url(&path);
        let req = self
            .builder("GET", &path)
            .body(())
            .map_err(|e| CliError::usage(e.to_string()))?;
        let resp = self.agent.run(req).map_err(|e| transport(e, &url))?;
        let resp = self.check(resp)?;
        let mut reader = resp
            .into_body()
            .into_with_config()
            .limit(expected_size.saturating_add(1))
            .reader();
        let result = (|| {
            let mut out = File::create(dest).map_err(|e| CliError::io(&dest.display().to_string(), e))?;
            let mut hasher = Sha256::new();
            let mut size = 0u64;
            let mut buf = vec![0u8; 64 * 1024];
            loop {
                let n = match reader.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => n,
                    // Exceeding the limit means the server sent too much.
                    Err(e) if size >= expected_size => {
                        return Err(corrupt(key, &format!("more than {expected_size} bytes ({e})")))
                    }
                    Err(e) => return Err(CliError::transport(format!("download of {key} failed: {e}"))),
                };
                hasher.update(&buf[..n]);
                size += n as u64;
                out.write_all(&buf[..n])
                    .map_err(|e| CliError::io(&dest.display().to_string(), e))?;
            }
            out.sync_all().map_err(|e| CliError::io(&dest.display().to_string(), e))?;
            let computed = hex::encode(hasher.finalize());
            if size != expected_size {
                return Err(corrupt(key, &format!("{size} bytes, expected {expected_size}")));
            }
            if computed != key.as_str() {
                return Err(corrupt(key, &format!("content hashes to {computed}")));
            }
            Ok(())
        })();
        if result.is_err() {
            let _ = std::fs::remove_file(dest);
        }
        result
    }
}

fn corrupt(key: &BlobKey, why: &str) -> CliError {
    CliError::new("CORRUPT_DOWNLOAD", format!("downloaded blob {key} is corrupt: {why}"))
}
