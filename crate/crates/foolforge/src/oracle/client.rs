//! Blocking client for the prediction service, with timeout, bounded
//! retries, and the label vocabulary needed to map answers back to class
//! indices.

use std::time::Duration;

use crate::eval::{BlackBox, EvalError};
use crate::tensor::Tensor;
use crate::victims::CLASS_NAMES;

use super::wire::{encode_pixels, PredictRequest, PredictResponse};
use super::OracleError;

/// Environment variable overriding the service address.
pub const ORACLE_ADDR_ENV: &str = "FOOLFORGE_ORACLE_ADDR";

/// Default local bind/connect address.
pub const DEFAULT_ORACLE_ADDR: &str = "127.0.0.1:7878";

/// Service address by precedence: explicit flag, then the environment
/// override, then the built-in default.
pub fn resolve_addr(flag: Option<&str>) -> String {
    flag.map(str::to_string)
        .or_else(|| std::env::var(ORACLE_ADDR_ENV).ok())
        .unwrap_or_else(|| DEFAULT_ORACLE_ADDR.to_string())
}

pub struct OracleClient {
    endpoint: String,
    timeout: Duration,
    retries: usize,
    class_names: Vec<String>,
    http: reqwest::blocking::Client,
}

impl OracleClient {
    /// Client for `addr` (host:port or full http URL) with a 10 s timeout,
    /// 2 retries, and the stock label vocabulary.
    pub fn new(addr: &str) -> Result<Self, OracleError> {
        Self::with_timeout(addr, Duration::from_secs(10), 2)
    }

    pub fn with_timeout(addr: &str, timeout: Duration, retries: usize) -> Result<Self, OracleError> {
        if timeout.is_zero() {
            return Err(OracleError::Config {
                msg: "timeout must be positive".into(),
            });
        }
        let trimmed = addr.trim_end_matches('/');
        let endpoint = if trimmed.starts_with("http://") || trimmed.starts_with("https://") {
            trimmed.to_string()
        } else {
            format!("http://{trimmed}")
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| OracleError::Config {
                msg: format!("http client: {e}"),
            })?;
        Ok(Self {
            endpoint,
            timeout,
            retries,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            http,
        })
    }

    /// Replaces the label vocabulary used to map answers to indices.
    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = names;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Sends one request, retrying transport failures up to the budget.
    pub fn request(&self, req: &PredictRequest) -> Result<PredictResponse, OracleError> {
        let url = format!("{}/v1/predict", self.endpoint);
        let mut last_err = String::new();
        for _attempt in 0..=self.retries {
            match self.http.post(&url).json(req).send() {
                Err(e) => last_err = e.to_string(),
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| OracleError::Transport {
                        msg: format!("reading response: {e}"),
                    })?;
                    if !status.is_success() {
                        return Err(OracleError::Protocol {
                            msg: format!("status {status}: {text}"),
                        });
                    }
                    return serde_json::from_str(&text).map_err(|e| OracleError::Protocol {
                        msg: format!("response parse: {e}"),
                    });
                }
            }
        }
        Err(OracleError::Transport {
            msg: format!("{url}: {last_err} (after {} retries)", self.retries),
        })
    }

    /// Top-k labels and scores for one `[c, h, w]` image in [0, 1].
    pub fn query(&self, image: &Tensor, top_k: usize) -> Result<Vec<(String, f64)>, OracleError> {
        if image.rank() != 3 {
            return Err(OracleError::Config {
                msg: format!("expected a [c, h, w] image, got {:?}", image.shape()),
            });
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(OracleError::Config {
                msg: "image must lie in [0, 1]".into(),
            });
        }
        let req = PredictRequest {
            shape: image.shape().to_vec(),
            pixels_b64: encode_pixels(image),
            top_k,
        };
        let resp = self.request(&req)?;
        Ok(resp
            .predictions
            .into_iter()
            .map(|p| (p.label, p.score))
            .collect())
    }
}

impl BlackBox for OracleClient {
    fn name(&self) -> &str {
        "oracle"
    }

    fn top1(&self, image: &Tensor) -> Result<usize, EvalError> {
        let wrap = |msg: String| EvalError::Oracle { msg };
        let answers = self.query(image, 1).map_err(|e| wrap(e.to_string()))?;
        let (label, _) = answers
            .into_iter()
            .next()
            .ok_or_else(|| wrap("empty prediction list".into()))?;
        self.class_names
            .iter()
            .position(|n| *n == label)
            .ok_or_else(|| wrap(format!("unknown label {label:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn addresses_resolve_by_precedence() {
        assert_eq!(resolve_addr(Some("10.0.0.1:99")), "10.0.0.1:99");
        std::env::set_var(ORACLE_ADDR_ENV, "127.0.0.1:4321");
        assert_eq!(resolve_addr(None), "127.0.0.1:4321");
        assert_eq!(resolve_addr(Some("flag:1")), "flag:1");
        std::env::remove_var(ORACLE_ADDR_ENV);
        assert_eq!(resolve_addr(None), DEFAULT_ORACLE_ADDR);
    }

    #[test]
    fn endpoints_gain_a_scheme_when_missing() {
        let c = OracleClient::new("127.0.0.1:7878").unwrap();
        assert_eq!(c.endpoint(), "http://127.0.0.1:7878");
        let c = OracleClient::new("http://10.1.1.1:80/").unwrap();
        assert_eq!(c.endpoint(), "http://10.1.1.1:80");
        assert!(OracleClient::with_timeout("x", Duration::ZERO, 0).is_err());
    }
}
