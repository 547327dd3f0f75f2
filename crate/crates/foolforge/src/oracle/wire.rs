//! Wire schema for the prediction service: JSON envelopes around
//! little-endian f32 pixel payloads.

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::OracleError;

/// Request body for POST /v1/predict. Unknown fields are rejected so
/// malformed clients fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub shape: Vec<usize>,
    pub pixels_b64: String,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub label: String,
    pub score: f64,
}

/// Response body: a request id and ranked predictions, nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictResponse {
    pub request_id: u64,
    pub predictions: Vec<Prediction>,
}

/// Encodes pixels as base64 little-endian f32, the wire precision.
pub fn encode_pixels(image: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(image.numel() * 4);
    for &v in image.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Decodes a pixel payload, checking the element count against `shape`.
pub fn decode_pixels(pixels_b64: &str, shape: &[usize]) -> Result<Tensor, OracleError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(pixels_b64)
        .map_err(|e| OracleError::Protocol {
            msg: format!("pixels_b64: {e}"),
        })?;
    if bytes.len() % 4 != 0 {
        return Err(OracleError::Protocol {
            msg: format!("pixel payload of {} bytes is not f32-aligned", bytes.len()),
        });
    }
    let expected: usize = shape.iter().product();
    if bytes.len() / 4 != expected {
        return Err(OracleError::Protocol {
            msg: format!(
                "shape {shape:?} wants {expected} pixels, payload has {}",
                bytes.len() / 4
            ),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| OracleError::Protocol { msg: e.to_string() })
}

/// Rounds a tensor through the wire's f32 precision, the exact pixels a
/// server receives; parity contracts compare against inference on this.
pub fn quantize_wire(image: &Tensor) -> Tensor {
    Tensor::new(
        image.shape(),
        image.data().iter().map(|&v| v as f32 as f64).collect(),
    )
    .expect("same shape and length")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn pixel_payloads_round_trip_at_wire_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let image = Tensor::random_uniform(&[3, 5, 4], &mut rng, 0.0, 1.0);
        let decoded = decode_pixels(&encode_pixels(&image), &[3, 5, 4]).unwrap();
        assert_eq!(decoded, quantize_wire(&image));
        assert_eq!(quantize_wire(&decoded), decoded);
    }

    #[test]
    fn shape_and_alignment_violations_are_rejected() {
        let image = Tensor::zeros(&[3, 2, 2]);
        let good = encode_pixels(&image);
        assert!(decode_pixels(&good, &[3, 2, 1]).is_err());
        let unaligned = base64::engine::general_purpose::STANDARD.encode([1u8, 2, 3]);
        assert!(decode_pixels(&unaligned, &[3]).is_err());
        assert!(decode_pixels("not base64!!", &[3, 2, 2]).is_err());
    }

    #[test]
    fn unknown_request_fields_fail_parsing() {
        let text = r#"{"shape":[3,2,2],"pixels_b64":"","top_k":1,"weights":"please"}"#;
        assert!(serde_json::from_str::<PredictRequest>(text).is_err());
    }
}
