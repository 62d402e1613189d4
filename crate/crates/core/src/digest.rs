//! Content hashes for parameters and configs.

use candle_core::{DType, Tensor};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the little-endian `f64` bytes of each tensor, in order.
pub fn tensors_sha256<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        let values = t
            .to_dtype(DType::F64)
            .and_then(|t| t.flatten_all())
            .and_then(|t| t.to_vec1::<f64>())
            .expect("numeric tensor");
        h.update((t.dims().len() as u64).to_le_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}
