//! Canonical JSON and content hashes.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;

fn normalize(v: &mut Value) {
    match v {
        Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if f == 0.0 && f.is_sign_negative() {
                    *v = Value::from(0.0);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(normalize),
        Value::Object(map) => map.values_mut().for_each(normalize),
        _ => {}
    }
}

/// Sorted-key JSON with `-0.0` folded into `0.0`.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    normalize(&mut v);
    Ok(serde_json::to_string(&v)?)
}

pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = canonical_json(value)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn key_order_and_negative_zero_do_not_matter() {
        let mut a = HashMap::new();
        a.insert("b", -0.0);
        a.insert("a", 1.5);
        let mut b = HashMap::new();
        b.insert("a", 1.5);
        b.insert("b", 0.0);
        assert_eq!(content_hash(&a).unwrap(), content_hash(&b).unwrap());
        assert_eq!(canonical_json(&a).unwrap(), r#"{"a":1.5,"b":0.0}"#);
    }
}
