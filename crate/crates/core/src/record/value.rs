//! Task argument and result values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datafabric::ProxyRef;

/// A value carried by a task: an argument, keyword argument, result, or
/// user metadata entry.
///
/// The JSON form is externally tagged (`{"int":3}`, `{"bytes":"<base64>"}`,
/// `{"proxy":{...}}`) so every variant survives a round trip, including
/// binary data and non-finite floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(#[serde(with = "float_repr")] f64),
    Str(String),
    Bytes(#[serde(with = "base64_bytes")] Vec<u8>),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
    Proxy(ProxyRef),
}

impl Value {
    pub fn floats(xs: &[f64]) -> Self {
        Value::List(xs.iter().copied().map(Value::Float).collect())
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(x) => Some(*x),
            Value::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        self.as_i64().and_then(|i| u64::try_from(i).ok())
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(v) => Some(v),
            _ => None,
        }
    }

    /// Interprets a list of numbers as a float vector.
    pub fn to_f64_vec(&self) -> Option<Vec<f64>> {
        self.as_list()?.iter().map(Value::as_f64).collect()
    }

    pub fn as_proxy(&self) -> Option<&ProxyRef> {
        match self {
            Value::Proxy(p) => Some(p),
            _ => None,
        }
    }

    pub fn is_proxy(&self) -> bool {
        matches!(self, Value::Proxy(_))
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Float(x)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl From<Vec<u8>> for Value {
    fn from(b: Vec<u8>) -> Self {
        Value::Bytes(b)
    }
}

impl From<ProxyRef> for Value {
    fn from(p: ProxyRef) -> Self {
        Value::Proxy(p)
    }
}

/// Finite floats are JSON numbers; infinities and NaN are strings.
mod float_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("invalid float literal {other:?}"))),
            },
        }
    }
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tagged_json_shape() {
        assert_eq!(serde_json::to_string(&Value::Int(3)).unwrap(), r#"{"int":3}"#);
        assert_eq!(serde_json::to_string(&Value::Null).unwrap(), r#""null""#);
        assert_eq!(
            serde_json::to_string(&Value::Bytes(b"abc".to_vec())).unwrap(),
            r#"{"bytes":"YWJj"}"#
        );
    }

    #[test]
    fn non_finite_floats_survive() {
        for x in [f64::INFINITY, f64::NEG_INFINITY] {
            let text = serde_json::to_string(&Value::Float(x)).unwrap();
            let back: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(back, Value::Float(x));
        }
        let text = serde_json::to_string(&Value::Float(f64::NAN)).unwrap();
        let back: Value = serde_json::from_str(&text).unwrap();
        assert!(back.as_f64().unwrap().is_nan());
    }

    #[test]
    fn float_vector_helpers() {
        let v = Value::floats(&[1.0, -2.5]);
        assert_eq!(v.to_f64_vec(), Some(vec![1.0, -2.5]));
        assert_eq!(Value::Str("x".into()).to_f64_vec(), None);
    }
}
