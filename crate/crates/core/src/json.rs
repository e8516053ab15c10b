//! JSON encoding of reals that keeps non-finite values.
//!
//! Finite values are written as JSON numbers (shortest round-trip form);
//! `+inf`, `-inf` and NaN become the strings `"inf"`, `"-inf"` and `"nan"`.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JsonReal(pub f64);

impl Serialize for JsonReal {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

struct RealVisitor;

impl Visitor<'_> for RealVisitor {
    type Value = JsonReal;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<JsonReal, E> {
        Ok(JsonReal(v))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<JsonReal, E> {
        Ok(JsonReal(v as f64))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<JsonReal, E> {
        Ok(JsonReal(v as f64))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<JsonReal, E> {
        match v {
            "inf" => Ok(JsonReal(f64::INFINITY)),
            "-inf" => Ok(JsonReal(f64::NEG_INFINITY)),
            "nan" => Ok(JsonReal(f64::NAN)),
            _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
        }
    }
}

impl<'de> Deserialize<'de> for JsonReal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(RealVisitor)
    }
}

/// `serde(with = "json::real")` adapter for `f64` fields.
pub mod real {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        JsonReal(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(JsonReal::deserialize(d)?.0)
    }
}

/// `serde(with = "json::real_vec")` adapter for `Vec<f64>` fields.
pub mod real_vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&x| JsonReal(x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<JsonReal>::deserialize(d)?.into_iter().map(|r| r.0).collect())
    }
}

/// `serde(with = "json::real_opt")` adapter for `Option<f64>` fields.
pub mod real_opt {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(JsonReal).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<JsonReal>::deserialize(d)?.map(|r| r.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_round_trip() {
        for v in [f64::INFINITY, f64::NEG_INFINITY, 0.1, -3.0, 1e-300] {
            let s = serde_json::to_string(&JsonReal(v)).unwrap();
            let back: JsonReal = serde_json::from_str(&s).unwrap();
            assert_eq!(back.0.to_bits(), v.to_bits());
        }
        let s = serde_json::to_string(&JsonReal(f64::NAN)).unwrap();
        assert_eq!(s, "\"nan\"");
        assert!(serde_json::from_str::<JsonReal>(&s).unwrap().0.is_nan());
    }
}
