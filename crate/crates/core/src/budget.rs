use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A non-negative pixel-space magnitude written either as a real number or
/// as an exact rational such as `"8/255"`.
///
/// The original spelling is kept so configs echo back unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Rational { num: u32, den: u32 },
    Real(f64),
}

impl Budget {
    pub const ZERO: Budget = Budget::Rational { num: 0, den: 255 };

    pub fn over_255(num: u32) -> Self {
        Budget::Rational { num, den: 255 }
    }

    pub fn value(self) -> f64 {
        match self {
            Budget::Rational { num, den } => num as f64 / den as f64,
            Budget::Real(v) => v,
        }
    }

    pub fn is_zero(self) -> bool {
        self.value() == 0.0
    }

    /// Value in 1/255 units, used for labelling sweeps.
    pub fn in_255ths(self) -> f64 {
        self.value() * 255.0
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config("epsilon", format!("cannot parse `{s}` as a budget (use e.g. 8/255 or 0.03)"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let num: u32 = n.trim().parse().map_err(|_| bad())?;
            let den: u32 = d.trim().parse().map_err(|_| bad())?;
            if den == 0 {
                return Err(bad());
            }
            return Ok(Budget::Rational { num, den });
        }
        let v: f64 = s.parse().map_err(|_| bad())?;
        Budget::real(v).ok_or_else(bad)
    }

    pub fn real(v: f64) -> Option<Self> {
        (v.is_finite() && v >= 0.0).then_some(Budget::Real(v))
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Rational { num, den } => write!(f, "{num}/{den}"),
            Budget::Real(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::Rational { .. } => s.serialize_str(&self.to_string()),
            Budget::Real(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Budget;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative number or a rational string like \"8/255\"")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Budget, E> {
                Budget::parse(v).map_err(E::custom)
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Budget, E> {
                Budget::real(v).ok_or_else(|| E::custom(format!("budget {v} must be finite and >= 0")))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Budget, E> {
                Ok(Budget::Real(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Budget, E> {
                self.visit_f64(v as f64)
            }
        }
        d.deserialize_any(V)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rationals_and_reals() {
        assert_eq!(Budget::parse("8/255").unwrap().value(), 8.0 / 255.0);
        assert_eq!(Budget::parse(" 4 / 255 ").unwrap(), Budget::over_255(4));
        assert_eq!(Budget::parse("0.5").unwrap().value(), 0.5);
        assert!(Budget::parse("-1").is_err());
        assert!(Budget::parse("1/0").is_err());
        assert!(Budget::parse("eight").is_err());
    }

    #[test]
    fn json_keeps_spelling() {
        let b: Budget = serde_json::from_str("\"2/255\"").unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "\"2/255\"");
        let r: Budget = serde_json::from_str("0.25").unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), "0.25");
        assert!(serde_json::from_str::<Budget>("-0.1").is_err());
    }
}
