//! Exact ratios, tolerance comparisons and the artifact schema version.

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{ToPrimitive, Zero};
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const SCHEMA_VERSION: u32 = 1;

/// A counting ratio `num/den` kept exact.
pub type Frac = Ratio<u64>;

pub fn frac(num: usize, den: usize) -> Frac {
    if den == 0 {
        Frac::new_raw(num as u64, 0)
    } else {
        Frac::new(num as u64, den as u64)
    }
}

pub fn frac_value(f: &Frac) -> f64 {
    if *f.denom() == 0 {
        f64::INFINITY
    } else {
        *f.numer() as f64 / *f.denom() as f64
    }
}

/// Exact comparison of a counting ratio with the binary value of `bound`.
pub fn frac_le(f: &Frac, bound: f64) -> bool {
    if *f.denom() == 0 {
        return false;
    }
    match BigRational::from_float(bound) {
        Some(b) => BigRational::new(BigInt::from(*f.numer()), BigInt::from(*f.denom())) <= b,
        None => bound == f64::INFINITY,
    }
}

pub fn frac_lt(f: &Frac, bound: f64) -> bool {
    if *f.denom() == 0 {
        return false;
    }
    match BigRational::from_float(bound) {
        Some(b) => BigRational::new(BigInt::from(*f.numer()), BigInt::from(*f.denom())) < b,
        None => bound == f64::INFINITY,
    }
}

/// Serializable view of a ratio: numerator, denominator and decimal value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FracJson(pub Frac);

impl Serialize for FracJson {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Frac", 3)?;
        st.serialize_field("num", self.0.numer())?;
        st.serialize_field("den", self.0.denom())?;
        st.serialize_field("value", &round12(frac_value(&self.0)))?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for FracJson {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            num: u64,
            den: u64,
        }
        let r = Raw::deserialize(d)?;
        Ok(FracJson(if r.den == 0 { Frac::new_raw(r.num, 0) } else { Frac::new(r.num, r.den) }))
    }
}

/// Exact rational with its decimal value.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalJson(pub BigRational);

impl Serialize for RationalJson {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Rational", 3)?;
        st.serialize_field("num", &self.0.numer().to_string())?;
        st.serialize_field("den", &self.0.denom().to_string())?;
        let v = if self.0.is_zero() { 0.0 } else { self.0.to_f64().unwrap_or(f64::NAN) };
        st.serialize_field("value", &round12(v))?;
        st.end()
    }
}

/// Rounds to 12 significant decimals so floating noise never reaches artifacts.
pub fn round12(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.12e}").parse().unwrap_or(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_comparisons_use_binary_epsilon() {
        assert!(frac_le(&frac(2, 20), 0.1));
        assert!(!frac_le(&frac(2, 19), 0.1));
        assert!(frac_lt(&frac(1, 4), 0.25 + 1e-12));
        assert!(!frac_lt(&frac(1, 4), 0.25));
        assert!(!frac_le(&frac(1, 0), 1e300));
    }

    #[test]
    fn json_shape() {
        let v = serde_json::to_value(FracJson(frac(2, 32))).unwrap();
        assert_eq!(v["num"], 1);
        assert_eq!(v["den"], 16);
        assert_eq!(v["value"], 0.0625);
        let back: FracJson = serde_json::from_value(v).unwrap();
        assert_eq!(back.0, frac(1, 16));
    }
}
