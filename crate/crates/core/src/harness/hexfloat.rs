//! C99-style hexadecimal floats (`-0x1.921fb54442d18p+1`), exact for every
//! finite `f64`.

use crate::error::{Error, Result};

pub fn to_hex(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let mut digits = format!("{mant:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let frac = if digits.is_empty() { String::new() } else { format!(".{digits}") };
    let esign = if e < 0 { '-' } else { '+' };
    format!("{sign}0x{lead}{frac}p{esign}{}", e.abs())
}

pub fn from_hex(s: &str) -> Result<f64> {
    let bad = || Error::Checkpoint(format!("malformed hex float {s:?}"));
    match s {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(bad)?;
    let (mantissa, exp) = rest.split_once('p').ok_or_else(bad)?;
    let exp: i64 = exp.parse().map_err(|_| bad())?;
    let (lead, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if frac.len() > 13 || !frac.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(bad());
    }
    let frac_bits = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(frac, 16).map_err(|_| bad())? << (4 * (13 - frac.len()))
    };
    let bits = match lead {
        "0" if frac_bits == 0 => 0,
        "0" if exp == -1022 => frac_bits,
        "1" if (-1022..=1023).contains(&exp) => (((exp + 1023) as u64) << 52) | frac_bits,
        _ => return Err(bad()),
    };
    let v = f64::from_bits(bits);
    Ok(if neg { -v } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        assert_eq!(to_hex(1.0), "0x1p+0");
        assert_eq!(to_hex(-2.5), "-0x1.4p+1");
        assert_eq!(to_hex(std::f64::consts::PI), "0x1.921fb54442d18p+1");
        assert_eq!(to_hex(0.0), "0x0p+0");
        assert_eq!(to_hex(-0.0), "-0x0p+0");
        assert_eq!(from_hex("0x1.921fb54442d18p+1").unwrap(), std::f64::consts::PI);
        assert!(from_hex("0x1.2q+3").is_err());
        assert!(from_hex("12").is_err());
    }

    #[test]
    fn extremes_round_trip() {
        for x in [f64::MIN_POSITIVE, f64::MAX, f64::MIN, 5e-324, -1e-310, f64::EPSILON] {
            assert_eq!(from_hex(&to_hex(x)).unwrap().to_bits(), x.to_bits(), "{x}");
        }
        assert!(from_hex(&to_hex(f64::NAN)).unwrap().is_nan());
    }

    proptest! {
        #[test]
        fn bits_round_trip(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(!x.is_nan());
            prop_assert_eq!(from_hex(&to_hex(x)).unwrap().to_bits(), bits);
        }
    }
}
