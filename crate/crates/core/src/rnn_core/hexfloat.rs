//! C99-style hexadecimal float text (`%a`), used so that serialized weights
//! round-trip bit for bit.

pub fn format(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let man = bits & ((1u64 << 52) - 1);
    if exp == 0 && man == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let mut digits = format!("{man:013x}");
    while digits.len() > 1 && digits.ends_with('0') {
        digits.pop();
    }
    if digits == "0" {
        format!("{sign}0x{lead}p{e:+}")
    } else {
        format!("{sign}0x{lead}.{digits}p{e:+}")
    }
}

pub fn parse(s: &str) -> Option<f64> {
    let s = s.trim();
    match s {
        "nan" => return Some(f64::NAN),
        "inf" => return Some(f64::INFINITY),
        "-inf" => return Some(f64::NEG_INFINITY),
        _ => {}
    }
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let rest = rest.strip_prefix("0x").or_else(|| rest.strip_prefix("0X"))?;
    let (mant, exp) = rest.split_once(['p', 'P'])?;
    let exp: i64 = exp.parse().ok()?;
    let (int_part, frac_part) = mant.split_once('.').unwrap_or((mant, ""));
    if frac_part.len() > 13 || int_part.len() != 1 {
        return None;
    }
    let lead = u64::from_str_radix(int_part, 16).ok()?;
    let frac = if frac_part.is_empty() {
        0
    } else {
        u64::from_str_radix(frac_part, 16).ok()? << (4 * (13 - frac_part.len()))
    };
    let bits = match lead {
        0 if frac == 0 => 0,
        0 => {
            if exp != -1022 {
                return None;
            }
            frac
        }
        1 => {
            let biased = exp + 1023;
            if !(1..=2046).contains(&biased) {
                return None;
            }
            ((biased as u64) << 52) | frac
        }
        _ => return None,
    };
    let v = f64::from_bits(bits);
    Some(if neg { -v } else { v })
}
