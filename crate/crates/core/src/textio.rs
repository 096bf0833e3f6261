//! Text serialization helpers.
//!
//! All floating-point values written by this crate go through [`fmt_f64`] so
//! that primary outputs are byte-identical across reruns and round-trip
//! losslessly: 17 significant decimal digits uniquely identify an `f64`.

/// Format with 17 significant digits in scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// JSON array of floats on one line.
pub fn json_f64_array(xs: &[f64]) -> String {
    let mut s = String::with_capacity(xs.len() * 24 + 2);
    s.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&fmt_f64(*x));
    }
    s.push(']');
    s
}

/// JSON array of integers on one line.
pub fn json_usize_array(xs: &[usize]) -> String {
    let mut s = String::with_capacity(xs.len() * 8 + 2);
    s.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&x.to_string());
    }
    s.push(']');
    s
}

/// Minimal JSON string escaping (the strings we emit are plain identifiers,
/// but keep the writer correct anyway).
pub fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trips_bit_exactly() {
        for &x in &[
            0.0,
            -0.0,
            1.0,
            std::f64::consts::PI,
            1.0 / 3.0,
            -2.2250738585072014e-308,
            6.02214076e23,
        ] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn arrays_are_valid_json() {
        let s = json_f64_array(&[1.0, -0.5]);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
    }
}
