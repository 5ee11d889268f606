//! Number formatting shared by CSV writers.

/// Formats `x` with six significant digits, trimming trailing zeros.
///
/// Non-finite values print as `nan`, `inf` and `-inf`.
pub fn sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&exp) {
        let s = format!("{:.5e}", x);
        let (mant, e) = s.split_once('e').expect("exponent form");
        return format!("{}e{}", trim(mant), e);
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{:.*}", decimals, x);
    // rounding can carry into a new leading digit (9.999995 -> 10.00000)
    trim(&s).to_string()
}

fn trim(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
