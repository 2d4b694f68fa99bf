//! Locale-independent number formatting with 17 significant digits, enough to
//! round-trip any `f64` exactly.

/// Formats `x` with exactly 17 significant digits.
///
/// Magnitudes in `[1e-5, 1e17)` are written positionally, others in scientific
/// notation. Zero is written as `0`, non-finite values as `NaN`, `inf`, `-inf`.
pub fn sig17(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.16e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let sign = if x < 0.0 { "-" } else { "" };
    if !(-5..17).contains(&exp) {
        return format!("{sign}{mantissa}e{exp}");
    }
    if exp >= 0 {
        let split = exp as usize + 1;
        let (int_part, frac_part) = digits.split_at(split);
        if frac_part.is_empty() {
            format!("{sign}{int_part}")
        } else {
            format!("{sign}{int_part}.{frac_part}")
        }
    } else {
        let zeros = "0".repeat((-exp - 1) as usize);
        format!("{sign}0.{zeros}{digits}")
    }
}
