//! Number formatting for the CSV outputs.

/// C-style `%.{digits}g`: `digits` significant digits, trailing zeros
/// trimmed, scientific notation outside `1e-5 <= |v| < 10^digits`.
pub fn sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let digits = digits.max(1);
    // Exponent after rounding to the requested precision.
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::sig;

    #[test]
    fn matches_printf_g() {
        assert_eq!(sig(3.674601583, 12), "3.674601583");
        assert_eq!(sig(1.0, 12), "1");
        assert_eq!(sig(0.25, 9), "0.25");
        assert_eq!(sig(2.0 / 3.0, 9), "0.666666667");
        assert_eq!(sig(-0.5, 9), "-0.5");
        assert_eq!(sig(1e-7, 6), "1e-07");
        assert_eq!(sig(123456789.0, 4), "1.235e+08");
        assert_eq!(sig(9.9999999999, 3), "10");
        assert_eq!(sig(0.0001234, 3), "0.000123");
        assert_eq!(sig(0.0, 12), "0");
    }
}
