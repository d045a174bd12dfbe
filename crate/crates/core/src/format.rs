//! Number formatting shared by every CSV writer.

/// Scientific notation with 17 significant digits; parses back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
