//! Output formatting shared by every file the crate writes.
//!
//! Floats are printed with 17 significant digits in scientific notation,
//! which round-trips every finite `f64` exactly and is also a valid JSON
//! number.

use std::fmt::Write;

pub fn f17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// JSON encoding of a float; non-finite values become `null`.
pub fn json_f64(x: f64) -> String {
    if x.is_finite() {
        f17(x)
    } else {
        "null".to_string()
    }
}

pub fn json_str(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Minimal ordered JSON object writer.
#[derive(Debug, Default, Clone)]
pub struct JsonObject {
    fields: Vec<(String, String)>,
}

impl JsonObject {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn float(mut self, key: &str, value: f64) -> Self {
        self.fields.push((key.to_string(), json_f64(value)));
        self
    }

    pub fn opt_float(mut self, key: &str, value: Option<f64>) -> Self {
        let v = value.map_or_else(|| "null".to_string(), json_f64);
        self.fields.push((key.to_string(), v));
        self
    }

    pub fn int(mut self, key: &str, value: i128) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn string(mut self, key: &str, value: &str) -> Self {
        self.fields.push((key.to_string(), json_str(value)));
        self
    }

    pub fn boolean(mut self, key: &str, value: bool) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    /// Insert an already-encoded JSON value.
    pub fn raw(mut self, key: &str, encoded: String) -> Self {
        self.fields.push((key.to_string(), encoded));
        self
    }

    pub fn finish(&self) -> String {
        let mut out = String::from("{");
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&json_str(k));
            out.push(':');
            out.push_str(v);
        }
        out.push('}');
        out
    }
}

pub fn json_array(items: impl IntoIterator<Item = String>) -> String {
    let items: Vec<String> = items.into_iter().collect();
    format!("[{}]", items.join(","))
}
