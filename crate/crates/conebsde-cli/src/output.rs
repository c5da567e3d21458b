//! Writers for the JSON and CSV artifacts.
//!
//! Floats are printed in scientific notation with 17 significant digits so
//! that every value parses back to the same `f64`. Object keys keep their
//! insertion order.

use std::fmt::Write;

use serde::Serialize;
use serde_json::Value;

/// `x` with 17 significant digits. Non-finite values become `null` in JSON
/// and `NaN`/`inf` in CSV.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn json_number(n: &serde_json::Number) -> String {
    if n.is_f64() {
        let x = n.as_f64().expect("f64 number");
        if x.is_finite() {
            fmt_f64(x)
        } else {
            "null".into()
        }
    } else {
        n.to_string()
    }
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&json_number(n)),
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            // Numeric rows stay on one line to keep matrices readable.
            if items.iter().all(|i| i.is_number() || i.is_null()) {
                out.push('[');
                for (k, i) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, i, indent);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (k, i) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_value(out, i, indent + 1);
                if k + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (k, (key, val)) in map.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&serde_json::to_string(key).expect("key serializes"));
                out.push_str(": ");
                write_value(out, val, indent + 1);
                if k + 1 < map.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string(v: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, v, 0);
    out.push('\n');
    out
}

pub fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("report types serialize")
}

/// Numeric table written as CSV or as a JSON object of columns and rows.
/// The first `index_columns` columns hold integers.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub index_columns: usize,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Table {
            columns,
            rows: Vec::new(),
            index_columns: 0,
        }
    }

    pub fn with_index_columns(mut self, n: usize) -> Self {
        self.index_columns = n;
        self
    }

    fn cell(&self, k: usize, x: f64) -> String {
        if k < self.index_columns {
            format!("{}", x as i64)
        } else {
            fmt_f64(x)
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            for (k, x) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, "{}", self.cell(k, *x)).expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                Value::Array(
                    r.iter()
                        .enumerate()
                        .map(|(k, x)| if k < self.index_columns { Value::from(*x as i64) } else { num(*x) })
                        .collect(),
                )
            })
            .collect();
        let mut m = serde_json::Map::new();
        m.insert("columns".into(), Value::Array(self.columns.iter().map(|c| Value::String(c.clone())).collect()));
        m.insert("rows".into(), Value::Array(rows));
        Value::Object(m)
    }
}

/// JSON number for `x`, `null` when not finite.
pub fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

/// Column names `prefix_ij` for the upper triangle of a `d x d` matrix.
pub fn upper_names(prefix: &str, d: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..d {
        for j in i..d {
            if d < 10 {
                out.push(format!("{prefix}_{}{}", i + 1, j + 1));
            } else {
                out.push(format!("{prefix}_{}_{}", i + 1, j + 1));
            }
        }
    }
    out
}

pub fn vector_names(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}_{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn floats_round_trip_with_17_digits() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s.split('e').next().unwrap().replace(['-', '.'], "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn json_keeps_key_order_and_parses_back() {
        let v = json!({"zeta": 1.5, "alpha": [1, 2.25], "mid": {"b": null, "a": "x"}});
        let s = to_json_string(&v);
        assert!(s.find("zeta").unwrap() < s.find("alpha").unwrap());
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["alpha"][1].as_f64(), Some(2.25));
        assert_eq!(back["alpha"][0].as_u64(), Some(1));
    }

    #[test]
    fn csv_has_header_and_lf_endings() {
        let mut t = Table::new(vec!["t".into(), "x".into()]);
        t.push(vec![0.0, 1.0]);
        t.push(vec![0.5, f64::NAN]);
        let s = t.to_csv();
        assert!(!s.contains('\r'));
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "t,x");
        assert_eq!(lines.len(), 3);
        assert_eq!(upper_names("g", 2), ["g_11", "g_12", "g_22"]);
        let mut t = Table::new(vec!["path".into(), "x".into()]).with_index_columns(1);
        t.push(vec![3.0, 0.5]);
        assert_eq!(t.to_csv(), "path,x\n3,5.0000000000000000e-1\n");
    }
}
