//! Human-readable tables and structured-text summaries.

use std::fmt::Write;

use aaclite_core::analysis::{ClassRates, CostReport, MetricsReport};
use aaclite_core::data::Risk;
use serde_json::{json, Value};

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.2}", 100.0 * v))
}

/// One-vs-rest rates in percent per class and their mean, then Pearson r,
/// R² and the confusion matrix (rows true, columns predicted).
pub fn metrics_table(m: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>9} {:>9} {:>9} {:>9}",
        "(%)", "Low", "Moderate", "High", "Mean"
    );
    let rows: Vec<[Option<f64>; 5]> = m
        .rates
        .per_class
        .iter()
        .chain([&m.rates.mean])
        .map(ClassRates::values)
        .collect();
    for (k, name) in ClassRates::NAMES.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>9} {:>9} {:>9}",
            name,
            cell(rows[0][k]),
            cell(rows[1][k]),
            cell(rows[2][k]),
            cell(rows[3][k])
        );
    }
    let num = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"));
    let _ = writeln!(s, "Pearson r    {}", num(m.pearson_r));
    let _ = writeln!(s, "R^2          {}", num(m.r_squared));
    let _ = writeln!(s, "n            {}", m.n);
    let _ = writeln!(s, "confusion (rows true, columns predicted)");
    let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8}", "", "Low", "Moderate", "High");
    for (r, row) in Risk::ALL.iter().zip(&m.confusion.0) {
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>8} {:>8}",
            r.name(),
            row[0],
            row[1],
            row[2]
        );
    }
    s
}

fn rates_json(r: &ClassRates) -> Value {
    let mut o = serde_json::Map::new();
    for (name, v) in ClassRates::NAMES.iter().zip(r.values()) {
        o.insert(name.to_lowercase(), json!(v));
    }
    Value::Object(o)
}

pub fn metrics_json(m: &MetricsReport) -> Value {
    let per_class: serde_json::Map<String, Value> = Risk::ALL
        .iter()
        .zip(&m.rates.per_class)
        .map(|(risk, r)| (risk.name().to_lowercase(), rates_json(r)))
        .collect();
    json!({
        "n": m.n,
        "per_class": per_class,
        "mean": rates_json(&m.rates.mean),
        "pearson_r": m.pearson_r,
        "r_squared": m.r_squared,
        "confusion": m.confusion.0,
    })
}

/// Per-layer table followed by totals, which are the column sums.
pub fn profile_table(r: &CostReport) -> String {
    let width = r
        .layers
        .iter()
        .map(|l| l.name.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$} {:>12} {:>16}  output",
        "layer", "params", "flops"
    );
    for l in &r.layers {
        let shape: Vec<String> = l.output_shape.iter().map(usize::to_string).collect();
        let _ = writeln!(
            s,
            "{:<width$} {:>12} {:>16}  {}",
            l.name,
            l.params,
            l.flops,
            shape.join("x")
        );
    }
    let _ = writeln!(
        s,
        "{:<width$} {:>12} {:>16}",
        "total", r.total_params, r.total_flops
    );
    let _ = writeln!(s, "{}", profile_summary(r));
    s
}

pub fn profile_summary(r: &CostReport) -> String {
    format!("{:.2} GFLOPs / {:.2} M params", r.gflops(), r.mparams())
}

#[cfg(test)]
mod tests {
    use super::*;
    use aaclite_core::analysis::profile;
    use aaclite_core::model::ModelConfig;

    #[test]
    fn profile_totals_are_column_sums() {
        let r = profile(&ModelConfig::shrunken()).unwrap();
        let table = profile_table(&r);
        let (mut p, mut f) = (0u64, 0u64);
        let mut total = None;
        for line in table.lines().skip(1) {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() < 3 {
                continue;
            }
            let (Ok(a), Ok(b)) = (cols[1].parse::<u64>(), cols[2].parse::<u64>()) else {
                continue;
            };
            if cols[0] == "total" {
                total = Some((a, b));
            } else {
                p += a;
                f += b;
            }
        }
        assert_eq!(total, Some((p, f)));
        assert_eq!(total, Some((r.total_params, r.total_flops)));
    }
}
