use serde::Serialize;

use super::MetricsReport;

#[derive(Serialize)]
struct Record<'a> {
    name: &'a str,
    #[serde(flatten)]
    metrics: &'a MetricsReport,
}

/// One JSON object per named row.
pub fn metrics_lines(rows: &[(String, MetricsReport)]) -> String {
    rows.iter()
        .map(|(name, metrics)| serde_json::to_string(&Record { name, metrics }).expect("metrics serialize") + "\n")
        .collect()
}

/// Aligned plain-text table with metrics in percent.
pub fn metrics_table(rows: &[(String, MetricsReport)]) -> String {
    let header = ["", "ACC%", "SEN%", "SPE%", "F1%"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|(name, m)| {
            [
                name.clone(),
                format!("{:.2}", 100.0 * m.acc),
                format!("{:.2}", 100.0 * m.sen),
                format!("{:.2}", 100.0 * m.spe),
                format!("{:.2}", 100.0 * m.f1),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut push = |cells: &[&str]| {
        let line: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    };
    push(&header);
    for row in &body {
        push(&row.each_ref().map(String::as_str));
    }
    out
}
