//! Evaluation report: per-action, per-horizon MPJPE, per-joint errors, and
//! the CSV/table emitters.
//!
//! The aligned text tables are rendered from the CSV text, never computed
//! independently.

/// One action category's mean errors per horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionRow {
    pub action: String,
    pub count: usize,
    pub mpjpe: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub horizons_ms: Vec<u32>,
    pub rows: Vec<ActionRow>,
    /// Sample-weighted mean per horizon.
    pub overall: Vec<f64>,
    /// Mean error per joint over all samples and future frames.
    pub per_joint: Vec<f64>,
    pub sample_count: usize,
}

impl EvalReport {
    /// Header: `action,count,mpjpe_<h>ms,...`; final row is `overall`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("action,count");
        for h in &self.horizons_ms {
            out.push_str(&format!(",mpjpe_{h}ms"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.action, row.count));
            for v in &row.mpjpe {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("overall,{}", self.sample_count));
        for v in &self.overall {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
        out
    }

    /// Header: `joint,mean_error_mm`; one row per joint.
    pub fn per_joint_csv(&self) -> String {
        let mut out = String::from("joint,mean_error_mm\n");
        for (j, v) in self.per_joint.iter().enumerate() {
            out.push_str(&format!("{j},{v}\n"));
        }
        out
    }
}

/// Renders any of the emitted CSVs as an aligned-column text table.
pub fn render_table(csv: &str) -> String {
    let rows: Vec<Vec<String>> = csv
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| format_cell(c)).collect())
        .collect();
    if rows.is_empty() {
        return String::new();
    }
    let cols = rows.iter().map(|r| r.len()).max().unwrap();
    let mut widths = vec![0usize; cols];
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for (ri, row) in rows.iter().enumerate() {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            if i == 0 {
                line.push_str(&format!("{:<width$}", cell, width = widths[i]));
            } else {
                line.push_str(&format!("{:>width$}", cell, width = widths[i]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if ri == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// Numeric cells are shortened for display; everything else passes through.
fn format_cell(cell: &str) -> String {
    match cell.parse::<f64>() {
        Ok(v) if cell.contains('.') || cell.contains('e') => format!("{v:.2}"),
        _ => cell.to_string(),
    }
}
