//! Report rendering: aligned plain-text tables plus a line-delimited
//! machine-readable variant. Published accuracies appear only as clearly
//! labeled static reference columns, never as expectations on desk runs.

use serde::Serialize;

pub const TASK_COLUMNS: [&str; 3] = ["snli_ve", "nlvr2", "ref_res"];

/// Freeze-study reference accuracies (dev) at published scale, row order
/// (text encoder, vision encoder): UU, FU, UF, FF.
pub const FREEZE_REFERENCE: [(&str, [f64; 3]); 4] = [
    ("unfrozen/unfrozen", [0.741, 0.672, 0.724]),
    ("frozen/unfrozen", [0.735, 0.675, 0.702]),
    ("unfrozen/frozen", [0.741, 0.672, 0.740]),
    ("frozen/frozen", [0.738, 0.665, 0.721]),
];

/// Frozen base-tower context row from the same study.
pub const FREEZE_REFERENCE_BASE: (&str, [f64; 3]) =
    ("base-frz/base-frz", [0.756, 0.630, 0.756]);

/// Initialization-source reference accuracies, rows: random init,
/// vision-encoder init, text-encoder init.
pub const INIT_REFERENCE: [(&str, [f64; 3]); 3] = [
    ("random", [0.699, 0.551, 0.554]),
    ("vision_init", [0.685, 0.534, 0.522]),
    ("text_init", [0.692, 0.545, 0.507]),
];

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub label: String,
    /// Published reference accuracy per task column.
    pub reference: Vec<f64>,
    /// Desk-scale accuracy per task column (None = not run).
    pub desk: Vec<Option<f64>>,
    pub trainable_params: u64,
    pub optimizer_state_elements: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridReport {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl GridReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.title);
        out.push('\n');
        out.push_str(&format!("{:<22}", "config"));
        for column in &self.columns {
            out.push_str(&format!(" {:>9}[ref]", column));
            out.push_str(&format!(" {:>10}[desk]", column));
        }
        out.push_str(&format!(" {:>12} {:>12}\n", "trainable", "opt-state"));
        for row in &self.rows {
            out.push_str(&format!("{:<22}", row.label));
            for (i, _) in self.columns.iter().enumerate() {
                out.push_str(&format!(" {:>14.3}", row.reference[i]));
                match row.desk[i] {
                    Some(v) => out.push_str(&format!(" {:>16.3}", v)),
                    None => out.push_str(&format!(" {:>16}", "-")),
                }
            }
            out.push_str(&format!(
                " {:>12} {:>12}\n",
                row.trainable_params, row.optimizer_state_elements
            ));
        }
        out
    }

    pub fn render_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}
