use std::fmt::Write as _;

use super::{EvalReport, GroupRow};

fn status(row: &GroupRow) -> &'static str {
    if row.total == 0 {
        "empty"
    } else if row.is_partial() {
        "partial"
    } else {
        "complete"
    }
}

fn cell(p: Option<super::Percent>) -> String {
    p.map_or(String::new(), |p| p.to_string())
}

impl EvalReport {
    /// Machine-readable table: one line per group and a final `overall` line.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "correct", "total", "accuracy", "status", "flags"]).expect("in-memory write");
        for row in &self.rows {
            w.write_record([
                row.group.as_str(),
                &row.correct.to_string(),
                &row.total.to_string(),
                &cell(row.accuracy),
                status(row),
                &row.flags.join(";"),
            ])
            .expect("in-memory write");
        }
        let overall_status = if self.is_partial() { "partial" } else { "complete" };
        w.write_record(["overall", "", "", &cell(self.overall), overall_status, ""]).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    /// Sample-level verdicts as CSV.
    pub fn verdicts_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_id", "group", "correct", "detail"]).expect("in-memory write");
        for v in &self.verdicts {
            w.write_record([v.sample_id.as_str(), &v.group, if v.correct { "yes" } else { "no" }, &v.detail])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {} report\n", self.task.slug());
        for (k, v) in &self.meta {
            let _ = writeln!(out, "- {k}: {v}");
        }
        if !self.meta.is_empty() {
            out.push('\n');
        }
        out.push_str("| group | correct | total | accuracy | status | flags |\n");
        out.push_str("|---|---:|---:|---:|---|---|\n");
        for row in &self.rows {
            let acc = row.accuracy.map_or("-".to_string(), |p| p.to_string());
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                row.group,
                row.correct,
                row.total,
                acc,
                status(row),
                row.flags.join(", ")
            );
        }
        if let Some(p) = self.overall {
            let _ = writeln!(out, "\nOverall: {p}");
        }
        let d = &self.diagnostics;
        let _ = writeln!(
            out,
            "\nDiagnostics: {} parse failures, {} backend errors, {} skipped fragments, {} malformed records, \
             {} normalized ids, {} synthesized snapshots, {} out-of-bounds coordinates.",
            d.parse_failures,
            d.backend_errors,
            d.skipped_fragments,
            d.malformed_records,
            d.normalized_ids,
            d.memory_synthesized,
            d.out_of_bounds_coordinates
        );
        if !self.warnings.is_empty() {
            out.push_str("\nWarnings:\n");
            for w in &self.warnings {
                let _ = writeln!(out, "- {w}");
            }
        }
        out
    }
}
