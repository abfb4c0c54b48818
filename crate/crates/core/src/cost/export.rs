use std::fmt::Write as _;

use super::{CostReport, Profile};

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    /// One row per stage (stem first) plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "stage",
            "params",
            "macs",
            "gflops",
            "macs_share",
            "out_shape",
        ])
        .expect("in-memory write");
        for s in &self.per_stage {
            w.write_record([
                s.name.clone(),
                s.params.to_string(),
                s.macs.to_string(),
                format!("{:.6}", s.macs as f64 / 1e9),
                format!("{:.6}", s.macs_share),
                s.out_shape.to_string(),
            ])
            .expect("in-memory write");
        }
        w.write_record([
            "total".to_string(),
            self.totals.params.to_string(),
            self.totals.macs.to_string(),
            format!("{:.6}", self.totals.gflops),
            "1.000000".to_string(),
            String::new(),
        ])
        .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Aligned text table ending with a `Params & GFLOPs` line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} @ {}", self.arch, self.input_shape);
        let _ = writeln!(
            out,
            "{:<10} {:>12} {:>10} {:>8}  output",
            "stage", "params", "GFLOPs", "share"
        );
        for s in &self.per_stage {
            let _ = writeln!(
                out,
                "{:<10} {:>12} {:>10.3} {:>7.2}%  {}",
                s.name,
                s.params,
                s.macs as f64 / 1e9,
                s.macs_share * 100.0,
                s.out_shape
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:>12} {:>10.3} {:>7.2}%",
            "total", self.totals.params, self.totals.gflops, 100.0
        );
        let _ = writeln!(
            out,
            "Params & GFLOPs: {:.2}M / {:.2}",
            self.totals.params as f64 / 1e6,
            self.totals.gflops
        );
        out
    }
}

impl Profile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    /// One row per boundary: share of MACs, cumulative stride and receptive field.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "stage",
            "macs_share",
            "cumulative_stride",
            "receptive_field",
        ])
        .expect("in-memory write");
        for ((s, stride), rf) in self
            .stages
            .iter()
            .zip(&self.stride.cumulative)
            .zip(&self.receptive_field)
        {
            w.write_record([
                s.name.clone(),
                format!("{:.6}", s.macs_share),
                stride.to_string(),
                rf.rf.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} @ {}", self.arch, self.input_shape);
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>7} {:>6}",
            "stage", "share", "stride", "rf"
        );
        for ((s, stride), rf) in self
            .stages
            .iter()
            .zip(&self.stride.cumulative)
            .zip(&self.receptive_field)
        {
            let bar = "#".repeat((s.macs_share * 40.0).round() as usize);
            let line = format!(
                "{:<10} {:>7.2}% {:>7} {:>6}  {}",
                s.name,
                s.macs_share * 100.0,
                stride,
                rf.rf,
                bar
            );
            let _ = writeln!(out, "{}", line.trim_end());
        }
        let _ = writeln!(out, "total stride {}", self.stride.total);
        out
    }
}
