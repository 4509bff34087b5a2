//! Experiment report assembly: per-condition rows, aggregates, and the CSV
//! emitted by `sweep`/`eval`. Formatting is fixed-precision so identical
//! runs produce byte-identical files.

use std::path::Path;

use anyhow::Result;

/// One (condition, family) result row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub condition_id: String,
    pub mode: String,
    pub schedule: String,
    pub rank: usize,
    pub n_start: usize,
    pub n_steps: usize,
    pub family: String,
    /// Percent in [0, 100].
    pub success_rate: f64,
    pub mean_final_err: f64,
    pub episodes: usize,
}

pub const CSV_HEADER: &str =
    "condition_id,mode,schedule,rank,n_start,N,family,success_rate,mean_final_err,episodes";

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.4},{:.6},{}",
            self.condition_id,
            self.mode,
            self.schedule,
            self.rank,
            self.n_start,
            self.n_steps,
            self.family,
            self.success_rate,
            self.mean_final_err,
            self.episodes
        )
    }
}

/// One top-1 retrieval decision. Retrieval happens before refinement, so a
/// (query, method) pair has one trace row regardless of how many conditions
/// reuse it; rows are grouped into one file per family.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub family: String,
    pub query_id: usize,
    pub method: String,
    pub retrieved_id: usize,
    pub score: f64,
}

pub const TRACE_HEADER: &str = "query_id,method,retrieved_id,score";

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6}",
            self.query_id, self.method, self.retrieved_id, self.score
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub trace: Vec<TraceRow>,
}

impl ExperimentReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    /// Trace CSV for one family's retrieval decisions.
    pub fn trace_csv(&self, family: &str) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for row in self.trace.iter().filter(|r| r.family == family) {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn trace_families(&self) -> Vec<String> {
        let mut fams = Vec::new();
        for row in &self.trace {
            if !fams.contains(&row.family) {
                fams.push(row.family.clone());
            }
        }
        fams
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.csv())?;
        Ok(())
    }

    /// One `retrieval_trace_<family>.csv` per family under `dir`.
    pub fn write_trace_csvs(&self, dir: &Path) -> Result<()> {
        for family in self.trace_families() {
            std::fs::write(
                dir.join(format!("retrieval_trace_{family}.csv")),
                self.trace_csv(&family),
            )?;
        }
        Ok(())
    }

    /// Episode-weighted aggregate success rate (percent) for one condition
    /// across families.
    pub fn aggregate_success(&self, condition_id: &str) -> Option<f64> {
        let mut hits = 0.0;
        let mut total = 0usize;
        for row in self.rows.iter().filter(|r| r.condition_id == condition_id) {
            hits += row.success_rate / 100.0 * row.episodes as f64;
            total += row.episodes;
        }
        if total == 0 {
            None
        } else {
            Some(100.0 * hits / total as f64)
        }
    }

    /// Episode-weighted aggregate mean final error for one condition.
    pub fn aggregate_final_err(&self, condition_id: &str) -> Option<f64> {
        let mut sum = 0.0;
        let mut total = 0usize;
        for row in self.rows.iter().filter(|r| r.condition_id == condition_id) {
            sum += row.mean_final_err * row.episodes as f64;
            total += row.episodes;
        }
        if total == 0 {
            None
        } else {
            Some(sum / total as f64)
        }
    }

    pub fn condition_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for row in &self.rows {
            if !ids.contains(&row.condition_id) {
                ids.push(row.condition_id.clone());
            }
        }
        ids
    }

    /// Human-readable summary: one line per condition with per-family and
    /// aggregate success rates.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let families: Vec<String> = {
            let mut f = Vec::new();
            for row in &self.rows {
                if !f.contains(&row.family) {
                    f.push(row.family.clone());
                }
            }
            f
        };
        out.push_str(&format!("{:<24}", "condition"));
        for fam in &families {
            out.push_str(&format!("{fam:>16}"));
        }
        out.push_str(&format!("{:>12}\n", "aggregate"));
        for id in self.condition_ids() {
            out.push_str(&format!("{id:<24}"));
            for fam in &families {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.condition_id == id && &r.family == fam)
                    .map(|r| format!("{:.1}", r.success_rate))
                    .unwrap_or_else(|| String::from("-"));
                out.push_str(&format!("{cell:>16}"));
            }
            let agg = self.aggregate_success(&id).unwrap_or(f64::NAN);
            out.push_str(&format!("{agg:>12.1}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, family: &str, rate: f64, err: f64, eps: usize) -> ReportRow {
        ReportRow {
            condition_id: id.into(),
            mode: "ret-ste".into(),
            schedule: "tuned".into(),
            rank: 1,
            n_start: 500,
            n_steps: 1000,
            family: family.into(),
            success_rate: rate,
            mean_final_err: err,
            episodes: eps,
        }
    }

    #[test]
    fn csv_layout_matches_schema() {
        let mut rep = ExperimentReport::default();
        rep.rows.push(row("a", "reach", 62.5, 1.25, 16));
        let csv = rep.csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "a,ret-ste,tuned,1,500,1000,reach,62.5000,1.250000,16"
        );
        assert!(lines.next().is_none());
    }

    #[test]
    fn aggregates_are_episode_weighted() {
        let mut rep = ExperimentReport::default();
        rep.rows.push(row("a", "reach", 100.0, 1.0, 10));
        rep.rows.push(row("a", "bimodal-avoid", 0.0, 3.0, 30));
        let agg = rep.aggregate_success("a").unwrap();
        assert!((agg - 25.0).abs() < 1e-12);
        let err = rep.aggregate_final_err("a").unwrap();
        assert!((err - 2.5).abs() < 1e-12);
        assert!(rep.aggregate_success("missing").is_none());
    }

    #[test]
    fn summary_lists_all_conditions() {
        let mut rep = ExperimentReport::default();
        rep.rows.push(row("a", "reach", 50.0, 1.0, 4));
        rep.rows.push(row("b", "reach", 25.0, 2.0, 4));
        let s = rep.summary();
        assert!(s.contains("a"));
        assert!(s.contains("b"));
        assert!(s.contains("50.0"));
        assert!(s.contains("25.0"));
    }
}
