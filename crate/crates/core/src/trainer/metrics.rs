//! Metrics accumulation and the CSV log. One generator row and one student
//! row per epoch (phase summaries), plus one eval row per epoch.

use crate::losses::GeneratorLossTerms;

pub const CSV_HEADER: &str = "epoch,phase,loss_ce,loss_adv,loss_bn,loss_cam,loss_aed,loss_kl,loss_ed,pool_units,top1,top5,wall_seconds";

fn f(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    rows: Vec<String>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog { rows: Vec::new() }
    }

    /// Generator-phase summary. `terms` is `None` when the phase was a
    /// budget-exhausted no-op; loss cells stay empty in that case.
    pub fn push_generator_row(
        &mut self,
        epoch: usize,
        terms: Option<GeneratorLossTerms>,
        pool_units: f64,
        wall_seconds: f64,
    ) {
        let cells = match terms {
            Some(t) => format!("{},{},{},{},{}", f(t.ce), f(t.adv), f(t.bn), f(t.cam), f(t.aed)),
            None => ",,,,".to_string(),
        };
        self.rows.push(format!(
            "{epoch},generator,{cells},,,{},,,{:.3}",
            f(pool_units),
            wall_seconds
        ));
    }

    pub fn push_student_row(
        &mut self,
        epoch: usize,
        kl: f64,
        ed: f64,
        pool_units: f64,
        wall_seconds: f64,
    ) {
        self.rows.push(format!(
            "{epoch},student,,,,,,{},{},{},,,{:.3}",
            f(kl),
            f(ed),
            f(pool_units),
            wall_seconds
        ));
    }

    pub fn push_eval_row(
        &mut self,
        epoch: usize,
        top1: f64,
        top5: f64,
        pool_units: f64,
        wall_seconds: f64,
    ) {
        self.rows.push(format!(
            "{epoch},eval,,,,,,,,{},{top1:.4},{top5:.4},{wall_seconds:.3}",
            f(pool_units)
        ));
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    /// Restore from previously written CSV text (resume path).
    pub fn from_csv(text: &str) -> crate::error::Result<MetricsLog> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            _ => return Err(crate::error::Error::Format("metrics CSV header mismatch".into())),
        }
        Ok(MetricsLog { rows: lines.map(|l| l.to_string()).collect() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_row_shapes() {
        let mut log = MetricsLog::new();
        log.push_generator_row(
            0,
            Some(GeneratorLossTerms { ce: 1.0, adv: -0.5, bn: 2.0, cam: 0.25, aed: 0.01 }),
            12.5,
            0.0,
        );
        log.push_student_row(0, 0.9, 0.001, 12.5, 0.0);
        log.push_eval_row(0, 85.1234, 99.0, 12.5, 0.0);
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        let cols = CSV_HEADER.split(',').count();
        for line in &lines {
            assert_eq!(line.split(',').count(), cols, "bad arity in {line}");
        }
        assert!(lines[1].starts_with("0,generator,1.000000,-0.500000,"));
        assert!(lines[2].contains(",student,"));
        assert!(lines[3].contains(",eval,"));
        assert!(lines[3].contains("85.1234"));
    }

    #[test]
    fn exhausted_generator_row_has_empty_losses() {
        let mut log = MetricsLog::new();
        log.push_generator_row(3, None, 200.0, 0.0);
        let csv = log.to_csv();
        assert!(csv.lines().nth(1).unwrap().starts_with("3,generator,,,,,,"));
    }

    #[test]
    fn csv_round_trip() {
        let mut log = MetricsLog::new();
        log.push_eval_row(0, 10.0, 50.0, 0.0, 0.0);
        let restored = MetricsLog::from_csv(&log.to_csv()).unwrap();
        assert_eq!(restored.to_csv(), log.to_csv());
        assert!(MetricsLog::from_csv("bogus\n1,2\n").is_err());
    }
}
