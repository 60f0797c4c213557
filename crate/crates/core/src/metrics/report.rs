use std::fmt::Write as _;
use std::path::Path;

use super::MetricsReport;
use crate::error::Result;

pub const CSV_HEADER: &str = "label,case,realization,reference_d95_gy,mse,mse_body,dvh_error_ptv,dvh_error_body,\
d95,d98,d99,d95_error,d98_error,d99_error,dice10,dice30,dice50,dice70,dice80,dice90,dice_mean";

/// One evaluated dose map. `label` names the source, e.g. `noisy` or `denoised`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub case: usize,
    pub realization: usize,
    pub report: MetricsReport,
}

impl MetricsRow {
    fn csv_line(&self) -> String {
        let r = &self.report;
        let mut s = format!("{},{},{}", self.label, self.case, self.realization);
        let values = [
            r.reference_d95, r.mse, r.mse_body, r.dvh_error_ptv, r.dvh_error_body, r.d95, r.d98, r.d99,
            r.d95_error, r.d98_error, r.d99_error,
        ];
        for v in values.iter().chain(&r.dice).chain(std::iter::once(&r.dice_mean)) {
            write!(s, ",{v:e}").unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

/// Population mean and standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsTable {
    pub fn push(&mut self, label: &str, case: usize, realization: usize, report: MetricsReport) {
        self.rows.push(MetricsRow { label: label.to_string(), case, realization, report });
    }

    /// Labels in order of first appearance.
    pub fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label.as_str()) {
                out.push(&r.label);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean and standard deviation per label of MSE, PTV DVH error, D95/D98/D99
    /// error (in percent) and mean isodose Dice.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:<12} {:>4}  {:<20} {:<20} {:<16} {:<16} {:<16} {:<20}\n",
            "label", "n", "MSE", "DVH error", "D95", "D98", "D99", "Isodose"
        );
        for label in self.labels() {
            let rows: Vec<&MetricsReport> =
                self.rows.iter().filter(|r| r.label == label).map(|r| &r.report).collect();
            let col = |f: fn(&MetricsReport) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let sci = |(m, sd): (f64, f64)| format!("{m:.2e}({sd:.1e})");
            let pct = |(m, sd): (f64, f64)| format!("{:.2}% ({:.3}%)", 100.0 * m, 100.0 * sd);
            let (dm, dsd) = col(|r| r.dice_mean);
            writeln!(
                s,
                "{:<12} {:>4}  {:<20} {:<20} {:<16} {:<16} {:<16} {:<20}",
                label,
                rows.len(),
                sci(col(|r| r.mse)),
                sci(col(|r| r.dvh_error_ptv)),
                pct(col(|r| r.d95_error)),
                pct(col(|r| r.d98_error)),
                pct(col(|r| r.d99_error)),
                format!("{dm:.3}({dsd:.2e})"),
            )
            .unwrap();
        }
        s
    }
}
