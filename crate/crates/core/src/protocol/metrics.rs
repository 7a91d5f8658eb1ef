use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Test accuracies: row `r` is measured after training stage `r`, column `j`
/// is domain `j` in sequence order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub domains: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(domains: Vec<String>) -> Self {
        Self { domains, rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.domains.len() {
            return Err(Error::shape("accuracy matrix", format!("row of {} for {} domains", row.len(), self.domains.len())));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format { what: "accuracy", detail: format!("{bad} outside [0,1]") });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, stage: usize, domain: usize) -> f64 {
        self.rows[stage][domain]
    }

    /// `stage,<domain names>` header, then one row per stage with six decimals.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "stage,{}", self.domains.join(","))?;
        for (s, row) in self.rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{s},{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "matrix CSV", detail };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let domains: Vec<String> = header.split(',').skip(1).map(str::to_owned).collect();
        let mut m = Self::new(domains);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .skip(1)
                .map(|c| c.trim().parse::<f64>().map_err(|e| bad(format!("row {i}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            m.push_row(row)?;
        }
        Ok(m)
    }
}

/// Per-domain generalization (before its stage), adaptation (at its stage)
/// and forgetting alleviation (after its stage), with their averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub domains: Vec<String>,
    pub tdg: Vec<Option<f64>>,
    pub tda: Vec<f64>,
    pub fa: Vec<Option<f64>>,
    pub avg_tdg: Option<f64>,
    pub avg_tda: f64,
    pub avg_fa: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn compute_metrics(matrix: &AccuracyMatrix) -> Result<MetricsReport> {
    let t = matrix.domains.len();
    if matrix.rows.len() != t || t == 0 {
        return Err(Error::shape(
            "compute_metrics",
            format!("{} stage rows for {t} domains; need a square matrix", matrix.rows.len()),
        ));
    }
    let m = &matrix.rows;
    let tdg: Vec<Option<f64>> = (0..t).map(|j| mean((0..j).map(|r| m[r][j]))).collect();
    let tda: Vec<f64> = (0..t).map(|j| m[j][j]).collect();
    let fa: Vec<Option<f64>> = (0..t).map(|j| mean((j + 1..t).map(|r| m[r][j]))).collect();
    Ok(MetricsReport {
        domains: matrix.domains.clone(),
        avg_tdg: mean(tdg.iter().flatten().copied()),
        avg_tda: mean(tda.iter().copied()).unwrap_or(0.0),
        avg_fa: mean(fa.iter().flatten().copied()),
        tdg,
        tda,
        fa,
    })
}

/// Shortest representation that parses back to the same bits.
fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

impl MetricsReport {
    /// CSV with rows `tdg`, `tda`, `fa` and columns `<domains>,avg`; an absent
    /// value is an empty cell.
    pub fn to_csv(&self) -> String {
        let mut out = format!("metric,{},avg\n", self.domains.join(","));
        let rows: [(&str, Vec<Option<f64>>, Option<f64>); 3] = [
            ("tdg", self.tdg.clone(), self.avg_tdg),
            ("tda", self.tda.iter().map(|&v| Some(v)).collect(), Some(self.avg_tda)),
            ("fa", self.fa.clone(), self.avg_fa),
        ];
        for (name, values, avg) in rows {
            let cells: Vec<String> = values.into_iter().map(cell).collect();
            out.push_str(&format!("{name},{},{}\n", cells.join(","), cell(avg)));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "metrics CSV", detail };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty".into()))?.split(',').collect();
        if header.len() < 3 || header[0] != "metric" || header[header.len() - 1] != "avg" {
            return Err(bad("header must be metric,<domains>,avg".into()));
        }
        let domains: Vec<String> = header[1..header.len() - 1].iter().map(|s| s.to_string()).collect();
        let mut parsed = std::collections::HashMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(bad(format!("row {:?} has {} fields", fields[0], fields.len())));
            }
            let values = fields[1..]
                .iter()
                .map(|f| if f.is_empty() { Ok(None) } else { f.parse::<f64>().map(Some).map_err(|e| bad(e.to_string())) })
                .collect::<Result<Vec<Option<f64>>>>()?;
            parsed.insert(fields[0].to_string(), values);
        }
        let mut take = |name: &str| parsed.remove(name).ok_or_else(|| bad(format!("missing row {name}")));
        let (mut tdg, mut tda, mut fa) = (take("tdg")?, take("tda")?, take("fa")?);
        let (avg_tdg, avg_tda, avg_fa) = (tdg.pop().flatten(), tda.pop().flatten(), fa.pop().flatten());
        Ok(Self {
            domains,
            tdg,
            tda: tda.into_iter().map(|v| v.ok_or_else(|| bad("tda cannot be empty".into()))).collect::<Result<_>>()?,
            fa,
            avg_tdg,
            avg_tda: avg_tda.ok_or_else(|| bad("tda average missing".into()))?,
            avg_fa,
        })
    }

    /// Aligned table with a `metric` column and one column per domain,
    /// followed by a line of averages.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut rows = vec![std::iter::once("metric".to_string()).chain(self.domains.iter().cloned()).collect::<Vec<_>>()];
        let tda: Vec<Option<f64>> = self.tda.iter().map(|&v| Some(v)).collect();
        for (name, values) in [("TDG", &self.tdg), ("TDA", &tda), ("FA", &self.fa)] {
            rows.push(std::iter::once(name.to_string()).chain(values.iter().map(|&v| fmt(v))).collect());
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in rows {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            out.push_str(&cells.join("  "));
            out.push('\n');
        }
        out.push_str(&format!(
            "\naverage: TDG={} TDA={} FA={}\n",
            fmt(self.avg_tdg),
            fmt(Some(self.avg_tda)),
            fmt(self.avg_fa)
        ));
        out
    }
}
