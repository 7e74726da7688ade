//! Trace rows and their CSV form.

use std::fmt::Write as _;

pub const TRACE_HEADER: &str = "k,conv_err,model_var,accuracy,grad_noise,lyapunov,wall_ms";

/// One logged round. `None` fields are written as empty CSV cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub k: u64,
    pub conv_err: Option<f64>,
    pub model_var: f64,
    pub accuracy: Option<f64>,
    pub grad_noise: Option<f64>,
    pub lyapunov: Option<f64>,
    pub wall_ms: Option<f64>,
}

impl MetricsRow {
    /// Copy with every error-like metric pinned at `f64::MAX`; used for the
    /// final row of a diverged run.
    pub fn saturated(k: u64, template: &MetricsRow) -> Self {
        let sat = |v: Option<f64>| v.map(|_| f64::MAX);
        Self {
            k,
            conv_err: sat(template.conv_err),
            model_var: f64::MAX,
            accuracy: template.accuracy.map(|_| 0.0),
            grad_noise: sat(template.grad_noise),
            lyapunov: sat(template.lyapunov),
            wall_ms: template.wall_ms,
        }
    }
}

fn cell(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(v) = v {
        let _ = write!(out, "{v:e}");
    }
}

/// Rows in round order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub rows: Vec<MetricsRow>,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.k);
            cell(&mut out, r.conv_err);
            cell(&mut out, Some(r.model_var));
            cell(&mut out, r.accuracy);
            cell(&mut out, r.grad_noise);
            cell(&mut out, r.lyapunov);
            cell(&mut out, r.wall_ms);
            out.push('\n');
        }
        out
    }

    /// Rows in the last `fraction` of the trace (at least one).
    pub fn final_window(&self, fraction: f64) -> &[MetricsRow] {
        let n = self.rows.len();
        let take = ((n as f64 * fraction).ceil() as usize).clamp(1.min(n), n);
        &self.rows[n - take..]
    }

    /// Mean of a column over the final window, skipping empty cells.
    pub fn final_mean(&self, fraction: f64, column: impl Fn(&MetricsRow) -> Option<f64>) -> Option<f64> {
        let values: Vec<f64> = self.final_window(fraction).iter().filter_map(column).collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}
