//! CSV renderings of run logs and diagnostics. Numbers use Rust's
//! shortest round-trip formatting; missing values are empty fields.

use std::fmt::Write;

use crate::dynamics::{PropagationTrace, Theorem1Report};
use crate::spectral::SimilarityMatrix;

use super::experiments::{DepthRow, GradProfile};
use super::train::RunLog;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_step(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Every `log_every`-th step plus the first and last.
pub fn runlog_csv(log: &RunLog, log_every: usize) -> String {
    let mut s = String::from("step,loss,ema,lr,grad_norm,aborted\n");
    let last = log.records.len();
    for (i, r) in log.records.iter().enumerate() {
        if i == 0 || i + 1 == last || r.step % log_every.max(1) == 0 {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.loss, r.ema, r.lr, r.grad_norm, r.aborted as u8);
        }
    }
    s
}

const TRACE_HEADER: &str = "layer,var,sigma_a,sigma_z,gnorm_act,gnorm_w2";

fn trace_rows(s: &mut String, prefix: &str, t: &PropagationTrace) {
    let rows = t.var.len().max(t.gnorm_act.len());
    for i in 0..rows {
        let _ = writeln!(
            s,
            "{prefix}{},{},{},{},{},{}",
            i + 1,
            opt(t.var.get(i).copied()),
            opt(t.sigma_a.get(i).copied()),
            opt(t.sigma_z.get(i).copied()),
            opt(t.gnorm_act.get(i).copied()),
            opt(t.gnorm_w2.get(i).copied()),
        );
    }
}

/// One row per layer boundary `l = 1..=L+1`: `Var(X'_l)` and `‖∂L/∂X'_l‖`,
/// with block `l`'s branch stds and `W_2` gradient norm (empty on the last
/// row and past a truncation).
pub fn trace_csv(trace: &PropagationTrace) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    trace_rows(&mut s, "", trace);
    s
}

/// [`trace_csv`] for several snapshots, keyed by the leading `step` column.
pub fn trace_snapshots_csv(traces: &[(usize, PropagationTrace)]) -> String {
    let mut s = format!("step,{TRACE_HEADER}\n");
    for (step, t) in traces {
        trace_rows(&mut s, &format!("{step},"), t);
    }
    s
}

/// Pairwise entries, then distance aggregates.
pub fn simcos_csv(sim: &SimilarityMatrix) -> String {
    let mut s = String::from("kind,i,j,value\n");
    for i in 0..sim.layers {
        for j in 0..sim.layers {
            let _ = writeln!(s, "pair,{},{},{}", i + 1, j + 1, sim.get(i, j));
        }
    }
    for (k, v) in sim.by_distance.iter().enumerate() {
        let _ = writeln!(s, "distance,{k},,{v}");
    }
    s
}

pub fn depth_csv(rows: &[DepthRow]) -> String {
    let mut s = String::from("depth,initial_loss,final_ema,diverged_at\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.depth, r.initial_loss, r.final_ema, opt_step(r.diverged_at));
    }
    s
}

/// One row per (lr, layer).
pub fn gradprofile_csv(profiles: &[GradProfile]) -> String {
    let mut s = String::from("lr,layer,w2_grad_norm,final_ema,diverged_at\n");
    for p in profiles {
        for (l, g) in p.w2_norms.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{}", p.lr, l + 1, g, p.final_ema, opt_step(p.diverged_at));
        }
    }
    s
}

pub fn theorem1_csv(report: &Theorem1Report) -> String {
    let mut s = String::from("depth,ffn_branch_variance\n");
    for (d, v) in report.depths.iter().zip(&report.variances) {
        let _ = writeln!(s, "{d},{v}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::StepRecord;

    #[test]
    fn trace_rows_align_blocks_with_boundaries() {
        let t = PropagationTrace {
            var: vec![1.0, 2.0, 3.0],
            sigma_a: vec![0.5, 0.6],
            sigma_z: vec![0.7, 0.8],
            gnorm_act: vec![9.0, 8.0, 7.0],
            gnorm_w2: vec![0.1, 0.2],
            loss: 1.0,
            truncated_at: None,
        };
        let csv = trace_csv(&t);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,var,sigma_a,sigma_z,gnorm_act,gnorm_w2");
        assert_eq!(lines[1], "1,1,0.5,0.7,9,0.1");
        assert_eq!(lines[3], "3,3,,,7,");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn runlog_strides_keep_endpoints() {
        let rec = |step| StepRecord {
            step,
            loss: 1.0,
            ema: 1.0,
            lr: 0.1,
            grad_norm: 2.0,
            aborted: false,
        };
        let log = RunLog {
            records: (1..=25).map(rec).collect(),
            ..RunLog::default()
        };
        let steps: Vec<String> = runlog_csv(&log, 10)
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().to_string())
            .collect();
        assert_eq!(steps, ["1", "10", "20", "25"]);
    }
}
