//! CSV and plain-text renderings of reports and training traces.

use std::fmt::Write as _;

use mlsa_core::eval::{EvalReport, ReportRow};
use mlsa_core::samplers::GanTrace;
use mlsa_core::vae::TrainTrace;

use crate::pipeline::{Ablation, VariantDiagnostics};

pub const EVAL_COLUMNS: &str = "combination,correctness,distinct1,distinct2,nll_proxy,seconds_per_sample";

fn eval_row(r: &ReportRow) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6e}",
        r.combination, r.correctness, r.distinct1, r.distinct2, r.nll_proxy, r.seconds_per_sample
    )
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = format!("{EVAL_COLUMNS}\n");
    for r in &report.rows {
        let _ = writeln!(out, "{}", eval_row(r));
    }
    let _ = writeln!(out, "{}", eval_row(&report.average));
    out
}

/// Aligned table with one line per combination and a closing average line.
pub fn eval_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let total = report.total_samples();
    if total == 0 {
        out.push_str("n=0 (no sequences to evaluate)\n");
    }
    let _ = writeln!(
        out,
        "{:<12} {:>6} {:>11} {:>9} {:>9} {:>9} {:>12}",
        "combination", "n", "correctness", "distinct1", "distinct2", "nll_proxy", "sec/sample"
    );
    let line = |out: &mut String, r: &ReportRow| {
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>11.4} {:>9.4} {:>9.4} {:>9.4} {:>12.3e}",
            r.combination, r.count, r.correctness, r.distinct1, r.distinct2, r.nll_proxy, r.seconds_per_sample
        );
    };
    for r in &report.rows {
        line(&mut out, r);
    }
    out.push_str(&"-".repeat(76));
    out.push('\n');
    line(&mut out, &report.average);
    out
}

pub fn loss_trace_csv(trace: &TrainTrace) -> String {
    let mut out = String::from("epoch,L_E,L_C,L_D\n");
    for e in &trace.epochs {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", e.epoch, e.elbo, e.classification, e.discrepancy);
    }
    out
}

pub fn classifier_trace_csv(losses: &[Vec<f64>]) -> String {
    let mut out = String::from("epoch");
    for n in 0..losses.len() {
        let _ = write!(out, ",aspect{n}_loss");
    }
    out.push('\n');
    let epochs = losses.iter().map(Vec::len).max().unwrap_or(0);
    for e in 0..epochs {
        let _ = write!(out, "{e}");
        for l in losses {
            match l.get(e) {
                Some(v) => {
                    let _ = write!(out, ",{v:.6}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn gan_trace_csv(trace: &GanTrace) -> String {
    let mut out = String::from("epoch,discriminator_accuracy,discriminator_loss,generator_loss\n");
    for (e, ((a, d), g)) in trace
        .discriminator_accuracy
        .iter()
        .zip(&trace.discriminator_loss)
        .zip(&trace.generator_loss)
        .enumerate()
    {
        let _ = writeln!(out, "{e},{a:.6},{d:.6},{g:.6}");
    }
    out
}

pub const ABLATION_COLUMNS: &str = "variant,sampler,status,correctness,distinct1,distinct2,nll_proxy";

/// One row per condition; timings are left out so reruns compare equal.
pub fn ablation_csv(ablation: &Ablation) -> String {
    let mut out = format!("{ABLATION_COLUMNS}\n");
    for r in &ablation.rows {
        match &r.outcome {
            Ok(rep) => {
                let a = &rep.average;
                let _ = writeln!(
                    out,
                    "{},{},ok,{:.6},{:.6},{:.6},{:.6}",
                    r.variant, r.sampler, a.correctness, a.distinct1, a.distinct2, a.nll_proxy
                );
            }
            Err(_) => {
                let _ = writeln!(out, "{},{},failed,,,,", r.variant, r.sampler);
            }
        }
    }
    out
}

pub fn diagnostics_csv(diagnostics: &[VariantDiagnostics]) -> String {
    let mut out = String::from("variant,center_ratio,classifier_accuracy,gan_held_out_accuracy\n");
    for d in diagnostics {
        let ratio = d.center_ratio.as_ref().map_or_else(|_| String::new(), |r| format!("{r:.6}"));
        let acc: Vec<String> = d.classifier_accuracy.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(out, "{},{},{},{:.6}", d.variant, ratio, acc.join(";"), d.gan_held_out_accuracy);
    }
    out
}

/// Failures in the ablation grid, one line each.
pub fn ablation_failures(ablation: &Ablation) -> String {
    let mut out = String::new();
    for r in &ablation.rows {
        if let Err(e) = &r.outcome {
            let _ = writeln!(out, "{}/{}: {e}", r.variant, r.sampler);
        }
    }
    out
}
