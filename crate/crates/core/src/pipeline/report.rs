//! Markdown rendering of the evaluation and repair reports.

use std::fmt::Write;

use super::{EvaluationReport, RepairSummary, Summary, SUBSETS};
use crate::scoring::RepairReport;
use crate::uncertainty::{OutputMethod, Representation};

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".to_string())
}

fn mean_std(s: &Option<Summary>) -> String {
    match s {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
        None => "NA".to_string(),
    }
}

fn row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn rule(n: usize) -> String {
    format!("|{}\n", "---|".repeat(n))
}

/// Base detectors in display order: REL-U first, the rest as listed.
fn base_order() -> Vec<OutputMethod> {
    let mut v = vec![OutputMethod::RelU];
    v.extend(OutputMethod::ALL.iter().copied().filter(|m| *m != OutputMethod::RelU));
    v
}

/// Cells that are all `NA` drop their row; the omissions are listed below
/// the table.
fn footnote(out: &mut String, omitted: &[String]) {
    if !omitted.is_empty() {
        let _ = writeln!(out, "\n\\* Omitted, no scores available: {}.", omitted.join(", "));
    }
}

pub fn render_report(ev: &EvaluationReport, rep: &RepairSummary, digest: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "<!-- config_digest: {digest} -->");
    let _ = writeln!(out, "# Misclassification detection report\n");
    let pct = format!("{:.0}", ev.trr_fix * 100.0);

    let _ = writeln!(out, "## Divergence from reliable-group profiles (test split)\n");
    let _ = writeln!(
        out,
        "Mean ± std of the Jensen-Shannon divergence between each message and the profile of the reliable group sharing its predicted label.\n"
    );
    out.push_str(&row(&["Representation", "TP→TP", "FP→TP", "TN→TN", "FN→TN"].map(String::from)));
    out.push_str(&rule(5));
    let mut omitted = Vec::new();
    for g in &ev.group_divergence {
        let cells = [&g.tp_to_tp, &g.fp_to_tp, &g.tn_to_tn, &g.fn_to_tn];
        if cells.iter().all(|c| c.is_none()) {
            omitted.push(g.representation.name().to_string());
            continue;
        }
        let mut r = vec![g.representation.name().to_string()];
        r.extend(cells.iter().map(|c| mean_std(c)));
        out.push_str(&row(&r));
    }
    footnote(&mut out, &omitted);

    let _ = writeln!(out, "\n## Detector quality (test split)\n");
    let mut head = vec!["Detector".to_string()];
    for (subset, _) in SUBSETS {
        head.push(format!("{subset} AUROC"));
        head.push(format!("{subset} FRR@{pct}%TRR"));
    }
    out.push_str(&row(&head));
    out.push_str(&rule(head.len()));
    let names: Vec<String> = OutputMethod::ALL
        .iter()
        .map(|m| super::uq_column(*m))
        .chain(Representation::ALL.iter().map(|r| super::xmap_column(*r)))
        .collect();
    let mut omitted = Vec::new();
    for name in names {
        let mut r = vec![name.clone()];
        let mut any = false;
        for (subset, _) in SUBSETS {
            let d = ev.detector(&name, subset);
            let auc = d.and_then(|d| d.auroc);
            let frr = d.and_then(|d| d.frr_at_trr);
            any |= auc.is_some() || frr.is_some();
            r.push(num(auc));
            r.push(num(frr));
        }
        if any {
            out.push_str(&row(&r));
        } else {
            omitted.push(name);
        }
    }
    footnote(&mut out, &omitted);

    let _ = writeln!(out, "\n## Repair of base-detector rejections (test split, {pct}% TRR)\n");
    let _ = writeln!(out, "Correct fix = recovery − leakage.\n");
    for m in base_order() {
        let base = super::uq_column(m);
        let Some(b) = rep.base_rejections.iter().find(|b| b.detector == base) else {
            continue;
        };
        let _ = writeln!(
            out,
            "### Base detector {base}: {} true and {} false rejections\n",
            b.n_true_rejections, b.n_false_rejections
        );
        let reports: Vec<_> = Representation::ALL
            .iter()
            .filter_map(|r| {
                let col = super::xmap_column(*r);
                rep.repairs
                    .iter()
                    .find(|x| x.base_detector == base && x.representation == col)
                    .map(|x| (*r, x))
            })
            .collect();
        let mut head = vec!["Metric".to_string()];
        head.extend(reports.iter().map(|(r, _)| r.name().to_string()));
        out.push_str(&row(&head));
        out.push_str(&rule(head.len()));
        let metric = |label: &str, f: &dyn Fn(&RepairReport) -> String| {
            let mut r = vec![label.to_string()];
            r.extend(reports.iter().map(|(_, x)| f(x)));
            row(&r)
        };
        out.push_str(&metric("RecovR ↑", &|x| num(x.recov_r)));
        out.push_str(&metric("# Recovery", &|x| x.n_recovery.to_string()));
        out.push_str(&metric("LeakR ↓", &|x| num(x.leak_r)));
        out.push_str(&metric("# Leakage", &|x| x.n_leakage.to_string()));
        out.push_str(&metric("# Correct fix", &|x| x.n_correct_fix.to_string()));
        for (subset, _) in SUBSETS {
            let mut r = vec![format!("AUROC on {subset} rejections")];
            for (repr, _) in &reports {
                let col = super::xmap_column(*repr);
                let auc = rep
                    .rejected_detection
                    .iter()
                    .find(|d| d.base_detector == base && d.report.detector == col && d.report.subset == subset)
                    .and_then(|d| d.report.auroc);
                r.push(num(auc));
            }
            out.push_str(&row(&r));
        }
        out.push('\n');
    }
    out
}
