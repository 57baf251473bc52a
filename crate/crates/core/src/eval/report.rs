//! Aligned plain-text tables.

use std::fmt::Write as _;

use super::{Estimate, EvalReport, Metric, Subgroup};
use crate::scoring::Definition;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(title: impl Into<String>, headers: &[&str]) -> Self {
        Self {
            title: title.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        render_table(self)
    }
}

pub fn format_estimate(e: Option<Estimate>) -> String {
    match e {
        Some(e) => format!("{:.3} ({:.3}-{:.3})", e.point, e.lower, e.upper),
        None => "n/a".into(),
    }
}

pub fn render_table(table: &Table) -> String {
    let cols = table.headers.len();
    let mut widths: Vec<usize> = table.headers.iter().map(|h| h.chars().count()).collect();
    for row in &table.rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = (0..cols)
            .map(|i| {
                let cell = cells.get(i).map(String::as_str).unwrap_or("");
                format!("{cell:<width$}", width = widths[i])
            })
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", table.title);
    let _ = writeln!(out, "{}", line(&table.headers));
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for row in &table.rows {
        let _ = writeln!(out, "{}", line(row));
    }
    for note in &table.notes {
        let _ = writeln!(out, "{note}");
    }
    out
}

fn cells(r: &EvalReport) -> [String; 3] {
    [r.n.to_string(), format_estimate(r.accuracy), format_estimate(r.auroc)]
}

/// Metric | n | Accuracy | AUROC over the overall primary cell.
pub fn overall_table(title: &str, reports: &[EvalReport]) -> Table {
    let mut t = Table::new(title, &["Metric", "n", "Accuracy (95% CI)", "AUROC (95% CI)"]);
    for r in reports
        .iter()
        .filter(|r| r.subgroup == Subgroup::All && r.definition == Definition::Primary)
    {
        let [n, acc, auc] = cells(r);
        t.rows.push(vec![r.metric.label().into(), n, acc, auc]);
    }
    t
}

/// Metric | <column> | n | Accuracy | AUROC for the primary cells selected
/// by `keep`, grouped by metric.
pub fn subgroup_table(title: &str, column: &str, reports: &[EvalReport], keep: impl Fn(&Subgroup) -> bool) -> Table {
    let mut t = Table::new(title, &["Metric", column, "n", "Accuracy (95% CI)", "AUROC (95% CI)"]);
    let mut excluded: Vec<(Metric, usize)> = Vec::new();
    for r in reports
        .iter()
        .filter(|r| r.definition == Definition::Primary && keep(&r.subgroup))
    {
        let [n, acc, auc] = cells(r);
        t.rows
            .push(vec![r.metric.label().into(), r.subgroup.label(), n, acc, auc]);
        if let Some(x) = r.length_excluded {
            if !excluded.iter().any(|(m, _)| *m == r.metric) {
                excluded.push((r.metric, x));
            }
        }
    }
    if !excluded.is_empty() {
        let parts: Vec<String> = excluded.iter().map(|(m, x)| format!("{} {x}", m.label())).collect();
        t.notes
            .push(format!("Mid-length answers excluded: {}", parts.join(", ")));
    }
    t
}

/// Definition | Metric | n | Accuracy | AUROC over the overall cell.
pub fn definitions_table(title: &str, reports: &[EvalReport]) -> Table {
    let mut t = Table::new(
        title,
        &["Definition", "Metric", "n", "Accuracy (95% CI)", "AUROC (95% CI)"],
    );
    let mut overall: Vec<&EvalReport> = reports
        .iter()
        .filter(|r| r.subgroup == Subgroup::All && r.metric != Metric::Perplexity)
        .collect();
    overall.sort_by_key(|r| (r.definition, r.metric));
    for r in overall {
        let [n, acc, auc] = cells(r);
        t.rows
            .push(vec![r.definition.label().into(), r.metric.label().into(), n, acc, auc]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(metric: Metric, subgroup: Subgroup) -> EvalReport {
        EvalReport {
            metric,
            definition: Definition::Primary,
            subgroup,
            n: 12,
            accuracy: Some(Estimate {
                point: 0.5,
                lower: 0.25,
                upper: 0.75,
            }),
            auroc: None,
            length_excluded: None,
        }
    }

    #[test]
    fn overall_layout() {
        let t = overall_table(
            "Overall",
            &[
                report(Metric::SemanticEntropy, Subgroup::All),
                report(Metric::Perplexity, Subgroup::All),
            ],
        );
        let text = t.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Overall");
        assert!(lines[1].starts_with("Metric"));
        assert!(lines[1].contains("Accuracy (95% CI)") && lines[1].contains("AUROC (95% CI)"));
        assert!(lines[3].starts_with("SE "));
        assert!(lines[3].contains("0.500 (0.250-0.750)") && lines[3].ends_with("n/a"));
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn columns_align() {
        let mut t = Table::new("T", &["a", "bb"]);
        t.rows.push(vec!["long cell".into(), "x".into()]);
        let text = t.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1].find("bb"), lines[3].find('x'));
    }
}
