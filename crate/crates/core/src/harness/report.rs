use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use super::records::{aggregate, CellSummary, ResultRecord};

/// Final-accuracy grid: rows are (tag, learner, buffer), columns are the
/// saliency integration (variant, plus the scheme when it is not 11111).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportGrid {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: BTreeMap<(String, String), CellSummary>,
}

fn column_label(variant: &str, scheme: &str) -> String {
    if variant == "none" || scheme == "11111" {
        variant.to_string()
    } else {
        format!("{variant}[{scheme}]")
    }
}

impl ReportGrid {
    pub fn from_records(records: &[ResultRecord]) -> Self {
        let cells = aggregate(records);
        let tags: BTreeSet<&str> = cells.iter().map(|c| c.key.tag.as_str()).collect();
        let row_label = |c: &CellSummary| {
            let base = format!("{} M={}", c.key.learner, c.key.buffer);
            if tags.len() > 1 {
                format!("{} {base}", c.key.tag)
            } else {
                base
            }
        };
        let mut rows = Vec::new();
        let mut columns = Vec::new();
        let mut map = BTreeMap::new();
        for c in &cells {
            let r = row_label(c);
            let col = column_label(&c.key.variant, &c.key.scheme);
            if !rows.contains(&r) {
                rows.push(r.clone());
            }
            if !columns.contains(&col) {
                columns.push(col.clone());
            }
            map.insert((r, col), c.clone());
        }
        Self {
            rows,
            columns,
            cells: map,
        }
    }

    pub fn missing(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for r in &self.rows {
            for c in &self.columns {
                if !self.cells.contains_key(&(r.clone(), c.clone())) {
                    out.push((r.clone(), c.clone()));
                }
            }
        }
        out
    }

    pub fn is_complete(&self) -> bool {
        !self.rows.is_empty() && self.missing().is_empty()
    }

    /// Class-IL and Task-IL sections, cells as `mean ± std` in percent.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (title, task_il) in [("Class-IL", false), ("Task-IL", true)] {
            let _ = writeln!(out, "{title} accuracy (%), mean ± std over seeds");
            let w0 = self.rows.iter().map(String::len).max().unwrap_or(0).max(7);
            let _ = write!(out, "{:<w0$}", "");
            for c in &self.columns {
                let _ = write!(out, " | {c:>15}");
            }
            out.push('\n');
            for r in &self.rows {
                let _ = write!(out, "{r:<w0$}");
                for c in &self.columns {
                    let cell = match self.cells.get(&(r.clone(), c.clone())) {
                        Some(s) => {
                            let (m, d) = if task_il {
                                (s.task_il_mean, s.task_il_std)
                            } else {
                                (s.class_il_mean, s.class_il_std)
                            };
                            format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * d)
                        }
                        None => "—".to_string(),
                    };
                    let _ = write!(out, " | {cell:>15}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::planted;

    #[test]
    fn single_run_has_zero_std() {
        let g = ReportGrid::from_records(&[planted("t", "erace", 200, 0, 0.3, 0.6)]);
        assert_eq!(g.rows.len(), 1);
        assert!(g.is_complete());
        assert!(g.render().contains("30.00 ± 0.00"));
    }

    #[test]
    fn two_learners_two_buffers_make_four_cells() {
        let mut recs = Vec::new();
        for l in ["erace", "derpp"] {
            for m in [200, 500] {
                recs.push(planted("t", l, m, 0, 0.1, 0.2));
            }
        }
        let g = ReportGrid::from_records(&recs);
        assert_eq!(g.cells.len(), 4);
        assert_eq!(g.rows.len(), 4);
    }

    #[test]
    fn missing_cells_are_reported() {
        let mut a = planted("t", "erace", 200, 0, 0.1, 0.2);
        a.variant = "sam".into();
        let b = planted("t", "derpp", 200, 0, 0.1, 0.2);
        let g = ReportGrid::from_records(&[a, b]);
        assert_eq!(g.missing().len(), 2);
        assert!(!g.is_complete());
        assert!(g.render().contains('—'));
    }
}
