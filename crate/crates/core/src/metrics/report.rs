use std::fmt::Write as _;

use serde::Serialize;

use super::ClassMetrics;

/// Dataset-level statistics of one foreground class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub label: String,
    /// mean over samples where the value is defined
    pub dice: Option<f64>,
    pub ahd: Option<f64>,
    pub hd95: Option<f64>,
    /// samples with a defined Dice
    pub defined: usize,
}

/// Per-class Dice / Hausdorff summary over foreground classes `1..K`, plus
/// means over the classes whose value is defined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassSummary>,
    pub mean_dice: Option<f64>,
    pub mean_ahd: Option<f64>,
    pub mean_hd95: Option<f64>,
    /// foreground classes with a defined Dice
    pub defined_classes: usize,
    pub samples: usize,
}

/// Mean that does not depend on the order of `values`: they are sorted
/// before the sum.
fn mean_of(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| x.to_string())
}

fn fixed(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

impl EvalReport {
    /// Aggregates per-sample metrics of classes `0..K` (background at 0 is
    /// not reported).
    pub fn from_samples(per_sample: &[Vec<ClassMetrics>]) -> Self {
        let k = per_sample.first().map_or(0, Vec::len);
        let classes: Vec<ClassSummary> = (1..k)
            .map(|c| {
                let column = |f: fn(&ClassMetrics) -> Option<f64>| -> Vec<f64> {
                    per_sample.iter().filter_map(|s| f(&s[c])).collect()
                };
                let dice = column(|m| m.dice);
                ClassSummary {
                    label: format!("class_{c}"),
                    defined: dice.len(),
                    dice: mean_of(dice),
                    ahd: mean_of(column(|m| m.ahd)),
                    hd95: mean_of(column(|m| m.hd95)),
                }
            })
            .collect();
        let over = |f: fn(&ClassSummary) -> Option<f64>| mean_of(classes.iter().filter_map(f).collect());
        EvalReport {
            mean_dice: over(|c| c.dice),
            mean_ahd: over(|c| c.ahd),
            mean_hd95: over(|c| c.hd95),
            defined_classes: classes.iter().filter(|c| c.dice.is_some()).count(),
            samples: per_sample.len(),
            classes,
        }
    }

    /// `class,dice,ahd,hd95` rows followed by a `mean` row; undefined
    /// entries are `n/a`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,dice,ahd,hd95\n");
        for c in &self.classes {
            writeln!(out, "{},{},{},{}", c.label, cell(c.dice), cell(c.ahd), cell(c.hd95)).unwrap();
        }
        writeln!(
            out,
            "mean,{},{},{}",
            cell(self.mean_dice),
            cell(self.mean_ahd),
            cell(self.mean_hd95)
        )
        .unwrap();
        out
    }

    /// Aligned table: a summary row (mean DSC, mean HD, then per-class DSC)
    /// followed by the per-class breakdown.
    pub fn to_text(&self) -> String {
        let mut head = vec!["DSC".to_string(), "HD".to_string()];
        let mut row = vec![fixed(self.mean_dice.map(|d| d * 100.0), 2), fixed(self.mean_ahd, 2)];
        for c in &self.classes {
            head.push(c.label.clone());
            row.push(fixed(c.dice.map(|d| d * 100.0), 2));
        }
        let widths: Vec<usize> = head.iter().zip(&row).map(|(a, b)| a.len().max(b.len())).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = String::new();
        writeln!(out, "{}", line(&head)).unwrap();
        writeln!(out, "{}", line(&row)).unwrap();
        writeln!(out).unwrap();
        writeln!(out, "{:<10} {:>8} {:>8} {:>8} {:>8}", "class", "dice", "ahd", "hd95", "samples").unwrap();
        for c in &self.classes {
            writeln!(
                out,
                "{:<10} {:>8} {:>8} {:>8} {:>8}",
                c.label,
                fixed(c.dice, 4),
                fixed(c.ahd, 3),
                fixed(c.hd95, 3),
                c.defined
            )
            .unwrap();
        }
        writeln!(
            out,
            "{:<10} {:>8} {:>8} {:>8} {:>8}",
            "mean",
            fixed(self.mean_dice, 4),
            fixed(self.mean_ahd, 3),
            fixed(self.mean_hd95, 3),
            self.samples
        )
        .unwrap();
        writeln!(
            out,
            "(DSC in %, HD = average Hausdorff in pixels; means over {} defined classes)",
            self.defined_classes
        )
        .unwrap();
        out
    }
}
