//! Mean and spread tables over seeds for the headline results and ablations.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use ttacil_core::encoder::ParamMode;
use ttacil_core::protocol::Method;
use ttacil_core::tta::engine::ResetPolicy;

use crate::config::Variant;
use crate::error::CliError;
use crate::runner::RunRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableKind {
    Headline,
    AblationParams,
    AblationIters,
    AblationBatch,
    AblationAug,
    Ordering,
    Corruption,
}

impl TableKind {
    pub const ALL: [TableKind; 7] = [
        TableKind::Headline,
        TableKind::AblationParams,
        TableKind::AblationIters,
        TableKind::AblationBatch,
        TableKind::AblationAug,
        TableKind::Ordering,
        TableKind::Corruption,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TableKind::Headline => "headline",
            TableKind::AblationParams => "ablation-params",
            TableKind::AblationIters => "ablation-iters",
            TableKind::AblationBatch => "ablation-batch",
            TableKind::AblationAug => "ablation-aug",
            TableKind::Ordering => "ordering",
            TableKind::Corruption => "corruption",
        }
    }
}

impl FromStr for TableKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        TableKind::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| CliError::Config {
            key: "table".into(),
            message: format!(
                "unknown table `{s}` (expected one of {})",
                TableKind::ALL.map(|t| t.as_str()).join(", ")
            ),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Csv,
}

impl FromStr for Format {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "text" => Ok(Format::Text),
            "csv" => Ok(Format::Csv),
            _ => Err(CliError::Config { key: "format".into(), message: format!("unknown format `{s}` (text or csv)") }),
        }
    }
}

/// Mean and population standard deviation of one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt(), count: values.len() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<Stat>>)>,
    /// Cells the experiment grid calls for but the results lack.
    pub gaps: Vec<String>,
}

impl Table {
    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Text => self.render_text(),
            Format::Csv => self.render_csv(),
        }
    }

    fn render_text(&self) -> String {
        let cell = |s: &Option<Stat>| match s {
            Some(s) => format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std),
            None => "-".to_string(),
        };
        let mut grid: Vec<Vec<String>> = vec![std::iter::once(String::new()).chain(self.columns.iter().cloned()).collect()];
        for (label, cells) in &self.rows {
            grid.push(std::iter::once(label.clone()).chain(cells.iter().map(cell)).collect());
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{}\n", self.title);
        for (i, row) in grid.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| {
                    let pad = w - v.chars().count();
                    if c == 0 { format!("{v}{}", " ".repeat(pad)) } else { format!("{}{v}", " ".repeat(pad)) }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        for g in &self.gaps {
            let _ = writeln!(out, "missing: {g}");
        }
        out
    }

    fn render_csv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.columns {
            let _ = write!(out, ",{c} mean,{c} std,{c} seeds");
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            out.push_str(label);
            for s in cells {
                match s {
                    Some(s) => {
                        let _ = write!(out, ",{},{},{}", s.mean, s.std, s.count);
                    }
                    None => out.push_str(",,,0"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Drops repeated run ids, keeping the first record of each.
pub fn dedup(records: &[RunRecord]) -> Vec<&RunRecord> {
    let mut seen = HashSet::new();
    records.iter().filter(|r| seen.insert(r.run_id.clone())).collect()
}

fn stat(records: &[&RunRecord], pick: impl Fn(&RunRecord) -> f64) -> Option<Stat> {
    Stat::of(&records.iter().map(|r| pick(r)).collect::<Vec<_>>())
}

fn clean_base_ordering(r: &RunRecord) -> bool {
    r.spec.corruption.is_none() && r.spec.ordering == r.base_ordering()
}

/// Every value the experiments sweep on one grid axis, base value included.
fn axis_values<T: Ord + Copy>(records: &[&RunRecord], get: impl Fn(&Variant) -> T, grid: impl Fn(&RunRecord) -> Vec<T>) -> Vec<T> {
    let mut set = BTreeSet::new();
    for r in records {
        let g = grid(r);
        if g.is_empty() {
            set.insert(get(&r.base_variant()));
        }
        set.extend(g);
        if let Some(v) = &r.spec.variant {
            set.insert(get(v));
        }
    }
    set.into_iter().collect()
}

fn methods_in(records: &[&RunRecord]) -> Vec<Method> {
    Method::ALL
        .into_iter()
        .filter(|m| records.iter().any(|r| r.experiment.methods.contains(m) || r.spec.method == *m))
        .collect()
}

fn metric_columns() -> Vec<String> {
    vec!["Avg acc".into(), "Last acc".into()]
}

fn metric_cells(rs: &[&RunRecord]) -> Vec<Option<Stat>> {
    vec![stat(rs, |r| r.metrics.average), stat(rs, |r| r.metrics.last)]
}

fn push_row(table: &mut Table, label: String, rs: Vec<&RunRecord>, expected: bool) {
    if rs.is_empty() {
        if !expected {
            return;
        }
        table.gaps.push(label.clone());
    }
    let cells = metric_cells(&rs);
    table.rows.push((label, cells));
}

/// Sweep over one adaptation axis with the other axes at their base values.
fn sweep<T: Ord + Copy + std::fmt::Display>(
    records: &[&RunRecord],
    title: &str,
    name: &str,
    get: impl Fn(&Variant) -> T + Copy,
    grid: impl Fn(&RunRecord) -> Vec<T>,
    same_elsewhere: impl Fn(&Variant, &Variant) -> bool,
) -> Table {
    let mut table = Table { title: title.into(), columns: metric_columns(), rows: Vec::new(), gaps: Vec::new() };
    let wanted = records.iter().any(|r| r.experiment.methods.contains(&Method::Ttacil));
    for value in axis_values(records, get, grid) {
        let rs: Vec<&RunRecord> = records
            .iter()
            .copied()
            .filter(|r| clean_base_ordering(r) && r.spec.method == Method::Ttacil)
            .filter(|r| r.spec.variant.is_some_and(|v| get(&v) == value && same_elsewhere(&v, &r.base_variant())))
            .collect();
        push_row(&mut table, format!("{name}={value}"), rs, wanted);
    }
    table
}

pub fn build_table(kind: TableKind, all: &[RunRecord]) -> Table {
    let records = dedup(all);
    let records = records.as_slice();
    match kind {
        TableKind::Headline => {
            let mut table = Table { title: "Headline (clean)".into(), columns: metric_columns(), rows: Vec::new(), gaps: Vec::new() };
            for m in methods_in(records) {
                let rs = records
                    .iter()
                    .copied()
                    .filter(|r| r.spec.method == m && clean_base_ordering(r) && r.at_base_variant())
                    .collect();
                push_row(&mut table, m.to_string(), rs, true);
            }
            table
        }
        TableKind::AblationParams => {
            let mut table = Table {
                title: "Adapted parameters and reset".into(),
                columns: metric_columns(),
                rows: Vec::new(),
                gaps: Vec::new(),
            };
            let fso: Vec<&RunRecord> = records
                .iter()
                .copied()
                .filter(|r| r.spec.method == Method::FirstSessionOnly && clean_base_ordering(r))
                .collect();
            let fso_wanted = records.iter().any(|r| r.experiment.methods.contains(&Method::FirstSessionOnly));
            push_row(&mut table, "no TTA".into(), fso, fso_wanted);
            let wanted = records.iter().any(|r| r.experiment.methods.contains(&Method::Ttacil));
            let modes = axis_values(records, |v| mode_rank(v.param_mode), |r| r.experiment.grid.param_mode.iter().map(|&p| mode_rank(p)).collect());
            let resets = axis_values(records, |v| reset_rank(v.reset), |r| r.experiment.grid.reset.iter().map(|&p| reset_rank(p)).collect());
            for &reset in &resets {
                for &mode in &modes {
                    let rs: Vec<&RunRecord> = records
                        .iter()
                        .copied()
                        .filter(|r| clean_base_ordering(r) && r.spec.method == Method::Ttacil)
                        .filter(|r| {
                            r.spec.variant.is_some_and(|v| {
                                let b = r.base_variant();
                                mode_rank(v.param_mode) == mode && reset_rank(v.reset) == reset && v.n == b.n && v.b == b.b && v.m == b.m
                            })
                        })
                        .collect();
                    let suffix = if RESETS[reset] == ResetPolicy::None { " no-reset" } else { "" };
                    push_row(&mut table, format!("{}{suffix}", MODES[mode]), rs, wanted);
                }
            }
            table
        }
        TableKind::AblationIters => sweep(
            records,
            "Test-time iterations",
            "N",
            |v| v.n,
            |r| r.experiment.grid.n.clone(),
            |v, b| v.param_mode == b.param_mode && v.b == b.b && v.m == b.m && v.reset == b.reset,
        ),
        TableKind::AblationBatch => sweep(
            records,
            "Test batch size",
            "B",
            |v| v.b,
            |r| r.experiment.grid.b.clone(),
            |v, b| v.param_mode == b.param_mode && v.n == b.n && v.m == b.m && v.reset == b.reset,
        ),
        TableKind::AblationAug => sweep(
            records,
            "Augmentations per sample",
            "M",
            |v| v.m,
            |r| r.experiment.grid.m.clone(),
            |v, b| v.param_mode == b.param_mode && v.n == b.n && v.b == b.b && v.reset == b.reset,
        ),
        TableKind::Ordering => {
            let tasks = records.iter().map(|r| r.metrics.per_task.len()).max().unwrap_or(0);
            let mut columns: Vec<String> = (1..=tasks).map(|t| format!("A{t}")).collect();
            columns.extend(metric_columns());
            let mut table = Table { title: "Task orderings (clean)".into(), columns, rows: Vec::new(), gaps: Vec::new() };
            let orderings: BTreeSet<u64> = records.iter().flat_map(|r| r.experiment.stream.orderings.iter().copied()).collect();
            for m in methods_in(records) {
                for &o in &orderings {
                    let rs: Vec<&RunRecord> = records
                        .iter()
                        .copied()
                        .filter(|r| r.spec.method == m && r.spec.ordering == o && r.spec.corruption.is_none() && r.at_base_variant())
                        .collect();
                    let label = format!("{m} order {o}");
                    if rs.is_empty() {
                        table.gaps.push(label.clone());
                    }
                    let mut cells: Vec<Option<Stat>> =
                        (0..tasks).map(|t| Stat::of(&rs.iter().filter_map(|r| r.metrics.per_task.get(t).copied()).collect::<Vec<_>>())).collect();
                    cells.extend(metric_cells(&rs));
                    table.rows.push((label, cells));
                }
            }
            table
        }
        TableKind::Corruption => {
            let mut conditions: Vec<String> = Vec::new();
            let mut want_clean = false;
            for r in records {
                want_clean |= r.experiment.clean;
                for c in &r.experiment.corruptions {
                    let name = format!("{}-{}", c.kind, c.severity);
                    if !conditions.contains(&name) {
                        conditions.push(name);
                    }
                }
            }
            if want_clean {
                conditions.insert(0, "clean".into());
            }
            let mut table = Table {
                title: "Average accuracy under corruption".into(),
                columns: conditions.clone(),
                rows: Vec::new(),
                gaps: Vec::new(),
            };
            for m in methods_in(records) {
                let mut cells = Vec::new();
                for name in &conditions {
                    let rs: Vec<&RunRecord> = records
                        .iter()
                        .copied()
                        .filter(|r| r.spec.method == m && r.spec.ordering == r.base_ordering() && r.at_base_variant())
                        .filter(|r| match &r.spec.corruption {
                            None => name == "clean",
                            Some(c) => *name == format!("{}-{}", c.kind, c.severity),
                        })
                        .collect();
                    if rs.is_empty() {
                        table.gaps.push(format!("{m} / {name}"));
                    }
                    cells.push(stat(&rs, |r| r.metrics.average));
                }
                table.rows.push((m.to_string(), cells));
            }
            table
        }
    }
}

const MODES: [ParamMode; 4] = [ParamMode::All, ParamMode::Adapter, ParamMode::Norm, ParamMode::Head];
const RESETS: [ResetPolicy; 2] = [ResetPolicy::PerBatch, ResetPolicy::None];

fn mode_rank(p: ParamMode) -> usize {
    MODES.iter().position(|&m| m == p).expect("every mode is ranked")
}

fn reset_rank(p: ResetPolicy) -> usize {
    RESETS.iter().position(|&m| m == p).expect("every policy is ranked")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_has_zero_std() {
        let s = Stat::of(&[0.7]).unwrap();
        assert_eq!((s.mean, s.std, s.count), (0.7, 0.0, 1));
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn mean_and_population_std() {
        let s = Stat::of(&[0.8, 0.9]).unwrap();
        assert!((s.mean - 0.85).abs() < 1e-12);
        assert!((s.std - 0.05).abs() < 1e-12);
    }

    #[test]
    fn table_names_round_trip() {
        for t in TableKind::ALL {
            assert_eq!(t.as_str().parse::<TableKind>().unwrap(), t);
        }
        assert!("tab9".parse::<TableKind>().is_err());
        assert!("xml".parse::<Format>().is_err());
    }

    #[test]
    fn text_and_csv_show_gaps() {
        let t = Table {
            title: "T".into(),
            columns: vec!["Avg acc".into()],
            rows: vec![
                ("a".into(), vec![Stat::of(&[0.5, 0.7])]),
                ("b".into(), vec![None]),
            ],
            gaps: vec!["b".into()],
        };
        let text = t.render(Format::Text);
        assert!(text.contains("60.00 ± 10.00"));
        assert!(text.contains("missing: b"));
        let csv = t.render(Format::Csv);
        assert_eq!(csv.lines().next().unwrap(), "row,Avg acc mean,Avg acc std,Avg acc seeds");
        assert_eq!(csv.lines().nth(2).unwrap(), "b,,,0");
    }
}
