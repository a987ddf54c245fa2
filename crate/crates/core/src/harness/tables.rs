//! TSV renderings of a results table.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{mean, write, CellStatus, MethodSpec, ResultsTable};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Tier};
use crate::imitation::Direction;
use crate::synthlang::LanguageTag;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableStyle {
    /// New-pair BLEU: rows are methods per training direction, columns are
    /// original languages (with tier), then tier and overall means.
    Q1,
    /// Probe-set BLEU on original pairs, followed by Δ rows against the expert.
    Q2,
}

impl fmt::Display for TableStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableStyle::Q1 => "q1",
            TableStyle::Q2 => "q2",
        })
    }
}

impl FromStr for TableStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q1" => Ok(TableStyle::Q1),
            "q2" => Ok(TableStyle::Q2),
            _ => Err(Error::parse("table style", format!("unknown style `{s}` (expected q1 or q2)"))),
        }
    }
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

const TIERS: [Tier; 3] = [Tier::Low, Tier::Mid, Tier::High];

/// Seed-mean BLEU of one method/direction on `dir`, or `None` if no seed
/// finished. Per-seed values stay available in the results themselves.
fn seed_mean(results: &ResultsTable, method: MethodSpec, direction: Direction, dir: &(LanguageTag, LanguageTag)) -> Option<f64> {
    let xs: Vec<f64> = results
        .cells
        .iter()
        .filter(|c| c.key.method == method && c.key.direction == direction && c.status == CellStatus::Done)
        .filter_map(|c| c.reports.iter().find(|r| &r.direction() == dir).map(|r| r.bleu))
        .collect();
    mean(&xs)
}

fn all_failed(results: &ResultsTable, method: MethodSpec, direction: Direction) -> bool {
    let cells: Vec<_> = results
        .cells
        .iter()
        .filter(|c| c.key.method == method && c.key.direction == direction)
        .collect();
    !cells.is_empty() && cells.iter().all(|c| matches!(c.status, CellStatus::Failed(_)))
}

fn expert_bleu(results: &ResultsTable, dir: &(LanguageTag, LanguageTag)) -> Option<f64> {
    results.expert.iter().find(|r| &r.direction() == dir).map(|r| r.bleu)
}

/// Row values for a set of directions plus the summary columns.
fn q1_row(values: &[Option<f64>], tiers: &[Tier]) -> Vec<String> {
    let mut out: Vec<String> = values.iter().map(|&v| cell(v)).collect();
    for t in TIERS {
        let xs: Vec<f64> = values
            .iter()
            .zip(tiers)
            .filter(|(_, tt)| **tt == t)
            .filter_map(|(v, _)| *v)
            .collect();
        out.push(cell(mean(&xs)));
    }
    let xs: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    out.push(cell(mean(&xs)));
    out
}

pub fn render_table(results: &ResultsTable, style: TableStyle) -> Result<String> {
    let plan = &results.plan;
    if results.cells.is_empty() && results.expert.is_empty() {
        return Err(Error::Empty("results"));
    }
    let mut lines = Vec::new();
    match style {
        TableStyle::Q1 => {
            let originals = plan.originals();
            let tiers: Vec<Tier> = originals.iter().map(|o| plan.tier_of_lang(o).unwrap_or(Tier::High)).collect();
            let mut header = vec!["method".to_string(), "direction".to_string()];
            header.extend(originals.iter().zip(&tiers).map(|(o, t)| format!("{o}({t})")));
            header.extend(TIERS.iter().map(|t| t.to_string()));
            header.push("all".into());
            lines.push(header.join("\t"));
            for &direction in &plan.directions {
                let dirs = plan.new_pair_directions(direction);
                let values: Vec<Option<f64>> = dirs.iter().map(|d| expert_bleu(results, d)).collect();
                let mut row = vec!["expert".to_string(), direction.to_string()];
                row.extend(q1_row(&values, &tiers));
                lines.push(row.join("\t"));
            }
            for &method in &plan.methods {
                for &direction in &plan.directions {
                    let mut row = vec![method.to_string(), direction.to_string()];
                    if all_failed(results, method, direction) {
                        row.extend(std::iter::repeat_n("failed".to_string(), originals.len() + 4));
                    } else {
                        let dirs = plan.new_pair_directions(direction);
                        let values: Vec<Option<f64>> =
                            dirs.iter().map(|d| seed_mean(results, method, direction, d)).collect();
                        row.extend(q1_row(&values, &tiers));
                    }
                    lines.push(row.join("\t"));
                }
            }
        }
        TableStyle::Q2 => {
            let probe = plan.probe_directions();
            let mut header = vec!["row".to_string()];
            header.extend(probe.iter().map(|(a, b)| format!("{a}-{b}")));
            header.push("mean".into());
            lines.push(header.join("\t"));
            let base: Vec<Option<f64>> = probe.iter().map(|d| expert_bleu(results, d)).collect();
            let render = |name: String, values: &[Option<f64>]| {
                let mut row = vec![name];
                row.extend(values.iter().map(|&v| cell(v)));
                let xs: Vec<f64> = values.iter().filter_map(|v| *v).collect();
                row.push(cell(if xs.len() == values.len() { mean(&xs) } else { None }));
                row.join("\t")
            };
            lines.push(render("expert".into(), &base));
            let mut deltas = Vec::new();
            for &method in &plan.methods {
                for &direction in &plan.directions {
                    let name = format!("{method}/{direction}");
                    let values: Vec<Option<f64>> =
                        probe.iter().map(|d| seed_mean(results, method, direction, d)).collect();
                    let delta: Vec<Option<f64>> = values
                        .iter()
                        .zip(&base)
                        .map(|(v, b)| Some((*v)? - (*b)?))
                        .collect();
                    lines.push(render(name.clone(), &values));
                    deltas.push(render(format!("Δ {name}"), &delta));
                }
            }
            lines.extend(deltas);
        }
    }
    let mut text = lines.join("\n");
    text.push('\n');
    Ok(text)
}

/// Writes `<style>.tsv` into `dir` and returns its path.
pub fn emit_tables(results: &ResultsTable, style: TableStyle, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(format!("{style}.tsv"));
    write(&path, &render_table(results, style)?)?;
    Ok(path)
}

pub fn render_significance(results: &ResultsTable) -> String {
    let mut out = String::from("direction\ttier\tseed\tsystem_a\tsystem_b\tp\tsignificant\n");
    for r in &results.significance {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{}\n",
            r.direction,
            r.tier,
            r.seed,
            r.a,
            r.b,
            r.p,
            u8::from(r.significant)
        ));
    }
    out
}

pub fn emit_significance(results: &ResultsTable, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("significance.tsv");
    write(&path, &render_significance(results))?;
    Ok(path)
}

/// Per-seed breakdown behind the tables: one line per cell and direction.
pub fn render_cells(results: &ResultsTable) -> String {
    let mut out = format!("method\tdirection\tseed\tstatus\t{}\n", EvalReport::TSV_HEADER);
    for c in &results.cells {
        match &c.status {
            CellStatus::Done => {
                for r in &c.reports {
                    out.push_str(&format!(
                        "{}\t{}\t{}\tdone\t{}\n",
                        c.key.method,
                        c.key.direction,
                        c.key.seed,
                        r.to_tsv()
                    ));
                }
            }
            CellStatus::Failed(e) => out.push_str(&format!(
                "{}\t{}\t{}\tfailed\t{}\n",
                c.key.method,
                c.key.direction,
                c.key.seed,
                e.replace(['\t', '\n'], " ")
            )),
        }
    }
    out
}
