//! Expected-layer ledgers and the row-by-row comparison against a summary.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::summary::group_thousands;
use super::{GraphError, Summary};
use crate::tensor::Shape;

/// Reference ledger of the full fusion model, one row per published layer.
pub const M4_REFERENCE_LEDGER: &str = include_str!("../../ledger/m4_reference.csv");

const TOTAL: &str = "Total params";
const TRAINABLE: &str = "Trainable params";
const NON_TRAINABLE: &str = "Non-trainable params";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExpectedCell {
    Shape(Shape),
    Window(usize, usize),
    Unchecked,
}

impl ExpectedCell {
    pub fn parse(s: &str) -> Result<ExpectedCell, GraphError> {
        let s = s.trim();
        if s == "-" || s.is_empty() {
            return Ok(ExpectedCell::Unchecked);
        }
        if let Some(rest) = s.strip_prefix('K') {
            let rest = rest.trim_start().trim_start_matches(':');
            let parts: Vec<&str> = rest.split(['x', '×']).map(str::trim).collect();
            if let [a, b] = parts[..] {
                let a = a.parse().map_err(|_| GraphError::Ledger(format!("bad window `{s}`")))?;
                let b = b.parse().map_err(|_| GraphError::Ledger(format!("bad window `{s}`")))?;
                return Ok(ExpectedCell::Window(a, b));
            }
            return Err(GraphError::Ledger(format!("bad window `{s}`")));
        }
        let inner = s
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| GraphError::Ledger(format!("bad shape `{s}`")))?;
        let dims = inner
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty() && *p != "None")
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| GraphError::Ledger(format!("bad shape `{s}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Shape::new(dims)
            .map(ExpectedCell::Shape)
            .map_err(|e| GraphError::Ledger(e.to_string()))
    }
}

impl fmt::Display for ExpectedCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpectedCell::Shape(s) => write!(f, "{s}"),
            ExpectedCell::Window(a, b) => write!(f, "K {a}x{b}"),
            ExpectedCell::Unchecked => f.write_str("-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedRow {
    pub name: String,
    pub out: ExpectedCell,
    pub params: Option<u64>,
}

#[derive(Deserialize)]
struct RawRow {
    name: String,
    out_shape: String,
    params: String,
}

impl ExpectedRow {
    /// Parses a `name,out_shape,params` CSV; `#` starts a comment line.
    pub fn parse_csv(text: &str) -> Result<Vec<ExpectedRow>, GraphError> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        reader
            .deserialize::<RawRow>()
            .map(|r| {
                let r = r.map_err(|e| GraphError::Ledger(e.to_string()))?;
                let params = match r.params.as_str() {
                    "-" | "" => None,
                    p => Some(
                        p.replace(',', "")
                            .parse()
                            .map_err(|_| GraphError::Ledger(format!("bad param count `{p}`")))?,
                    ),
                };
                Ok(ExpectedRow {
                    out: ExpectedCell::parse(&r.out_shape)?,
                    name: r.name,
                    params,
                })
            })
            .collect()
    }

    pub fn m4_reference() -> Vec<ExpectedRow> {
        Self::parse_csv(M4_REFERENCE_LEDGER).expect("embedded ledger parses")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowCheck {
    pub name: String,
    pub expected_out: String,
    pub actual_out: String,
    pub expected_params: Option<u64>,
    pub actual_params: Option<u64>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<RowCheck>,
    pub warnings: Vec<String>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn mismatches(&self) -> impl Iterator<Item = &RowCheck> {
        self.checks.iter().filter(|c| !c.ok)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = |v: Option<u64>| v.map(group_thousands).unwrap_or_else(|| "-".into());
        writeln!(
            f,
            "{:<24} {:<22} {:<22} {:>12} {:>12}  result",
            "row", "expected", "actual", "exp #", "act #"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<24} {:<22} {:<22} {:>12} {:>12}  {}",
                c.name,
                c.expected_out,
                c.actual_out,
                p(c.expected_params),
                p(c.actual_params),
                if c.ok { "PASS" } else { "FAIL" }
            )?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        write!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Compares a summary against expected rows. Mismatches are report content,
/// never errors.
pub fn verify_against_expected(summary: &Summary, expected: &[ExpectedRow]) -> VerificationReport {
    let mut warnings = Vec::new();
    if expected.is_empty() {
        warnings.push("expected ledger is empty; nothing was checked".to_string());
    }
    let checks = expected
        .iter()
        .map(|row| {
            let totals = match row.name.as_str() {
                TOTAL => Some(summary.totals.total()),
                TRAINABLE => Some(summary.totals.trainable),
                NON_TRAINABLE => Some(summary.totals.non_trainable),
                _ => None,
            };
            if let Some(actual) = totals {
                return RowCheck {
                    name: row.name.clone(),
                    expected_out: row.out.to_string(),
                    actual_out: "-".into(),
                    expected_params: row.params,
                    actual_params: Some(actual),
                    ok: row.params.is_none_or(|p| p == actual),
                };
            }
            let Some(found) = summary.row(&row.name) else {
                return RowCheck {
                    name: row.name.clone(),
                    expected_out: row.out.to_string(),
                    actual_out: "missing".into(),
                    expected_params: row.params,
                    actual_params: None,
                    ok: false,
                };
            };
            let (actual_out, out_ok) = match &row.out {
                ExpectedCell::Shape(s) => (found.output.to_string(), &found.output == s),
                ExpectedCell::Window(a, b) => match found.layer.window() {
                    Some((x, y)) => (format!("K {x}x{y}"), (x, y) == (*a, *b)),
                    None => (found.layer.kind().to_string(), false),
                },
                ExpectedCell::Unchecked => (found.output.to_string(), true),
            };
            let actual_params = found.params.total();
            RowCheck {
                name: row.name.clone(),
                expected_out: row.out.to_string(),
                actual_out,
                expected_params: row.params,
                actual_params: Some(actual_params),
                ok: out_ok && row.params.is_none_or(|p| p == actual_params),
            }
        })
        .collect();
    VerificationReport { checks, warnings }
}
