use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::{LayerSpec, ModelGraph, ParamCount};
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub layer: LayerSpec,
    pub output: Shape,
    pub params: ParamCount,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub totals: ParamCount,
    /// Alias name to node name.
    pub aliases: BTreeMap<String, String>,
}

impl Summary {
    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        let target = self.aliases.get(name).map(String::as_str).unwrap_or(name);
        self.rows.iter().find(|r| r.name == target)
    }

    /// Rows whose name starts with `prefix`.
    pub fn rows_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a SummaryRow> + 'a {
        self.rows.iter().filter(move |r| r.name.starts_with(prefix))
    }
}

/// One row per node in topological order, plus integer totals.
pub fn summarize(graph: &ModelGraph) -> Summary {
    let rows: Vec<SummaryRow> = graph
        .order()
        .iter()
        .map(|&id| {
            let node = graph.node(id);
            let params = graph
                .node_params(id)
                .iter()
                .map(|p| {
                    let n = p.shape.numel() as u64;
                    if p.trainable {
                        ParamCount {
                            trainable: n,
                            non_trainable: 0,
                        }
                    } else {
                        ParamCount {
                            trainable: 0,
                            non_trainable: n,
                        }
                    }
                })
                .sum();
            SummaryRow {
                name: node.name.clone(),
                layer: node.layer.clone(),
                output: graph.shape(id).clone(),
                params,
                inputs: node.inputs.iter().map(|&i| graph.node(i).name.clone()).collect(),
            }
        })
        .collect();
    let totals = rows.iter().map(|r| r.params).sum();
    let aliases = graph
        .aliases()
        .iter()
        .map(|(a, &id)| (a.clone(), graph.node(id).name.clone()))
        .collect();
    Summary { rows, totals, aliases }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<40} {:<18} {:<22} {:>12}",
            "Layer", "Type", "Output shape", "Param #"
        )?;
        writeln!(f, "{}", "=".repeat(95))?;
        for r in &self.rows {
            let shape = format!(
                "(None, {})",
                r.output
                    .dims()
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            writeln!(
                f,
                "{:<40} {:<18} {:<22} {:>12}",
                r.name,
                r.layer.to_string(),
                shape,
                r.params.total()
            )?;
        }
        writeln!(f, "{}", "=".repeat(95))?;
        writeln!(f, "Total params: {}", group_thousands(self.totals.total()))?;
        writeln!(f, "Trainable params: {}", group_thousands(self.totals.trainable))?;
        write!(
            f,
            "Non-trainable params: {}",
            group_thousands(self.totals.non_trainable)
        )
    }
}

pub(crate) fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
