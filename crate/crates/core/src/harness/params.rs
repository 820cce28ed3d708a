use std::collections::BTreeMap;
use std::io::Write;

use crate::model::Detector;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRow {
    pub module: String,
    pub tensor: String,
    pub count: usize,
}

/// Exact per-tensor parameter counts with per-module totals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub module_totals: BTreeMap<String, usize>,
    pub total: usize,
}

impl ParamTable {
    pub fn module_total(&self, module: &str) -> usize {
        self.module_totals.get(module).copied().unwrap_or(0)
    }

    /// Everything after the backbone: pyramid blocks, gates and predictors.
    pub fn head_total(&self) -> usize {
        self.total - self.module_total("backbone")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "module,tensor,count")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.module, r.tensor, r.count)?;
        }
        for (m, n) in &self.module_totals {
            writeln!(w, "{m},TOTAL,{n}")?;
        }
        writeln!(w, "ALL,TOTAL,{}", self.total)
    }
}

pub fn count_store(store: &ParamStore) -> ParamTable {
    let mut rows = Vec::with_capacity(store.len());
    let mut module_totals = BTreeMap::new();
    for p in store.iter() {
        let module = p.name.split('.').next().unwrap_or("").to_string();
        *module_totals.entry(module.clone()).or_insert(0) += p.len();
        rows.push(ParamRow {
            module,
            tensor: p.name.clone(),
            count: p.len(),
        });
    }
    let total = rows.iter().map(|r| r.count).sum();
    ParamTable {
        rows,
        module_totals,
        total,
    }
}

pub fn count_params(model: &Detector) -> ParamTable {
    count_store(&model.store)
}
