//! Gene panel selection: linear-model importance, recursive feature
//! elimination with cross-validation, and curated-panel merging.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{self, SolverConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceModel {
    /// One row per one-vs-rest model (a single row for binary labels).
    pub coefficients: Tensor,
    pub intercepts: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reg: f64,
}

impl ImportanceModel {
    /// `I_g = Σ_models β_g²`
    pub fn importance(&self) -> Vec<f64> {
        let c = &self.coefficients;
        (0..c.cols()).map(|j| (0..c.rows()).map(|m| c.get(m, j).powi(2)).sum()).collect()
    }
}

fn n_classes(y: &[usize]) -> usize {
    y.iter().copied().max().map_or(0, |m| m + 1).max(2)
}

pub fn fit_importance(x: &Tensor, y: &[usize], reg: f64) -> Result<ImportanceModel> {
    let cfg = SolverConfig { reg, ..SolverConfig::default() };
    let model = classifier::fit(x, y, n_classes(y), &cfg)?;
    Ok(ImportanceModel {
        coefficients: model.coefficients,
        intercepts: model.intercepts,
        iterations: model.iterations,
        converged: model.converged,
        reg,
    })
}

/// How many features each elimination round removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfeStep {
    Fixed(usize),
    /// `max(1, ⌊current/10⌋)`
    Auto,
}

impl RfeStep {
    fn size(self, current: usize) -> usize {
        match self {
            RfeStep::Fixed(s) => s,
            RfeStep::Auto => (current / 10).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Elimination {
    pub round: usize,
    pub column: usize,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RfeTrace {
    /// First eliminated first.
    pub eliminations: Vec<Elimination>,
    /// Surviving column indices, ascending.
    pub survivors: Vec<usize>,
    /// `(n_features, held-out accuracy)` per fold, filled by [`rfe_cv`].
    pub cv_scores: Vec<(usize, f64)>,
}

impl RfeTrace {
    pub fn elimination_order(&self) -> Vec<usize> {
        self.eliminations.iter().map(|e| e.column).collect()
    }
}

/// Indices of the `count` smallest values, ties to the lower index.
fn lowest(values: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

fn select_cols(x: &Tensor, cols: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), cols.len());
    for r in 0..x.rows() {
        let src = x.row(r);
        for (o, &c) in out.row_mut(r).iter_mut().zip(cols) {
            *o = src[c];
        }
    }
    out
}

pub fn rfe(x: &Tensor, y: &[usize], k_target: usize, step: RfeStep, reg: f64) -> Result<RfeTrace> {
    let d = x.cols();
    if k_target < 1 || k_target >= d {
        return Err(Error::Config(format!("k_target must be in [1, {d}), got {k_target}")));
    }
    if step == RfeStep::Fixed(0) {
        return Err(Error::Config("rfe step must be at least 1".into()));
    }
    let mut alive: Vec<usize> = (0..d).collect();
    let mut trace = RfeTrace::default();
    let mut round = 0;
    while alive.len() > k_target {
        let model = fit_importance(&select_cols(x, &alive), y, reg)?;
        let imp = model.importance();
        let remove = step.size(alive.len()).min(alive.len() - k_target);
        let drop = lowest(&imp, remove);
        for &i in &drop {
            trace.eliminations.push(Elimination { round, column: alive[i], importance: imp[i] });
        }
        let dropped: BTreeSet<usize> = drop.into_iter().collect();
        alive = alive.into_iter().enumerate().filter(|(i, _)| !dropped.contains(i)).map(|(_, c)| c).collect();
        round += 1;
    }
    trace.survivors = alive;
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Rfe,
    Curated,
    Both,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelGene {
    pub gene_id: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenePanel {
    pub genes: Vec<PanelGene>,
}

impl GenePanel {
    pub fn from_rfe(ids: impl IntoIterator<Item = String>) -> Self {
        Self { genes: ids.into_iter().map(|gene_id| PanelGene { gene_id, provenance: Provenance::Rfe }).collect() }
    }

    pub fn gene_ids(&self) -> Vec<&str> {
        self.genes.iter().map(|g| g.gene_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RfeCvConfig {
    pub k_target: usize,
    pub folds: usize,
    pub step: RfeStep,
    pub reg: f64,
    pub seed: u64,
}

impl Default for RfeCvConfig {
    fn default() -> Self {
        Self { k_target: 32, folds: 5, step: RfeStep::Auto, reg: 1e-2, seed: 0 }
    }
}

/// Runs RFE on each training fold and keeps the survivor set of the fold
/// whose held-out accuracy is highest (ties to the lowest fold).
pub fn rfe_cv(x: &Tensor, y: &[usize], gene_ids: &[String], cfg: &RfeCvConfig) -> Result<(GenePanel, RfeTrace)> {
    if gene_ids.len() != x.cols() {
        return Err(Error::DimensionMismatch { context: "gene ids".into(), expected: x.cols(), found: gene_ids.len() });
    }
    let assign = classifier::stratified_folds(y, cfg.folds, cfg.seed)?;
    let nc = n_classes(y);
    let mut best: Option<(f64, RfeTrace)> = None;
    let mut scores = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| assign[i] != fold).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| assign[i] == fold).collect();
        let y_train: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let y_test: Vec<usize> = test.iter().map(|&i| y[i]).collect();
        if y_train.iter().collect::<BTreeSet<_>>().len() < 2 {
            return Err(Error::DegenerateLabels(format!("fold {fold} training split has a single class")));
        }
        let x_train = x.select_rows(&train);
        let trace = rfe(&x_train, &y_train, cfg.k_target, cfg.step, cfg.reg)?;
        let solver = SolverConfig { reg: cfg.reg, ..SolverConfig::default() };
        let model = classifier::fit(&select_cols(&x_train, &trace.survivors), &y_train, nc, &solver)?;
        let pred = model.predict(&select_cols(&x.select_rows(&test), &trace.survivors));
        let acc = classifier::accuracy(&pred, &y_test);
        log::debug!("rfe fold {fold}: held-out accuracy {acc:.4}");
        scores.push((cfg.k_target, acc));
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, trace));
        }
    }
    let (_, mut trace) = best.expect("at least two folds");
    trace.cv_scores = scores;
    let panel = GenePanel::from_rfe(trace.survivors.iter().map(|&c| gene_ids[c].clone()));
    Ok((panel, trace))
}

/// RFE genes first, then curated genes not already present.
pub fn merge_panel(rfe_panel: &GenePanel, curated: &[String], universe: &[String]) -> Result<GenePanel> {
    let known: BTreeSet<&str> = universe.iter().map(String::as_str).collect();
    if let Some(bad) = curated.iter().find(|g| !known.contains(g.as_str())) {
        return Err(Error::UnknownGene(bad.clone()));
    }
    let mut out = rfe_panel.clone();
    let mut pos: HashMap<String, usize> = out.genes.iter().enumerate().map(|(i, g)| (g.gene_id.clone(), i)).collect();
    for g in curated {
        match pos.get(g) {
            Some(&i) => {
                if out.genes[i].provenance == Provenance::Rfe {
                    out.genes[i].provenance = Provenance::Both;
                }
            }
            None => {
                pos.insert(g.clone(), out.genes.len());
                out.genes.push(PanelGene { gene_id: g.clone(), provenance: Provenance::Curated });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Validation("gene panel is empty".into()));
    }
    Ok(out)
}

/// Copy of `ds` keeping only the panel's genes, in panel order.
pub fn restrict_to_panel(ds: &Dataset, panel: &GenePanel) -> Result<Dataset> {
    let universe = ds.gene_ids();
    let index: HashMap<&str, usize> = universe.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let cols: Vec<usize> = panel
        .gene_ids()
        .into_iter()
        .map(|g| index.get(g).copied().ok_or_else(|| Error::UnknownGene(g.to_owned())))
        .collect::<Result<_>>()?;
    if cols.is_empty() {
        return Err(Error::Validation("gene panel is empty".into()));
    }
    let ids: Vec<String> = cols.iter().map(|&c| universe[c].clone()).collect();
    let mut out = ds.clone();
    out.k_genes = cols.len();
    for s in &mut out.samples {
        s.rna.values = cols.iter().map(|&c| s.rna.values[c]).collect();
        s.rna.gene_ids = ids.clone();
    }
    out.validate()?;
    Ok(out)
}

/// Samples-by-genes expression table with identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionTable {
    pub sample_ids: Vec<String>,
    pub gene_ids: Vec<String>,
    pub values: Tensor,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}

/// Reads a CSV with a header row of gene ids and the sample id in the first column.
pub fn read_expression_csv(path: &Path) -> Result<ExpressionTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(Error::Validation(format!("{}: need a sample id column and at least one gene", path.display())));
    }
    let gene_ids: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut sample_ids = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        sample_ids.push(rec[0].to_owned());
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("{}: bad value `{field}` for sample {}", path.display(), &rec[0])))?;
            if !v.is_finite() {
                return Err(Error::Validation(format!("non-finite expression for sample {}", &rec[0])));
            }
            values.push(v);
        }
    }
    let table = ExpressionTable { values: Tensor::from_vec(sample_ids.len(), gene_ids.len(), values), sample_ids, gene_ids };
    Ok(table)
}

/// Writes a header of gene ids (after `sample_id`) and one row per sample.
pub fn write_expression_csv(table: &ExpressionTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<&str> = std::iter::once("sample_id").chain(table.gene_ids.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (r, id) in table.sample_ids.iter().enumerate() {
        let row: Vec<String> = std::iter::once(id.clone()).chain(table.values.row(r).iter().map(|v| v.to_string())).collect();
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `sample_id,label` rows with a header.
pub fn write_labels_csv(sample_ids: &[String], labels: &[usize], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["sample_id", "label"]).map_err(|e| csv_err(path, e))?;
    for (id, l) in sample_ids.iter().zip(labels) {
        w.write_record([id.as_str(), &l.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `sample_id,label` rows (header required) and returns labels in `order`.
pub fn read_labels_csv(path: &Path, order: &[String]) -> Result<Vec<usize>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut map = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() < 2 {
            return Err(Error::Validation(format!("{}: expected sample_id,label", path.display())));
        }
        let label: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("bad label `{}` for sample {}", &rec[1], &rec[0])))?;
        map.insert(rec[0].to_owned(), label);
    }
    order
        .iter()
        .map(|id| map.get(id).copied().ok_or_else(|| Error::Validation(format!("no label for sample {id}"))))
        .collect()
}

/// One gene id per line; blank lines and `#` comments are skipped.
pub fn read_gene_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_owned).collect())
}

pub fn write_panel_json(panel: &GenePanel, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(panel)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_panel_json(path: &Path) -> Result<GenePanel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `round,eliminated_gene,importance`.
pub fn write_trace_csv(trace: &RfeTrace, gene_ids: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["round", "eliminated_gene", "importance"]).map_err(|e| csv_err(path, e))?;
    for e in &trace.eliminations {
        w.write_record([e.round.to_string(), gene_ids[e.column].clone(), format!("{:e}", e.importance)])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
