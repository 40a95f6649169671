//! Clustering evaluation on labeled pixels.
//!
//! Predicted clusters are matched to classes with the Hungarian algorithm
//! before OA, AA and Kappa are computed. NMI, ARI and the pair-counting
//! precision, recall and F1 do not depend on the matching.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hsi_io::LabelRaster;

/// Co-occurrence counts of predicted clusters (rows) and true classes
/// (columns) over pixels whose true id is non-zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pred_ids: Vec<u32>,
    true_ids: Vec<u32>,
    counts: Vec<u64>,
}

impl ContingencyTable {
    pub fn from_labels(pred: &[u32], truth: &[u32]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::PairMismatch(format!(
                "{} predicted labels against {} true labels",
                pred.len(),
                truth.len()
            )));
        }
        let mut cells: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (&p, &t) in pred.iter().zip(truth) {
            if t != 0 {
                *cells.entry((p, t)).or_default() += 1;
            }
        }
        if cells.is_empty() {
            return Err(Error::Validation("no labeled pixels to evaluate".into()));
        }
        let mut pred_ids: Vec<u32> = cells.keys().map(|k| k.0).collect();
        let mut true_ids: Vec<u32> = cells.keys().map(|k| k.1).collect();
        pred_ids.sort_unstable();
        pred_ids.dedup();
        true_ids.sort_unstable();
        true_ids.dedup();
        let mut counts = vec![0; pred_ids.len() * true_ids.len()];
        for (&(p, t), &n) in &cells {
            let r = pred_ids.binary_search(&p).expect("collected");
            let c = true_ids.binary_search(&t).expect("collected");
            counts[r * true_ids.len() + c] = n;
        }
        Ok(Self {
            pred_ids,
            true_ids,
            counts,
        })
    }

    /// Builds a table directly from a row-major count matrix, with ids
    /// `1..=rows` and `1..=cols`.
    pub fn from_counts(rows: usize, cols: usize, counts: Vec<u64>) -> Result<Self> {
        if rows == 0 || cols == 0 || counts.len() != rows * cols {
            return Err(Error::dim(
                "contingency",
                format!("{rows}x{cols} table with {} counts", counts.len()),
            ));
        }
        Ok(Self {
            pred_ids: (1..=rows as u32).collect(),
            true_ids: (1..=cols as u32).collect(),
            counts,
        })
    }

    pub fn rows(&self) -> usize {
        self.pred_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.true_ids.len()
    }

    pub fn pred_ids(&self) -> &[u32] {
        &self.pred_ids
    }

    pub fn true_ids(&self) -> &[u32] {
        &self.true_ids
    }

    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.counts[r * self.cols() + c]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.cols()).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.cols())
            .map(|c| (0..self.rows()).map(|r| self.get(r, c)).sum())
            .collect()
    }
}

/// Minimum-cost assignment on a square `n x n` row-major cost matrix.
/// Returns the column assigned to each row.
pub fn linear_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 || cost.len() != n * n {
        return Err(Error::dim(
            "linear_assignment",
            format!(
                "expected a non-empty square matrix, got {} entries for n = {n}",
                cost.len()
            ),
        ));
    }
    // potentials and matching are 1-indexed; index 0 is the virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Maps each predicted row to the true column it is matched with, maximizing
/// the total matched count. Rows left over when there are more clusters than
/// classes map to `None`.
pub fn hungarian_match(table: &ContingencyTable) -> Result<Vec<Option<usize>>> {
    let n = table.rows().max(table.cols());
    let mut cost = vec![0.0; n * n];
    for r in 0..table.rows() {
        for c in 0..table.cols() {
            cost[r * n + c] = -(table.get(r, c) as f64);
        }
    }
    let assignment = linear_assignment(&cost, n)?;
    Ok(assignment[..table.rows()]
        .iter()
        .map(|&c| (c < table.cols()).then_some(c))
        .collect())
}

/// Total count on the matched cells.
pub fn matched_mass(table: &ContingencyTable, mapping: &[Option<usize>]) -> u64 {
    mapping
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| table.get(r, c)))
        .sum()
}

/// The nine clustering scores, all in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub nmi: f64,
    pub ari: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub purity: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 9] = ["OA", "AA", "Kappa", "NMI", "ARI", "F1", "Precision", "Recall", "Purity"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.oa,
            self.aa,
            self.kappa,
            self.nmi,
            self.ari,
            self.f1,
            self.precision,
            self.recall,
            self.purity,
        ]
    }

    /// One `name<TAB>value` line per metric, two decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, value) in Self::NAMES.iter().zip(self.values()) {
            writeln!(out, "{name}\t{value:.2}").expect("writing to a string");
        }
        out
    }

    /// Parses the output of [`MetricReport::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut found = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (name, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::Validation(format!("malformed report line `{line}`")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("malformed value in `{line}`")))?;
            found.insert(name.to_string(), value);
        }
        let get = |name: &str| {
            found
                .get(name)
                .copied()
                .ok_or_else(|| Error::Validation(format!("report lacks {name}")))
        };
        Ok(Self {
            oa: get("OA")?,
            aa: get("AA")?,
            kappa: get("Kappa")?,
            nmi: get("NMI")?,
            ari: get("ARI")?,
            f1: get("F1")?,
            precision: get("Precision")?,
            recall: get("Recall")?,
            purity: get("Purity")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn pairs(n: u64) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

fn entropy(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization, in
/// `[0, 1]`.
pub fn nmi(table: &ContingencyTable) -> f64 {
    let total = table.total() as f64;
    let (a, b) = (table.row_sums(), table.col_sums());
    let (ha, hb) = (entropy(&a, total), entropy(&b, total));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for r in 0..table.rows() {
        for c in 0..table.cols() {
            let n = table.get(r, c);
            if n > 0 {
                let n = n as f64;
                mi += n / total * (n * total / (a[r] as f64 * b[c] as f64)).ln();
            }
        }
    }
    (mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0)
}

/// Adjusted Rand index, in `[-1, 1]`.
pub fn ari(table: &ContingencyTable) -> f64 {
    let total = table.total();
    let index: f64 = table.counts.iter().map(|&n| pairs(n)).sum();
    let sum_a: f64 = table.row_sums().into_iter().map(pairs).sum();
    let sum_b: f64 = table.col_sums().into_iter().map(pairs).sum();
    let expected = sum_a * sum_b / pairs(total).max(f64::MIN_POSITIVE);
    let max_index = (sum_a + sum_b) / 2.0;
    let denom = max_index - expected;
    if denom == 0.0 {
        // both partitions are all-singletons or a single block
        return if table.rows() == table.cols() && index == max_index {
            1.0
        } else {
            0.0
        };
    }
    (index - expected) / denom
}

/// Pair-counting precision, recall and F1 over co-membership, in `[0, 1]`.
pub fn pair_scores(table: &ContingencyTable) -> (f64, f64, f64) {
    let together: f64 = table.counts.iter().map(|&n| pairs(n)).sum();
    let pred_pairs: f64 = table.row_sums().into_iter().map(pairs).sum();
    let true_pairs: f64 = table.col_sums().into_iter().map(pairs).sum();
    let ratio = |num: f64, den: f64| if den == 0.0 { 1.0 } else { num / den };
    let precision = ratio(together, pred_pairs);
    let recall = ratio(together, true_pairs);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Scores a prediction against ground truth over pixels with non-zero truth.
pub fn compute_metrics(pred: &LabelRaster, truth: &LabelRaster) -> Result<MetricReport> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::PairMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    metrics_from_table(&ContingencyTable::from_labels(pred.ids(), truth.ids())?)
}

pub fn metrics_from_table(table: &ContingencyTable) -> Result<MetricReport> {
    let mapping = hungarian_match(table)?;
    let total = table.total() as f64;
    let class_sizes = table.col_sums();
    let cluster_sizes = table.row_sums();

    let mut hits = vec![0u64; table.cols()];
    let mut predicted_as = vec![0u64; table.cols()];
    for (r, c) in mapping.iter().enumerate() {
        if let Some(c) = *c {
            hits[c] = table.get(r, c);
            predicted_as[c] = cluster_sizes[r];
        }
    }
    let p_o = hits.iter().sum::<u64>() as f64 / total;
    let aa = hits
        .iter()
        .zip(&class_sizes)
        .map(|(&h, &n)| h as f64 / n as f64)
        .sum::<f64>()
        / table.cols() as f64;
    let p_e = predicted_as
        .iter()
        .zip(&class_sizes)
        .map(|(&p, &t)| p as f64 * t as f64)
        .sum::<f64>()
        / (total * total);
    let kappa = if p_e == 1.0 { 1.0 } else { (p_o - p_e) / (1.0 - p_e) };
    let purity = (0..table.rows())
        .map(|r| (0..table.cols()).map(|c| table.get(r, c)).max().unwrap_or(0))
        .sum::<u64>() as f64
        / total;
    let (precision, recall, f1) = pair_scores(table);
    Ok(MetricReport {
        oa: 100.0 * p_o,
        aa: 100.0 * aa,
        kappa: 100.0 * kappa,
        nmi: 100.0 * nmi(table),
        ari: 100.0 * ari(table),
        f1: 100.0 * f1,
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        purity: 100.0 * purity,
    })
}

/// Relabels every pixel's predicted id with its matched class id; clusters
/// without a match keep id 0.
pub fn mapped_prediction(pred: &[u32], table: &ContingencyTable) -> Result<Vec<u32>> {
    let mapping = hungarian_match(table)?;
    let lookup: BTreeMap<u32, u32> = table
        .pred_ids()
        .iter()
        .zip(&mapping)
        .filter_map(|(&p, c)| c.map(|c| (p, table.true_ids()[c])))
        .collect();
    Ok(pred.iter().map(|p| lookup.get(p).copied().unwrap_or(0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(ids: &[u32]) -> LabelRaster {
        LabelRaster::new(1, ids.len(), ids.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one_hundred() {
        let truth = raster(&[1, 1, 2, 2, 3, 3, 0]);
        let pred = raster(&[5, 5, 9, 9, 2, 2, 1]);
        let report = compute_metrics(&pred, &truth).unwrap();
        for v in report.values() {
            assert!((v - 100.0).abs() < 1e-9, "{report:?}");
        }
    }

    #[test]
    fn single_cluster_on_balanced_classes() {
        let truth = raster(&[1, 1, 2, 2]);
        let pred = raster(&[1, 1, 1, 1]);
        let r = compute_metrics(&pred, &truth).unwrap();
        assert!((r.oa - 50.0).abs() < 1e-12);
        assert!(r.kappa.abs() < 1e-12);
        assert!(r.ari.abs() < 1e-12);
        assert!((r.purity - 50.0).abs() < 1e-12);
    }

    #[test]
    fn swap_table_matches_off_diagonal() {
        let t = ContingencyTable::from_counts(2, 2, vec![1, 2, 2, 1]).unwrap();
        let m = hungarian_match(&t).unwrap();
        assert_eq!(m, vec![Some(1), Some(0)]);
        assert_eq!(matched_mass(&t, &m), 4);
    }

    #[test]
    fn extra_clusters_map_to_none() {
        let t = ContingencyTable::from_counts(3, 2, vec![5, 0, 0, 4, 1, 1]).unwrap();
        assert_eq!(hungarian_match(&t).unwrap(), vec![Some(0), Some(1), None]);
    }

    #[test]
    fn report_text_round_trip() {
        let r = MetricReport {
            oa: 91.234,
            aa: 90.0,
            kappa: 88.5,
            nmi: 80.0,
            ari: 75.0,
            f1: 70.0,
            precision: 65.0,
            recall: 60.0,
            purity: 92.0,
        };
        let text = r.to_text();
        assert!(text.starts_with("OA\t91.23\nAA\t90.00\nKappa\t88.50\n"));
        assert_eq!(text.lines().count(), 9);
        assert!((MetricReport::parse(&text).unwrap().oa - 91.23).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(compute_metrics(&raster(&[1, 1]), &raster(&[0, 0])).is_err());
        assert!(compute_metrics(&raster(&[1, 1]), &raster(&[1, 1, 1])).is_err());
        assert!(linear_assignment(&[], 0).is_err());
    }

    #[test]
    fn mapped_prediction_uses_class_ids() {
        let pred = [2, 2, 1, 1, 3];
        let t = ContingencyTable::from_labels(&pred, &[1, 1, 2, 2, 0]).unwrap();
        assert_eq!(mapped_prediction(&pred, &t).unwrap(), vec![1, 1, 2, 2, 0]);
    }
}
