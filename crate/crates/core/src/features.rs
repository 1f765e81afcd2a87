//! Per-cell feature vectors: the pooled activation of the feature layer.

use crate::error::{Error, Result};
use crate::model::MiniCnn3d;
use crate::volume::CellCrop;

/// Row-major `N × d` matrix with per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub cell_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub wells: Vec<String>,
    pub sites: Vec<u32>,
    pub d: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(
        cell_ids: Vec<String>,
        labels: Vec<usize>,
        wells: Vec<String>,
        sites: Vec<u32>,
        d: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let n = cell_ids.len();
        if labels.len() != n || wells.len() != n || sites.len() != n {
            return Err(Error::invalid("metadata columns have different lengths"));
        }
        if d == 0 || values.len() != n * d {
            return Err(Error::shape(format!("{} values for {n} rows of width {d}", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature in row {} ({})", i / d, cell_ids[i / d])));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for id in &cell_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate cell id {id}")));
            }
        }
        Ok(Self { cell_ids, labels, wells, sites, d, values })
    }

    pub fn rows(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Rows where `keep[i]` holds, in their original order.
    pub fn select(&self, keep: &[bool]) -> Self {
        let idx: Vec<usize> = keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
        self.take(&idx)
    }

    pub fn take(&self, idx: &[usize]) -> Self {
        Self {
            cell_ids: idx.iter().map(|&i| self.cell_ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            wells: idx.iter().map(|&i| self.wells[i].clone()).collect(),
            sites: idx.iter().map(|&i| self.sites[i]).collect(),
            d: self.d,
            values: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }

    /// Same metadata, new values of the same width.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_rows(self.cell_ids.clone(), self.labels.clone(), self.wells.clone(), self.sites.clone(), self.d, values)
    }
}

/// Global-average-pooled activation for every crop. Crops must already be
/// preprocessed and at the model's input shape.
pub fn extract_features(model: &MiniCnn3d<f32>, crops: &[CellCrop]) -> Result<FeatureMatrix> {
    let one = |c: &CellCrop| model.features(&c.volume).map(|f| f.into_iter().map(f64::from).collect::<Vec<_>>());
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        crops.par_iter().map(one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<f64>> = crops.iter().map(one).collect::<Result<_>>()?;
    FeatureMatrix::from_rows(
        crops.iter().map(|c| c.cell_id.clone()).collect(),
        crops.iter().map(|c| c.label).collect(),
        crops.iter().map(|c| c.well.clone()).collect(),
        crops.iter().map(|c| c.site).collect(),
        model.arch.feature_dim(),
        rows.concat(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn rejects_nan_and_duplicates() {
        let m = |ids: Vec<String>, v: Vec<f64>| FeatureMatrix::from_rows(ids, vec![0, 0], vec!["A".into(); 2], vec![1, 1], 1, v);
        assert!(m(ids(2), vec![1.0, f64::NAN]).is_err());
        assert!(m(vec!["a".into(), "a".into()], vec![1.0, 2.0]).is_err());
        assert!(m(ids(2), vec![1.0]).is_err());
        assert!(m(ids(2), vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn take_preserves_metadata() {
        let fm = FeatureMatrix::from_rows(ids(3), vec![0, 1, 2], vec!["A".into(), "B".into(), "C".into()], vec![1, 2, 3], 2, (0..6).map(f64::from).collect()).unwrap();
        let t = fm.take(&[2, 0]);
        assert_eq!(t.cell_ids, vec!["c2", "c0"]);
        assert_eq!(t.sites, vec![3, 1]);
        assert_eq!(t.values, vec![4.0, 5.0, 0.0, 1.0]);
    }
}
