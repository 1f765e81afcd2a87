//! Batch correction by whitening on control-cell features.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::tbf;
use crate::tensor::Tensor;

/// Relative eigenvalue floor.
pub const EIGEN_FLOOR: f64 = 1e-6;
/// Absolute floor used when every eigenvalue is zero.
pub const ZERO_SPECTRUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub matrix: Vec<f64>,
    pub floor: f64,
    pub d: usize,
    pub n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct WhiteningMeta {
    d: usize,
    n: usize,
    floor: f64,
}

fn centered(rows: &[f64], d: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if d == 0 || rows.len() % d != 0 {
        return Err(Error::shape(format!("{} values do not form rows of width {d}", rows.len())));
    }
    let n = rows.len() / d;
    if n < 2 {
        return Err(Error::invalid(format!("whitening needs at least 2 rows, got {n}")));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in whitening input"));
    }
    let x = DMatrix::from_row_slice(n, d, rows);
    let mean: Vec<f64> = x.row_mean().iter().copied().collect();
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok((xc, mean))
}

impl WhiteningTransform {
    /// Fits `W = Σ^{-1/2}` with `Σ = XᵀX / N` on the centered rows of `rows`
    /// (row-major, width `d`).
    pub fn fit(rows: &[f64], d: usize) -> Result<Self> {
        let (xc, mean) = centered(rows, d)?;
        let n = xc.nrows();
        let cov = (xc.transpose() * &xc) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let lmax = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
        let floor = if lmax > 0.0 { EIGEN_FLOOR * lmax } else { ZERO_SPECTRUM_FLOOR };
        let inv_sqrt = DVector::from_iterator(d, eig.eigenvalues.iter().map(|&l| 1.0 / l.max(floor).sqrt()));
        let q = &eig.eigenvectors;
        let w = q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
        // symmetrize away rounding
        let w = (&w + w.transpose()) * 0.5;
        let matrix = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| w[(i, j)]).collect();
        Ok(Self { mean, matrix, floor, d, n })
    }

    pub fn identity(d: usize) -> Self {
        let mut matrix = vec![0.0; d * d];
        (0..d).for_each(|i| matrix[i * d + i] = 1.0);
        Self { mean: vec![0.0; d], matrix, floor: 0.0, d, n: 0 }
    }

    /// Maps each row `y` to `W (y − μ)`.
    pub fn apply(&self, rows: &[f64], d: usize) -> Result<Vec<f64>> {
        if d != self.d || rows.len() % d != 0 {
            return Err(Error::shape(format!("transform has d = {}, input rows have width {d}", self.d)));
        }
        let mut out = vec![0.0; rows.len()];
        let mut centered = vec![0.0; d];
        for (src, dst) in rows.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for ((c, &y), &m) in centered.iter_mut().zip(src).zip(&self.mean) {
                *c = y - m;
            }
            for (i, o) in dst.iter_mut().enumerate() {
                *o = self.matrix[i * d..(i + 1) * d].iter().zip(&centered).map(|(w, c)| w * c).sum();
            }
        }
        Ok(out)
    }

    /// Writes `<stem>.tbf` holding `[μ; W]` as a `(d+1) × d` f64 tensor and
    /// `<stem>.json` with the metadata.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut data = self.mean.clone();
        data.extend_from_slice(&self.matrix);
        tbf::write_f64(&dir.join(format!("{stem}.tbf")), &Tensor::from_vec(&[self.d + 1, self.d], data)?)?;
        let meta = WhiteningMeta { d: self.d, n: self.n, floor: self.floor };
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let meta: WhiteningMeta =
            serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        let t = tbf::read_f64(&dir.join(format!("{stem}.tbf")))?;
        if t.shape() != [meta.d + 1, meta.d] {
            return Err(Error::shape(format!("whitening tensor {:?} does not match d = {}", t.shape(), meta.d)));
        }
        let data = t.into_data();
        Ok(Self { mean: data[..meta.d].to_vec(), matrix: data[meta.d..].to_vec(), floor: meta.floor, d: meta.d, n: meta.n })
    }
}

/// How control cells are pooled when fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    #[default]
    Global,
    /// One transform per imaging site.
    Site,
}

impl std::str::FromStr for GroupKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "site" => Ok(Self::Site),
            _ => Err(Error::invalid(format!("unknown grouping '{s}' (expected global or site)"))),
        }
    }
}

fn group_of(fm: &FeatureMatrix, i: usize, key: GroupKey) -> String {
    match key {
        GroupKey::Global => "all".to_string(),
        GroupKey::Site => format!("site={}", fm.sites[i]),
    }
}

/// Fits on rows with label `control` and whitens every row with the
/// transform of its group.
pub fn whiten_features(
    fm: &FeatureMatrix,
    control: usize,
    key: GroupKey,
) -> Result<(FeatureMatrix, BTreeMap<String, WhiteningTransform>)> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..fm.rows() {
        groups.entry(group_of(fm, i, key)).or_default().push(i);
    }
    if !fm.labels.contains(&control) {
        return Err(Error::invalid(format!("control label {control} has no rows")));
    }
    let mut transforms = BTreeMap::new();
    let mut out = vec![0.0; fm.values.len()];
    for (name, idx) in &groups {
        let ctrl: Vec<f64> = idx
            .iter()
            .filter(|&&i| fm.labels[i] == control)
            .flat_map(|&i| fm.row(i).iter().copied())
            .collect();
        let t = WhiteningTransform::fit(&ctrl, fm.d)
            .map_err(|e| Error::invalid(format!("group {name}: {e}")))?;
        for &i in idx {
            let w = t.apply(fm.row(i), fm.d)?;
            out[i * fm.d..(i + 1) * fm.d].copy_from_slice(&w);
        }
        transforms.insert(name.clone(), t);
    }
    Ok((fm.with_values(out)?, transforms))
}

/// Projection onto the top two principal axes, as `N × 2` row-major. Each
/// axis is signed so its largest-magnitude loading is positive.
pub fn pca2(rows: &[f64], d: usize) -> Result<Vec<f64>> {
    let (xc, _) = centered(rows, d)?;
    let n = xc.nrows();
    let cov = (xc.transpose() * &xc) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::new();
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    let mut out = Vec::with_capacity(n * 2);
    for r in 0..n {
        for axis in &axes {
            out.push((0..d).map(|j| xc[(r, j)] * axis[j]).sum());
        }
    }
    Ok(out)
}

/// Sample covariance `XᵀX / N` of centered rows, row-major.
pub fn covariance(rows: &[f64], d: usize) -> Result<Vec<f64>> {
    let (xc, _) = centered(rows, d)?;
    let cov = (xc.transpose() * &xc) / xc.nrows() as f64;
    Ok((0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_covariance() {
        // columns ±2 and ±1 in all four sign combinations: cov = diag(4, 1)
        let rows = vec![2.0, 1.0, 2.0, -1.0, -2.0, 1.0, -2.0, -1.0];
        let t = WhiteningTransform::fit(&rows, 2).unwrap();
        let expect = [0.5, 0.0, 0.0, 1.0];
        for (a, b) in t.matrix.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", t.matrix);
        }
    }

    #[test]
    fn identity_transform_is_noop() {
        let rows = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(WhiteningTransform::identity(2).apply(&rows, 2).unwrap(), rows);
    }

    #[test]
    fn rank_deficient_stays_finite() {
        let rows: Vec<f64> = (0..10).flat_map(|i| [i as f64, i as f64, (i * i) as f64]).collect();
        let t = WhiteningTransform::fit(&rows, 3).unwrap();
        assert!(t.matrix.iter().all(|v| v.is_finite()));
        assert!(t.apply(&rows, 3).unwrap().iter().all(|v| v.is_finite()));
        let zero = WhiteningTransform::fit(&[1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(zero.floor, ZERO_SPECTRUM_FLOOR);
    }

    #[test]
    fn errors() {
        assert!(WhiteningTransform::fit(&[1.0, 2.0], 2).is_err());
        assert!(WhiteningTransform::fit(&[1.0, f64::INFINITY, 0.0, 0.0], 2).is_err());
        assert!(WhiteningTransform::identity(2).apply(&[1.0, 2.0, 3.0], 3).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![2.0, 1.0, 0.5, -1.0, -2.0, 1.5, -2.0, -1.0];
        let t = WhiteningTransform::fit(&rows, 2).unwrap();
        t.save(dir.path(), "w").unwrap();
        assert_eq!(WhiteningTransform::load(dir.path(), "w").unwrap(), t);
    }

    #[test]
    fn pca_of_line_is_one_dimensional() {
        let rows: Vec<f64> = (0..6).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let p = pca2(&rows, 2).unwrap();
        for r in p.chunks(2) {
            assert!(r[1].abs() < 1e-9);
        }
        assert!(p[10] > 0.0);
    }

    #[test]
    fn control_label_must_exist() {
        let fm = FeatureMatrix::from_rows(
            vec!["a".into(), "b".into()],
            vec![1, 1],
            vec!["W".into(); 2],
            vec![1, 1],
            1,
            vec![1.0, 2.0],
        )
        .unwrap();
        assert!(whiten_features(&fm, 0, GroupKey::Global).is_err());
    }
}
