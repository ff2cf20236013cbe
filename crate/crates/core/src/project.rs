//! Linear 2-D projection of representation sets, exported as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DisentangledBatch;
use crate::numerics::Matrix;

const JACOBI_MAX_SWEEPS: usize = 100;
/// Eigenvalues below this fraction of the total variance count as zero.
const RANK_TOLERANCE: f64 = 1e-12;

pub const GROUP_SRC_SEMANTIC: &str = "src_semantic";
pub const GROUP_TGT_SEMANTIC: &str = "tgt_semantic";
pub const GROUP_SRC_LANGUAGE: &str = "src_language";
pub const GROUP_TGT_LANGUAGE: &str = "tgt_language";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    /// `M × c` coordinates, `c ≤ k` being the number of components recovered.
    pub coords: Matrix,
    /// Fraction of total variance per component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Unit principal directions, one per row.
    pub directions: Matrix,
    pub group_labels: Vec<String>,
    /// Set when the data had fewer than `k` non-trivial components.
    pub rank_deficient: bool,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and matching unit eigenvectors as rows.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("symmetric_eigen", a.shape_str(), "square matrix"));
    }
    let mut a = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|k| v.get(k, i)).collect();
        let max = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-12 * max.max(1e-300)) {
            if *first < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
        }
        vectors.row_mut(r).copy_from_slice(&col);
    }
    Ok((values, vectors))
}

/// Project the rows of `x` onto its top `k` principal directions.
pub fn pca_project(x: &Matrix, k: usize) -> Result<ProjectionResult> {
    let (m, d) = x.shape();
    if m < 2 {
        return Err(Error::InvalidBatch(format!("PCA needs at least 2 rows, got {m}")));
    }
    if k == 0 || k > m.min(d) {
        return Err(Error::Config(format!("cannot take {k} components of a {m}×{d} matrix")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite {
            path: "projection input".into(),
        });
    }
    let mean = x.column_means();
    let mut centered = x.clone();
    for i in 0..m {
        for (v, mu) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    let cov = centered.transpose().matmul(&centered)?.scale(1.0 / (m - 1) as f64);
    let (values, vectors) = symmetric_eigen(&cov)?;
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let rank = values
        .iter()
        .filter(|&&v| total > 0.0 && v > RANK_TOLERANCE * total)
        .count();
    let kept = k.min(rank);
    let directions = vectors.select_rows(&(0..kept).collect::<Vec<_>>());
    let coords = centered.matmul(&directions.transpose())?;
    let explained_variance = values[..kept]
        .iter()
        .map(|v| (v.max(0.0) / total).clamp(0.0, 1.0))
        .collect();
    Ok(ProjectionResult {
        coords,
        explained_variance,
        directions,
        group_labels: vec![String::new(); m],
        rank_deficient: kept < k,
    })
}

/// Stack the four representations of a batch and project them jointly.
pub fn project_representations(batch: &DisentangledBatch) -> Result<ProjectionResult> {
    let stacked = batch
        .s_m
        .vstack(&batch.t_m)?
        .vstack(&batch.s_l)?
        .vstack(&batch.t_l)?;
    let mut result = pca_project(&stacked, 2)?;
    let n = batch.len();
    result.group_labels = [GROUP_SRC_SEMANTIC, GROUP_TGT_SEMANTIC, GROUP_SRC_LANGUAGE, GROUP_TGT_LANGUAGE]
        .iter()
        .flat_map(|g| std::iter::repeat_n(g.to_string(), n))
        .collect();
    Ok(result)
}

impl ProjectionResult {
    /// CSV text: a `#` comment naming the method, a header, then
    /// `x,y,group_label` rows with 12 significant digits. A missing second
    /// component is written as 0.
    pub fn to_csv(&self) -> String {
        let ev: Vec<String> = self.explained_variance.iter().map(|v| format!("{v:.6}")).collect();
        let mut out = format!(
            "# method: PCA (linear, top-2 principal components); explained variance [{}]{}\n",
            ev.join(", "),
            if self.rank_deficient { "; rank deficient" } else { "" }
        );
        out.push_str("x,y,group_label\n");
        for (i, label) in self.group_labels.iter().enumerate() {
            let x = if self.coords.cols() > 0 { self.coords.get(i, 0) } else { 0.0 };
            let y = if self.coords.cols() > 1 { self.coords.get(i, 1) } else { 0.0 };
            let _ = writeln!(out, "{x:.11e},{y:.11e},{label}");
        }
        out
    }
}

pub fn export_projection(result: &ProjectionResult, path: &Path) -> Result<()> {
    fs::write(path, result.to_csv()).map_err(|e| Error::io(path, e))
}

/// Parse rows written by [`export_projection`].
pub fn parse_projection_csv(text: &str) -> Result<Vec<(f64, f64, String)>> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != "x,y,group_label" {
                return Err(Error::Config(format!("line {}: expected the CSV header", n + 1)));
            }
            header_seen = true;
            continue;
        }
        let bad = || Error::Config(format!("line {}: malformed row {line:?}", n + 1));
        let mut parts = line.splitn(3, ',');
        let x = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let y = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let label = parts.next().ok_or_else(bad)?.to_string();
        rows.push((x, y, label));
    }
    if !header_seen {
        return Err(Error::Config("missing CSV header".into()));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.sample(rand_distr::StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        let h = 0.5f64.sqrt();
        assert!((vecs.get(0, 0) - h).abs() < 1e-14 && (vecs.get(0, 1) - h).abs() < 1e-14);
        assert!(vecs.get(1, 0) > 0.0);
    }

    #[test]
    fn collinear_data_is_one_component() {
        let dir = [1.0, -2.0, 0.5];
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| dir.iter().map(|d| 3.0 + d * (i as f64 - 7.3)).collect())
            .collect();
        let r = pca_project(&Matrix::from_rows(&rows).unwrap(), 2).unwrap();
        assert!(r.explained_variance[0] >= 0.999);
        assert!(r.rank_deficient);
        assert_eq!(r.coords.cols(), 1);
        assert!(r.to_csv().lines().nth(2).unwrap().contains(",0.00000000000e0,"));
    }

    #[test]
    fn full_rank_2d_captures_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = pca_project(&gaussian(&mut rng, 50, 2), 2).unwrap();
        assert!((r.explained_variance.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.explained_variance[0] >= r.explained_variance[1]);
    }

    #[test]
    fn planted_subspace_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis = crate::data::random_orthogonal(&mut ChaCha8Rng::seed_from_u64(4), 16);
        let planted = basis.select_rows(&[0, 1]);
        let latent = gaussian(&mut rng, 200, 2);
        let noise = gaussian(&mut rng, 200, 16).scale(1e-6);
        let x = latent.matmul(&planted).unwrap().add(&noise).unwrap();
        let r = pca_project(&x, 2).unwrap();
        // Largest principal angle: smallest singular value of D·Pᵀ.
        let m = r.directions.matmul(&planted.transpose()).unwrap();
        let (vals, _) = symmetric_eigen(&m.matmul(&m.transpose()).unwrap()).unwrap();
        let angle = vals[1].max(0.0).sqrt().min(1.0).acos();
        assert!(angle <= 1e-3, "angle {angle}");
    }

    #[test]
    fn translation_only_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(&mut rng, 30, 5);
        let shifted = x.map(|v| v + 12.5);
        let (a, b) = (pca_project(&x, 2).unwrap(), pca_project(&shifted, 2).unwrap());
        assert!(a.coords.sub(&b.coords).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let parts: Vec<Matrix> = (0..4).map(|_| gaussian(&mut rng, 7, 4)).collect();
        let b = DisentangledBatch::from_parts(
            parts[0].clone(),
            parts[1].clone(),
            parts[2].clone(),
            parts[3].clone(),
            parts[0].clone(),
            parts[2].clone(),
        )
        .unwrap();
        let r = project_representations(&b).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("# method: PCA"));
        let rows = parse_projection_csv(&csv).unwrap();
        assert_eq!(rows.len(), 28);
        for (i, (x, y, _)) in rows.iter().enumerate() {
            assert!((x - r.coords.get(i, 0)).abs() <= 1e-9 && (y - r.coords.get(i, 1)).abs() <= 1e-9);
        }
        for g in [GROUP_SRC_SEMANTIC, GROUP_TGT_SEMANTIC, GROUP_SRC_LANGUAGE, GROUP_TGT_LANGUAGE] {
            assert_eq!(rows.iter().filter(|r| r.2 == g).count(), 7);
        }
        assert_eq!(project_representations(&b).unwrap().to_csv(), csv);
    }

    #[test]
    fn empty_export_is_header_only() {
        let empty = ProjectionResult {
            coords: Matrix::zeros(0, 2),
            explained_variance: vec![],
            directions: Matrix::zeros(0, 3),
            group_labels: vec![],
            rank_deficient: false,
        };
        let rows = parse_projection_csv(&empty.to_csv()).unwrap();
        assert!(rows.is_empty());
        assert_eq!(empty.to_csv().lines().count(), 2);
    }
}
