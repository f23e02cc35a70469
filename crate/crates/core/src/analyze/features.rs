use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::DualEncoder;
use crate::report::write_csv;
use crate::synthdata::Example;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: u64,
    pub label: usize,
    pub features: Vec<f64>,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExport {
    pub rows: Vec<FeatureRow>,
    /// Variance captured by the two components.
    pub explained_variance: [f64; 2],
}

/// Two leading principal components of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub coords: Vec<[f64; 2]>,
    pub variances: [f64; 2],
}

/// Projects centered points onto the top two covariance eigenvectors.
/// Each component's sign is fixed so that its largest-magnitude loading is
/// positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Pca> {
    let n = points.len();
    if n < 2 {
        return Err(Error::degenerate("pca", format!("need at least 2 points, got {n}")));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::dim("pca", "ragged or empty points"));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let component = |k: usize| -> (Vec<f64>, f64) {
        let Some(&idx) = order.get(k) else {
            return (vec![0.0; d], 0.0);
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        (v, eig.eigenvalues[idx].max(0.0))
    };
    let (v1, l1) = component(0);
    let (v2, l2) = component(1);
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let dot = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [dot(&v1), dot(&v2)]
        })
        .collect();
    Ok(Pca {
        coords,
        variances: [l1, l2],
    })
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Between-class over within-class scatter (traces) of L2-normalized
/// features.
pub fn fisher_ratio(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.len() != labels.len() || features.len() < 2 {
        return Err(Error::degenerate("fisher_ratio", "need at least 2 labelled points"));
    }
    let xs: Vec<Vec<f64>> = features.iter().map(|f| unit(f)).collect();
    let d = xs[0].len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (x, &y) in xs.iter().zip(labels) {
        counts[y] += 1;
        sums[y].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    let n = xs.len() as f64;
    let grand: Vec<f64> = (0..d).map(|j| sums.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let between: f64 = means.iter().zip(&counts).map(|(m, &c)| c as f64 * sq(m, &grand)).sum();
    let within: f64 = xs.iter().zip(labels).map(|(x, &y)| sq(x, &means[y])).sum();
    if within == 0.0 {
        return Err(Error::degenerate("fisher_ratio", "zero within-class scatter"));
    }
    Ok(between / within)
}

/// Image features of `examples` with 2-D PCA coordinates fitted on them.
pub fn export_features(model: &DualEncoder, examples: &[Example], exec: ExecMode) -> Result<FeatureExport> {
    if examples.len() < 2 {
        return Err(Error::degenerate("export_features", format!("need at least 2 examples, got {}", examples.len())));
    }
    let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
    let feats = model.embed_images(&images, exec)?;
    let pca = pca_2d(&feats)?;
    let rows = examples
        .iter()
        .zip(feats)
        .zip(&pca.coords)
        .map(|((e, features), c)| FeatureRow {
            id: e.id,
            label: e.label,
            features,
            pc1: c[0],
            pc2: c[1],
        })
        .collect();
    Ok(FeatureExport {
        rows,
        explained_variance: pca.variances,
    })
}

impl FeatureExport {
    pub fn fisher_ratio(&self) -> Result<f64> {
        let f: Vec<Vec<f64>> = self.rows.iter().map(|r| r.features.clone()).collect();
        let l: Vec<usize> = self.rows.iter().map(|r| r.label).collect();
        fisher_ratio(&f, &l)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.rows.first().map_or(0, |r| r.features.len());
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..d).map(|j| format!("f{j}")));
        header.extend(["pc1".to_string(), "pc2".to_string()]);
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            path,
            "features",
            &header,
            self.rows.iter().map(|r| {
                let mut row = vec![r.id.to_string(), r.label.to_string()];
                row.extend(r.features.iter().map(f64::to_string));
                row.push(r.pc1.to_string());
                row.push(r.pc2.to_string());
                row
            }),
        )
    }
}
