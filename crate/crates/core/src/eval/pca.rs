use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric `n×n` row-major matrix by cyclic
/// Jacobi rotations. Returns eigenvalues in descending order and the
/// matching unit eigenvectors, each with its largest-magnitude entry positive.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if a.len() != n * n {
        return Err(Error::shape("eigen", format!("{} values for {n}×{n}", a.len())));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut col: Vec<f64> = (0..n).map(|k| v[k * n + i]).collect();
            let lead = col
                .iter()
                .copied()
                .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if lead < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    Ok((values, vectors))
}

/// Two leading principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.axes
            .clone()
            .map(|ax| ax.iter().zip(&centered).map(|(a, c)| a * c).sum())
    }
}

/// Fits the two-component PCA of `rows` (each of equal length).
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Pca> {
    if rows.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 3 samples, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    if d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape(
            "pca",
            "rows must share a dimension of at least 2".to_string(),
        ));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j] / (n - 1.0);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let (vals, vecs) = symmetric_eigen(&cov, d)?;
    Ok(Pca {
        mean,
        axes: [vecs[0].clone(), vecs[1].clone()],
        variances: [vals[0], vals[1]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonalizes_known_matrix() {
        // eigenvalues 3 and 1 with axes (1,1)/√2 and (1,−1)/√2
        let (vals, vecs) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((vecs[0][0] - r).abs() < 1e-12 && (vecs[0][1] - r).abs() < 1e-12);
        assert!(vecs[1].iter().map(|x| x.abs()).fold(0.0, f64::max) > 0.7);
    }

    #[test]
    fn rank_two_cloud_reconstructs_exactly() {
        let u = [1.0, 2.0, 0.0, -1.0];
        let w = [0.0, 1.0, 1.0, 1.0];
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let (a, b) = ((i as f64).sin() * 3.0, (i as f64 * 0.7).cos());
                (0..4).map(|k| 0.5 + a * u[k] + b * w[k]).collect()
            })
            .collect();
        let p = pca_2d(&rows).unwrap();
        let dot: f64 = p.axes[0].iter().zip(&p.axes[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-10);
        for r in &rows {
            let c = p.project(r);
            for k in 0..4 {
                let back = p.mean[k] + c[0] * p.axes[0][k] + c[1] * p.axes[1][k];
                assert!((back - r[k]).abs() < 1e-9);
            }
        }
        assert!(pca_2d(&rows[..2]).is_err());
    }
}
