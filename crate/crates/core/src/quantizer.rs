//! Codebook storage, nearest-neighbor vector quantization with a
//! straight-through backward, the two-term codebook/commitment loss, and
//! codebook diagnostics (usage percentage, PCA projection).

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::NamedParams;
use crate::tensor::{mse, Scalar, Tensor};

/// K code embeddings plus one learnable mask-code embedding used to fill
/// dropped grid positions.
pub struct Codebook<T: Scalar> {
    pub embeddings: Tensor<T>,
    pub mask_embedding: Tensor<T>,
}

impl<T: Scalar> Codebook<T> {
    /// Entries and the mask embedding start uniform in [-1/K, 1/K].
    pub fn new(k: usize, n_z: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::EmptyCodebook);
        }
        if n_z == 0 {
            return Err(Error::DimensionMismatch {
                what: "codebook dimension",
                expected: 1,
                got: 0,
            });
        }
        let bound = 1.0 / k as f64;
        Ok(Codebook {
            embeddings: Tensor::uniform(vec![k, n_z], -bound, bound, rng, true),
            mask_embedding: Tensor::uniform(vec![n_z], -bound, bound, rng, true),
        })
    }

    pub fn k(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn n_z(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.embeddings"), self.embeddings.clone()));
        out.push((format!("{prefix}.mask_embedding"), self.mask_embedding.clone()));
    }
}

/// Outcome of quantizing a batch of feature rows.
pub struct QuantizationResult<T: Scalar> {
    /// Selected code per row, each in [0, K).
    pub codes: Vec<usize>,
    /// Forward values are exactly the selected embedding rows; backward is
    /// the straight-through identity into the input features.
    pub quantized: Tensor<T>,
    /// Same values as `quantized` but differentiable toward the codebook;
    /// this is the path the codebook loss trains through.
    pub embedded: Tensor<T>,
    /// Mean squared feature-to-embedding distance (element mean), as a
    /// plain metric.
    pub commit_distance: f64,
}

/// Map each feature row to its nearest codebook entry (squared Euclidean
/// distance, ties broken toward the smallest index). Distances are
/// accumulated and compared in f64 so the assignment is exact.
pub fn quantize<T: Scalar>(
    features: &Tensor<T>,
    codebook: &Codebook<T>,
) -> Result<QuantizationResult<T>> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            left: shape.to_vec(),
            right: vec![0, codebook.n_z()],
        });
    }
    let (n, d) = (shape[0], shape[1]);
    if d != codebook.n_z() {
        return Err(Error::DimensionMismatch {
            what: "quantize feature dim",
            expected: codebook.n_z(),
            got: d,
        });
    }
    let k = codebook.k();
    if k == 0 {
        return Err(Error::EmptyCodebook);
    }

    let mut codes = Vec::with_capacity(n);
    let mut total_sq = 0.0f64;
    {
        let f = features.values();
        let e = codebook.embeddings.values();
        for row in 0..n {
            let z = &f[row * d..(row + 1) * d];
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for c in 0..k {
                let emb = &e[c * d..(c + 1) * d];
                let mut dist = 0.0f64;
                for j in 0..d {
                    let diff = z[j].as_f64() - emb[j].as_f64();
                    dist += diff * diff;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = c;
                }
            }
            codes.push(best);
            total_sq += best_dist;
        }
    }
    let quantized = features.straight_through_rows(&codebook.embeddings, &codes)?;
    let embedded = codebook.embeddings.index_rows(&codes)?;
    Ok(QuantizationResult {
        codes,
        quantized,
        embedded,
        commit_distance: total_sq / (n * d) as f64,
    })
}

/// Two-term quantization loss `||sg(z) - e||^2 + beta * ||z - sg(e)||^2`
/// with element-mean norms. The first term updates the codebook, the second
/// pulls the encoder features toward their entries.
pub fn vq_loss<T: Scalar>(
    features: &Tensor<T>,
    result: &QuantizationResult<T>,
    beta: f64,
) -> Result<Tensor<T>> {
    let codebook_term = mse(&result.embedded, &features.detach())?;
    let commit_term = mse(features, &result.embedded.detach())?;
    codebook_term.add(&commit_term.mul_scalar(T::from_f64(beta)))
}

/// Percentage of distinct codes used, `100 * |distinct| / K`.
pub fn codebook_usage(code_lists: &[Vec<usize>], k: usize) -> Result<f64> {
    let mut seen = vec![false; k];
    let mut distinct = 0usize;
    for list in code_lists {
        for &c in list {
            if c >= k {
                return Err(Error::CodeOutOfRange { code: c, k });
            }
            if !seen[c] {
                seen[c] = true;
                distinct += 1;
            }
        }
    }
    Ok(100.0 * distinct as f64 / k as f64)
}

/// Projection of the codebook onto its top-2 principal components.
/// Directions with (near-)zero variance project to zero; each component's
/// sign is fixed so its largest-magnitude coordinate is positive.
pub fn codebook_pca<T: Scalar>(codebook: &Codebook<T>) -> Result<Vec<(f64, f64)>> {
    let k = codebook.k();
    let d = codebook.n_z();
    if k < 2 {
        return Err(Error::DimensionMismatch {
            what: "codebook_pca entries",
            expected: 2,
            got: k,
        });
    }
    let e = codebook.embeddings.values();
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|r| (0..d).map(|j| e[r * d + j].as_f64()).collect())
        .collect();
    drop(e);

    let mut mean = vec![0.0f64; d];
    for row in &rows {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= k as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| (0..d).map(|j| row[j] - mean[j]).collect())
        .collect();

    // covariance, d x d
    let mut cov = vec![0.0f64; d * d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    let denom = (k - 1) as f64;
    for v in cov.iter_mut() {
        *v /= denom;
    }

    let (eigvals, eigvecs) = jacobi_eigh(&cov, d);
    // indices of the two largest eigenvalues
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let floor = 1e-12 * trace.max(1.0);

    let mut components = Vec::new();
    for rank in 0..2 {
        if rank < d && eigvals[order[rank]] > floor {
            let col = order[rank];
            let mut v: Vec<f64> = (0..d).map(|i| eigvecs[i * d + col]).collect();
            let lead = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if v[lead] < 0.0 {
                for x in v.iter_mut() {
                    *x = -*x;
                }
            }
            components.push(Some(v));
        } else {
            components.push(None);
        }
    }

    let project = |row: &[f64], comp: &Option<Vec<f64>>| -> f64 {
        match comp {
            Some(v) => row.iter().zip(v.iter()).map(|(a, b)| a * b).sum(),
            None => 0.0,
        }
    };
    Ok(centered
        .iter()
        .map(|row| (project(row, &components[0]), project(row, &components[1])))
        .collect())
}

/// Write the PCA projection as `code_index,pc1,pc2` rows.
pub fn write_pca_csv(path: &Path, projection: &[(f64, f64)]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "code_index,pc1,pc2")?;
    for (i, (a, b)) in projection.iter().enumerate() {
        writeln!(file, "{i},{a},{b}")?;
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors-as-columns).
fn jacobi_eigh(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p * n + q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * a[p * n + q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i * n + i]).collect();
    (eig, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::tensor::rel_err;

    fn codebook_from(rows: Vec<Vec<f64>>) -> Codebook<f64> {
        let k = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Codebook {
            embeddings: Tensor::param(vec![k, d], flat).unwrap(),
            mask_embedding: Tensor::param(vec![d], vec![0.0; d]).unwrap(),
        }
    }

    #[test]
    fn quantize_picks_nearest_by_inspection() {
        let cb = codebook_from(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let z = Tensor::from_vec(vec![1, 2], vec![0.2, 0.1]).unwrap();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.codes, vec![0]); // distances 0.05 vs 1.45

        let z = Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.codes, vec![1]);
        assert_eq!(q.commit_distance, 0.0);
        assert_eq!(q.quantized.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn quantize_matches_exhaustive_scan_oracle() {
        let mut rng = stream_rng(21, "quant", 0);
        let k = 64;
        let d = 8;
        let cb = Codebook::<f64>::new(k, d, &mut rng).unwrap();
        let feats = Tensor::<f64>::uniform(vec![1000, d], -0.05, 0.05, &mut rng, false);
        let q = quantize(&feats, &cb).unwrap();

        // independent exhaustive scan
        let f = feats.to_vec();
        let e = cb.embeddings.to_vec();
        for row in 0..1000 {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for c in 0..k {
                let dist: f64 = (0..d)
                    .map(|j| (f[row * d + j] - e[c * d + j]).powi(2))
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = c;
                }
            }
            assert_eq!(q.codes[row], best, "row {row}");
        }
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = stream_rng(22, "idem", 0);
        let cb = Codebook::<f64>::new(16, 4, &mut rng).unwrap();
        let feats = Tensor::<f64>::uniform(vec![50, 4], -0.1, 0.1, &mut rng, false);
        let q1 = quantize(&feats, &cb).unwrap();
        let q2 = quantize(&q1.quantized, &cb).unwrap();
        assert_eq!(q1.codes, q2.codes);
        assert_eq!(q2.commit_distance, 0.0);
    }

    #[test]
    fn ties_break_toward_smallest_index() {
        // two identical entries: the smaller index must win
        let cb = codebook_from(vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![2.0, 2.0]]);
        let z = Tensor::from_vec(vec![1, 2], vec![0.4, 0.6]).unwrap();
        assert_eq!(quantize(&z, &cb).unwrap().codes, vec![0]);

        // permuting the tied rows moves the winner predictably
        let cb2 = codebook_from(vec![vec![2.0, 2.0], vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(quantize(&z, &cb2).unwrap().codes, vec![1]);

        // symmetric tie between distinct entries
        let cb3 = codebook_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let z = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(quantize(&z, &cb3).unwrap().codes, vec![0]);
    }

    #[test]
    fn quantize_rejects_bad_dims() {
        let mut rng = stream_rng(23, "dims", 0);
        let cb = Codebook::<f64>::new(4, 3, &mut rng).unwrap();
        let z = Tensor::<f64>::zeros(vec![2, 5]);
        assert!(matches!(
            quantize(&z, &cb),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(Codebook::<f64>::new(0, 3, &mut rng).is_err());
    }

    #[test]
    fn straight_through_passes_identity_gradient() {
        let mut rng = stream_rng(24, "st", 0);
        let cb = Codebook::<f64>::new(8, 3, &mut rng).unwrap();
        let feats = Tensor::<f64>::uniform(vec![4, 3], -0.1, 0.1, &mut rng, true);
        let q = quantize(&feats, &cb).unwrap();

        // downstream weights; gradient through the quantized path must be
        // exactly what an identity would pass
        let w = Tensor::<f64>::uniform(vec![4, 3], -1.0, 1.0, &mut rng, false);
        let loss = q.quantized.mul(&w).unwrap().sum_all();
        loss.backward().unwrap();
        let g = feats.grad_vec().unwrap();
        assert_eq!(g, w.to_vec());

        // a tiny feature perturbation that keeps the argmin leaves codes fixed
        feats.with_data_mut(|d| d[0] += 1e-9);
        let q2 = quantize(&feats, &cb).unwrap();
        assert_eq!(q.codes, q2.codes);
    }

    #[test]
    fn vq_loss_cases_and_oracle() {
        let mut rng = stream_rng(25, "vql", 0);
        let cb = Codebook::<f64>::new(8, 4, &mut rng).unwrap();

        // z equal to its nearest embedding -> 0
        let z = cb.embeddings.slice_rows(3, 2).unwrap().detach();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.codes, vec![3, 4]);
        assert!(vq_loss(&z, &q, 0.25).unwrap().item() < 1e-30);

        // beta = 0 -> loss equals the mean squared distance
        let z = Tensor::<f64>::uniform(vec![5, 4], -0.2, 0.2, &mut rng, true);
        let q = quantize(&z, &cb).unwrap();
        let l0 = vq_loss(&z, &q, 0.0).unwrap().item();
        assert!(rel_err(l0, q.commit_distance) < 1e-9);

        // random case against the hand-expanded two-term formula
        let beta = 0.25;
        let l = vq_loss(&z, &q, beta).unwrap().item();
        let zv = z.to_vec();
        let ev = cb.embeddings.to_vec();
        let mut want = 0.0;
        for (row, &c) in q.codes.iter().enumerate() {
            for j in 0..4 {
                let diff = zv[row * 4 + j] - ev[c * 4 + j];
                want += diff * diff * (1.0 + beta);
            }
        }
        want /= 20.0;
        assert!(rel_err(l, want) < 1e-9, "{l} vs {want}");

        // gradient reaches both the codebook (term 1) and features (term 2)
        let l = vq_loss(&z, &q, beta).unwrap();
        l.backward().unwrap();
        assert!(z.grad_vec().unwrap().iter().any(|&g| g != 0.0));
        assert!(cb
            .embeddings
            .grad_vec()
            .unwrap()
            .iter()
            .any(|&g| g != 0.0));
    }

    #[test]
    fn usage_percentages() {
        let k = 1024;
        let all: Vec<usize> = (0..k).collect();
        assert_eq!(codebook_usage(&[all], k).unwrap(), 100.0);
        let only_zero = vec![vec![0usize; 10]];
        let got = codebook_usage(&only_zero, k).unwrap();
        assert!((got - 100.0 / 1024.0).abs() < 1e-12);
        assert!(matches!(
            codebook_usage(&[vec![1024]], k),
            Err(Error::CodeOutOfRange { code: 1024, .. })
        ));
    }

    #[test]
    fn usage_matches_set_oracle_and_is_monotone() {
        let mut rng = stream_rng(26, "usage", 0);
        let k = 64;
        let mut lists: Vec<Vec<usize>> = Vec::new();
        let mut prev = 0.0;
        for _ in 0..20 {
            let list: Vec<usize> = (0..30).map(|_| rand::Rng::gen_range(&mut rng, 0..k)).collect();
            lists.push(list);
            let got = codebook_usage(&lists, k).unwrap();
            // set-cardinality oracle
            let mut set = std::collections::HashSet::new();
            for l in &lists {
                set.extend(l.iter().copied());
            }
            assert!((got - 100.0 * set.len() as f64 / k as f64).abs() < 1e-12);
            assert!(got >= prev);
            prev = got;
        }
    }

    #[test]
    fn pca_rank_one_and_duplicates() {
        // embeddings on a line: second component carries ~no variance
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let cb = codebook_from(rows);
        let proj = codebook_pca(&cb).unwrap();
        let var2: f64 = proj.iter().map(|p| p.1 * p.1).sum::<f64>() / 5.0;
        assert!(var2 < 1e-12);

        // duplicate rows land on identical points
        let cb = codebook_from(vec![
            vec![1.0, 2.0],
            vec![1.0, 2.0],
            vec![-1.0, 0.5],
        ]);
        let proj = codebook_pca(&cb).unwrap();
        assert_eq!(proj[0], proj[1]);
    }

    #[test]
    fn pca_matches_covariance_eigenvalue_oracle() {
        let mut rng = stream_rng(27, "pca", 0);
        let k = 200;
        let d = 6;
        let cb = Codebook::<f64>::new(k, d, &mut rng).unwrap();
        // stretch two directions so the spectrum is unambiguous
        cb.embeddings.with_data_mut(|v| {
            for r in 0..k {
                v[r * d] *= 40.0;
                v[r * d + 1] *= 15.0;
            }
        });
        let proj = codebook_pca(&cb).unwrap();
        let var1: f64 = proj.iter().map(|p| p.0 * p.0).sum::<f64>() / (k - 1) as f64;
        let var2: f64 = proj.iter().map(|p| p.1 * p.1).sum::<f64>() / (k - 1) as f64;

        // oracle: power iteration on a covariance built independently
        let e = cb.embeddings.to_vec();
        let mut mean = vec![0.0; d];
        for r in 0..k {
            for j in 0..d {
                mean[j] += e[r * d + j] / k as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for r in 0..k {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] +=
                        (e[r * d + i] - mean[i]) * (e[r * d + j] - mean[j]) / (k - 1) as f64;
                }
            }
        }
        let power_iter = |m: &[f64]| -> (f64, Vec<f64>) {
            let mut v = vec![1.0; d];
            for _ in 0..500 {
                let mut nv = vec![0.0; d];
                for i in 0..d {
                    for j in 0..d {
                        nv[i] += m[i * d + j] * v[j];
                    }
                }
                let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
                v = nv.iter().map(|x| x / norm).collect();
            }
            let mut mv = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    mv[i] += m[i * d + j] * v[j];
                }
            }
            let lambda: f64 = v.iter().zip(mv.iter()).map(|(a, b)| a * b).sum();
            (lambda, v)
        };
        let (l1, v1) = power_iter(&cov);
        // deflate and get the second eigenvalue
        let mut cov2 = cov.clone();
        for i in 0..d {
            for j in 0..d {
                cov2[i * d + j] -= l1 * v1[i] * v1[j];
            }
        }
        let (l2, _) = power_iter(&cov2);

        assert!(rel_err(var1, l1) < 1e-6, "{var1} vs {l1}");
        assert!(rel_err(var2, l2) < 1e-6, "{var2} vs {l2}");
        // comparable spread on both components for this cloud
        assert!(var1 > 0.0 && var2 > 0.0);
    }
}
