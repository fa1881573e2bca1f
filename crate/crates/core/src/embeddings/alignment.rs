use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;

use super::{EmbeddingError, EmbeddingTable, Namespace, Result, SharedKey};

#[derive(Debug, Clone, PartialEq)]
pub struct FitInfo {
    pub num_shared_keys: usize,
    pub sum_squared_residual: f64,
    /// Numerical rank of the stacked source matrix. Not persisted, so `None`
    /// after loading from disk.
    pub effective_rank: Option<usize>,
}

/// Linear map from the source (entity table) space into the target
/// (wordpiece) space, stored as a `target_dim x source_dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    matrix: Array2<f64>,
    pub fit_info: FitInfo,
}

impl AlignmentMap {
    pub fn new(matrix: Array2<f64>, fit_info: FitInfo) -> Self {
        Self { matrix, fit_info }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(
            Array2::eye(dim),
            FitInfo {
                num_shared_keys: 0,
                sum_squared_residual: 0.0,
                effective_rank: None,
            },
        )
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn source_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Exact matrix-vector product `W v`, accumulated left to right.
    pub fn map_entity(&self, vector: &[f64]) -> Result<Vec<f64>> {
        if vector.len() != self.source_dim() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.source_dim(),
                found: vector.len(),
            });
        }
        Ok(self
            .matrix
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(vector).fold(0.0, |acc, (w, x)| acc + w * x))
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "{} {} {} {}",
            self.target_dim(),
            self.source_dim(),
            self.fit_info.num_shared_keys,
            self.fit_info.sum_squared_residual
        )?;
        for row in self.matrix.rows() {
            let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or(EmbeddingError::MissingHeader)??;
        let fields: Vec<&str> = header.split(' ').collect();
        let bad_header = || EmbeddingError::Malformed {
            line: 1,
            message: "expected `<target_dim> <source_dim> <num_shared_keys> <residual>`"
                .to_string(),
        };
        if fields.len() != 4 {
            return Err(bad_header());
        }
        let target_dim: usize = fields[0].parse().map_err(|_| bad_header())?;
        let source_dim: usize = fields[1].parse().map_err(|_| bad_header())?;
        let num_shared_keys: usize = fields[2].parse().map_err(|_| bad_header())?;
        let residual: f64 = fields[3].parse().map_err(|_| bad_header())?;
        if target_dim == 0 || source_dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }

        let mut data = Vec::with_capacity(target_dim * source_dim);
        for r in 0..target_dim {
            let line_no = r + 2;
            let line = lines.next().ok_or_else(|| EmbeddingError::Malformed {
                line: line_no,
                message: "missing matrix row".to_string(),
            })??;
            let row = line
                .split(' ')
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| EmbeddingError::Malformed {
                    line: line_no,
                    message: format!("bad float: {e}"),
                })?;
            if row.len() != source_dim {
                return Err(EmbeddingError::RowDimension {
                    line: line_no,
                    expected: source_dim,
                    found: row.len(),
                });
            }
            data.extend(row);
        }
        let matrix = Array2::from_shape_vec((target_dim, source_dim), data).expect("shape checked");
        Ok(Self::new(
            matrix,
            FitInfo {
                num_shared_keys,
                sum_squared_residual: residual,
                effective_rank: None,
            },
        ))
    }
}

fn checked_row<'a>(table: &'a EmbeddingTable, ns: Namespace, key: &str) -> Result<&'a [f64]> {
    let row = table
        .get(ns, key)
        .ok_or_else(|| EmbeddingError::MissingKey(key.to_string()))?;
    if row.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite(key.to_string()));
    }
    Ok(row)
}

/// Fits `W` minimizing `sum_x ||W src(x) - tgt(x)||^2` over `keys`, using an
/// SVD of the stacked source vectors. Singular values below
/// `max(n, d) * eps * sigma_max` are dropped, which yields the minimum-norm
/// solution for rank-deficient systems.
pub fn learn_alignment(
    src: &EmbeddingTable,
    tgt: &EmbeddingTable,
    keys: &[SharedKey],
) -> Result<AlignmentMap> {
    if keys.is_empty() {
        return Err(EmbeddingError::EmptyKeys);
    }
    let n = keys.len();
    let ds = src.dim();
    let dt = tgt.dim();

    let mut x = DMatrix::<f64>::zeros(n, ds);
    let mut y = DMatrix::<f64>::zeros(n, dt);
    for (i, key) in keys.iter().enumerate() {
        let s = checked_row(src, Namespace::Word, &key.source_key)?;
        let t = checked_row(tgt, Namespace::Wordpiece, &key.target_key)?;
        for (j, v) in s.iter().enumerate() {
            x[(i, j)] = *v;
        }
        for (j, v) in t.iter().enumerate() {
            y[(i, j)] = *v;
        }
    }

    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().cloned().fold(0.0_f64, f64::max);
    let tol = (n.max(ds) as f64) * f64::EPSILON * sigma_max;

    // W^T = V diag(1/sigma) U^T Y over the retained singular triplets.
    let uty = u.transpose() * &y;
    let mut scaled = DMatrix::<f64>::zeros(sigma.len(), dt);
    let mut rank = 0;
    for (k, s) in sigma.iter().enumerate() {
        if *s > tol {
            rank += 1;
            for c in 0..dt {
                scaled[(k, c)] = uty[(k, c)] / s;
            }
        }
    }
    let w_t = v_t.transpose() * scaled;

    let fitted = &x * &w_t;
    let residual: f64 = (fitted - &y).iter().map(|e| e * e).sum();

    let matrix = Array2::from_shape_fn((dt, ds), |(r, c)| w_t[(c, r)]);
    Ok(AlignmentMap::new(
        matrix,
        FitInfo {
            num_shared_keys: n,
            sum_squared_residual: residual,
            effective_rank: Some(rank),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn pair_tables(pairs: &[(&[f64], &[f64])]) -> (EmbeddingTable, EmbeddingTable, Vec<SharedKey>) {
        let mut src = EmbeddingTable::new(pairs[0].0.len(), true).unwrap();
        let mut tgt = EmbeddingTable::new(pairs[0].1.len(), false).unwrap();
        let mut keys = Vec::new();
        for (i, (s, t)) in pairs.iter().enumerate() {
            let k = format!("w{i}");
            src.insert(Namespace::Word, k.clone(), s.to_vec()).unwrap();
            tgt.insert(Namespace::Wordpiece, k.clone(), t.to_vec())
                .unwrap();
            keys.push(SharedKey {
                key: k.clone(),
                source_key: k.clone(),
                target_key: k,
            });
        }
        (src, tgt, keys)
    }

    #[test]
    fn one_dimensional_consistent() {
        let (s, t, k) = pair_tables(&[(&[2.0], &[1.0]), (&[4.0], &[2.0])]);
        let map = learn_alignment(&s, &t, &k).unwrap();
        assert_abs_diff_eq!(map.matrix()[(0, 0)], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(map.fit_info.sum_squared_residual, 0.0, epsilon = 1e-24);
    }

    #[test]
    fn one_dimensional_inconsistent() {
        // (w-1)^2 + (w-3)^2 is minimized at w = 2 with value 2
        let (s, t, k) = pair_tables(&[(&[1.0], &[1.0]), (&[1.0], &[3.0])]);
        let map = learn_alignment(&s, &t, &k).unwrap();
        assert_abs_diff_eq!(map.matrix()[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(map.fit_info.sum_squared_residual, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_when_tables_agree() {
        let e = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 2.0, 3.0],
        ];
        let pairs: Vec<(&[f64], &[f64])> = e.iter().map(|v| (&v[..], &v[..])).collect();
        let (s, t, k) = pair_tables(&pairs);
        let map = learn_alignment(&s, &t, &k).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(map.matrix()[(r, c)], want, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(map.fit_info.sum_squared_residual, 0.0, epsilon = 1e-20);
        assert_eq!(map.fit_info.effective_rank, Some(3));
    }

    #[test]
    fn rank_deficient_gives_minimum_norm() {
        // Both samples lie on x = (1, 1); targets 2 and 2. Every W with
        // w1 + w2 = 2 fits, the minimum-norm one is (1, 1).
        let (s, t, k) = pair_tables(&[(&[1.0, 1.0], &[2.0]), (&[2.0, 2.0], &[4.0])]);
        let map = learn_alignment(&s, &t, &k).unwrap();
        assert_abs_diff_eq!(map.matrix()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(map.matrix()[(0, 1)], 1.0, epsilon = 1e-12);
        assert_eq!(map.fit_info.effective_rank, Some(1));
    }

    #[test]
    fn empty_keys_and_non_finite_rejected() {
        let (s, t, _) = pair_tables(&[(&[1.0], &[1.0])]);
        assert!(matches!(
            learn_alignment(&s, &t, &[]),
            Err(EmbeddingError::EmptyKeys)
        ));

        let (s, t, k) = pair_tables(&[(&[f64::NAN], &[1.0])]);
        assert!(matches!(
            learn_alignment(&s, &t, &k),
            Err(EmbeddingError::NonFinite(_))
        ));
    }

    #[test]
    fn map_entity_products() {
        let map = AlignmentMap::new(array![[0.5]], AlignmentMap::identity(1).fit_info);
        assert_eq!(map.map_entity(&[4.0]).unwrap(), vec![2.0]);

        let id = AlignmentMap::identity(3);
        assert_eq!(
            id.map_entity(&[1.5, -2.0, 0.25]).unwrap(),
            vec![1.5, -2.0, 0.25]
        );

        let zero = AlignmentMap::new(Array2::zeros((2, 3)), id.fit_info.clone());
        assert_eq!(zero.map_entity(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        assert!(matches!(
            id.map_entity(&[1.0]),
            Err(EmbeddingError::DimensionMismatch {
                expected: 3,
                found: 1
            })
        ));
    }

    #[test]
    fn persisted_map_round_trips() {
        let map = AlignmentMap::new(
            array![[0.1, -3.0], [1.0 / 3.0, 2e-300], [7.0, 0.0]],
            FitInfo {
                num_shared_keys: 12,
                sum_squared_residual: 0.125,
                effective_rank: Some(2),
            },
        );
        let mut buf = Vec::new();
        map.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("3 2 12 0.125\n"));
        let back = AlignmentMap::read(text.as_bytes()).unwrap();
        assert_eq!(back.matrix(), map.matrix());
        assert_eq!(back.fit_info.num_shared_keys, 12);
        assert_eq!(back.fit_info.effective_rank, None);
    }
}
