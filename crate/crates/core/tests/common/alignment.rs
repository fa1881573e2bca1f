//! Least-squares alignment on planted linear maps.

use std::time::Instant;

use kbvqa_core::embeddings::{learn_alignment, shared_vocabulary, EmbeddingTable, Namespace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct AlignmentCheck {
    pub source_dim: usize,
    pub target_dim: usize,
    pub rel_frobenius: f64,
    pub normal_eq_rel: f64,
}

fn frob(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds tables with `Y = X W*^T (+ noise)` on `4 * source_dim` shared
/// words, fits, and reports the error against `W*` plus the relative
/// normal-equation residual `||X^T (X W^T - Y)|| / (||X||^2 ||W|| + ||X|| ||Y||)`.
pub fn planted_fit(seed: u64, ds: usize, dt: usize, noise: f64) -> Result<AlignmentCheck, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4 * ds;
    let w_star: Vec<Vec<f64>> = (0..dt)
        .map(|_| (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            (0..dt)
                .map(|r| {
                    let clean: f64 = (0..ds).map(|c| w_star[r][c] * row[c]).sum();
                    clean + noise * rng.random_range(-1.0..1.0)
                })
                .collect()
        })
        .collect();

    let mut src = EmbeddingTable::new(ds, true).map_err(|e| e.to_string())?;
    let mut tgt = EmbeddingTable::new(dt, false).map_err(|e| e.to_string())?;
    for i in 0..n {
        src.insert(Namespace::Word, format!("w{i}"), x[i].clone())
            .map_err(|e| e.to_string())?;
        tgt.insert(Namespace::Wordpiece, format!("w{i}"), y[i].clone())
            .map_err(|e| e.to_string())?;
    }
    let keys = shared_vocabulary(&src, &tgt).map_err(|e| e.to_string())?;
    if keys.len() != n {
        return Err(format!("expected {n} shared keys, got {}", keys.len()));
    }
    let map = learn_alignment(&src, &tgt, &keys).map_err(|e| e.to_string())?;
    let w = map.matrix();
    if w.dim() != (dt, ds) {
        return Err(format!("map has shape {:?}", w.dim()));
    }

    let diff: Vec<f64> = (0..dt)
        .flat_map(|r| (0..ds).map(move |c| (r, c)))
        .map(|(r, c)| w[(r, c)] - w_star[r][c])
        .collect();
    let star: Vec<f64> = w_star.iter().flatten().copied().collect();
    let rel_frobenius = frob(&diff) / frob(&star);

    // X^T (X W^T - Y), accumulated in plain loops
    let mut grad = vec![0.0; ds * dt];
    for i in 0..n {
        for r in 0..dt {
            let fitted: f64 = (0..ds).map(|c| w[(r, c)] * x[i][c]).sum();
            let res = fitted - y[i][r];
            for c in 0..ds {
                grad[c * dt + r] += x[i][c] * res;
            }
        }
    }
    let xf = frob(&x.iter().flatten().copied().collect::<Vec<_>>());
    let yf = frob(&y.iter().flatten().copied().collect::<Vec<_>>());
    let wf = frob(&w.iter().copied().collect::<Vec<_>>());
    let normal_eq_rel = frob(&grad) / (xf * xf * wf + xf * yf);
    Ok(AlignmentCheck {
        source_dim: ds,
        target_dim: dt,
        rel_frobenius,
        normal_eq_rel,
    })
}

pub const DIM_GRID: &[(usize, usize)] = &[
    (1, 1),
    (2, 5),
    (5, 2),
    (8, 8),
    (16, 3),
    (17, 31),
    (33, 64),
    (64, 17),
    (64, 64),
];

/// All planted fits on the grid: relative error at most 1e-6 against the
/// planted map, and the normal equations hold, within the time budget.
pub fn check_planted_grid(seed: u64, budget_secs: f64) -> Result<String, String> {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut worst_normal = 0.0_f64;
    for (i, &(ds, dt)) in DIM_GRID.iter().enumerate() {
        let c = planted_fit(seed + i as u64, ds, dt, 0.0)?;
        if c.rel_frobenius > 1e-6 {
            return Err(format!(
                "{ds}->{dt}: relative error {:.3e}",
                c.rel_frobenius
            ));
        }
        if c.normal_eq_rel > 1e-10 {
            return Err(format!(
                "{ds}->{dt}: normal-equation residual {:.3e}",
                c.normal_eq_rel
            ));
        }
        worst = worst.max(c.rel_frobenius);
        worst_normal = worst_normal.max(c.normal_eq_rel);
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= budget_secs {
        return Err(format!("took {secs:.2}s"));
    }
    Ok(format!(
        "{} fits, max rel err {worst:.2e}, max normal-eq residual {worst_normal:.2e}",
        DIM_GRID.len()
    ))
}
