//! Shared helpers for integration tests: an unoptimized, loop-only
//! re-implementation of both relevancy explainers, and random traces.
#![allow(dead_code)]

pub mod alignment;
pub mod gradients;
pub mod injection;
pub mod span_fixture;

use kbvqa_core::model::{AttentionMaps, ForwardTrace};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn eye(n: usize) -> Mat {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn mul(a: &Mat, b: &Mat, rows: usize, inner: usize, cols: usize) -> Mat {
    let mut out = zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut s = 0.0;
            for k in 0..inner {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat, rows: usize, cols: usize) -> Mat {
    let mut out = zeros(cols, rows);
    for i in 0..rows {
        for j in 0..cols {
            out[j][i] = a[i][j];
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// `(1/H) Σ_h max(0, g_h ⊙ a_h)` elementwise.
pub fn abar(attn: &Array3<f64>, grad: &Array3<f64>) -> Mat {
    let (h, r, c) = attn.dim();
    let mut out = zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for k in 0..h {
                let v = attn[[k, i, j]] * grad[[k, i, j]];
                if v > 0.0 {
                    s += v;
                }
            }
            out[i][j] = s / h as f64;
        }
    }
    out
}

/// Each row of `m − I` divided by its sum (zero-sum rows untouched), plus I.
pub fn norm_excess(m: &Mat) -> Mat {
    let n = m.len();
    let mut out = m.clone();
    for i in 0..n {
        out[i][i] -= 1.0;
        let s: f64 = out[i].iter().sum();
        if s != 0.0 {
            for j in 0..n {
                out[i][j] /= s;
            }
        }
        out[i][i] += 1.0;
    }
    out
}

pub struct OracleMaps {
    pub r_tt: Mat,
    pub r_ti: Mat,
    pub r_it: Mat,
    pub r_ii: Mat,
}

pub fn oracle_bmgae(trace: &ForwardTrace, grads: &AttentionMaps, t: usize, v: usize) -> OracleMaps {
    let a = &trace.attn;
    let cross = a.cross_tv.len();
    let lang_enc = a.lang.len() - cross;
    let vis_enc = a.vis.len() - cross;
    let mut r_tt = eye(t);
    let mut r_ti = zeros(t, v);
    let mut r_it = zeros(v, t);
    let mut r_ii = eye(v);
    for l in 0..lang_enc {
        let w = abar(&a.lang[l], &grads.lang[l]);
        r_tt = add(&r_tt, &mul(&w, &r_tt, t, t, t));
        r_ti = add(&r_ti, &mul(&w, &r_ti, t, t, v));
    }
    for l in 0..vis_enc {
        let w = abar(&a.vis[l], &grads.vis[l]);
        r_ii = add(&r_ii, &mul(&w, &r_ii, v, v, v));
        r_it = add(&r_it, &mul(&w, &r_it, v, v, t));
    }
    for c in 0..cross {
        let tv = abar(&a.cross_tv[c], &grads.cross_tv[c]);
        let vt = abar(&a.cross_vt[c], &grads.cross_vt[c]);
        let ntt = norm_excess(&r_tt);
        let nii = norm_excess(&r_ii);
        let ti = mul(&mul(&transpose(&ntt, t, t), &tv, t, t, v), &nii, t, v, v);
        let tt = mul(&tv, &r_it, t, v, t);
        let it = mul(&mul(&transpose(&nii, v, v), &vt, v, v, t), &ntt, v, t, t);
        let ii = mul(&vt, &r_ti, v, t, v);
        r_ti = add(&r_ti, &ti);
        r_tt = add(&r_tt, &tt);
        r_it = add(&r_it, &it);
        r_ii = add(&r_ii, &ii);
        let wl = abar(&a.lang[lang_enc + c], &grads.lang[lang_enc + c]);
        r_tt = add(&r_tt, &mul(&wl, &r_tt, t, t, t));
        r_ti = add(&r_ti, &mul(&wl, &r_ti, t, t, v));
        let wv = abar(&a.vis[vis_enc + c], &grads.vis[vis_enc + c]);
        r_ii = add(&r_ii, &mul(&wv, &r_ii, v, v, v));
        r_it = add(&r_it, &mul(&wv, &r_it, v, v, t));
    }
    OracleMaps {
        r_tt,
        r_ti,
        r_it,
        r_ii,
    }
}

pub fn oracle_trf(trace: &ForwardTrace, grads: &AttentionMaps, t: usize) -> Mat {
    let mut r = eye(t);
    for (attn, grad) in trace.attn.lang.iter().zip(&grads.lang) {
        let mut step = add(&eye(t), &abar(attn, grad));
        for row in step.iter_mut() {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
        }
        r = mul(&step, &r, t, t, t);
    }
    r
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Mat) -> f64 {
    assert_eq!(a.nrows(), b.len());
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        assert_eq!(a.ncols(), b[i].len());
        for j in 0..a.ncols() {
            worst = worst.max((a[[i, j]] - b[i][j]).abs());
        }
    }
    worst
}

fn softmax_rows(rng: &mut ChaCha8Rng, h: usize, r: usize, c: usize) -> Array3<f64> {
    let mut a = Array3::from_shape_simple_fn((h, r, c), || rng.random_range(-2.0..2.0f64).exp());
    for k in 0..h {
        for i in 0..r {
            let s: f64 = (0..c).map(|j| a[[k, i, j]]).sum();
            for j in 0..c {
                a[[k, i, j]] /= s;
            }
        }
    }
    a
}

pub struct RandomTrace {
    pub trace: ForwardTrace,
    pub grads: AttentionMaps,
    pub text_len: usize,
    pub regions: usize,
}

/// Random row-stochastic maps and signed gradients with random layer counts
/// (cross-layer entries appended to the language and vision lists).
pub fn random_trace(seed: u64) -> RandomTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=3);
    let t = rng.random_range(2..=7);
    let v = rng.random_range(1..=4);
    let cross = rng.random_range(0..=2);
    let lang_enc = rng.random_range(usize::from(cross == 0)..=2);
    let vis_enc = rng.random_range(usize::from(cross == 0)..=2);
    let mut maps = AttentionMaps::default();
    let mut grads = AttentionMaps::default();
    let mut push = |list: fn(&mut AttentionMaps) -> &mut Vec<Array3<f64>>,
                    r: usize,
                    c: usize,
                    rng: &mut ChaCha8Rng| {
        list(&mut maps).push(softmax_rows(rng, heads, r, c));
        list(&mut grads).push(Array3::from_shape_simple_fn((heads, r, c), || {
            rng.random_range(-1.5..2.0)
        }));
    };
    for _ in 0..lang_enc + cross {
        push(|m| &mut m.lang, t, t, &mut rng);
    }
    for _ in 0..vis_enc + cross {
        push(|m| &mut m.vis, v, v, &mut rng);
    }
    for _ in 0..cross {
        push(|m| &mut m.cross_tv, t, v, &mut rng);
        push(|m| &mut m.cross_vt, v, t, &mut rng);
    }
    RandomTrace {
        trace: ForwardTrace {
            attn: maps,
            logits: Array1::zeros(2),
            pooled_index: 0,
        },
        grads,
        text_len: t,
        regions: v,
    }
}

pub fn zero_like(maps: &AttentionMaps) -> AttentionMaps {
    let z = |l: &Vec<Array3<f64>>| l.iter().map(|a| Array3::zeros(a.raw_dim())).collect();
    AttentionMaps {
        lang: z(&maps.lang),
        vis: z(&maps.vis),
        cross_tv: z(&maps.cross_tv),
        cross_vt: z(&maps.cross_vt),
    }
}

/// Both explainers against the oracle on `n` random traces, plus the
/// zero-gradient identity/zero maps on the same shapes.
pub fn check_oracle_equivalence(n: u64) -> Result<String, String> {
    use kbvqa_core::explain::{explain_bmgae, explain_trf};
    let tol = 1e-10;
    let mut worst = 0.0_f64;
    for seed in 0..n {
        let rt = random_trace(seed);
        let maps = explain_bmgae(&rt.trace, &rt.grads).map_err(|e| e.to_string())?;
        let o = oracle_bmgae(&rt.trace, &rt.grads, rt.text_len, rt.regions);
        let trf = explain_trf(&rt.trace, &rt.grads).map_err(|e| e.to_string())?;
        for (name, d) in [
            ("r_tt", max_abs_diff(&maps.r_tt, &o.r_tt)),
            ("r_ti", max_abs_diff(&maps.r_ti, &o.r_ti)),
            ("r_it", max_abs_diff(&maps.r_it, &o.r_it)),
            ("r_ii", max_abs_diff(&maps.r_ii, &o.r_ii)),
            (
                "trf",
                max_abs_diff(&trf, &oracle_trf(&rt.trace, &rt.grads, rt.text_len)),
            ),
        ] {
            if !(d <= tol) {
                return Err(format!("trace {seed} {name}: max diff {d:e}"));
            }
            worst = worst.max(d);
        }

        let zero = zero_like(&rt.grads);
        let z = explain_bmgae(&rt.trace, &zero).map_err(|e| e.to_string())?;
        let exact = z.r_tt == Array2::<f64>::eye(rt.text_len)
            && z.r_ii == Array2::<f64>::eye(rt.regions)
            && z.r_ti.iter().chain(z.r_it.iter()).all(|v| *v == 0.0)
            && explain_trf(&rt.trace, &zero).map_err(|e| e.to_string())?
                == Array2::<f64>::eye(rt.text_len);
        if !exact {
            return Err(format!(
                "trace {seed}: zero gradients do not give exact identity/zero maps"
            ));
        }
    }
    Ok(format!("{n} traces, max diff {worst:.2e}"))
}
