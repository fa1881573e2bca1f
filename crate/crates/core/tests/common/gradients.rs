//! Central finite-difference checks of attention and parameter gradients.

use kbvqa_core::injector::{InjectedSequence, Token, TokenKind};
use kbvqa_core::model::*;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> InjectedSequence {
    let tokens = (0..len)
        .map(|i| Token {
            text: format!("t{i}"),
            kind: if i == 0 || i == len - 1 {
                TokenKind::Special
            } else {
                TokenKind::Wordpiece
            },
            embedding: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            span_ref: None,
        })
        .collect();
    InjectedSequence {
        tokens,
        truncated: false,
        max_len: len,
        injected: 0,
        lookup_misses: 0,
    }
}

pub fn random_vis(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> VisualInput {
    VisualInput {
        features: Array2::from_shape_simple_fn((cfg.num_regions, cfg.region_feat_dim), || {
            rng.random_range(-1.0..1.0)
        }),
        boxes: Array2::from_shape_simple_fn((cfg.num_regions, 4), || rng.random_range(0.0..1.0)),
    }
}

/// Minimal model with a 5-token input and random regions.
pub fn setup(seed: u64) -> (Model, InjectedSequence, VisualInput) {
    let mut cfg = ModelConfig::minimal(4, 3);
    cfg.seed = seed;
    let model = init_model(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let seq = random_seq(&mut rng, 5, 4);
    let vis = random_vis(&mut rng, &cfg);
    (model, seq, vis)
}

fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8)
}

/// Perturbs one attention entry per head and site through the forward
/// hook. Returns the number of entries checked and the worst relative error
/// among entries whose gradients are not both negligible.
pub fn check_attention_fd(seed: u64) -> Result<(usize, f64), String> {
    let (model, seq, vis) = setup(seed);
    let target = (seed as usize) % 3;
    let (trace, grads) =
        attention_gradients(&model, &seq, &vis, target).map_err(|e| e.to_string())?;
    if trace.logits
        != forward(&model, &seq, &vis, false)
            .map_err(|e| e.to_string())?
            .0
    {
        return Err("traced logits differ from plain forward".into());
    }
    let eps = 1e-4;
    let mut checked = 0;
    let mut worst = 0.0_f64;
    for (site, g) in grads.iter() {
        let shape = g.dim();
        for head in 0..shape.0 {
            let (r, c) = (shape.1 - 1, head % shape.2);
            let bump = |delta: f64| {
                let hook = move |s: AttnSite, h: usize, a: &mut Array2<f64>| {
                    if s == site && h == head {
                        a[[r, c]] += delta;
                    }
                };
                forward_with_hook(&model, &seq, &vis, &hook).unwrap().logits[target]
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let analytic = g[[head, r, c]];
            // entries on dead paths are zero up to rounding on both sides
            if fd.abs().max(analytic.abs()) > 1e-7 {
                let rel = rel_err(fd, analytic);
                if rel > 1e-3 {
                    return Err(format!("{site:?} head {head}: fd {fd} analytic {analytic}"));
                }
                worst = worst.max(rel);
            } else if (fd - analytic).abs() > 1e-9 {
                return Err(format!("{site:?} head {head}: fd {fd} analytic {analytic}"));
            }
            checked += 1;
        }
    }
    if checked < 10 {
        return Err(format!("only {checked} entries checked"));
    }
    Ok((checked, worst))
}

/// Perturbs `samples` random parameter entries of a soft-target loss.
pub fn check_param_fd(seed: u64, samples: usize) -> Result<(usize, f64), String> {
    let (model, seq, vis) = setup(seed);
    let target = Array1::from(vec![0.2, 0.0, 0.8]);
    let (_, _, grads) =
        loss_and_gradients(&model, &seq, &vis, &target, None).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 71);
    let eps = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let p = rng.random_range(0..model.params().len());
        let shape = model.params()[p].dim();
        let idx = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
        let loss_at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut()[p][idx] += delta;
            loss_and_gradients(&m, &seq, &vis, &target, None).unwrap().0
        };
        let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
        let analytic = grads[p][idx];
        if fd.abs().max(analytic.abs()) > 1e-7 {
            let rel = rel_err(fd, analytic);
            if rel > 1e-4 {
                return Err(format!(
                    "{} {idx:?}: fd {fd} analytic {analytic}",
                    model.param_names()[p]
                ));
            }
            worst = worst.max(rel);
        } else if (fd - analytic).abs() > 1e-9 {
            return Err(format!(
                "{} {idx:?}: fd {fd} analytic {analytic}",
                model.param_names()[p]
            ));
        }
    }
    Ok((samples, worst))
}
