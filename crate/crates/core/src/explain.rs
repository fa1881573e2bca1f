//! Gradient-weighted attention relevancy (bi-modal and text-only rollout),
//! token and region rankings, and perturbation tests.

use std::io::Write;

use ndarray::{Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::injector::{InjectedSequence, TokenKind};
use crate::model::{
    attention_gradients, forward, topk_indices, AttentionGrads, ForwardTrace, Model, ModelError,
    TrainingExample, VisualInput,
};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("trace and gradients do not line up: {0}")]
    Shape(String),
    #[error("non-finite attention gradient")]
    NonFinite,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("perturbation fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
    #[error("unknown explainer `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMethod {
    Bmgae,
    Trf,
    Random,
}

impl ExplainMethod {
    pub const ALL: [ExplainMethod; 3] = [
        ExplainMethod::Bmgae,
        ExplainMethod::Trf,
        ExplainMethod::Random,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExplainMethod::Bmgae => "bmgae",
            ExplainMethod::Trf => "trf",
            ExplainMethod::Random => "random",
        }
    }
}

impl std::fmt::Display for ExplainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExplainMethod {
    type Err = ExplainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ExplainError::UnknownMethod(s.to_string()))
    }
}

/// Text/image relevancy maps. Rows are query positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevancyMaps {
    pub r_tt: Array2<f64>,
    pub r_ti: Array2<f64>,
    pub r_it: Array2<f64>,
    pub r_ii: Array2<f64>,
}

/// Layer counts recovered from a trace: the cross-layer entries are the
/// tail of the language and vision lists.
struct Layers {
    lang_enc: usize,
    vis_enc: usize,
    cross: usize,
    text_len: usize,
    regions: usize,
}

fn check_pair(a: &Array3<f64>, g: &Array3<f64>, what: &str) -> Result<(), ExplainError> {
    if a.dim() != g.dim() {
        return Err(ExplainError::Shape(format!(
            "{what}: map {:?} vs gradient {:?}",
            a.dim(),
            g.dim()
        )));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(ExplainError::NonFinite);
    }
    Ok(())
}

fn layers(trace: &ForwardTrace, grads: &AttentionGrads) -> Result<Layers, ExplainError> {
    let a = &trace.attn;
    let cross = a.cross_tv.len();
    if a.cross_vt.len() != cross || a.lang.len() < cross || a.vis.len() < cross {
        return Err(ExplainError::Shape("inconsistent layer counts".into()));
    }
    for (name, maps, gs) in [
        ("language", &a.lang, &grads.lang),
        ("vision", &a.vis, &grads.vis),
        ("text-to-image", &a.cross_tv, &grads.cross_tv),
        ("image-to-text", &a.cross_vt, &grads.cross_vt),
    ] {
        if maps.len() != gs.len() {
            return Err(ExplainError::Shape(format!(
                "{name}: {} maps, {} gradients",
                maps.len(),
                gs.len()
            )));
        }
        for (m, g) in maps.iter().zip(gs) {
            check_pair(m, g, name)?;
        }
    }
    let text_len = a
        .lang
        .first()
        .map(|m| m.dim().1)
        .or_else(|| a.cross_tv.first().map(|m| m.dim().1))
        .unwrap_or(0);
    let regions = a
        .vis
        .first()
        .map(|m| m.dim().1)
        .or_else(|| a.cross_vt.first().map(|m| m.dim().1))
        .unwrap_or(0);
    let expect = |m: &Array3<f64>, r: usize, c: usize, name: &str| {
        if (m.dim().1, m.dim().2) == (r, c) {
            Ok(())
        } else {
            Err(ExplainError::Shape(format!(
                "{name} map is {:?}, expected {r}×{c}",
                m.dim()
            )))
        }
    };
    for m in &a.lang {
        expect(m, text_len, text_len, "language")?;
    }
    for m in &a.vis {
        expect(m, regions, regions, "vision")?;
    }
    for m in &a.cross_tv {
        expect(m, text_len, regions, "text-to-image")?;
    }
    for m in &a.cross_vt {
        expect(m, regions, text_len, "image-to-text")?;
    }
    Ok(Layers {
        lang_enc: a.lang.len() - cross,
        vis_enc: a.vis.len() - cross,
        cross,
        text_len,
        regions,
    })
}

/// Head mean of `relu(grad ⊙ attn)`.
pub fn weighted_attention(attn: &Array3<f64>, grad: &Array3<f64>) -> Array2<f64> {
    let heads = attn.dim().0;
    let mut sum = Array2::zeros((attn.dim().1, attn.dim().2));
    for h in 0..heads {
        Zip::from(&mut sum)
            .and(&attn.index_axis(Axis(0), h))
            .and(&grad.index_axis(Axis(0), h))
            .for_each(|s, &a, &g| *s += (a * g).max(0.0));
    }
    sum / heads as f64
}

/// `rownorm(R − I) + I`; rows of `R − I` that sum to zero stay zero.
fn normalized_excess(r: &Array2<f64>) -> Array2<f64> {
    let mut out = r.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row[i] -= 1.0;
        let sum = row.sum();
        if sum != 0.0 {
            row /= sum;
        }
        row[i] += 1.0;
    }
    out
}

fn self_update(r_ss: &mut Array2<f64>, r_sq: &mut Array2<f64>, abar: &Array2<f64>) {
    *r_ss = &*r_ss + &abar.dot(&*r_ss);
    *r_sq = &*r_sq + &abar.dot(&*r_sq);
}

/// Bi-modal relevancy: identity/zero initialization, then per layer the
/// self-attention rule (left-multiplication by Ā) or the co-attention rule
/// (coupling through row-normalized same-modality maps).
pub fn explain_bmgae(
    trace: &ForwardTrace,
    grads: &AttentionGrads,
) -> Result<RelevancyMaps, ExplainError> {
    let l = layers(trace, grads)?;
    let a = &trace.attn;
    let mut m = RelevancyMaps {
        r_tt: Array2::eye(l.text_len),
        r_ti: Array2::zeros((l.text_len, l.regions)),
        r_it: Array2::zeros((l.regions, l.text_len)),
        r_ii: Array2::eye(l.regions),
    };
    for i in 0..l.lang_enc {
        self_update(
            &mut m.r_tt,
            &mut m.r_ti,
            &weighted_attention(&a.lang[i], &grads.lang[i]),
        );
    }
    for i in 0..l.vis_enc {
        self_update(
            &mut m.r_ii,
            &mut m.r_it,
            &weighted_attention(&a.vis[i], &grads.vis[i]),
        );
    }
    for c in 0..l.cross {
        let a_tv = weighted_attention(&a.cross_tv[c], &grads.cross_tv[c]);
        let a_vt = weighted_attention(&a.cross_vt[c], &grads.cross_vt[c]);
        let n_tt = normalized_excess(&m.r_tt);
        let n_ii = normalized_excess(&m.r_ii);
        let d_ti = n_tt.t().dot(&a_tv).dot(&n_ii);
        let d_tt = a_tv.dot(&m.r_it);
        let d_it = n_ii.t().dot(&a_vt).dot(&n_tt);
        let d_ii = a_vt.dot(&m.r_ti);
        m.r_ti += &d_ti;
        m.r_tt += &d_tt;
        m.r_it += &d_it;
        m.r_ii += &d_ii;
        let li = l.lang_enc + c;
        self_update(
            &mut m.r_tt,
            &mut m.r_ti,
            &weighted_attention(&a.lang[li], &grads.lang[li]),
        );
        let vi = l.vis_enc + c;
        self_update(
            &mut m.r_ii,
            &mut m.r_it,
            &weighted_attention(&a.vis[vi], &grads.vis[vi]),
        );
    }
    Ok(m)
}

fn row_normalize(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let sum = row.sum();
        if sum != 0.0 {
            row /= sum;
        }
    }
    m
}

/// Text-only rollout over every language self-attention layer:
/// `R ← rownorm(I + Ā)·R` from `R = I`.
pub fn explain_trf(
    trace: &ForwardTrace,
    grads: &AttentionGrads,
) -> Result<Array2<f64>, ExplainError> {
    let l = layers(trace, grads)?;
    let mut r = Array2::eye(l.text_len);
    for (attn, grad) in trace.attn.lang.iter().zip(&grads.lang) {
        let step = row_normalize(Array2::eye(l.text_len) + weighted_attention(attn, grad));
        r = step.dot(&r);
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub index: usize,
    pub text: String,
    pub kind: TokenKind,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenRanking {
    pub entries: Vec<RankedToken>,
}

impl TokenRanking {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }
}

/// Whether a token takes part in rankings (SPECIAL and SEPARATOR do not).
pub fn is_rankable(kind: TokenKind) -> bool {
    !matches!(kind, TokenKind::Special | TokenKind::Separator)
}

fn rank_scores(
    scores: &[f64],
    seq: &InjectedSequence,
    k: usize,
) -> Result<TokenRanking, ExplainError> {
    if k == 0 {
        return Err(ExplainError::InvalidK);
    }
    if scores.len() != seq.len() {
        return Err(ExplainError::Shape(format!(
            "{} scores for {} tokens",
            scores.len(),
            seq.len()
        )));
    }
    let mut idx: Vec<usize> = (0..seq.len())
        .filter(|&i| is_rankable(seq.tokens[i].kind))
        .collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(TokenRanking {
        entries: idx
            .into_iter()
            .map(|i| RankedToken {
                index: i,
                text: seq.tokens[i].text.clone(),
                kind: seq.tokens[i].kind,
                score: scores[i],
            })
            .collect(),
    })
}

/// Ranks tokens by row `row` of a text relevancy matrix.
pub fn top_tokens(
    relevancy: &Array2<f64>,
    row: usize,
    seq: &InjectedSequence,
    k: usize,
) -> Result<TokenRanking, ExplainError> {
    if row >= relevancy.nrows() {
        return Err(ExplainError::Shape(format!(
            "row {row} of a {}-row map",
            relevancy.nrows()
        )));
    }
    let scores: Vec<f64> = relevancy.row(row).to_vec();
    rank_scores(&scores, seq, k)
}

/// True iff an ENTITY token is among the first `k` entries.
pub fn entity_in_topk(ranking: &TokenRanking, k: usize) -> bool {
    ranking
        .entries
        .iter()
        .take(k)
        .any(|e| e.kind == TokenKind::Entity)
}

/// Rank (0-based) of the first ENTITY token, if any.
pub fn first_entity_rank(ranking: &TokenRanking) -> Option<usize> {
    ranking
        .entries
        .iter()
        .position(|e| e.kind == TokenKind::Entity)
}

/// Regions ranked by row `row` of `R_ti`, ties by index.
pub fn region_saliency(maps: &RelevancyMaps, row: usize, k: usize) -> Vec<(usize, f64)> {
    let scores = maps.r_ti.row(row);
    let order =
        topk_indices(scores.as_slice().unwrap_or(&scores.to_vec()), k.max(1)).unwrap_or_default();
    order.into_iter().map(|i| (i, scores[i])).collect()
}

/// A full token ranking (and region ranking for BM-GAE) for one example,
/// explaining the model's own top prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub method: ExplainMethod,
    pub predicted: usize,
    pub top1_logit: f64,
    pub ranking: TokenRanking,
    pub regions: Vec<(usize, f64)>,
}

/// Uniform random scores for a RANDOM ranking; `stream` separates examples.
fn random_scores(len: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..len).map(|_| rng.random::<f64>()).collect()
}

pub fn explain_example(
    model: &Model,
    seq: &InjectedSequence,
    vis: &VisualInput,
    method: ExplainMethod,
    seed: u64,
    stream: u64,
) -> Result<Explanation, ExplainError> {
    let (logits, _) = forward(model, seq, vis, false)?;
    let predicted = topk_indices(logits.as_slice().expect("contiguous"), 1)?[0];
    let all = seq.len().max(1);
    let (ranking, regions) = match method {
        ExplainMethod::Random => (
            rank_scores(&random_scores(seq.len(), seed, stream), seq, all)?,
            Vec::new(),
        ),
        ExplainMethod::Bmgae => {
            let (trace, grads) = attention_gradients(model, seq, vis, predicted)?;
            let maps = explain_bmgae(&trace, &grads)?;
            let regions = region_saliency(&maps, trace.pooled_index, maps.r_ti.ncols());
            (
                top_tokens(&maps.r_tt, trace.pooled_index, seq, all)?,
                regions,
            )
        }
        ExplainMethod::Trf => {
            let (trace, grads) = attention_gradients(model, seq, vis, predicted)?;
            let r = explain_trf(&trace, &grads)?;
            (top_tokens(&r, trace.pooled_index, seq, all)?, Vec::new())
        }
    };
    Ok(Explanation {
        method,
        predicted,
        top1_logit: logits[predicted],
        ranking,
        regions,
    })
}

/// Copy of `seq` with the given token embeddings replaced by `unk`.
pub fn mask_tokens(seq: &InjectedSequence, positions: &[usize], unk: &[f64]) -> InjectedSequence {
    let mut out = seq.clone();
    for &p in positions {
        out.tokens[p].embedding = unk.to_vec();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPoint {
    pub fraction: f64,
    pub accuracy: f64,
}

/// Masks the top `⌈f·n⌉` of the `n` rankable tokens of each example (by the
/// method's ranking) and reports accuracy per fraction.
pub fn perturbation_test(
    model: &Model,
    examples: &[TrainingExample],
    method: ExplainMethod,
    fractions: &[f64],
    unk: &[f64],
    seed: u64,
) -> Result<Vec<PerturbationPoint>, ExplainError> {
    if examples.is_empty() {
        return Err(ExplainError::EmptyEvalSet);
    }
    if let Some(&f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(ExplainError::InvalidFraction(f));
    }
    let per_example: Vec<Vec<bool>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let ranking = explain_example(model, &e.seq, &e.vis, method, seed, i as u64)?.ranking;
            let order = ranking.indices();
            fractions
                .iter()
                .map(|&f| {
                    let n = (f * order.len() as f64).ceil() as usize;
                    let masked = mask_tokens(&e.seq, &order[..n.min(order.len())], unk);
                    let (logits, _) = forward(model, &masked, &e.vis, false)?;
                    Ok(e.is_correct(topk_indices(logits.as_slice().expect("contiguous"), 1)?[0]))
                })
                .collect::<Result<Vec<bool>, ExplainError>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(fractions
        .iter()
        .enumerate()
        .map(|(j, &fraction)| PerturbationPoint {
            fraction,
            accuracy: per_example.iter().filter(|c| c[j]).count() as f64 / examples.len() as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub text: String,
    pub kind: TokenKind,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: usize,
    pub score: f64,
}

/// One line of the explanation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub record_id: String,
    pub method: ExplainMethod,
    pub top_tokens: Vec<TokenScore>,
    pub region_scores: Vec<RegionScore>,
    pub entity_in_top5: bool,
}

impl ExplanationRecord {
    pub fn new(record_id: &str, e: &Explanation, k: usize) -> Self {
        Self {
            record_id: record_id.to_string(),
            method: e.method,
            top_tokens: e
                .ranking
                .entries
                .iter()
                .take(k)
                .map(|t| TokenScore {
                    text: t.text.clone(),
                    kind: t.kind,
                    score: t.score,
                })
                .collect(),
            region_scores: e
                .regions
                .iter()
                .map(|&(region, score)| RegionScore { region, score })
                .collect(),
            entity_in_top5: entity_in_topk(&e.ranking, 5),
        }
    }
}

pub fn write_explanations<W: Write>(
    records: &[ExplanationRecord],
    out: &mut W,
) -> Result<(), ExplainError> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
