use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::ModelError;
use crate::injector::{InjectedSequence, TokenKind};

/// Feed-forward width as a multiple of the hidden size.
const FFN_MULT: usize = 4;
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub lang_layers: usize,
    pub vis_layers: usize,
    pub cross_layers: usize,
    pub answer_vocab_size: usize,
    pub max_text_len: usize,
    pub num_regions: usize,
    pub region_feat_dim: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Width of the incoming token embeddings (the wordpiece space).
    pub input_dim: usize,
}

impl ModelConfig {
    /// hidden 64, 4 heads, 2/2/2 layers, 8 regions of 32 features.
    pub fn desk(input_dim: usize, answer_vocab_size: usize) -> Self {
        Self {
            hidden_dim: 64,
            num_heads: 4,
            lang_layers: 2,
            vis_layers: 2,
            cross_layers: 2,
            answer_vocab_size,
            max_text_len: 32,
            num_regions: 8,
            region_feat_dim: 32,
            dropout: 0.1,
            seed: 0,
            input_dim,
        }
    }

    /// One layer per encoder, tiny widths.
    pub fn minimal(input_dim: usize, answer_vocab_size: usize) -> Self {
        Self {
            hidden_dim: 8,
            num_heads: 2,
            lang_layers: 1,
            vis_layers: 1,
            cross_layers: 1,
            answer_vocab_size,
            max_text_len: 12,
            num_regions: 3,
            region_feat_dim: 5,
            dropout: 0.0,
            seed: 0,
            input_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        for (name, value) in [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("lang_layers", self.lang_layers),
            ("vis_layers", self.vis_layers),
            ("num_regions", self.num_regions),
            ("region_feat_dim", self.region_feat_dim),
            ("input_dim", self.input_dim),
        ] {
            if value == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.answer_vocab_size < 2 {
            return bad(format!(
                "answer_vocab_size must be at least 2, got {}",
                self.answer_vocab_size
            ));
        }
        if self.max_text_len < 2 {
            return bad(format!(
                "max_text_len must be at least 2, got {}",
                self.max_text_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Precomputed region features and normalized boxes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    pub features: Array2<f64>,
    pub boxes: Array2<f64>,
}

impl VisualInput {
    pub fn num_regions(&self) -> usize {
        self.features.nrows()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.features.dim() != (config.num_regions, config.region_feat_dim) {
            return Err(ModelError::Shape(format!(
                "region features are {:?}, expected ({}, {})",
                self.features.dim(),
                config.num_regions,
                config.region_feat_dim
            )));
        }
        if self.boxes.dim() != (config.num_regions, 4) {
            return Err(ModelError::Shape(format!(
                "boxes are {:?}, expected ({}, 4)",
                self.boxes.dim(),
                config.num_regions
            )));
        }
        if self.boxes.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ModelError::Shape(
                "box coordinates must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttnKind {
    /// Language self-attention: encoder layers, then each cross layer's.
    Lang,
    /// Vision self-attention, same ordering as `Lang`.
    Vis,
    /// Text queries over regions.
    CrossTv,
    /// Region queries over text.
    CrossVt,
}

/// Identifies one attention tensor in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttnSite {
    pub kind: AttnKind,
    pub layer: usize,
}

/// Attention tensors (heads × queries × keys) by kind and layer. Used both
/// for the maps themselves and for their gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionMaps {
    pub lang: Vec<Array3<f64>>,
    pub vis: Vec<Array3<f64>>,
    pub cross_tv: Vec<Array3<f64>>,
    pub cross_vt: Vec<Array3<f64>>,
}

impl AttentionMaps {
    pub fn list(&self, kind: AttnKind) -> &[Array3<f64>] {
        match kind {
            AttnKind::Lang => &self.lang,
            AttnKind::Vis => &self.vis,
            AttnKind::CrossTv => &self.cross_tv,
            AttnKind::CrossVt => &self.cross_vt,
        }
    }

    fn list_mut(&mut self, kind: AttnKind) -> &mut Vec<Array3<f64>> {
        match kind {
            AttnKind::Lang => &mut self.lang,
            AttnKind::Vis => &mut self.vis,
            AttnKind::CrossTv => &mut self.cross_tv,
            AttnKind::CrossVt => &mut self.cross_vt,
        }
    }

    pub fn get(&self, site: AttnSite) -> &Array3<f64> {
        &self.list(site.kind)[site.layer]
    }

    pub fn iter(&self) -> impl Iterator<Item = (AttnSite, &Array3<f64>)> {
        [
            AttnKind::Lang,
            AttnKind::Vis,
            AttnKind::CrossTv,
            AttnKind::CrossVt,
        ]
        .into_iter()
        .flat_map(move |kind| {
            self.list(kind)
                .iter()
                .enumerate()
                .map(move |(layer, a)| (AttnSite { kind, layer }, a))
        })
    }
}

pub type AttentionGrads = AttentionMaps;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub attn: AttentionMaps,
    pub logits: Array1<f64>,
    pub pooled_index: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    o_w: usize,
    o_b: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Debug, Clone, Copy)]
struct SelfLayer {
    attn: AttnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
struct CrossLayer {
    lang_cross: AttnIds,
    vis_cross: AttnIds,
    lang: SelfLayer,
    vis: SelfLayer,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_w: usize,
    tok_b: usize,
    pos: usize,
    typ: usize,
    emb_ln_g: usize,
    emb_ln_b: usize,
    feat_w: usize,
    feat_b: usize,
    box_w: usize,
    box_b: usize,
    vis_ln_g: usize,
    vis_ln_b: usize,
    lang: Vec<SelfLayer>,
    vis: Vec<SelfLayer>,
    cross: Vec<CrossLayer>,
    pool_w: usize,
    pool_b: usize,
    cls_w: usize,
    cls_b: usize,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Array2<f64>>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, value: Array2<f64>) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut self.rng));
        self.add(name, value)
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.normal(name, rows, cols, 1.0 / (rows as f64).sqrt())
    }

    fn zeros(&mut self, name: String, cols: usize) -> usize {
        self.add(name, Array2::zeros((1, cols)))
    }

    fn ones(&mut self, name: String, cols: usize) -> usize {
        self.add(name, Array2::ones((1, cols)))
    }

    fn attn(&mut self, prefix: &str, h: usize) -> AttnIds {
        AttnIds {
            q_w: self.weight(format!("{prefix}.query.weight"), h, h),
            q_b: self.zeros(format!("{prefix}.query.bias"), h),
            k_w: self.weight(format!("{prefix}.key.weight"), h, h),
            k_b: self.zeros(format!("{prefix}.key.bias"), h),
            v_w: self.weight(format!("{prefix}.value.weight"), h, h),
            v_b: self.zeros(format!("{prefix}.value.bias"), h),
            o_w: self.weight(format!("{prefix}.output.weight"), h, h),
            o_b: self.zeros(format!("{prefix}.output.bias"), h),
            ln_g: self.ones(format!("{prefix}.norm.gamma"), h),
            ln_b: self.zeros(format!("{prefix}.norm.beta"), h),
        }
    }

    fn ffn(&mut self, prefix: &str, h: usize) -> FfnIds {
        FfnIds {
            w1: self.weight(format!("{prefix}.ffn.in.weight"), h, h * FFN_MULT),
            b1: self.zeros(format!("{prefix}.ffn.in.bias"), h * FFN_MULT),
            w2: self.weight(format!("{prefix}.ffn.out.weight"), h * FFN_MULT, h),
            b2: self.zeros(format!("{prefix}.ffn.out.bias"), h),
            ln_g: self.ones(format!("{prefix}.ffn.norm.gamma"), h),
            ln_b: self.zeros(format!("{prefix}.ffn.norm.beta"), h),
        }
    }

    fn self_layer(&mut self, prefix: &str, h: usize) -> SelfLayer {
        SelfLayer {
            attn: self.attn(&format!("{prefix}.self"), h),
            ffn: self.ffn(prefix, h),
        }
    }
}

/// Parameters plus the index layout that the forward pass reads them by.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Array2<f64>>,
    layout: Layout,
}

/// Seeded parameter initialization. The same config always yields the same
/// parameters.
pub fn init_model(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let h = config.hidden_dim;
    let mut b = Builder {
        names: Vec::new(),
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let tok_w = b.weight("text.token.weight".into(), config.input_dim, h);
    let tok_b = b.zeros("text.token.bias".into(), h);
    let pos = b.normal("text.position".into(), config.max_text_len, h, EMBED_STD);
    let typ = b.normal("text.type".into(), 2, h, EMBED_STD);
    let emb_ln_g = b.ones("text.norm.gamma".into(), h);
    let emb_ln_b = b.zeros("text.norm.beta".into(), h);
    let feat_w = b.weight("vision.feature.weight".into(), config.region_feat_dim, h);
    let feat_b = b.zeros("vision.feature.bias".into(), h);
    let box_w = b.weight("vision.box.weight".into(), 4, h);
    let box_b = b.zeros("vision.box.bias".into(), h);
    let vis_ln_g = b.ones("vision.norm.gamma".into(), h);
    let vis_ln_b = b.zeros("vision.norm.beta".into(), h);
    let lang = (0..config.lang_layers)
        .map(|l| b.self_layer(&format!("lang.{l}"), h))
        .collect();
    let vis = (0..config.vis_layers)
        .map(|l| b.self_layer(&format!("vision.{l}"), h))
        .collect();
    let cross = (0..config.cross_layers)
        .map(|l| CrossLayer {
            lang_cross: b.attn(&format!("cross.{l}.lang.cross"), h),
            vis_cross: b.attn(&format!("cross.{l}.vision.cross"), h),
            lang: b.self_layer(&format!("cross.{l}.lang"), h),
            vis: b.self_layer(&format!("cross.{l}.vision"), h),
        })
        .collect();
    let pool_w = b.weight("pooler.weight".into(), h, h);
    let pool_b = b.zeros("pooler.bias".into(), h);
    let cls_w = b.weight("classifier.weight".into(), config.answer_vocab_size, h);
    let cls_b = b.zeros("classifier.bias".into(), config.answer_vocab_size);
    let layout = Layout {
        tok_w,
        tok_b,
        pos,
        typ,
        emb_ln_g,
        emb_ln_b,
        feat_w,
        feat_b,
        box_w,
        box_b,
        vis_ln_g,
        vis_ln_b,
        lang,
        vis,
        cross,
        pool_w,
        pool_b,
        cls_w,
        cls_b,
    };
    Ok(Model {
        config: config.clone(),
        names: b.names,
        params: b.params,
        layout,
    })
}

fn hash_arrays<'a>(arrays: impl IntoIterator<Item = &'a Array2<f64>>) -> String {
    let mut hasher = Sha256::new();
    for a in arrays {
        for v in a.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// SHA-256 over every parameter value.
    pub fn checksum(&self) -> String {
        hash_arrays(&self.params)
    }

    /// SHA-256 over the first language layer's weights.
    pub fn first_layer_checksum(&self) -> String {
        let a = &self.layout.lang[0].attn;
        hash_arrays([a.q_w, a.k_w, a.v_w, a.o_w].map(|i| &self.params[i]))
    }

    /// Replaces parameters by name, checking shapes. Every parameter must be
    /// provided exactly once.
    pub fn load_named(
        &mut self,
        named: impl IntoIterator<Item = (String, Array2<f64>)>,
    ) -> Result<(), ModelError> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in named {
            let idx = self
                .param_index(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter `{name}`")))?;
            if value.dim() != self.params[idx].dim() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.dim(),
                    self.params[idx].dim()
                )));
            }
            self.params[idx] = value;
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(ModelError::Checkpoint(format!(
                "missing parameter `{}`",
                self.names[missing]
            )));
        }
        Ok(())
    }

    /// Number of entries in each trace list.
    pub fn trace_lengths(&self) -> [(AttnKind, usize); 4] {
        let c = &self.config;
        [
            (AttnKind::Lang, c.lang_layers + c.cross_layers),
            (AttnKind::Vis, c.vis_layers + c.cross_layers),
            (AttnKind::CrossTv, c.cross_layers),
            (AttnKind::CrossVt, c.cross_layers),
        ]
    }

    fn validate_inputs(&self, seq: &InjectedSequence, vis: &VisualInput) -> Result<(), ModelError> {
        if seq.is_empty() {
            return Err(ModelError::Shape("empty token sequence".into()));
        }
        if seq.len() > self.config.max_text_len {
            return Err(ModelError::Shape(format!(
                "sequence length {} exceeds max_text_len {}",
                seq.len(),
                self.config.max_text_len
            )));
        }
        if let Some(t) = seq
            .tokens
            .iter()
            .find(|t| t.embedding.len() != self.config.input_dim)
        {
            return Err(ModelError::Shape(format!(
                "token `{}` has embedding dim {}, expected {}",
                t.text,
                t.embedding.len(),
                self.config.input_dim
            )));
        }
        vis.validate(&self.config)
    }
}

/// Perturbation hook applied to every attention head's probabilities right
/// after the softmax.
pub type AttnHook<'h> = &'h dyn Fn(AttnSite, usize, &mut Array2<f64>);

struct Ctx<'h> {
    dropout: Option<(f64, ChaCha8Rng)>,
    hook: Option<AttnHook<'h>>,
    sites: Vec<(AttnSite, Vec<Var>)>,
}

struct Graph {
    logits: Var,
    sites: Vec<(AttnSite, Vec<Var>)>,
}

fn text_matrix(seq: &InjectedSequence) -> (Array2<f64>, Vec<usize>) {
    let dim = seq.dim();
    let mut m = Array2::zeros((seq.len(), dim));
    for (r, t) in seq.tokens.iter().enumerate() {
        m.row_mut(r)
            .assign(&ndarray::ArrayView1::from(&t.embedding[..]));
    }
    let types = seq
        .tokens
        .iter()
        .map(|t| usize::from(t.kind != TokenKind::Special))
        .collect();
    (m, types)
}

impl Model {
    fn linear(&self, t: &mut Tape, x: Var, w: usize, b: usize) -> Var {
        let wv = t.param(w);
        let bv = t.param(b);
        let y = t.matmul(x, wv);
        t.add_row(y, bv)
    }

    fn dropout(&self, t: &mut Tape, x: Var, ctx: &mut Ctx) -> Var {
        match &mut ctx.dropout {
            Some((p, rng)) if *p > 0.0 => {
                let keep = 1.0 - *p;
                let dim = t.value(x).raw_dim();
                let mask = Array2::from_shape_simple_fn(dim, || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                t.mask(x, mask)
            }
            _ => x,
        }
    }

    fn norm(&self, t: &mut Tape, x: Var, g: usize, b: usize) -> Var {
        let gv = t.param(g);
        let bv = t.param(b);
        t.layer_norm(x, gv, bv)
    }

    /// Multi-head attention of `xq` over `xkv`, residual and norm.
    fn attention(
        &self,
        t: &mut Tape,
        ids: &AttnIds,
        xq: Var,
        xkv: Var,
        site: AttnSite,
        ctx: &mut Ctx,
    ) -> Var {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.linear(t, xq, ids.q_w, ids.q_b);
        let k = self.linear(t, xkv, ids.k_w, ids.k_b);
        let v = self.linear(t, xkv, ids.v_w, ids.v_b);
        let mut heads = Vec::with_capacity(self.config.num_heads);
        let mut probs = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = t.slice_cols(q, a, b);
            let kh = t.slice_cols(k, a, b);
            let vh = t.slice_cols(v, a, b);
            let scores = t.matmul_nt(qh, kh);
            let scores = t.scale(scores, scale);
            let p = t.softmax(scores);
            if let Some(hook) = ctx.hook {
                hook(site, h, t.value_mut(p));
            }
            probs.push(p);
            heads.push(t.matmul(p, vh));
        }
        ctx.sites.push((site, probs));
        let cat = t.concat_cols(heads);
        let out = self.linear(t, cat, ids.o_w, ids.o_b);
        let out = self.dropout(t, out, ctx);
        let res = t.add(xq, out);
        self.norm(t, res, ids.ln_g, ids.ln_b)
    }

    fn ffn(&self, t: &mut Tape, ids: &FfnIds, x: Var, ctx: &mut Ctx) -> Var {
        let h = self.linear(t, x, ids.w1, ids.b1);
        let h = t.gelu(h);
        let out = self.linear(t, h, ids.w2, ids.b2);
        let out = self.dropout(t, out, ctx);
        let res = t.add(x, out);
        self.norm(t, res, ids.ln_g, ids.ln_b)
    }

    fn self_block(
        &self,
        t: &mut Tape,
        layer: &SelfLayer,
        x: Var,
        site: AttnSite,
        ctx: &mut Ctx,
    ) -> Var {
        let x = self.attention(t, &layer.attn, x, x, site, ctx);
        self.ffn(t, &layer.ffn, x, ctx)
    }

    fn build(
        &self,
        t: &mut Tape,
        seq: &InjectedSequence,
        vis: &VisualInput,
        ctx: &mut Ctx,
    ) -> Graph {
        let l = &self.layout;
        let (text, types) = text_matrix(seq);
        let len = text.nrows();

        let text = t.constant(text);
        let tok = self.linear(t, text, l.tok_w, l.tok_b);
        let pos_table = t.param(l.pos);
        let pos = t.gather_rows(pos_table, (0..len).collect());
        let typ_table = t.param(l.typ);
        let typ = t.gather_rows(typ_table, types);
        let emb = t.add(tok, pos);
        let emb = t.add(emb, typ);
        let emb = self.norm(t, emb, l.emb_ln_g, l.emb_ln_b);
        let mut lang = self.dropout(t, emb, ctx);

        let feats = t.constant(vis.features.clone());
        let boxes = t.constant(vis.boxes.clone());
        let f = self.linear(t, feats, l.feat_w, l.feat_b);
        let b = self.linear(t, boxes, l.box_w, l.box_b);
        let v = t.add(f, b);
        let v = self.norm(t, v, l.vis_ln_g, l.vis_ln_b);
        let mut visn = self.dropout(t, v, ctx);

        let site = |kind, layer| AttnSite { kind, layer };
        for (i, layer) in l.lang.iter().enumerate() {
            lang = self.self_block(t, layer, lang, site(AttnKind::Lang, i), ctx);
        }
        for (i, layer) in l.vis.iter().enumerate() {
            visn = self.self_block(t, layer, visn, site(AttnKind::Vis, i), ctx);
        }
        for (c, layer) in l.cross.iter().enumerate() {
            let lang_x = self.attention(
                t,
                &layer.lang_cross,
                lang,
                visn,
                site(AttnKind::CrossTv, c),
                ctx,
            );
            let vis_x = self.attention(
                t,
                &layer.vis_cross,
                visn,
                lang,
                site(AttnKind::CrossVt, c),
                ctx,
            );
            lang = self.self_block(
                t,
                &layer.lang,
                lang_x,
                site(AttnKind::Lang, l.lang.len() + c),
                ctx,
            );
            visn = self.self_block(
                t,
                &layer.vis,
                vis_x,
                site(AttnKind::Vis, l.vis.len() + c),
                ctx,
            );
        }

        let first = t.gather_rows(lang, vec![0]);
        let pooled = self.linear(t, first, l.pool_w, l.pool_b);
        let pooled = t.tanh(pooled);
        let cls_w = t.param(l.cls_w);
        let cls_b = t.param(l.cls_b);
        let logits = t.matmul_nt(pooled, cls_w);
        let logits = t.add_row(logits, cls_b);
        Graph {
            logits,
            sites: std::mem::take(&mut ctx.sites),
        }
    }

    fn collect_maps(
        &self,
        sites: &[(AttnSite, Vec<Var>)],
        get: impl Fn(Var) -> Option<Array2<f64>>,
    ) -> AttentionMaps {
        let mut maps = AttentionMaps::default();
        for (site, heads) in sites {
            let first = get(heads[0]).expect("head map");
            let (rows, cols) = first.dim();
            let mut stacked = Array3::zeros((heads.len(), rows, cols));
            stacked.index_axis_mut(Axis(0), 0).assign(&first);
            for (h, &var) in heads.iter().enumerate().skip(1) {
                stacked
                    .index_axis_mut(Axis(0), h)
                    .assign(&get(var).expect("head map"));
            }
            let list = maps.list_mut(site.kind);
            debug_assert_eq!(list.len(), site.layer);
            list.push(stacked);
        }
        maps
    }

    fn eval_ctx<'h>(hook: Option<AttnHook<'h>>) -> Ctx<'h> {
        Ctx {
            dropout: None,
            hook,
            sites: Vec::new(),
        }
    }
}

fn row_to_array1(a: &Array2<f64>) -> Array1<f64> {
    a.row(0).to_owned()
}

/// Eval-mode forward pass (no dropout).
pub fn forward(
    model: &Model,
    seq: &InjectedSequence,
    vis: &VisualInput,
    record_trace: bool,
) -> Result<(Array1<f64>, Option<ForwardTrace>), ModelError> {
    model.validate_inputs(seq, vis)?;
    let mut tape = Tape::new(&model.params);
    let mut ctx = Model::eval_ctx(None);
    let graph = model.build(&mut tape, seq, vis, &mut ctx);
    let logits = row_to_array1(tape.value(graph.logits));
    let trace = record_trace.then(|| ForwardTrace {
        attn: model.collect_maps(&graph.sites, |v| Some(tape.value(v).clone())),
        logits: logits.clone(),
        pooled_index: 0,
    });
    Ok((logits, trace))
}

/// Eval-mode forward with a hook that may edit each head's attention
/// probabilities before they are used.
pub fn forward_with_hook(
    model: &Model,
    seq: &InjectedSequence,
    vis: &VisualInput,
    hook: AttnHook,
) -> Result<ForwardTrace, ModelError> {
    model.validate_inputs(seq, vis)?;
    let mut tape = Tape::new(&model.params);
    let mut ctx = Model::eval_ctx(Some(hook));
    let graph = model.build(&mut tape, seq, vis, &mut ctx);
    let logits = row_to_array1(tape.value(graph.logits));
    Ok(ForwardTrace {
        attn: model.collect_maps(&graph.sites, |v| Some(tape.value(v).clone())),
        logits,
        pooled_index: 0,
    })
}

/// Gradient of `Σ weights[i]·logit[i]` w.r.t. every attention map, with the
/// trace of the same forward pass.
pub fn attention_gradients_weighted(
    model: &Model,
    seq: &InjectedSequence,
    vis: &VisualInput,
    weights: &[f64],
) -> Result<(ForwardTrace, AttentionGrads), ModelError> {
    if weights.len() != model.config.answer_vocab_size {
        return Err(ModelError::Shape(format!(
            "{} logit weights for {} answers",
            weights.len(),
            model.config.answer_vocab_size
        )));
    }
    model.validate_inputs(seq, vis)?;
    let mut tape = Tape::new(&model.params);
    let mut ctx = Model::eval_ctx(None);
    let graph = model.build(&mut tape, seq, vis, &mut ctx);
    let seed = Array2::from_shape_vec((1, weights.len()), weights.to_vec()).expect("row shape");
    let grads: Gradients = tape.backward(graph.logits, seed);
    let trace = ForwardTrace {
        attn: model.collect_maps(&graph.sites, |v| Some(tape.value(v).clone())),
        logits: row_to_array1(tape.value(graph.logits)),
        pooled_index: 0,
    };
    let attn_grads = model.collect_maps(&graph.sites, |v| {
        Some(
            grads
                .node(v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(tape.value(v).raw_dim())),
        )
    });
    Ok((trace, attn_grads))
}

/// Gradient of the `target_class` logit w.r.t. every attention map.
pub fn attention_gradients(
    model: &Model,
    seq: &InjectedSequence,
    vis: &VisualInput,
    target_class: usize,
) -> Result<(ForwardTrace, AttentionGrads), ModelError> {
    let n = model.config.answer_vocab_size;
    if target_class >= n {
        return Err(ModelError::TargetOutOfRange {
            target: target_class,
            size: n,
        });
    }
    let mut weights = vec![0.0; n];
    weights[target_class] = 1.0;
    attention_gradients_weighted(model, seq, vis, &weights)
}

/// Loss, logits and one gradient per parameter.
pub type LossAndGradients = (f64, Array1<f64>, Vec<Array2<f64>>);

/// Cross-entropy of the logits against `targets` and its gradient for every
/// parameter. `dropout_seed` switches on train mode.
pub fn loss_and_gradients(
    model: &Model,
    seq: &InjectedSequence,
    vis: &VisualInput,
    targets: &Array1<f64>,
    dropout_seed: Option<u64>,
) -> Result<LossAndGradients, ModelError> {
    model.validate_inputs(seq, vis)?;
    if targets.len() != model.config.answer_vocab_size {
        return Err(ModelError::Shape(format!(
            "target has {} entries for {} answers",
            targets.len(),
            model.config.answer_vocab_size
        )));
    }
    let mut tape = Tape::new(&model.params);
    let mut ctx = Ctx {
        dropout: dropout_seed.map(|s| (model.config.dropout, ChaCha8Rng::seed_from_u64(s))),
        hook: None,
        sites: Vec::new(),
    };
    let graph = model.build(&mut tape, seq, vis, &mut ctx);
    let target_row = targets.clone().insert_axis(Axis(0));
    let loss = tape.soft_cross_entropy(graph.logits, target_row);
    let grads = tape.backward(loss, Array2::ones((1, 1)));
    let param_grads = grads
        .params
        .into_iter()
        .zip(&model.params)
        .map(|(g, p)| g.unwrap_or_else(|| Array2::zeros(p.raw_dim())))
        .collect();
    Ok((
        tape.value(loss)[[0, 0]],
        row_to_array1(tape.value(graph.logits)),
        param_grads,
    ))
}
