//! Toy single-stream encoder-decoder.
//!
//! Encoder sequence layouts (`feats` is the projected visual block):
//!
//! ```text
//! textual only   [BOS] [LANG] x1 .. xn
//! ROI / PATCH    [CLS] feats [BOS] [LANG] x1 .. xn
//! COMBINED       [CLS] roi.. [SEP] patch.. [BOS] [LANG] x1 .. xn
//! two images     [CLS] feats(v1) [SEP'] feats(v2) [BOS] [LANG] x1 .. xn
//! ```
//!
//! The top-layer hidden state at `[CLS]` is the visio-textual representation
//! (VtR); the one at `[BOS]` is the textual representation (TR). The decoder
//! consumes `[LANG] y1 .. ym` under a causal mask with cross-attention to the
//! encoder states and emits next-token logits at every position.
//!
//! Blocks are pre-layer-norm with a GELU feed-forward of width `4 * d_model`;
//! positional embeddings are learned and absolute over the flat sequence.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, format_err, shape_err, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const CLS: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
/// `[SEP']`, separates the two images of a double-image input.
pub const SEP_PAIR: usize = 3;
pub const MASK: usize = 4;
pub const N_SPECIAL: usize = 5;

pub const INIT_RANGE: f64 = 0.05;

/// Token id of the tag for language `lang`.
pub fn lang_tag(lang: usize) -> usize {
    N_SPECIAL + lang
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    /// Paper scale: 1024.
    pub d_model: usize,
    /// Paper scale: 12.
    pub n_enc_layers: usize,
    /// Paper scale: 12.
    pub n_dec_layers: usize,
    /// Paper scale: 16.
    pub n_heads: usize,
    pub vocab_size: usize,
    pub n_languages: usize,
    /// Paper scale: 2048 (detector ROI width).
    pub d_roi: usize,
    /// Paper scale: 768.
    pub d_patch: usize,
    /// Paper scale: 36 regions.
    pub k_roi: usize,
    pub n_patches: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            // 8 languages x 32 concepts + tags + specials
            vocab_size: N_SPECIAL + 8 + 8 * 32,
            n_languages: 8,
            d_roi: 32,
            d_patch: 16,
            k_roi: 4,
            n_patches: 16,
            max_seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("n_languages", self.n_languages),
            ("d_roi", self.d_roi),
            ("d_patch", self.d_patch),
            ("k_roi", self.k_roi),
            ("n_patches", self.n_patches),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("model.{name} must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(config_err!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model,
                self.n_heads
            ));
        }
        if self.vocab_size <= N_SPECIAL + self.n_languages {
            return Err(config_err!(
                "model.vocab_size ({}) leaves no room for content tokens",
                self.vocab_size
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    ///
    /// With `d = d_model`, `V = vocab_size`, `L = max_seq_len`:
    /// attention block `4d^2 + 4d`, feed-forward `8d^2 + 5d`, layer norm `2d`;
    /// encoder layer `12d^2 + 13d`, decoder layer `16d^2 + 19d`; plus token
    /// and two positional tables `Vd + 2Ld`, visual projections
    /// `(d_roi + d_patch + 2) d`, two final norms `4d`, two vocabulary heads
    /// `2(dV + V)` and the matching head `d + 1`.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let enc = 12 * d * d + 13 * d;
        let dec = 16 * d * d + 19 * d;
        v * d
            + 2 * self.max_seq_len * d
            + (self.d_roi + self.d_patch + 2) * d
            + self.n_enc_layers * enc
            + self.n_dec_layers * dec
            + 4 * d
            + 2 * (d * v + v)
            + d
            + 1
    }

    pub fn is_content_token(&self, t: usize) -> bool {
        t >= N_SPECIAL + self.n_languages && t < self.vocab_size
    }

    /// Number of positions the visual block of `v` occupies.
    pub fn visual_len(&self, v: &VisualFeatures) -> usize {
        match v.mode {
            VisualMode::Roi => self.k_roi,
            VisualMode::Patch => self.n_patches,
            VisualMode::Combined => self.k_roi + 1 + self.n_patches,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum VisualMode {
    Roi,
    Patch,
    Combined,
}

/// Visual input of one image. Either block may be present regardless of mode;
/// the mode decides which ones are fed to the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub mode: VisualMode,
    /// `[k_roi, d_roi]`
    pub roi: Option<Tensor>,
    /// `[n_patches, d_patch]`
    pub patches: Option<Tensor>,
}

impl VisualFeatures {
    pub fn with_mode(&self, mode: VisualMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let need_roi = matches!(self.mode, VisualMode::Roi | VisualMode::Combined);
        let need_patch = matches!(self.mode, VisualMode::Patch | VisualMode::Combined);
        if need_roi {
            match &self.roi {
                None => return Err(format_err!("{:?} mode requires ROI features", self.mode)),
                Some(t) if t.shape() != [cfg.k_roi, cfg.d_roi] => {
                    return Err(shape_err!(
                        "ROI features {:?}, expected [{}, {}]",
                        t.shape(),
                        cfg.k_roi,
                        cfg.d_roi
                    ))
                }
                _ => {}
            }
        }
        if need_patch {
            match &self.patches {
                None => return Err(format_err!("{:?} mode requires patch features", self.mode)),
                Some(t) if t.shape() != [cfg.n_patches, cfg.d_patch] => {
                    return Err(shape_err!(
                        "patch features {:?}, expected [{}, {}]",
                        t.shape(),
                        cfg.n_patches,
                        cfg.d_patch
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Encoder-side text: `[BOS] [LANG] content..`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenSequence {
    tokens: Vec<usize>,
    language: usize,
}

impl TokenSequence {
    pub fn new(language: usize, content: &[usize]) -> Self {
        let mut tokens = Vec::with_capacity(content.len() + 2);
        tokens.push(BOS);
        tokens.push(lang_tag(language));
        tokens.extend_from_slice(content);
        Self { tokens, language }
    }

    /// Validates a full token list that must start with `[BOS] [LANG]`.
    pub fn from_tokens(tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != BOS {
            return Err(format_err!("text must begin with [BOS], got {:?}", tokens));
        }
        if tokens[1] < N_SPECIAL {
            return Err(format_err!("[BOS] must be followed by a language tag, got {}", tokens[1]));
        }
        let language = tokens[1] - N_SPECIAL;
        Ok(Self { tokens, language })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn language(&self) -> usize {
        self.language
    }

    pub fn content(&self) -> &[usize] {
        &self.tokens[2..]
    }

    pub fn content_mut(&mut self) -> &mut [usize] {
        &mut self.tokens[2..]
    }

    /// Offset of the first content token inside [`TokenSequence::tokens`].
    pub const CONTENT_OFFSET: usize = 2;

    /// Positions (in `tokens`) currently holding `[MASK]`.
    pub fn mask_positions(&self) -> Vec<usize> {
        (2..self.tokens.len()).filter(|&i| self.tokens[i] == MASK).collect()
    }

    /// Decoder-side form `[LANG] content..`.
    pub fn decoder_tokens(&self) -> Vec<usize> {
        self.tokens[1..].to_vec()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.language >= cfg.n_languages {
            return Err(format_err!(
                "language {} outside the {} configured languages",
                self.language,
                cfg.n_languages
            ));
        }
        if let Some(&t) = self.content().iter().find(|&&t| t != MASK && !cfg.is_content_token(t)) {
            return Err(format_err!("token {t} is not a content token"));
        }
        Ok(())
    }
}

/// Result of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[seq_len, d_model]` top-layer states.
    pub hidden: Var,
    /// State at `[CLS]`, present iff the input had visual features.
    pub vtr: Option<Var>,
    /// State at `[BOS]`.
    pub tr: Var,
    pub cls_index: Option<usize>,
    pub bos_index: usize,
    pub seq_len: usize,
    /// Content tokens dropped from the tail to fit `max_seq_len`.
    pub truncated: usize,
    /// Encoder position of each kept content token, in order.
    pub content_positions: Vec<usize>,
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks that `other` has exactly the same names and shapes, in order.
    /// The error names the first mismatching tensor.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        for (i, (name, t)) in self.iter().enumerate() {
            match (other.names.get(i), other.tensors.get(i)) {
                (Some(on), Some(ot)) if on == name && ot.shape() == t.shape() => {}
                (Some(on), Some(ot)) => {
                    return Err(config_err!(
                        "tensor #{i}: expected {name} {:?}, found {on} {:?}",
                        t.shape(),
                        ot.shape()
                    ))
                }
                _ => return Err(config_err!("tensor #{i}: expected {name} {:?}, missing", t.shape())),
            }
        }
        if other.len() > self.len() {
            return Err(config_err!(
                "unexpected extra tensor {}",
                other.names[self.len()]
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct NormIdx {
    g: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct EncLayerIdx {
    ln1: NormIdx,
    attn: AttnIdx,
    ln2: NormIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct DecLayerIdx {
    ln1: NormIdx,
    self_attn: AttnIdx,
    ln2: NormIdx,
    cross_attn: AttnIdx,
    ln3: NormIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    dec_pos_emb: usize,
    roi_w: usize,
    roi_b: usize,
    patch_w: usize,
    patch_b: usize,
    enc: Vec<EncLayerIdx>,
    enc_ln: NormIdx,
    dec: Vec<DecLayerIdx>,
    dec_ln: NormIdx,
    mlm_w: usize,
    mlm_b: usize,
    lm_w: usize,
    lm_b: usize,
    itm_w: usize,
    itm_b: usize,
}

struct Builder<'a> {
    set: ParamSet,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-INIT_RANGE..INIT_RANGE))
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("builder shapes are non-empty");
        self.set.push(name, t)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            g: self.set.push(format!("{prefix}.g"), Tensor::filled(&[d], 1.0)),
            b: self.set.push(format!("{prefix}.b"), Tensor::zeros(&[d])),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.uniform(format!("{prefix}.wq"), &[d, d]),
            bq: self.uniform(format!("{prefix}.bq"), &[d]),
            wk: self.uniform(format!("{prefix}.wk"), &[d, d]),
            bk: self.uniform(format!("{prefix}.bk"), &[d]),
            wv: self.uniform(format!("{prefix}.wv"), &[d, d]),
            bv: self.uniform(format!("{prefix}.bv"), &[d]),
            wo: self.uniform(format!("{prefix}.wo"), &[d, d]),
            bo: self.uniform(format!("{prefix}.bo"), &[d]),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize) -> FfnIdx {
        FfnIdx {
            w1: self.uniform(format!("{prefix}.w1"), &[d, 4 * d]),
            b1: self.uniform(format!("{prefix}.b1"), &[4 * d]),
            w2: self.uniform(format!("{prefix}.w2"), &[4 * d, d]),
            b2: self.uniform(format!("{prefix}.b2"), &[d]),
        }
    }
}

fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (ParamSet, Layout) {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let mut b = Builder {
        set: ParamSet::new(),
        rng,
    };
    let tok_emb = b.uniform("tok_emb".into(), &[v, d]);
    let pos_emb = b.uniform("pos_emb".into(), &[cfg.max_seq_len, d]);
    let dec_pos_emb = b.uniform("dec_pos_emb".into(), &[cfg.max_seq_len, d]);
    let roi_w = b.uniform("roi_proj.w".into(), &[cfg.d_roi, d]);
    let roi_b = b.uniform("roi_proj.b".into(), &[d]);
    let patch_w = b.uniform("patch_proj.w".into(), &[cfg.d_patch, d]);
    let patch_b = b.uniform("patch_proj.b".into(), &[d]);
    let enc = (0..cfg.n_enc_layers)
        .map(|i| EncLayerIdx {
            ln1: b.norm(&format!("enc.{i}.ln1"), d),
            attn: b.attn(&format!("enc.{i}.attn"), d),
            ln2: b.norm(&format!("enc.{i}.ln2"), d),
            ffn: b.ffn(&format!("enc.{i}.ffn"), d),
        })
        .collect();
    let enc_ln = b.norm("enc.ln_f", d);
    let dec = (0..cfg.n_dec_layers)
        .map(|i| DecLayerIdx {
            ln1: b.norm(&format!("dec.{i}.ln1"), d),
            self_attn: b.attn(&format!("dec.{i}.self_attn"), d),
            ln2: b.norm(&format!("dec.{i}.ln2"), d),
            cross_attn: b.attn(&format!("dec.{i}.cross_attn"), d),
            ln3: b.norm(&format!("dec.{i}.ln3"), d),
            ffn: b.ffn(&format!("dec.{i}.ffn"), d),
        })
        .collect();
    let dec_ln = b.norm("dec.ln_f", d);
    let mlm_w = b.uniform("mlm_head.w".into(), &[d, v]);
    let mlm_b = b.uniform("mlm_head.b".into(), &[v]);
    let lm_w = b.uniform("lm_head.w".into(), &[d, v]);
    let lm_b = b.uniform("lm_head.b".into(), &[v]);
    let itm_w = b.uniform("itm_head.w".into(), &[d, 1]);
    let itm_b = b.uniform("itm_head.b".into(), &[1]);
    let layout = Layout {
        tok_emb,
        pos_emb,
        dec_pos_emb,
        roi_w,
        roi_b,
        patch_w,
        patch_b,
        enc,
        enc_ln,
        dec,
        dec_ln,
        mlm_w,
        mlm_b,
        lm_w,
        lm_b,
        itm_w,
        itm_b,
    };
    (b.set, layout)
}

/// Model configuration plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

/// Parameters of a [`Model`] registered as leaves of one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl core::ops::Index<usize> for Bound {
    type Output = Var;
    fn index(&self, i: usize) -> &Var {
        &self.vars[i]
    }
}

/// One entry of an encoder input, before embedding.
enum Segment<'a> {
    Token(usize),
    Visual(&'a VisualFeatures),
}

impl Model {
    /// Seeded uniform(-0.05, 0.05) initialization; layer-norm gains start at 1
    /// and shifts at 0.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build(&cfg, &mut rng);
        Ok(Self {
            cfg,
            params,
            layout,
        })
    }

    /// Model with externally supplied parameters (e.g. a loaded checkpoint).
    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut template = Self::new(cfg, 0)?;
        template.params.check_compatible(&params)?;
        template.params = params;
        Ok(template)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Register every parameter in `g`, differentiable or not.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .tensors()
                .iter()
                .map(|t| g.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    /// Gradients of every parameter after `g.backward`, zeros where no
    /// gradient reached.
    pub fn collect_grads(&self, g: &Graph, b: &Bound) -> Vec<Vec<f64>> {
        b.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    }

    fn linear(&self, g: &mut Graph, b: &Bound, x: Var, w: usize, bias: usize) -> Result<Var> {
        let y = g.matmul(x, b[w])?;
        g.add_bias(y, b[bias])
    }

    fn attention(
        &self,
        g: &mut Graph,
        b: &Bound,
        idx: &AttnIdx,
        q_in: Var,
        kv_in: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(g, b, q_in, idx.wq, idx.bq)?;
        let k = self.linear(g, b, kv_in, idx.wk, idx.bk)?;
        let v = self.linear(g, b, kv_in, idx.wv, idx.bv)?;
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let (qh, kh, vh) = if self.cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.narrow_cols(q, h * dh, dh)?,
                    g.narrow_cols(k, h * dh, dh)?,
                    g.narrow_cols(v, h * dh, dh)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let p = if causal { g.softmax_causal(s)? } else { g.softmax(s)? };
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.linear(g, b, cat, idx.wo, idx.bo)
    }

    fn ffn(&self, g: &mut Graph, b: &Bound, idx: &FfnIdx, x: Var) -> Result<Var> {
        let h = self.linear(g, b, x, idx.w1, idx.b1)?;
        let h = g.gelu(h);
        self.linear(g, b, h, idx.w2, idx.b2)
    }

    fn norm(&self, g: &mut Graph, b: &Bound, idx: &NormIdx, x: Var) -> Result<Var> {
        g.layer_norm(x, b[idx.g], b[idx.b])
    }

    fn visual_rows(&self, g: &mut Graph, b: &Bound, v: &VisualFeatures) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(3);
        let roi = |g: &mut Graph| -> Result<Var> {
            let x = g.constant(v.roi.clone().expect("validated"));
            self.linear(g, b, x, self.layout.roi_w, self.layout.roi_b)
        };
        let patch = |g: &mut Graph| -> Result<Var> {
            let x = g.constant(v.patches.clone().expect("validated"));
            self.linear(g, b, x, self.layout.patch_w, self.layout.patch_b)
        };
        match v.mode {
            VisualMode::Roi => out.push(roi(g)?),
            VisualMode::Patch => out.push(patch(g)?),
            VisualMode::Combined => {
                out.push(roi(g)?);
                out.push(g.gather_rows(b[self.layout.tok_emb], &[SEP])?);
                out.push(patch(g)?);
            }
        }
        Ok(out)
    }

    fn run_encoder(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: &[Segment<'_>],
        text: &TokenSequence,
    ) -> Result<EncoderOutput> {
        text.validate(&self.cfg)?;
        let mut prefix_len = 0;
        let mut has_visual = false;
        for s in prefix {
            match s {
                Segment::Token(_) => prefix_len += 1,
                Segment::Visual(v) => {
                    v.validate(&self.cfg)?;
                    has_visual = true;
                    prefix_len += self.cfg.visual_len(v);
                }
            }
        }
        let budget = self.cfg.max_seq_len;
        if prefix_len + 2 > budget {
            return Err(config_err!(
                "visual prefix of {prefix_len} positions leaves no room for text within max_seq_len {budget}"
            ));
        }
        let keep = text.tokens().len().min(budget - prefix_len);
        let truncated = text.tokens().len() - keep;
        let text_tokens = &text.tokens()[..keep];

        let mut parts = Vec::new();
        let mut pending: Vec<usize> = Vec::new();
        let emb = self.layout.tok_emb;
        for s in prefix {
            match s {
                Segment::Token(t) => pending.push(*t),
                Segment::Visual(v) => {
                    if !pending.is_empty() {
                        parts.push(g.gather_rows(b[emb], &pending)?);
                        pending.clear();
                    }
                    parts.extend(self.visual_rows(g, b, v)?);
                }
            }
        }
        pending.extend_from_slice(text_tokens);
        parts.push(g.gather_rows(b[emb], &pending)?);
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let seq_len = prefix_len + keep;
        let positions: Vec<usize> = (0..seq_len).collect();
        let pos = g.gather_rows(b[self.layout.pos_emb], &positions)?;
        let mut x = g.add(x, pos)?;

        for layer in &self.layout.enc {
            let h = self.norm(g, b, &layer.ln1, x)?;
            let a = self.attention(g, b, &layer.attn, h, h, false)?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, &layer.ln2, x)?;
            let f = self.ffn(g, b, &layer.ffn, h)?;
            x = g.add(x, f)?;
        }
        let hidden = self.norm(g, b, &self.layout.enc_ln, x)?;

        let bos_index = prefix_len;
        let tr = g.row(hidden, bos_index)?;
        let (vtr, cls_index) = if has_visual {
            (Some(g.row(hidden, 0)?), Some(0))
        } else {
            (None, None)
        };
        Ok(EncoderOutput {
            hidden,
            vtr,
            tr,
            cls_index,
            bos_index,
            seq_len,
            truncated,
            content_positions: (bos_index + 2..seq_len).collect(),
        })
    }

    /// Encode an optional image with one text.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        visual: Option<&VisualFeatures>,
        text: &TokenSequence,
    ) -> Result<EncoderOutput> {
        match visual {
            Some(v) => self.run_encoder(g, b, &[Segment::Token(CLS), Segment::Visual(v)], text),
            None => self.run_encoder(g, b, &[], text),
        }
    }

    /// Encode two images and one text, the images separated by `[SEP']`.
    pub fn encode_double_image(
        &self,
        g: &mut Graph,
        b: &Bound,
        v1: &VisualFeatures,
        v2: &VisualFeatures,
        text: &TokenSequence,
    ) -> Result<EncoderOutput> {
        if v1.mode != v2.mode {
            return Err(config_err!(
                "double-image input mixes {:?} and {:?} features",
                v1.mode,
                v2.mode
            ));
        }
        self.run_encoder(
            g,
            b,
            &[
                Segment::Token(CLS),
                Segment::Visual(v1),
                Segment::Token(SEP_PAIR),
                Segment::Visual(v2),
            ],
            text,
        )
    }

    /// Next-token logits `[target_len, vocab_size]` for a decoder input that
    /// starts with a language tag.
    pub fn decode(&self, g: &mut Graph, b: &Bound, enc: &EncoderOutput, target: &[usize]) -> Result<Var> {
        let Some(&first) = target.first() else {
            return Err(format_err!("empty decoder target"));
        };
        if !(N_SPECIAL..N_SPECIAL + self.cfg.n_languages).contains(&first) {
            return Err(format_err!(
                "decoder target must begin with a language tag, got token {first}"
            ));
        }
        if target.len() > self.cfg.max_seq_len {
            return Err(config_err!(
                "decoder target of {} tokens exceeds max_seq_len {}",
                target.len(),
                self.cfg.max_seq_len
            ));
        }
        if let Some(&t) = target.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(format_err!("token {t} outside vocabulary"));
        }
        let x = g.gather_rows(b[self.layout.tok_emb], target)?;
        let positions: Vec<usize> = (0..target.len()).collect();
        let pos = g.gather_rows(b[self.layout.dec_pos_emb], &positions)?;
        let mut x = g.add(x, pos)?;
        for layer in &self.layout.dec {
            let h = self.norm(g, b, &layer.ln1, x)?;
            let a = self.attention(g, b, &layer.self_attn, h, h, true)?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, &layer.ln2, x)?;
            let c = self.attention(g, b, &layer.cross_attn, h, enc.hidden, false)?;
            x = g.add(x, c)?;
            let h = self.norm(g, b, &layer.ln3, x)?;
            let f = self.ffn(g, b, &layer.ffn, h)?;
            x = g.add(x, f)?;
        }
        let h = self.norm(g, b, &self.layout.dec_ln, x)?;
        self.linear(g, b, h, self.layout.lm_w, self.layout.lm_b)
    }

    /// Masked-token logits `[positions.len(), vocab_size]` at the given
    /// encoder positions.
    pub fn mlm_logits(&self, g: &mut Graph, b: &Bound, enc: &EncoderOutput, positions: &[usize]) -> Result<Var> {
        let rows = positions
            .iter()
            .map(|&p| g.narrow_rows(enc.hidden, p, 1))
            .collect::<Result<Vec<_>>>()?;
        let x = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
        self.linear(g, b, x, self.layout.mlm_w, self.layout.mlm_b)
    }

    /// Matching logit (pre-sigmoid) from the raw `[CLS]` state.
    pub fn itm_logit(&self, g: &mut Graph, b: &Bound, enc: &EncoderOutput) -> Result<Var> {
        let vtr = enc
            .vtr
            .ok_or_else(|| format_err!("image-text matching needs a visio-textual input"))?;
        let x = g.reshape(vtr, &[1, self.cfg.d_model])?;
        let z = self.linear(g, b, x, self.layout.itm_w, self.layout.itm_b)?;
        g.reshape(z, &[1])
    }
}
