//! Masked-autoencoder transformer over packed IQ token sequences.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::{normal, xavier, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::masker::MaskPlan;
use crate::packer::{PackedSequence, SPECIAL_TOKENS};
use crate::rng;
use crate::scalar::Scalar;
use crate::synth::IqWaveform;

/// Positional coordinates reserved for the two special tokens.
pub const SR_POSITION: f64 = -2.0;
pub const CLS_POSITION: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown model preset {s:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tiny => "tiny",
            Self::Small => "small",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub decoder_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub max_tokens: usize,
    pub mask_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            patch_size: 8,
            embed_dim: 768,
            decoder_dim: 512,
            encoder_layers: 12,
            decoder_layers: 8,
            heads: 12,
            decoder_heads: 16,
            mlp_ratio: 4,
            max_tokens: 6000,
            mask_ratio: 0.75,
        };
        match p {
            Preset::Full => base,
            Preset::Small => Self {
                embed_dim: 64,
                decoder_dim: 64,
                encoder_layers: 4,
                decoder_layers: 2,
                heads: 4,
                decoder_heads: 4,
                ..base
            },
            Preset::Tiny => Self {
                embed_dim: 32,
                decoder_dim: 32,
                encoder_layers: 2,
                decoder_layers: 2,
                heads: 4,
                decoder_heads: 4,
                ..base
            },
        }
    }

    /// Reals per patch: interleaved I/Q.
    pub fn patch_width(&self) -> usize {
        2 * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.decoder_dim == 0 || self.mlp_ratio == 0 {
            return bad("model sizes must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!("decoder_dim {} not divisible by {} heads", self.decoder_dim, self.decoder_heads));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.max_tokens <= SPECIAL_TOKENS {
            return bad(format!("max_tokens {} leaves no room for patches", self.max_tokens));
        }
        Ok(())
    }

    /// `(name, rows, cols)` for every parameter, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let (d, dd, pw) = (self.embed_dim, self.decoder_dim, self.patch_width());
        let mut v = vec![
            ("tok.patch.w".to_string(), pw, d),
            ("tok.patch.b".into(), 1, d),
            ("tok.sr.w".into(), 1, d),
            ("tok.sr.b".into(), 1, d),
            ("tok.cls".into(), 1, d),
        ];
        for i in 0..self.encoder_layers {
            v.extend(block_shapes(&format!("enc.{i}"), d, self.mlp_ratio));
        }
        v.push(("enc.ln.g".into(), 1, d));
        v.push(("enc.ln.b".into(), 1, d));
        v.push(("dec.embed.w".into(), d, dd));
        v.push(("dec.embed.b".into(), 1, dd));
        v.push(("dec.mask".into(), 1, dd));
        for i in 0..self.decoder_layers {
            v.extend(block_shapes(&format!("dec.{i}"), dd, self.mlp_ratio));
        }
        v.push(("dec.ln.g".into(), 1, dd));
        v.push(("dec.ln.b".into(), 1, dd));
        v.push(("dec.head.w".into(), dd, pw));
        v.push(("dec.head.b".into(), 1, pw));
        v
    }

    /// Parameter counts `(tokenizer + encoder, decoder)`.
    pub fn param_counts(&self) -> (usize, usize) {
        self.param_shapes().iter().fold((0, 0), |(e, d), (n, r, c)| {
            if n.starts_with("dec.") {
                (e, d + r * c)
            } else {
                (e + r * c, d)
            }
        })
    }
}

fn block_shapes(p: &str, d: usize, ratio: usize) -> Vec<(String, usize, usize)> {
    let h = d * ratio;
    vec![
        (format!("{p}.ln1.g"), 1, d),
        (format!("{p}.ln1.b"), 1, d),
        (format!("{p}.qkv.w"), d, 3 * d),
        (format!("{p}.qv.b"), 1, 2 * d),
        (format!("{p}.proj.w"), d, d),
        (format!("{p}.proj.b"), 1, d),
        (format!("{p}.ln2.g"), 1, d),
        (format!("{p}.ln2.b"), 1, d),
        (format!("{p}.fc1.w"), d, h),
        (format!("{p}.fc1.b"), 1, h),
        (format!("{p}.fc2.w"), h, d),
        (format!("{p}.fc2.b"), 1, d),
    ]
}

/// Initial value for a parameter, chosen from its name suffix.
pub(crate) fn init_param<T: Scalar>(name: &str, rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<T> {
    if name.ends_with(".g") {
        Tensor::full(rows, cols, T::one())
    } else if name.ends_with(".b") {
        Tensor::zeros(rows, cols)
    } else if name.ends_with(".w") {
        xavier(rows, cols, rng)
    } else {
        normal(rows, cols, 0.02, rng)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    /// Query/key/value weights with query and value biases. A key bias
    /// shifts every score of a query equally and cancels in the softmax.
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Parameter handles for the tokenizer, encoder and reconstruction decoder.
#[derive(Debug, Clone)]
pub struct MaeModel {
    pub config: ModelConfig,
    patch: Linear,
    sr: Linear,
    cls: usize,
    encoder: Vec<Block>,
    enc_ln: Norm,
    dec_embed: Linear,
    mask_token: usize,
    decoder: Vec<Block>,
    dec_ln: Norm,
    head: Linear,
    encoder_pids: Range<usize>,
    decoder_pids: Range<usize>,
}

/// Packed records ready for the model: patch rows in pack order and
/// `log10` sampling rates per record.
#[derive(Debug, Clone)]
pub struct PackInput<T = f32> {
    pub pack: PackedSequence,
    /// One row of interleaved I/Q per patch, records back to back.
    pub patches: Tensor<T>,
    pub log_fs: Vec<T>,
    patch_offsets: Vec<usize>,
}

impl<T: Scalar> PackInput<T> {
    pub fn new(pack: PackedSequence, waveforms: &[&IqWaveform<f32>], patch_size: usize) -> Result<Self> {
        if waveforms.len() != pack.len() {
            return Err(Error::Shape(format!("{} waveforms for a pack of {}", waveforms.len(), pack.len())));
        }
        let width = 2 * patch_size;
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(pack.len() + 1);
        let mut log_fs = Vec::with_capacity(pack.len());
        offsets.push(0);
        for (r, w) in waveforms.iter().enumerate() {
            let p = pack.patch_count(r);
            if w.len() != p * patch_size {
                return Err(Error::Shape(format!(
                    "record {} has {} samples, pack slot expects {}",
                    pack.record_ids[r],
                    w.len(),
                    p * patch_size
                )));
            }
            data.extend(w.samples().iter().flat_map(|s| [T::lit(f64::from(s.re)), T::lit(f64::from(s.im))]));
            offsets.push(offsets[r] + p);
            log_fs.push(T::lit(w.sample_rate_hz().log10()));
        }
        let rows = offsets[pack.len()];
        Ok(Self { pack, patches: Tensor { rows, cols: width, data }, log_fs, patch_offsets: offsets })
    }

    /// Packs `waveforms` into one sequence sized to fit them all.
    pub fn from_waveforms(waveforms: &[&IqWaveform<f32>], patch_size: usize) -> Result<Self> {
        let mut pack = PackedSequence::new(usize::MAX);
        for (i, w) in waveforms.iter().enumerate() {
            pack.try_push(i as u64, crate::packer::token_count(w.len(), patch_size)?);
        }
        pack.capacity = pack.total_tokens;
        Self::new(pack, waveforms, patch_size)
    }

    pub fn records(&self) -> usize {
        self.pack.len()
    }

    /// Patch row of token `t`, or `None` for special tokens.
    pub fn patch_row(&self, record: usize, t: usize) -> Option<usize> {
        let local = t - self.pack.boundaries[record].start;
        (local >= SPECIAL_TOKENS).then(|| self.patch_offsets[record] + local - SPECIAL_TOKENS)
    }

    pub fn patch_rows(&self, record: usize) -> Range<usize> {
        self.patch_offsets[record]..self.patch_offsets[record + 1]
    }

    /// Record index owning each token.
    pub fn token_records(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.pack.total_tokens);
        for (r, b) in self.pack.boundaries.iter().enumerate() {
            v.extend(std::iter::repeat_n(r, b.len()));
        }
        v
    }
}

/// Embedded tokens for a whole pack, before masking.
#[derive(Debug, Clone)]
pub struct TokenStream {
    pub embeddings: NodeId,
    pub block_ids: Vec<usize>,
    pub positions: Vec<f64>,
}

/// Encoder output over the visible tokens of a pack.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub latents: NodeId,
    /// Pack token index of each latent row.
    pub visible: Vec<usize>,
    /// Row ranges of each record within `latents`.
    pub blocks: Vec<Range<usize>>,
}

impl Encoded {
    /// Latent row of each record's classification token.
    pub fn cls_rows(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.start + 1).collect()
    }

    /// Latent rows of each record's visible patches.
    pub fn patch_blocks(&self) -> Vec<Range<usize>> {
        self.blocks.iter().map(|b| b.start + SPECIAL_TOKENS..b.end).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// `masked x patch_width` predictions.
    pub predictions: NodeId,
    /// Pack token index of each prediction row.
    pub masked: Vec<usize>,
}

/// Sinusoidal encoding of a scalar coordinate; frequencies run
/// geometrically from `pi` to `pi * max_tokens`.
pub fn positional_encoding(coord: f64, dim: usize, max_tokens: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let e = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
        let w = PI * (max_tokens as f64).powf(e);
        out[2 * j] = (w * coord).sin();
        out[2 * j + 1] = (w * coord).cos();
    }
    out
}

fn token_positions(pack: &PackedSequence) -> Vec<f64> {
    let mut pos = Vec::with_capacity(pack.total_tokens);
    for r in 0..pack.len() {
        pos.push(SR_POSITION);
        pos.push(CLS_POSITION);
        pos.extend(crate::masker::normalized_positions(pack.patch_count(r)));
    }
    pos
}

fn position_table<T: Scalar>(coords: &[f64], dim: usize, max_tokens: usize) -> Tensor<T> {
    let data = coords.iter().flat_map(|&c| positional_encoding(c, dim, max_tokens)).map(T::lit).collect();
    Tensor { rows: coords.len(), cols: dim, data }
}

impl MaeModel {
    /// Registers freshly initialized parameters in `store`.
    pub fn new<T: Scalar>(config: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed, &[0x4D4F_444C]);
        for (name, rows, cols) in config.param_shapes() {
            if store.find(&name).is_some() {
                return Err(Error::Config(format!("parameter {name} already registered")));
            }
            let t = init_param(&name, rows, cols, &mut r);
            store.add(name, t);
        }
        Self::attach(config, store)
    }

    /// Binds to parameters already present in `store` (e.g. from a checkpoint).
    pub fn attach<T: Scalar>(config: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        let mut ids = Vec::with_capacity(shapes.len());
        for (name, rows, cols) in &shapes {
            let p = store.find(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.tensor(p).shape() != (*rows, *cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} is {:?}, config expects {rows}x{cols}",
                    store.tensor(p).shape()
                )));
            }
            ids.push(p);
        }
        let id = |n: &str| ids[shapes.iter().position(|s| s.0 == n).expect("known parameter")];
        let lin = |p: &str| Linear { w: id(&format!("{p}.w")), b: id(&format!("{p}.b")) };
        let norm = |p: &str| Norm { g: id(&format!("{p}.g")), b: id(&format!("{p}.b")) };
        let block = |p: String| Block {
            ln1: norm(&format!("{p}.ln1")),
            qkv: Linear { w: id(&format!("{p}.qkv.w")), b: id(&format!("{p}.qv.b")) },
            proj: lin(&format!("{p}.proj")),
            ln2: norm(&format!("{p}.ln2")),
            fc1: lin(&format!("{p}.fc1")),
            fc2: lin(&format!("{p}.fc2")),
        };
        let first_dec = shapes.iter().position(|s| s.0.starts_with("dec.")).expect("decoder present");
        let model = Self {
            patch: lin("tok.patch"),
            sr: lin("tok.sr"),
            cls: id("tok.cls"),
            encoder: (0..config.encoder_layers).map(|i| block(format!("enc.{i}"))).collect(),
            enc_ln: norm("enc.ln"),
            dec_embed: lin("dec.embed"),
            mask_token: id("dec.mask"),
            decoder: (0..config.decoder_layers).map(|i| block(format!("dec.{i}"))).collect(),
            dec_ln: norm("dec.ln"),
            head: lin("dec.head"),
            encoder_pids: ids[0]..ids[first_dec],
            decoder_pids: ids[first_dec]..ids[shapes.len() - 1] + 1,
            config,
        };
        Ok(model)
    }

    /// Parameter ids of the tokenizer and encoder.
    pub fn encoder_params(&self) -> Range<usize> {
        self.encoder_pids.clone()
    }

    pub fn decoder_params(&self) -> Range<usize> {
        self.decoder_pids.clone()
    }

    pub fn tokenize<T: Scalar>(&self, g: &mut Graph<'_, T>, input: &PackInput<T>) -> Result<TokenStream> {
        let cfg = &self.config;
        if input.patches.cols != cfg.patch_width() {
            return Err(Error::Shape(format!(
                "patch rows are {} wide, model expects {}",
                input.patches.cols,
                cfg.patch_width()
            )));
        }
        let pack = &input.pack;
        let n_rec = pack.len();
        let patches = g.leaf(input.patches.clone());
        let pe = g.linear(patches, self.patch.w, self.patch.b)?;
        let fs = g.leaf(Tensor { rows: n_rec, cols: 1, data: input.log_fs.clone() });
        let sr = g.linear(fs, self.sr.w, self.sr.b)?;
        let cls_p = g.param(self.cls);
        let cls = g.gather_rows(cls_p, vec![0; n_rec])?;
        let all = g.concat_rows(vec![sr, cls, pe])?;
        let mut order = Vec::with_capacity(pack.total_tokens);
        for r in 0..n_rec {
            order.push(r);
            order.push(n_rec + r);
            order.extend(input.patch_rows(r).map(|p| 2 * n_rec + p));
        }
        let tokens = g.gather_rows(all, order)?;
        let positions = token_positions(pack);
        let pos = g.leaf(position_table(&positions, cfg.embed_dim, cfg.max_tokens));
        let embeddings = g.add(tokens, pos)?;
        Ok(TokenStream { embeddings, block_ids: input.token_records(), positions })
    }

    fn block<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, b: &Block, heads: usize, blocks: &[Range<usize>]) -> Result<NodeId> {
        let h = g.layer_norm(x, b.ln1.g, b.ln1.b)?;
        let w = g.param(b.qkv.w);
        let qkv = g.matmul(h, w)?;
        let d = g.value(h).cols;
        let qv = g.param(b.qkv.b);
        let bq = g.slice_cols(qv, 0..d)?;
        let bk = g.leaf(Tensor::zeros(1, d));
        let bv = g.slice_cols(qv, d..2 * d)?;
        let bias = g.concat_cols(vec![bq, bk, bv])?;
        let qkv = g.add_bias(qkv, bias)?;
        let a = g.attention(qkv, heads, blocks.to_vec())?;
        let o = g.linear(a, b.proj.w, b.proj.b)?;
        let x = g.add(x, o)?;
        let h = g.layer_norm(x, b.ln2.g, b.ln2.b)?;
        let h = g.linear(h, b.fc1.w, b.fc1.b)?;
        let h = g.gelu(h);
        let h = g.linear(h, b.fc2.w, b.fc2.b)?;
        g.add(x, h)
    }

    /// Runs the encoder over the visible tokens; attention never crosses
    /// record boundaries.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, stream: &TokenStream, plan: &MaskPlan, pack: &PackedSequence) -> Result<Encoded> {
        plan.check(pack)?;
        let (visible, _) = plan.partition();
        let mut blocks = Vec::with_capacity(pack.len());
        let mut start = 0;
        for b in &pack.boundaries {
            let n = b.clone().filter(|&t| plan.is_visible(t)).count();
            blocks.push(start..start + n);
            start += n;
        }
        let mut x = g.gather_rows(stream.embeddings, visible.clone())?;
        for b in &self.encoder {
            x = self.block(g, x, b, self.config.heads, &blocks)?;
        }
        let latents = g.layer_norm(x, self.enc_ln.g, self.enc_ln.b)?;
        Ok(Encoded { latents, visible, blocks })
    }

    /// Decoder pass: visible latents plus mask tokens in pack order, then a
    /// patch head on the masked positions.
    pub fn decode_reconstruct<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        enc: &Encoded,
        plan: &MaskPlan,
        pack: &PackedSequence,
    ) -> Result<Reconstruction> {
        plan.check(pack)?;
        let cfg = &self.config;
        let z = g.linear(enc.latents, self.dec_embed.w, self.dec_embed.b)?;
        let mask = g.param(self.mask_token);
        let zz = g.concat_rows(vec![z, mask])?;
        let n_vis = enc.visible.len();
        let mut idx = Vec::with_capacity(pack.total_tokens);
        let mut masked = Vec::new();
        let mut next_visible = 0;
        for t in 0..pack.total_tokens {
            if plan.is_visible(t) {
                idx.push(next_visible);
                next_visible += 1;
            } else {
                idx.push(n_vis);
                masked.push(t);
            }
        }
        let full = g.gather_rows(zz, idx)?;
        let pos = g.leaf(position_table(&token_positions(pack), cfg.decoder_dim, cfg.max_tokens));
        let mut x = g.add(full, pos)?;
        for b in &self.decoder {
            x = self.block(g, x, b, cfg.decoder_heads, &pack.boundaries)?;
        }
        let x = g.layer_norm(x, self.dec_ln.g, self.dec_ln.b)?;
        let rows = g.gather_rows(x, masked.clone())?;
        let predictions = g.linear(rows, self.head.w, self.head.b)?;
        Ok(Reconstruction { predictions, masked })
    }

    /// Masked-patch MSE averaged within each record, then across records.
    pub fn mae_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, rec: &Reconstruction, input: &PackInput<T>) -> Result<NodeId> {
        let owners = input.token_records();
        let mut per_record = vec![0usize; input.records()];
        for &t in &rec.masked {
            per_record[owners[t]] += 1;
        }
        let active = per_record.iter().filter(|&&m| m > 0).count();
        if active == 0 {
            return Err(Error::Contract("no masked patches to reconstruct".into()));
        }
        let width = input.patches.cols;
        let mut target = Tensor::zeros(rec.masked.len(), width);
        let mut weights = Vec::with_capacity(rec.masked.len());
        for (k, &t) in rec.masked.iter().enumerate() {
            let r = owners[t];
            let p = input.patch_row(r, t).ok_or_else(|| Error::Contract(format!("token {t} is not a patch")))?;
            target.row_mut(k).copy_from_slice(input.patches.row(p));
            weights.push(T::lit(1.0 / (active * per_record[r] * width) as f64));
        }
        let target = g.leaf(target);
        g.weighted_sq_err(rec.predictions, target, weights)
    }

    /// Full masked-autoencoding forward pass; returns the loss node.
    pub fn forward_mae<T: Scalar>(&self, g: &mut Graph<'_, T>, input: &PackInput<T>, plan: &MaskPlan) -> Result<(NodeId, Reconstruction)> {
        let stream = self.tokenize(g, input)?;
        let enc = self.encode(g, &stream, plan, &input.pack)?;
        let rec = self.decode_reconstruct(g, &enc, plan, &input.pack)?;
        let loss = self.mae_loss(g, &rec, input)?;
        Ok((loss, rec))
    }

    /// Encoder over every token of the pack, as used by downstream tasks.
    pub fn encode_all<T: Scalar>(&self, g: &mut Graph<'_, T>, input: &PackInput<T>) -> Result<Encoded> {
        let stream = self.tokenize(g, input)?;
        let plan = crate::masker::all_visible(&input.pack);
        self.encode(g, &stream, &plan, &input.pack)
    }
}
