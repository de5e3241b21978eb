//! EEG segment Transformer with a song classifier and a masked teacher decoder.
//!
//! Parameter names start with `encoder.`, `head.` or `decoder.`.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{embedding_table, BatchNorm1d, BatchStats, Block, Conv1d, GroupNorm, LayerNorm, Linear};
use crate::nn::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::rng::StreamRng;
use crate::teacher::TeacherKind;

/// `(kernel, stride)` of the three temporal convolutions.
pub const CONV_GEOMETRY: [(usize, usize); 3] = [(7, 3), (5, 2), (5, 2)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    /// Teacher positions per segment (`N_M`).
    pub length: usize,
    /// Width of each continuous teacher frame.
    pub raw_dim: usize,
}

impl TeacherSpec {
    pub fn for_kind(kind: TeacherKind, muq_dim: usize) -> Self {
        TeacherSpec {
            kind,
            length: kind.segment_frames(),
            raw_dim: if kind == TeacherKind::Muq { muq_dim } else { 1 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub seconds: usize,
    pub rate: usize,
    pub conv_channels: [usize; 3],
    pub gn_groups: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    /// Present for pretraining; absent once the decoder is stripped.
    pub teacher: Option<TeacherSpec>,
    pub vocab: usize,
    pub mask_ratio: f64,
    pub w_c: f64,
    pub w_m: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 128,
            seconds: 3,
            rate: 125,
            conv_channels: [32, 64, 128],
            gn_groups: 4,
            embed_dim: 512,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 8,
            mlp_ratio: 4.0,
            classes: 10,
            head_hidden: 256,
            dropout: 0.1,
            bn_momentum: 0.1,
            teacher: None,
            vocab: 128,
            mask_ratio: 0.5,
            w_c: 1.0,
            w_m: 0.1,
        }
    }
}

/// Output length of the convolution stack for `rate` input samples.
pub fn conv_output_len(rate: usize) -> Option<usize> {
    CONV_GEOMETRY.iter().try_fold(rate, |l, &(k, s)| {
        (l >= k).then(|| (l - k) / s + 1)
    })
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.seconds == 0 || self.classes < 2 {
            return bad("channels, seconds and classes must be positive (classes ≥ 2)".into());
        }
        if conv_output_len(self.rate).is_none() {
            return bad(format!("rate {} too short for the convolution stack", self.rate));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.conv_channels.iter().any(|&c| c == 0 || c % self.gn_groups.max(1) != 0) || self.gn_groups == 0 {
            return bad("conv channels must be positive multiples of gn_groups".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad("dropout must be in [0, 1) and mask_ratio in [0, 1]".into());
        }
        if let Some(t) = &self.teacher {
            if t.length == 0 || t.raw_dim == 0 || self.vocab == 0 {
                return bad("teacher length, raw_dim and vocab must be positive".into());
            }
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.channels * self.seconds
    }

    pub fn without_decoder(&self) -> ModelConfig {
        ModelConfig {
            teacher: None,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
struct PatchEmbed {
    convs: Vec<(Conv1d, GroupNorm)>,
    proj: Linear,
}

#[derive(Clone, Debug)]
struct Head {
    norm: LayerNorm,
    fc1: Linear,
    bn: BatchNorm1d,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Decoder {
    teacher_proj: Linear,
    mask_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct PredAnnModel {
    pub config: ModelConfig,
    patch: PatchEmbed,
    ch_embed: ParamId,
    sec_embed: ParamId,
    cls_token: ParamId,
    blocks: Vec<Block>,
    head: Head,
    decoder: Option<Decoder>,
}

/// Positions whose teacher frames are hidden from the decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    /// Sorted, unique.
    pub indices: Vec<usize>,
    pub length: usize,
}

impl MaskSet {
    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn none(length: usize) -> Self {
        MaskSet {
            indices: Vec::new(),
            length,
        }
    }

    pub fn all(length: usize) -> Self {
        MaskSet {
            indices: (0..length).collect(),
            length,
        }
    }
}

/// `round(ratio · n)` positions drawn uniformly without replacement.
pub fn sample_mask(n: usize, ratio: f64, rng: &mut StreamRng) -> MaskSet {
    let m = ((ratio * n as f64).round() as usize).min(n);
    let mut indices = sample(rng, n, m).into_vec();
    indices.sort_unstable();
    MaskSet { indices, length: n }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Outputs of a per-sample forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    /// `[1, d]`.
    pub h_cls: Var,
    /// `[1 + patches, d]`.
    pub states: Var,
}

impl PredAnnModel {
    /// Registers all parameters in `store` and returns the model.
    pub fn new<T: Real>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, (&cout, &(k, s))) in config.conv_channels.iter().zip(&CONV_GEOMETRY).enumerate() {
            let conv = Conv1d::new(store, &format!("encoder.patch.conv{i}"), cin, cout, k, s, rng);
            let gn = GroupNorm::new(store, &format!("encoder.patch.gn{i}"), cout, config.gn_groups);
            convs.push((conv, gn));
            cin = cout;
        }
        let patch = PatchEmbed {
            convs,
            proj: Linear::new(store, "encoder.patch.proj", cin, d, rng),
        };
        let ch_embed = embedding_table(store, "encoder.channel_embed", config.channels, d, rng);
        let sec_embed = embedding_table(store, "encoder.second_embed", config.seconds, d, rng);
        let cls_token = embedding_table(store, "encoder.cls_token", 1, d, rng);
        let blocks = (0..config.encoder_layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("encoder.blocks.{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    config.dropout,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Head {
            norm: LayerNorm::new(store, "head.norm", d),
            fc1: Linear::new(store, "head.fc1", d, config.head_hidden, rng),
            bn: BatchNorm1d::new(store, "head.bn", config.head_hidden, config.bn_momentum),
            fc2: Linear::new(store, "head.fc2", config.head_hidden, config.classes, rng),
        };
        let decoder = match &config.teacher {
            None => None,
            Some(t) => Some(Decoder {
                teacher_proj: Linear::new(store, "decoder.teacher_proj", t.raw_dim, d, rng),
                mask_token: embedding_table(store, "decoder.mask_token", 1, d, rng),
                pos_embed: embedding_table(store, "decoder.pos_embed", t.length, d, rng),
                blocks: (0..config.decoder_layers)
                    .map(|i| {
                        Block::new(
                            store,
                            &format!("decoder.blocks.{i}"),
                            d,
                            config.heads,
                            config.mlp_ratio,
                            config.dropout,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
                norm: LayerNorm::new(store, "decoder.norm", d),
                out: Linear::new(store, "decoder.out", d, config.vocab, rng),
            }),
        };
        Ok(PredAnnModel {
            config,
            patch,
            ch_embed,
            sec_embed,
            cls_token,
            blocks,
            head,
            decoder,
        })
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    /// Leaf holding one segment, `channels × (seconds · rate)` channel-major,
    /// reshaped to one patch per (channel, second).
    pub fn input<T: Real>(&self, g: &mut Graph<'_, T>, values: &[f32]) -> Result<Var> {
        let c = &self.config;
        let expected = c.channels * c.seconds * c.rate;
        if values.len() != expected {
            return Err(Error::shape(format!(
                "segment has {} values, model expects {}×{}×{}",
                values.len(),
                c.channels,
                c.seconds,
                c.rate
            )));
        }
        let t = Tensor::new(
            &[c.patches(), 1, c.rate],
            values.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )?;
        Ok(g.input(t))
    }

    /// `[patches, 1, rate]` to `[patches, d]`.
    pub fn patch_embed<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, gn) in &self.patch.convs {
            h = conv.forward(g, h)?;
            h = gn.forward(g, h)?;
            h = g.tape.gelu(h);
        }
        let h = g.tape.mean_last(h)?;
        self.patch.proj.forward(g, h)
    }

    /// Adds channel and second embeddings and prepends the class token.
    pub fn assemble<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        let (ch, sec) = (self.config.channels, self.config.seconds);
        let ch_idx: Vec<usize> = (0..ch * sec).map(|p| p / sec).collect();
        let sec_idx: Vec<usize> = (0..ch * sec).map(|p| p % sec).collect();
        let (ct, st, cls) = (g.param(self.ch_embed), g.param(self.sec_embed), g.param(self.cls_token));
        let e_ch = g.tape.gather_rows(ct, &ch_idx)?;
        let e_sec = g.tape.gather_rows(st, &sec_idx)?;
        let t = g.tape.add(tokens, e_ch)?;
        let t = g.tape.add(t, e_sec)?;
        g.tape.concat_rows(&[cls, t])
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, seq: Var) -> Result<SampleVars> {
        let mut h = seq;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        Ok(SampleVars {
            h_cls: g.tape.slice_rows(h, 0, 1)?,
            states: h,
        })
    }

    /// Patch embedding, assembly and encoder for one segment.
    pub fn encode_segment<T: Real>(&self, g: &mut Graph<'_, T>, values: &[f32]) -> Result<SampleVars> {
        let x = self.input(g, values)?;
        let tokens = self.patch_embed(g, x)?;
        let seq = self.assemble(g, tokens)?;
        self.encode(g, seq)
    }

    fn head_pre<T: Real>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
        let h = self.head.norm.forward(g, h)?;
        self.head.fc1.forward(g, h)
    }

    /// Class logits `[B, classes]` with batch statistics; needs `B ≥ 2`.
    pub fn classify_train<T: Real>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<(Var, BatchStats<T>)> {
        let z = self.head_pre(g, h)?;
        let (z, stats) = self.head.bn.forward_train(g, z)?;
        let z = g.tape.relu(z);
        Ok((self.head.fc2.forward(g, z)?, stats))
    }

    /// Class logits using running batch-norm statistics.
    pub fn classify_eval<T: Real>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
        let z = self.head_pre(g, h)?;
        let z = self.head.bn.forward_eval(g, z)?;
        let z = g.tape.relu(z);
        self.head.fc2.forward(g, z)
    }

    pub fn update_bn<T: Real>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>) {
        self.head.bn.update_running(store, stats);
    }

    fn decoder(&self) -> Result<&Decoder> {
        self.decoder
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no teacher decoder"))
    }

    /// `u_i = e_mask` for masked `i`, else the projected teacher frame; plus
    /// positional embeddings. `raw` is `N_M × raw_dim`.
    pub fn decoder_input<T: Real>(&self, g: &mut Graph<'_, T>, raw: &[f32], mask: &MaskSet) -> Result<Var> {
        let dec = self.decoder()?;
        let spec = self.config.teacher.as_ref().expect("decoder implies teacher");
        if raw.len() != spec.length * spec.raw_dim || mask.length != spec.length {
            return Err(Error::shape(format!(
                "teacher input of {} values (mask over {}) for {}×{}",
                raw.len(),
                mask.length,
                spec.length,
                spec.raw_dim
            )));
        }
        let n = spec.length;
        let raw_t = Tensor::new(
            &[n, spec.raw_dim],
            raw.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )?;
        let rv = g.input(raw_t);
        let proj = dec.teacher_proj.forward(g, rv)?;
        let (mt, pt) = (g.param(dec.mask_token), g.param(dec.pos_embed));
        let stacked = g.tape.concat_rows(&[proj, mt])?;
        let idx: Vec<usize> = (0..n).map(|i| if mask.contains(i) { n } else { i }).collect();
        let u = g.tape.gather_rows(stacked, &idx)?;
        g.tape.add(u, pt)
    }

    /// Teacher logits `[N_M, vocab]` from the encoder states and decoder input.
    pub fn decode<T: Real>(&self, g: &mut Graph<'_, T>, states: Var, u: Var) -> Result<Var> {
        let dec = self.decoder()?;
        let n_enc = g.tape.shape(states)[0];
        let n = g.tape.shape(u)[0];
        let mut h = g.tape.concat_rows(&[states, u])?;
        for b in &dec.blocks {
            h = b.forward(g, h)?;
        }
        let t = g.tape.slice_rows(h, n_enc, n_enc + n)?;
        let t = dec.norm.forward(g, t)?;
        dec.out.forward(g, t)
    }

    /// Mean cross-entropy over the masked positions, or `None` for an empty mask.
    pub fn masked_loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        teacher_logits: Var,
        disc: &[u8],
        mask: &MaskSet,
    ) -> Result<Option<Var>> {
        if mask.indices.is_empty() {
            return Ok(None);
        }
        if disc.len() != mask.length {
            return Err(Error::shape("teacher tokens and mask differ in length"));
        }
        let rows = g.tape.gather_rows(teacher_logits, &mask.indices)?;
        let targets: Vec<usize> = mask.indices.iter().map(|&i| disc[i] as usize).collect();
        Ok(Some(g.tape.cross_entropy(rows, &targets)?))
    }
}

/// Drops every `decoder.` parameter.
pub fn strip_decoder<T: Real>(store: &ParamStore<T>) -> ParamStore<T> {
    store.filtered(|name| !name.starts_with("decoder."))
}

/// `w_c · L_C + w_m · L_M`, with the masked term omitted when absent.
pub fn combine_losses(w_c: f64, l_c: f64, w_m: f64, l_m: Option<f64>) -> f64 {
    w_c * l_c + l_m.map_or(0.0, |m| w_m * m)
}
