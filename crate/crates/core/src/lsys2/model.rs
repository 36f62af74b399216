//! Pre-LN causal transformer with a KV-cached inference path and a
//! taped full-sequence path used for training.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenizer::{self, ActionTokenizer, ACT, BINS};
use super::{image_hash, instruction_hash, Lsys2Config, Lsys2Error, SourceModel};
use crate::hashing::sha256_hex;
use crate::simenv::{View, VIEW_PIXELS, VIEW_SIDE};
use crate::tensor::{
    gelu, layernorm_forward, linear_forward, multi_head_attention, read_checkpoint, write_checkpoint,
    BoundParams, Graph, ParamSet, Rng, Tensor, TensorError, Var,
};

pub const PATCH_SIDE: usize = 4;
pub const NUM_PATCHES: usize = (VIEW_SIDE / PATCH_SIDE) * (VIEW_SIDE / PATCH_SIDE);
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE;
pub const DECODE_STEPS: usize = 7;
pub(crate) const LN_EPS: f64 = 1e-5;

/// Checkpoint sidecar: everything needed to rebuild and audit a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lsys2Meta {
    pub config: Lsys2Config,
    pub tag: SourceModel,
    /// Tags this checkpoint passed through, oldest first.
    pub lineage: Vec<SourceModel>,
    pub parent_hash: Option<String>,
    pub action_tokenizer: ActionTokenizer,
    pub seeds: Vec<u64>,
    pub train_steps: usize,
    pub dataset_hash: Option<String>,
}

pub struct Lsys2 {
    pub params: ParamSet,
    pub meta: Lsys2Meta,
}

/// Where each part of the sequence sits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub image: Range<usize>,
    pub bos: usize,
    /// Instruction words only.
    pub text: Range<usize>,
    pub eos: usize,
    /// Position of the ACT token; decode step `i` sits at `decode_start + i`.
    pub decode_start: usize,
}

impl SeqLayout {
    pub fn new(words: usize) -> Self {
        let bos = NUM_PATCHES;
        let text = bos + 1..bos + 1 + words;
        let eos = text.end;
        Self {
            image: 0..NUM_PATCHES,
            bos,
            text,
            eos,
            decode_start: eos + 1,
        }
    }

    pub fn prefill_len(&self) -> usize {
        self.decode_start
    }
}

#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

pub struct Prefill {
    pub(crate) cache: Option<KvCache>,
    /// Tapped-layer hidden state at every prefill position, `[T, d]`.
    pub hiddens: Tensor,
    pub layout: SeqLayout,
    pub instruction_hash: u64,
    pub image_hash: u64,
}

pub struct Decode {
    /// Action bins, one per dimension.
    pub bins: [usize; DECODE_STEPS],
    /// Tapped-layer hidden state that produced each token.
    pub hiddens: Vec<Vec<f64>>,
}

/// Flattens a 16x16 view into 16 row-major 4x4 patches, `[16, 16]`.
pub fn patchify(pixels: &[f64]) -> Result<Tensor, Lsys2Error> {
    if pixels.len() != VIEW_PIXELS {
        return Err(TensorError::Shape {
            op: "patchify",
            lhs: vec![pixels.len()],
            rhs: vec![VIEW_PIXELS],
        }
        .into());
    }
    let per_row = VIEW_SIDE / PATCH_SIDE;
    let mut out = Vec::with_capacity(VIEW_PIXELS);
    for p in 0..NUM_PATCHES {
        let (pr, pc) = (p / per_row, p % per_row);
        for r in 0..PATCH_SIDE {
            let row = pr * PATCH_SIDE + r;
            let col = pc * PATCH_SIDE;
            out.extend_from_slice(&pixels[row * VIEW_SIDE + col..][..PATCH_SIDE]);
        }
    }
    Ok(Tensor::new(vec![NUM_PATCHES, PATCH_DIM], out)?)
}

fn gelu_tensor(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = gelu(*v);
    }
    t
}

fn add_in_place(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

impl Lsys2 {
    pub fn init(config: Lsys2Config, action_tokenizer: ActionTokenizer, seed: u64) -> Result<Self, Lsys2Error> {
        config.validate()?;
        action_tokenizer.bounds()?;
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let mut rng = Rng::derive(seed, 0x15_2);
        let mut p = ParamSet::new();
        p.init_weight("patch.w", PATCH_DIM, d, &mut rng);
        p.init_zeros("patch.b", &[d]);
        p.insert("pos", Tensor::randn(&[config.max_seq, d], 0.2, &mut rng));
        p.insert("tok", Tensor::randn(&[config.vocab(), d], 0.5, &mut rng));
        for l in 0..config.layers {
            p.init_ones(&format!("b{l}.ln1.g"), &[d]);
            p.init_zeros(&format!("b{l}.ln1.b"), &[d]);
            for m in ["q", "k", "v", "o"] {
                p.init_weight(&format!("b{l}.attn.w{m}"), d, d, &mut rng);
                p.init_zeros(&format!("b{l}.attn.b{m}"), &[d]);
            }
            p.init_ones(&format!("b{l}.ln2.g"), &[d]);
            p.init_zeros(&format!("b{l}.ln2.b"), &[d]);
            p.init_weight(&format!("b{l}.mlp.w1"), d, f, &mut rng);
            p.init_zeros(&format!("b{l}.mlp.b1"), &[f]);
            p.init_weight(&format!("b{l}.mlp.w2"), f, d, &mut rng);
            p.init_zeros(&format!("b{l}.mlp.b2"), &[d]);
        }
        p.init_ones("lnf.g", &[d]);
        p.init_zeros("lnf.b", &[d]);
        p.init_weight("head.w", d, BINS, &mut rng);
        p.init_zeros("head.b", &[BINS]);
        Ok(Self {
            params: p,
            meta: Lsys2Meta {
                config,
                tag: SourceModel::Untrained,
                lineage: vec![SourceModel::Untrained],
                parent_hash: None,
                action_tokenizer,
                seeds: vec![seed],
                train_steps: 0,
                dataset_hash: None,
            },
        })
    }

    pub fn config(&self) -> &Lsys2Config {
        &self.meta.config
    }

    fn p(&self, name: &str) -> Result<&Tensor, Lsys2Error> {
        Ok(self.params.get(name)?)
    }

    /// Linear patch embedding before position embeddings are added.
    pub fn embed_patches_raw(&self, patches: &Tensor) -> Result<Tensor, Lsys2Error> {
        Ok(linear_forward(patches, self.p("patch.w")?, Some(self.p("patch.b")?))?)
    }

    /// 16 patch embeddings with position embeddings added, `[16, d]`.
    pub fn embed_image(&self, pixels: &[f64]) -> Result<Tensor, Lsys2Error> {
        let mut e = self.embed_patches_raw(&patchify(pixels)?)?;
        let pos = self.p("pos")?;
        let d = self.config().d_model;
        add_in_place(&mut e, &Tensor::new(vec![NUM_PATCHES, d], pos.data()[..NUM_PATCHES * d].to_vec())?);
        Ok(e)
    }

    fn embed_tokens(&self, ids: &[usize], start: usize) -> Result<Tensor, Lsys2Error> {
        let d = self.config().d_model;
        if start + ids.len() > self.config().max_seq {
            return Err(Lsys2Error::Length {
                len: start + ids.len(),
                max: self.config().max_seq,
            });
        }
        let (tok, pos) = (self.p("tok")?, self.p("pos")?);
        let mut data = Vec::with_capacity(ids.len() * d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.config().vocab() {
                return Err(Lsys2Error::State(format!("token id {id} out of range")));
            }
            data.extend(tok.row(id).iter().zip(pos.row(start + i)).map(|(a, b)| a + b));
        }
        Ok(Tensor::new(vec![ids.len(), d], data)?)
    }

    /// One block over `x` (`[n, d]`), appending its keys and values to layer `l` of the cache.
    fn block(&self, l: usize, x: &Tensor, cache: &mut KvCache) -> Result<Tensor, Lsys2Error> {
        let d = self.config().d_model;
        let n = x.rows();
        let w = |s: &str| self.p(&format!("b{l}.{s}"));
        let h = layernorm_forward(x, w("ln1.g")?, w("ln1.b")?, LN_EPS)?;
        let q = linear_forward(&h, w("attn.wq")?, Some(w("attn.bq")?))?;
        let k = linear_forward(&h, w("attn.wk")?, Some(w("attn.bk")?))?;
        let v = linear_forward(&h, w("attn.wv")?, Some(w("attn.bv")?))?;
        cache.keys[l].extend_from_slice(k.data());
        cache.values[l].extend_from_slice(v.data());
        let tk = cache.keys[l].len() / d;
        let kt = Tensor::new(vec![1, tk, d], cache.keys[l].clone())?;
        let vt = Tensor::new(vec![1, tk, d], cache.values[l].clone())?;
        let (a, _) = multi_head_attention(&q.reshape(&[1, n, d])?, &kt, &vt, self.config().heads, true)?;
        let o = linear_forward(&a.reshape(&[n, d])?, w("attn.wo")?, Some(w("attn.bo")?))?;
        let mut x = x.clone();
        add_in_place(&mut x, &o);
        let h2 = layernorm_forward(&x, w("ln2.g")?, w("ln2.b")?, LN_EPS)?;
        let f = gelu_tensor(linear_forward(&h2, w("mlp.w1")?, Some(w("mlp.b1")?))?);
        let f = linear_forward(&f, w("mlp.w2")?, Some(w("mlp.b2")?))?;
        add_in_place(&mut x, &f);
        Ok(x)
    }

    /// Runs every block over new inputs `x`; returns the tapped-layer and
    /// final-layer outputs.
    fn blocks(&self, mut x: Tensor, cache: &mut KvCache) -> Result<(Tensor, Tensor), Lsys2Error> {
        let tap = self.config().latent_block();
        let mut tapped = None;
        for l in 0..self.config().layers {
            x = self.block(l, &x, cache)?;
            if l + 1 == tap {
                tapped = Some(x.clone());
            }
        }
        cache.len += x.rows();
        Ok((tapped.expect("latent block validated"), x))
    }

    fn logits(&self, hidden: &Tensor) -> Result<Tensor, Lsys2Error> {
        let h = layernorm_forward(hidden, self.p("lnf.g")?, self.p("lnf.b")?, LN_EPS)?;
        Ok(linear_forward(&h, self.p("head.w")?, Some(self.p("head.b")?))?)
    }

    /// Input embeddings of the prefill sequence `[patches, BOS, words, EOS]`.
    fn prefill_inputs(&self, pixels: &[f64], ids: &[usize]) -> Result<Tensor, Lsys2Error> {
        let img = self.embed_image(pixels)?;
        let txt = self.embed_tokens(ids, NUM_PATCHES)?;
        let mut data = img.into_data();
        data.extend_from_slice(txt.data());
        Ok(Tensor::new(vec![NUM_PATCHES + ids.len(), self.config().d_model], data)?)
    }

    pub fn prefill(&self, view: &View, instruction: &str) -> Result<Prefill, Lsys2Error> {
        let ids = tokenizer::tokenize_instruction(instruction)?;
        let layout = SeqLayout::new(ids.len() - 2);
        let total = layout.prefill_len() + DECODE_STEPS;
        if total > self.config().max_seq {
            return Err(Lsys2Error::Length {
                len: total,
                max: self.config().max_seq,
            });
        }
        let x = self.prefill_inputs(&view.to_f64(), &ids)?;
        let layers = self.config().layers;
        let mut cache = KvCache {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        };
        let (hiddens, _) = self.blocks(x, &mut cache)?;
        Ok(Prefill {
            cache: Some(cache),
            hiddens,
            layout,
            instruction_hash: instruction_hash(instruction),
            image_hash: image_hash(view),
        })
    }

    /// Greedy decode of seven action tokens from a copy of the prefill cache.
    pub fn decode_actions(&self, prefill: &Prefill) -> Result<Decode, Lsys2Error> {
        let mut cache = prefill
            .cache
            .clone()
            .ok_or_else(|| Lsys2Error::State("prefill cache missing".into()))?;
        let first = tokenizer::first_action_id();
        let mut bins = [0usize; DECODE_STEPS];
        let mut hiddens = Vec::with_capacity(DECODE_STEPS);
        let mut next = ACT;
        for (i, bin) in bins.iter_mut().enumerate() {
            let x = self.embed_tokens(&[next], prefill.layout.decode_start + i)?;
            let (tapped, last) = self.blocks(x, &mut cache)?;
            let logits = self.logits(&last)?;
            let row = logits.row(0);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            *bin = best;
            hiddens.push(tapped.into_data());
            next = first + best;
        }
        Ok(Decode { bins, hiddens })
    }

    /// Full-sequence forward without a cache over `[patches, BOS, words,
    /// EOS, ACT, actions...]`; returns tapped-layer hiddens `[T, d]`.
    pub fn full_hiddens(&self, view: &View, instruction: &str, action_bins: &[usize]) -> Result<Tensor, Lsys2Error> {
        let mut ids = tokenizer::tokenize_instruction(instruction)?;
        ids.push(ACT);
        ids.extend(action_bins.iter().map(|b| tokenizer::first_action_id() + b));
        let patches = patchify(&view.to_f64())?.reshape(&[1, NUM_PATCHES, PATCH_DIM])?;
        let mut g = Graph::new();
        let bp = self.params.bind(&mut g);
        let (tapped, _) = self.graph_forward(&mut g, &bp, patches, &ids, 1)?;
        let t = g.value(tapped).clone();
        let (tt, d) = (t.shape()[1], t.shape()[2]);
        Ok(t.reshape(&[tt, d])?)
    }

    /// Taped forward over a batch of equally long sequences. `token_ids`
    /// holds `batch * L` ids that follow the patches. Returns tapped and
    /// final block outputs, both `[B, 16 + L, d]`.
    pub(crate) fn graph_forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        bp: &BoundParams,
        patches: Tensor,
        token_ids: &[usize],
        batch: usize,
    ) -> Result<(Var, Var), Lsys2Error> {
        let cfg = self.config();
        let d = cfg.d_model;
        let l = token_ids.len() / batch;
        let t = NUM_PATCHES + l;
        if t > cfg.max_seq {
            return Err(Lsys2Error::Length { len: t, max: cfg.max_seq });
        }
        let patches = g.input(patches);
        let img = g.linear(patches, bp.var("patch.w")?, Some(bp.var("patch.b")?))?;
        let tok = g.embedding(bp.var("tok")?, token_ids, &[batch, l, d])?;
        let x = g.concat(&[img, tok], 1)?;
        let pos = g.slice(bp.var("pos")?, 0, 0, t)?;
        let mut x = g.add_broadcast(x, pos)?;
        let mut tapped = x;
        for li in 0..cfg.layers {
            let w = |s: &str| bp.var(&format!("b{li}.{s}"));
            let h = g.layernorm(x, w("ln1.g")?, w("ln1.b")?, LN_EPS)?;
            let q = g.linear(h, w("attn.wq")?, Some(w("attn.bq")?))?;
            let k = g.linear(h, w("attn.wk")?, Some(w("attn.bk")?))?;
            let v = g.linear(h, w("attn.wv")?, Some(w("attn.bv")?))?;
            let a = g.attention(q, k, v, cfg.heads, true)?;
            let o = g.linear(a, w("attn.wo")?, Some(w("attn.bo")?))?;
            x = g.add(x, o)?;
            let h2 = g.layernorm(x, w("ln2.g")?, w("ln2.b")?, LN_EPS)?;
            let f = g.linear(h2, w("mlp.w1")?, Some(w("mlp.b1")?))?;
            let f = g.gelu(f)?;
            let f = g.linear(f, w("mlp.w2")?, Some(w("mlp.b2")?))?;
            x = g.add(x, f)?;
            if li + 1 == cfg.latent_block() {
                tapped = x;
            }
        }
        Ok((tapped, x))
    }

    /// Action-bin logits `[B * 7, 256]` from the last seven positions of
    /// the final block output.
    pub(crate) fn graph_action_logits<'p>(
        &'p self,
        g: &mut Graph<'p>,
        bp: &BoundParams,
        last: Var,
        batch: usize,
    ) -> Result<Var, Lsys2Error> {
        let t = g.shape(last)[1];
        let tail = g.slice(last, 1, t - DECODE_STEPS, DECODE_STEPS)?;
        let h = g.layernorm(tail, bp.var("lnf.g")?, bp.var("lnf.b")?, LN_EPS)?;
        let logits = g.linear(h, bp.var("head.w")?, Some(bp.var("head.b")?))?;
        Ok(g.reshape(logits, &[batch * DECODE_STEPS, BINS])?)
    }

    /// Closed-form multiply-add count (x2) of one prefill plus a full
    /// decode for an instruction of `words` words.
    pub fn flops(&self, words: usize) -> u64 {
        let c = self.config();
        let (d, f, layers) = (c.d_model as u64, (c.d_model * c.ffn_mult) as u64, c.layers as u64);
        let per_token = 2 * (4 * d * d + 2 * d * f);
        let t = (NUM_PATCHES + words + 2) as u64;
        let mut total = 2 * (NUM_PATCHES * PATCH_DIM) as u64 * d;
        total += layers * (t * per_token + 4 * t * t * d);
        for i in 0..DECODE_STEPS as u64 {
            let tk = t + i + 1;
            total += layers * (per_token + 4 * tk * d);
            total += 2 * d * BINS as u64;
        }
        total
    }

    /// Hash of parameters and metadata together.
    pub fn checkpoint_hash(&self) -> String {
        let mut bytes = write_checkpoint(&self.params);
        bytes.extend_from_slice(serde_json::to_string(&self.meta).expect("meta serializes").as_bytes());
        sha256_hex(&bytes)
    }

    /// Writes `path` (tensors) and `path` with a `.json` extension (metadata).
    pub fn save(&self, path: &Path) -> Result<String, Lsys2Error> {
        std::fs::write(path, write_checkpoint(&self.params))?;
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| Lsys2Error::Format(e.to_string()))?;
        std::fs::write(path.with_extension("json"), meta)?;
        Ok(self.checkpoint_hash())
    }

    pub fn load(path: &Path) -> Result<Self, Lsys2Error> {
        let params = read_checkpoint(&std::fs::read(path)?)?;
        let meta: Lsys2Meta = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)
            .map_err(|e| Lsys2Error::Format(e.to_string()))?;
        let reference = Self::init(meta.config.clone(), meta.action_tokenizer.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name).map_err(|_| Lsys2Error::Format(format!("missing tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(Lsys2Error::Format(format!("tensor {name} has shape {:?}", got.shape())));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Lsys2Error::Format("unexpected tensors in checkpoint".into()));
        }
        Ok(Self { params, meta })
    }
}
