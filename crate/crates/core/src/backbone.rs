//! The shared multimodal encoder: a small causal transformer over image
//! patches followed by text tokens, plus the language-modeling head.

use std::collections::HashMap;

use latent_autograd::tensor::{matmul, Tensor};
use latent_autograd::{Graph, ParamId, ParamStore, Real, Var};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::seed;
use crate::transformer::{linear_init, register, uniform, Scope, Stack, StackCache};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Dense token table. Ids `0..4` are reserved for pad/bos/eos/unk.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds `specials ++ words`, padded with unused `<extraN>` entries up to `size`.
    pub fn new<S: AsRef<str>>(words: &[S], size: usize) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        for w in words {
            let w = w.as_ref();
            if index.contains_key(w) {
                continue;
            }
            index.insert(w.to_string(), tokens.len() as TokenId);
            tokens.push(w.to_string());
        }
        ensure(tokens.len() <= size, || {
            format!("grammar needs {} tokens but vocab_size is {size}", tokens.len())
        })?;
        let mut extra = 0;
        while tokens.len() < size {
            let t = format!("<extra{extra}>");
            extra += 1;
            index.insert(t.clone(), tokens.len() as TokenId);
            tokens.push(t);
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn expect_id(&self, token: &str) -> Result<TokenId> {
        self.id(token).ok_or_else(|| Error::validation(format!("token `{token}` not in vocabulary")))
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", |s| s.as_str())
    }

    /// Whitespace tokenization; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

/// A discrete `height x width` picture whose cells are color-class ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        ensure(height >= 1 && width >= 1, || "grid dimensions must be positive".into())?;
        ensure(cells.len() == height * width, || {
            format!("grid {height}x{width} needs {} cells, got {}", height * width, cells.len())
        })?;
        Ok(Self { height, width, cells })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        ensure(rows.iter().all(|r| r.len() == w), || "ragged grid rows".into())?;
        Self::new(h, w, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.width + c]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.cells.chunks(self.width).map(|c| c.to_vec()).collect()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        ensure(self.height == cfg.grid_height && self.width == cfg.grid_width, || {
            format!(
                "grid is {}x{}, model expects {}x{}",
                self.height, self.width, cfg.grid_height, cfg.grid_width
            )
        })?;
        ensure(self.cells.iter().all(|&c| (c as usize) < cfg.num_colors), || {
            format!("grid cell outside 0..{}", cfg.num_colors)
        })
    }
}

impl Serialize for ImageGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ImageGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<u8>>::deserialize(d)?;
        ImageGrid::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// An optional image plus a token sequence starting with `<bos>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Option<ImageGrid>,
    pub tokens: Vec<TokenId>,
}

impl Sample {
    pub fn paired(image: ImageGrid, tokens: Vec<TokenId>) -> Self {
        Self { image: Some(image), tokens }
    }

    pub fn text(tokens: Vec<TokenId>) -> Self {
        Self { image: None, tokens }
    }

    pub fn is_paired(&self) -> bool {
        self.image.is_some()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The same tokens with the image dropped (text-only view).
    pub fn without_image(&self) -> Sample {
        Sample { image: None, tokens: self.tokens.clone() }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        ensure(!self.tokens.is_empty(), || "sample has no tokens".into())?;
        ensure(self.tokens.len() <= cfg.max_len, || {
            format!("sample has {} tokens, max_len is {}", self.tokens.len(), cfg.max_len)
        })?;
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::validation(format!("token id {bad} outside vocabulary")));
        }
        if let Some(img) = &self.image {
            img.validate(cfg)?;
        }
        Ok(())
    }
}

/// Hidden state at text step `step` (1-based), after the final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEmbedding<T> {
    pub vector: Vec<T>,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ModelConfig,
    tok_emb: ParamId,
    color_emb: ParamId,
    pos_text: ParamId,
    pos_row: ParamId,
    pos_col: ParamId,
    stack: Stack,
    lm_head: ParamId,
}

pub const COMPONENT: &str = "backbone";

impl Backbone {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        mut rng: Option<&mut seed::Rng>,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let emb = |rows: usize| move |r: &mut seed::Rng| uniform::<T>(r, rows, d, 0.1);
        let tok_emb = register(store, &mut rng, "backbone.tok_emb".into(), emb(cfg.vocab_size))?;
        let color_emb = register(store, &mut rng, "backbone.color_emb".into(), emb(cfg.num_colors))?;
        let pos_text = register(store, &mut rng, "backbone.pos_text".into(), emb(cfg.max_len))?;
        let pos_row = register(store, &mut rng, "backbone.pos_row".into(), emb(cfg.grid_height))?;
        let pos_col = register(store, &mut rng, "backbone.pos_col".into(), emb(cfg.grid_width))?;
        let stack = Stack::build(
            store,
            rng.as_deref_mut(),
            "backbone.blocks",
            Scope::Causal,
            cfg.layers,
            d,
            cfg.heads,
            cfg.ffn_mult,
        )?;
        let lm_head =
            register(store, &mut rng, "backbone.lm_head".into(), |r| linear_init(r, d, cfg.vocab_size))?;
        Ok(Self { cfg: cfg.clone(), tok_emb, color_emb, pos_text, pos_row, pos_col, stack, lm_head })
    }

    pub fn lm_head_id(&self) -> ParamId {
        self.lm_head
    }

    fn image_rows<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, img: &ImageGrid) -> Var {
        let colors: Vec<usize> = img.cells().iter().map(|&c| c as usize).collect();
        let rows: Vec<usize> = (0..img.height()).flat_map(|r| std::iter::repeat(r).take(img.width())).collect();
        let cols: Vec<usize> = (0..img.height()).flat_map(|_| 0..img.width()).collect();
        let ce = g.param(store, self.color_emb);
        let re = g.param(store, self.pos_row);
        let cc = g.param(store, self.pos_col);
        let a = g.gather(ce, colors);
        let b = g.gather(re, rows);
        let c = g.gather(cc, cols);
        let ab = g.add(a, b);
        g.add(ab, c)
    }

    fn text_rows<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: &[TokenId], offset: usize) -> Var {
        let te = g.param(store, self.tok_emb);
        let pe = g.param(store, self.pos_text);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let a = g.gather(te, ids);
        let b = g.gather(pe, (offset..offset + tokens.len()).collect());
        g.add(a, b)
    }

    /// Hidden states at every text position (`m x d`). With `use_image =
    /// false` the image is ignored, giving the text-only embedding.
    pub fn encode_rows<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        sample: &Sample,
        use_image: bool,
    ) -> Var {
        let text = self.text_rows(g, store, &sample.tokens, 0);
        let (x, n_img) = match (&sample.image, use_image) {
            (Some(img), true) => {
                let im = self.image_rows(g, store, img);
                (g.concat_rows(&[im, text]), img.cells().len())
            }
            _ => (text, 0),
        };
        let h = self.stack.forward(g, store, x);
        if n_img == 0 {
            h
        } else {
            g.slice_rows(h, n_img, sample.tokens.len())
        }
    }

    /// Graph-free counterpart of [`Backbone::encode_rows`].
    pub fn encode_rows_eval<T: Real>(&self, store: &ParamStore<T>, sample: &Sample, use_image: bool) -> Tensor<T> {
        let img = if use_image { sample.image.as_ref() } else { None };
        let mut state = BackboneState::start(self, store, img);
        state.push_tokens(self, store, &sample.tokens)
    }

    pub fn encode_context<T: Real>(
        &self,
        store: &ParamStore<T>,
        sample: &Sample,
        t: usize,
    ) -> Result<ContextEmbedding<T>> {
        sample.validate(&self.cfg)?;
        if t == 0 || t > sample.len() {
            return Err(Error::Index { what: "text step", index: t, len: sample.len() });
        }
        let mut g = Graph::inference();
        let h = self.encode_rows(&mut g, store, sample, true);
        Ok(ContextEmbedding { vector: g.value(h).row(t - 1).to_vec(), step: t })
    }

    pub fn encode_context_all<T: Real>(
        &self,
        store: &ParamStore<T>,
        sample: &Sample,
    ) -> Result<Vec<ContextEmbedding<T>>> {
        sample.validate(&self.cfg)?;
        let mut g = Graph::inference();
        let h = self.encode_rows(&mut g, store, sample, true);
        let hv = g.value(h);
        Ok((0..sample.len()).map(|t| ContextEmbedding { vector: hv.row(t).to_vec(), step: t + 1 }).collect())
    }

    /// Vocabulary logits for a merged `d`-vector.
    pub fn lm_head<T: Real>(&self, store: &ParamStore<T>, merged: &[T]) -> Result<Vec<T>> {
        ensure(merged.len() == self.cfg.d_model, || {
            format!("lm_head expects {} inputs, got {}", self.cfg.d_model, merged.len())
        })?;
        Ok(matmul(&Tensor::row_vector(merged.to_vec()), store.get(self.lm_head)).into_data())
    }

    pub fn lm_head_graph<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.lm_head);
        g.matmul(x, w)
    }
}

/// Incremental (cached) encoder used for autoregressive decoding.
#[derive(Clone, Debug)]
pub struct BackboneState<T> {
    cache: StackCache<T>,
    text_len: usize,
}

impl<T: Real> BackboneState<T> {
    pub fn start(bb: &Backbone, store: &ParamStore<T>, image: Option<&ImageGrid>) -> Self {
        let mut cache = StackCache::new(bb.stack.num_layers());
        if let Some(img) = image {
            let mut g = Graph::inference();
            let rows = bb.image_rows(&mut g, store, img);
            let x = g.value(rows).clone();
            bb.stack.extend(store, &mut cache, &x);
        }
        Self { cache, text_len: 0 }
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    /// Feeds tokens and returns their hidden states (`n x d`).
    pub fn push_tokens(&mut self, bb: &Backbone, store: &ParamStore<T>, tokens: &[TokenId]) -> Tensor<T> {
        let mut g = Graph::inference();
        let rows = bb.text_rows(&mut g, store, tokens, self.text_len);
        let x = g.value(rows).clone();
        self.text_len += tokens.len();
        bb.stack.extend(store, &mut self.cache, &x)
    }
}
