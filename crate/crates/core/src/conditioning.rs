//! Frozen image encoder, token vocabulary and caption conditioning with the
//! `[C]` placeholder.

use std::collections::HashMap;
use std::ops::Range;

use candle_core::{DType, Device, Tensor};

use crate::codec::PixelImage;
use crate::digest;
use crate::error::{Error, Result};
use crate::rng;

/// Reserved placeholder word. Never produced by the caption grammar.
pub const PLACEHOLDER: &str = "[C]";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            hidden: 128,
            embed_dim: 64,
            seed: 17,
        }
    }
}

/// Token sequence `(N_img, d_e)` produced by the frozen image encoder.
#[derive(Debug, Clone)]
pub struct ImageEmbedding(Tensor);

impl ImageEmbedding {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::shape("(tokens, dim)", tokens.dims()));
        }
        Ok(Self(tokens.to_dtype(DType::F64)?))
    }

    pub fn tokens(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[1]
    }

    /// Mean over tokens, shaped `(1, d_e)`.
    pub fn pooled(&self) -> Result<Tensor> {
        Ok(self.0.mean_keepdim(0)?)
    }
}

/// Seeded random patch encoder. Weights never change after construction.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    config: ImageEncoderConfig,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl ImageEncoder {
    pub fn new(config: ImageEncoderConfig) -> Result<Self> {
        let p = config.patch_size;
        if p == 0 || config.image_size % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} is not divisible by encoder patch {}",
                config.image_size, p
            )));
        }
        let fan_in = 3 * p * p;
        let mut r = rng::stream(config.seed, 0xE1C0);
        let dev = Device::Cpu;
        let mut draw = |rows: usize, cols: usize, std: f64| -> Result<Tensor> {
            let v: Vec<f64> = rng::gaussian_vec(&mut r, rows * cols)
                .into_iter()
                .map(|x| x * std)
                .collect();
            Ok(Tensor::from_vec(v, (rows, cols), &dev)?)
        };
        let w1 = draw(config.hidden, fan_in, 2.0 / (fan_in as f64).sqrt())?;
        let b1 = draw(1, config.hidden, 0.5)?;
        let w2 = draw(config.embed_dim, config.hidden, 1.5 / (config.hidden as f64).sqrt())?;
        let b2 = draw(1, config.embed_dim, 0.1)?;
        Ok(Self { config, w1, b1, w2, b2 })
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.config
    }

    pub fn num_tokens(&self) -> usize {
        let side = self.config.image_size / self.config.patch_size;
        side * side
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn encode(&self, y: &PixelImage) -> Result<ImageEmbedding> {
        let size = self.config.image_size;
        if y.height() != size || y.width() != size {
            return Err(Error::shape((3, size, size), y.dims()));
        }
        let p = self.config.patch_size;
        let side = size / p;
        let patches = y
            .tensor()
            .affine(2.0, -1.0)?
            .reshape((3, side, p, side, p))?
            .permute((1, 3, 0, 2, 4))?
            .contiguous()?
            .reshape((side * side, 3 * p * p))?;
        let hidden = patches.matmul(&self.w1.t()?)?.broadcast_add(&self.b1)?.gelu_erf()?;
        let tokens = hidden.matmul(&self.w2.t()?)?.broadcast_add(&self.b2)?.tanh()?;
        ImageEmbedding::new(tokens)
    }

    /// Feature vector used for style distances: per-dimension mean and
    /// standard deviation of the tokens.
    pub fn style_features(&self, y: &PixelImage) -> Result<Vec<f64>> {
        let tokens = self.encode(y)?.0;
        let mean = tokens.mean(0)?;
        let std = tokens.broadcast_sub(&mean.unsqueeze(0)?)?.sqr()?.mean(0)?.sqrt()?;
        let mut out = mean.to_vec1::<f64>()?;
        out.extend(std.to_vec1::<f64>()?);
        Ok(out)
    }

    pub fn feature_distance(&self, a: &PixelImage, b: &PixelImage) -> Result<f64> {
        Ok(euclidean(&self.style_features(a)?, &self.style_features(b)?))
    }

    pub fn checksum(&self) -> String {
        digest::tensors_sha256([&self.w1, &self.b1, &self.w2, &self.b2])
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub type TokenId = u32;

/// Word list plus the `(V, d_e)` token embedding table. The placeholder id
/// is `V`, one past the last table row.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    table: Tensor,
}

const VOCAB_HEADER: &str = "textinv-vocab 1";

impl Vocabulary {
    pub fn new(words: Vec<String>, table: Tensor) -> Result<Self> {
        let (rows, _) = table.dims2().map_err(|_| Error::shape("(V, d_e)", table.dims()))?;
        if rows != words.len() {
            return Err(Error::shape(words.len(), rows));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w == PLACEHOLDER || w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index, table })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn placeholder_id(&self) -> TokenId {
        self.words.len() as TokenId
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn embed_dim(&self) -> usize {
        self.table.dims()[1]
    }

    /// Embedding row of a regular token, shaped `(1, d_e)`.
    pub fn row(&self, id: TokenId) -> Result<Tensor> {
        if id as usize >= self.words.len() {
            return Err(Error::InvalidArgument(format!("token id {id} has no embedding row")));
        }
        Ok(self.table.narrow(0, id as usize, 1)?)
    }

    /// Versioned text form: a header line, then `word<TAB>id` per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{VOCAB_HEADER}\n{PLACEHOLDER}\t{}\n", self.placeholder_id());
        for (i, w) in self.words.iter().enumerate() {
            s.push_str(&format!("{w}\t{i}\n"));
        }
        s
    }

    /// Parses the text form back into the ordered word list.
    pub fn parse_words(text: &str) -> Result<Vec<String>> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(Error::Parse("missing vocabulary header".into()));
        }
        let mut words = Vec::new();
        let mut placeholder = None;
        for line in lines.filter(|l| !l.is_empty()) {
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("bad vocabulary line {line:?}")))?;
            let id: usize = id.parse().map_err(|_| Error::Parse(format!("bad id in {line:?}")))?;
            if w == PLACEHOLDER {
                placeholder = Some(id);
                continue;
            }
            if id != words.len() {
                return Err(Error::Parse(format!("ids must be dense and ordered, got {id}")));
            }
            words.push(w.to_string());
        }
        if placeholder != Some(words.len()) {
            return Err(Error::Parse("placeholder id must follow the last word".into()));
        }
        Ok(words)
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|w| {
            if w == PLACEHOLDER {
                Ok(vocab.placeholder_id())
            } else {
                vocab.id(w).ok_or_else(|| Error::UnknownToken(w.to_string()))
            }
        })
        .collect()
}

/// Learnable vectors standing in for the placeholder, `(L_v, d_e)`.
#[derive(Debug, Clone)]
pub struct PseudoWordEmbedding(Tensor);

impl PseudoWordEmbedding {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 || vectors.dims()[0] == 0 {
            return Err(Error::shape("(L_v >= 1, d_e)", vectors.dims()));
        }
        Ok(Self(vectors))
    }

    pub fn vectors(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Detached copy, cut from any autograd graph.
    pub fn detached(&self) -> Self {
        Self(self.0.detach())
    }
}

/// Token embedding sequence fed to the denoiser's cross-attention.
#[derive(Debug, Clone)]
pub struct ConditioningSequence {
    vectors: Tensor,
    template: String,
    span: Option<Range<usize>>,
}

impl ConditioningSequence {
    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// Positions holding the pseudo-word vectors, if any.
    pub fn span(&self) -> Option<Range<usize>> {
        self.span.clone()
    }

    pub fn len(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Conditioning from a caption without placeholder.
    pub fn from_caption(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let ids = tokenize(text, vocab)?;
        if ids.contains(&vocab.placeholder_id()) {
            return Err(Error::InvalidArgument(
                "caption contains a placeholder; use a pseudo-word".into(),
            ));
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty caption".into()));
        }
        Ok(Self {
            vectors: lookup(&ids, vocab)?,
            template: text.to_string(),
            span: None,
        })
    }

    #[cfg(test)]
    pub(crate) fn dummy() -> Self {
        Self {
            vectors: Tensor::zeros((1, 1), DType::F64, &Device::Cpu).unwrap(),
            template: String::new(),
            span: None,
        }
    }
}

fn lookup(ids: &[TokenId], vocab: &Vocabulary) -> Result<Tensor> {
    let idx = Tensor::new(ids, &Device::Cpu)?;
    Ok(vocab.table().index_select(&idx, 0)?)
}

/// Splices the pseudo-word vectors into the template's token embeddings at
/// the single placeholder position.
pub fn assemble_conditioning(
    token_ids: &[TokenId],
    v: &PseudoWordEmbedding,
    vocab: &Vocabulary,
) -> Result<ConditioningSequence> {
    let ph = vocab.placeholder_id();
    let count = token_ids.iter().filter(|id| **id == ph).count();
    if count != 1 {
        return Err(Error::Placeholder(count));
    }
    if v.dim() != vocab.embed_dim() {
        return Err(Error::shape(vocab.embed_dim(), v.dim()));
    }
    let at = token_ids.iter().position(|id| *id == ph).expect("counted above");
    let dtype = vocab.table().dtype();
    let mut parts = Vec::with_capacity(3);
    if at > 0 {
        parts.push(lookup(&token_ids[..at], vocab)?);
    }
    parts.push(v.vectors().to_dtype(dtype)?);
    if at + 1 < token_ids.len() {
        parts.push(lookup(&token_ids[at + 1..], vocab)?);
    }
    let vectors = Tensor::cat(&parts, 0)?;
    let template = token_ids
        .iter()
        .map(|id| {
            if *id == ph {
                PLACEHOLDER.to_string()
            } else {
                vocab.words()[*id as usize].clone()
            }
        })
        .collect::<Vec<_>>()
        .join(" ");
    Ok(ConditioningSequence {
        vectors,
        template,
        span: Some(at..at + v.len()),
    })
}

/// Tokenizes `template` and splices in `v`.
pub fn condition_on(template: &str, v: &PseudoWordEmbedding, vocab: &Vocabulary) -> Result<ConditioningSequence> {
    assemble_conditioning(&tokenize(template, vocab)?, v, vocab)
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a = a.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let b = b.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb).max(1e-300))
}
