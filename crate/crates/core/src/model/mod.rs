//! Small pre-norm transformer encoder with three heads: a masked-LM head tied
//! to the input embeddings, a per-token replaced/original discriminator head,
//! and a 3-class `[CLS]` sentiment head. Forward and backward passes are
//! written out by hand and generic over [`Scalar`].

mod checkpoint;
mod network;
pub mod ops;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use checkpoint::{extend_embeddings, init_model, load_checkpoint, save_checkpoint, Checkpoint};
pub use network::{ClsTrace, DiscTrace, EncoderTrace, MlmTrace};
pub use ops::Scalar;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub hidden_size: usize,
    /// Equal to `hidden_size` unless embeddings are factorized.
    pub embedding_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    /// Dropout on the `[CLS]` vector during fine-tuning.
    pub dropout: f64,
    /// One set of block parameters reused by every layer.
    pub share_layers: bool,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, hidden 64, 2 heads, 32 positions.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_seq_len: 32,
            hidden_size: 64,
            embedding_size: 64,
            num_layers: 2,
            num_heads: 2,
            ff_size: 256,
            dropout: 0.2,
            share_layers: false,
            num_classes: NUM_CLASSES,
        }
    }

    /// Sets hidden and embedding size together and the feed-forward width
    /// to four times hidden.
    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden_size = hidden;
        self.embedding_size = hidden;
        self.ff_size = 4 * hidden;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn is_factorized(&self) -> bool {
        self.embedding_size != self.hidden_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (key, v) in [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden_size),
            ("embedding", self.embedding_size),
            ("layers", self.num_layers),
            ("heads", self.num_heads),
            ("ff", self.ff_size),
        ] {
            if v == 0 {
                return fail(format!("{key} must be positive"));
            }
        }
        if self.vocab_size < crate::tokenizer::NUM_SPECIAL {
            return fail(format!(
                "vocab_size ({}) must cover the {} special tokens",
                self.vocab_size,
                crate::tokenizer::NUM_SPECIAL
            ));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden_size, self.num_heads
            ));
        }
        if self.max_seq_len < 2 {
            return fail(format!("max_len ({}) must be at least 2", self.max_seq_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout ({}) must lie in [0, 1)", self.dropout));
        }
        if self.is_factorized() && !self.share_layers {
            return fail(format!(
                "embedding ({}) may differ from hidden ({}) only with share_layers",
                self.embedding_size, self.hidden_size
            ));
        }
        if self.num_classes != NUM_CLASSES {
            return fail(format!("classes must be {NUM_CLASSES}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect(),
        }
    }
}

/// Parameter indices of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub attn_norm_gain: usize,
    pub attn_norm_bias: usize,
    pub query_weight: usize,
    pub query_bias: usize,
    pub key_weight: usize,
    pub key_bias: usize,
    pub value_weight: usize,
    pub value_bias: usize,
    pub attn_out_weight: usize,
    pub attn_out_bias: usize,
    pub ffn_norm_gain: usize,
    pub ffn_norm_bias: usize,
    pub ffn_in_weight: usize,
    pub ffn_in_bias: usize,
    pub ffn_out_weight: usize,
    pub ffn_out_bias: usize,
}

/// The tensor manifest for a configuration: names and shapes in storage
/// order, plus the index of each parameter. With shared layers every entry
/// of `blocks` points at the same tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub entries: Vec<(String, Vec<usize>)>,
    pub word_embeddings: usize,
    pub position_embeddings: usize,
    pub projection: Option<(usize, usize)>,
    pub blocks: Vec<BlockParams>,
    pub final_norm: (usize, usize),
    pub mlm_transform: (usize, usize),
    pub mlm_norm: (usize, usize),
    pub mlm_output_bias: usize,
    pub disc_dense: (usize, usize),
    pub disc_output: (usize, usize),
    pub classifier: (usize, usize),
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let (v, p, e, h, f, c) = (
            config.vocab_size,
            config.max_seq_len,
            config.embedding_size,
            config.hidden_size,
            config.ff_size,
            config.num_classes,
        );
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            entries.push((name, shape));
            entries.len() - 1
        };
        let word_embeddings = add("embeddings.word".into(), vec![v, e]);
        let position_embeddings = add("embeddings.position".into(), vec![p, e]);
        let projection = config.is_factorized().then(|| {
            (
                add("embeddings.projection.weight".into(), vec![e, h]),
                add("embeddings.projection.bias".into(), vec![h]),
            )
        });
        let mut block = |prefix: &str| BlockParams {
            attn_norm_gain: add(format!("{prefix}.attention_norm.gain"), vec![h]),
            attn_norm_bias: add(format!("{prefix}.attention_norm.bias"), vec![h]),
            query_weight: add(format!("{prefix}.attention.query.weight"), vec![h, h]),
            query_bias: add(format!("{prefix}.attention.query.bias"), vec![h]),
            key_weight: add(format!("{prefix}.attention.key.weight"), vec![h, h]),
            key_bias: add(format!("{prefix}.attention.key.bias"), vec![h]),
            value_weight: add(format!("{prefix}.attention.value.weight"), vec![h, h]),
            value_bias: add(format!("{prefix}.attention.value.bias"), vec![h]),
            attn_out_weight: add(format!("{prefix}.attention.output.weight"), vec![h, h]),
            attn_out_bias: add(format!("{prefix}.attention.output.bias"), vec![h]),
            ffn_norm_gain: add(format!("{prefix}.ffn_norm.gain"), vec![h]),
            ffn_norm_bias: add(format!("{prefix}.ffn_norm.bias"), vec![h]),
            ffn_in_weight: add(format!("{prefix}.ffn.in.weight"), vec![h, f]),
            ffn_in_bias: add(format!("{prefix}.ffn.in.bias"), vec![f]),
            ffn_out_weight: add(format!("{prefix}.ffn.out.weight"), vec![f, h]),
            ffn_out_bias: add(format!("{prefix}.ffn.out.bias"), vec![h]),
        };
        let blocks = if config.share_layers {
            let shared = block("encoder.shared");
            vec![shared; config.num_layers]
        } else {
            (0..config.num_layers)
                .map(|l| block(&format!("encoder.layer{l}")))
                .collect()
        };
        let final_norm = (
            add("encoder.final_norm.gain".into(), vec![h]),
            add("encoder.final_norm.bias".into(), vec![h]),
        );
        let mlm_transform = (
            add("mlm.transform.weight".into(), vec![h, e]),
            add("mlm.transform.bias".into(), vec![e]),
        );
        let mlm_norm = (
            add("mlm.norm.gain".into(), vec![e]),
            add("mlm.norm.bias".into(), vec![e]),
        );
        let mlm_output_bias = add("mlm.output_bias".into(), vec![v]);
        let disc_dense = (
            add("discriminator.dense.weight".into(), vec![h, h]),
            add("discriminator.dense.bias".into(), vec![h]),
        );
        let disc_output = (
            add("discriminator.output.weight".into(), vec![h]),
            add("discriminator.output.bias".into(), vec![1]),
        );
        let classifier = (
            add("classifier.weight".into(), vec![h, c]),
            add("classifier.bias".into(), vec![c]),
        );
        Layout {
            entries,
            word_embeddings,
            position_embeddings,
            projection,
            blocks,
            final_norm,
            mlm_transform,
            mlm_norm,
            mlm_output_bias,
            disc_dense,
            disc_output,
            classifier,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Indices of tensors that belong to the transformer block stack.
    pub fn block_tensors(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.name(i).starts_with("encoder.") && !self.name(i).starts_with("encoder.final_norm"))
            .collect();
        idx.sort_unstable();
        idx
    }
}

/// Parameters of one network instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    pub(crate) params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Wraps tensors that must match the configuration's manifest.
    pub fn from_tensors(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.entries.iter().zip(&params) {
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {shape:?}, found {:?}",
                    t.shape
                )));
            }
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.index_of(name).map(|i| &self.params[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layout.index_of(name).map(|i| &mut self.params[i])
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub(crate) fn p(&self, index: usize) -> &[T] {
        &self.params[index].data
    }
}

/// Gradients with the same manifest as the model they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Gradients {
            tensors: model.params.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= factor;
            }
        }
    }

    pub(crate) fn g(&mut self, index: usize) -> &mut [T] {
        &mut self.tensors[index].data
    }

    /// Two distinct gradient tensors borrowed mutably at once.
    pub(crate) fn pair(&mut self, a: usize, b: usize) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.tensors.split_at_mut(b);
            (&mut lo[a].data, &mut hi[0].data)
        } else {
            let (lo, hi) = self.tensors.split_at_mut(a);
            (&mut hi[0].data, &mut lo[b].data)
        }
    }
}
