//! The assembled network: input encoder, refined stacked encoder, co-stack
//! matching, prediction head, loss and checkpoints.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{peek_precision, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, group_tolerance, GroupCheck, GRADIENT_GROUPS, GRADIENT_STEPS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cafe::MarEncoder;
use crate::csra::{AffinityMatrix, CoStackMatcher};
use crate::data::{Batch, EmbeddingTable, Vocab};
use crate::error::{Error, Result};
use crate::layers::{dropout, Activation, CharEncoder, Dense, Highway, WordEmbedding};
use crate::scalar::{Precision, Scalar};
use crate::tensor::{Gradients, Graph, ParamStore, Tensor, Var};

/// Architecture and ablation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub use_chars: bool,
    pub char_dim: usize,
    pub char_hidden: usize,
    /// Width of the character word vector; defaults to `word_dim`.
    pub char_out: Option<usize>,
    pub use_highway: bool,
    pub highway_depth: usize,
    /// `h`; every encoder BiLSTM outputs `2h` per position.
    pub encoder_hidden: usize,
    /// `k`, the number of stacked encoder layers.
    pub stack_depth: usize,
    /// Aggregation BiLSTM width; defaults to `encoder_hidden`.
    pub agg_hidden: Option<usize>,
    pub agg_depth: usize,
    /// Hidden relu layers before the output layer.
    pub prediction_layers: usize,
    pub prediction_hidden: usize,
    pub num_classes: usize,
    pub use_mar: bool,
    pub use_csra: bool,
    pub fm_factors: usize,
    pub dropout: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 50,
            use_chars: true,
            char_dim: 16,
            char_hidden: 16,
            char_out: None,
            use_highway: true,
            highway_depth: 2,
            encoder_hidden: 64,
            stack_depth: 3,
            agg_hidden: None,
            agg_depth: 1,
            prediction_layers: 2,
            prediction_hidden: 100,
            num_classes: 2,
            use_mar: true,
            use_csra: true,
            fm_factors: 4,
            dropout: 0.1,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn char_out(&self) -> usize {
        self.char_out.unwrap_or(self.word_dim)
    }

    pub fn agg_hidden(&self) -> usize {
        self.agg_hidden.unwrap_or(self.encoder_hidden)
    }

    /// Width of the word representation fed to the encoder.
    pub fn input_width(&self) -> usize {
        self.word_dim + if self.use_chars { self.char_out() } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("agg_hidden", self.agg_hidden()),
            ("prediction_hidden", self.prediction_hidden),
            ("fm_factors", self.fm_factors),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.use_chars {
            for (field, v) in [("char_dim", self.char_dim), ("char_hidden", self.char_hidden), ("char_out", self.char_out())] {
                if v == 0 {
                    return Err(Error::config(field, "must be at least 1"));
                }
            }
        }
        if !(1..=5).contains(&self.stack_depth) {
            return Err(Error::config("stack_depth", format!("{} is outside [1, 5]", self.stack_depth)));
        }
        if !(1..=2).contains(&self.agg_depth) {
            return Err(Error::config("agg_depth", format!("{} is not 1 or 2", self.agg_depth)));
        }
        if !(1..=3).contains(&self.prediction_layers) {
            return Err(Error::config(
                "prediction_layers",
                format!("{} is outside [1, 3]", self.prediction_layers),
            ));
        }
        if self.use_highway && self.highway_depth == 0 {
            return Err(Error::config("highway_depth", "must be at least 1 when the highway is on"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} is outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Parameter-free description of the network; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub word: WordEmbedding,
    pub chars: Option<CharEncoder>,
    pub highway: Option<Highway>,
    pub encoder: MarEncoder,
    pub matcher: CoStackMatcher,
    pub hidden: Vec<Dense>,
    pub output: Dense,
    pub dropout: f64,
}

/// Graph nodes produced by one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, num_classes]`, before softmax.
    pub logits: Var,
    /// `[batch, features]` pooled matching vectors.
    pub features: Var,
    pub affinities: Vec<AffinityMatrix>,
}

impl Network {
    pub fn new<T: Scalar>(
        config: &ModelConfig,
        vocab_size: usize,
        char_vocab_size: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 || (config.use_chars && char_vocab_size < 2) {
            return Err(Error::config("vocab", "vocabularies must hold the reserved entries"));
        }
        let word = WordEmbedding::new(store, "word.table", vocab_size, config.word_dim, rng);
        let chars = config.use_chars.then(|| {
            CharEncoder::new(
                store,
                "char",
                char_vocab_size,
                config.char_dim,
                config.char_hidden,
                config.char_out(),
                rng,
            )
        });
        let width = config.input_width();
        let highway = config
            .use_highway
            .then(|| Highway::new(store, "highway", width, config.highway_depth, rng));
        let encoder = MarEncoder::new(
            store,
            "enc",
            width,
            config.encoder_hidden,
            config.stack_depth,
            config.use_mar,
            config.fm_factors,
            rng,
        )?;
        let matcher = CoStackMatcher::new(
            store,
            config.stack_depth * 2 * config.encoder_hidden,
            config.agg_hidden(),
            config.agg_depth,
            config.use_csra,
            rng,
        );
        let mut hidden = Vec::new();
        let mut d = matcher.feature_width();
        for i in 0..config.prediction_layers {
            hidden.push(Dense::new(
                store,
                &format!("head.{i}"),
                d,
                config.prediction_hidden,
                Activation::Relu,
                rng,
            ));
            d = config.prediction_hidden;
        }
        let output = Dense::new(store, "head.out", d, config.num_classes, Activation::Identity, rng);
        Ok(Network {
            word,
            chars,
            highway,
            encoder,
            matcher,
            hidden,
            output,
            dropout: config.dropout,
        })
    }

    fn embed<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        words: &[usize],
        chars: &[Vec<usize>],
        mask: &[bool],
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let mut x = self.word.forward(g, words)?;
        if let Some(enc) = &self.chars {
            let c = enc.forward(g, chars, mask)?;
            x = g.concat(&[x, c], 1)?;
        }
        if let Some(hw) = &self.highway {
            x = hw.forward(g, x)?;
        }
        dropout(g, x, self.dropout, rng)
    }

    /// Runs every pair of `batch`. `rng` of `None` is evaluation mode.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        mut rng: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(batch.len());
        let mut affinities = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let (ma, mb) = (&batch.a.mask[i], &batch.b.mask[i]);
            let xa = self.embed(g, &batch.a.words[i], &batch.a.chars[i], ma, rng.as_deref_mut())?;
            let xb = self.embed(g, &batch.b.words[i], &batch.b.chars[i], mb, rng.as_deref_mut())?;
            let (sa, sb) = self.encoder.encode(g, xa, xb, ma, mb, self.dropout, rng.as_deref_mut())?;
            let out = self.matcher.forward(g, &sa, &sb)?;
            rows.push(out.z);
            affinities.push(out.affinity);
        }
        let features = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        let mut h = features;
        for layer in &self.hidden {
            h = layer.forward(g, h)?;
        }
        let logits = self.output.forward(g, h)?;
        Ok(ForwardOutput {
            logits,
            features,
            affinities,
        })
    }
}

/// Coarse parameter group of a parameter name, used in gradient reports.
pub fn param_group(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "word" | "char" => "embedding",
        "highway" => "highway",
        "enc" => "encoder",
        "cafe" => "cafe",
        "agg" => "aggregation",
        "head" => "prediction",
        _ => "other",
    }
}

/// Mean softmax cross-entropy.
pub fn loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

/// Highest-scoring class of every row (lowest index on ties).
pub fn predict_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect()
}

/// Softmax probability of class 1 for every row: the ranking score.
pub fn ranking_scores<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            (row[1] - m).exp() / z
        })
        .collect()
}

/// A network together with its parameter values and vocabularies.
#[derive(Debug, Clone)]
pub struct CsranModel<T> {
    pub config: ModelConfig,
    pub net: Network,
    pub params: ParamStore<T>,
    pub words: Vocab,
    pub chars: Vocab,
}

impl<T: Scalar> CsranModel<T> {
    /// Glorot-initialised model; all randomness comes from `seed`.
    /// `config.precision` is set to match `T`.
    pub fn new(mut config: ModelConfig, words: Vocab, chars: Vocab, seed: u64) -> Result<Self> {
        config.precision = Precision::of::<T>();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&config, words.len(), chars.len(), &mut params, &mut rng)?;
        Ok(CsranModel {
            config,
            net,
            params,
            words,
            chars,
        })
    }

    /// Installs pretrained word vectors; rows loaded from the file stay fixed.
    pub fn set_embeddings(&mut self, table: EmbeddingTable<T>) -> Result<()> {
        self.net.word.load(&mut self.params, table.table, table.frozen)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// Evaluation-mode logits `[batch, num_classes]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(&self.params);
        let out = self.net.forward::<T, ChaCha8Rng>(&mut g, batch, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Mean loss and parameter gradients for one batch. Dropout is active
    /// when `rng` is given.
    pub fn loss_and_grads<R: Rng>(&self, batch: &Batch, rng: Option<&mut R>) -> Result<(T, Gradients<T>)> {
        let mut g = Graph::with_params(&self.params);
        let out = self.net.forward(&mut g, batch, rng)?;
        let l = loss(&mut g, out.logits, &batch.labels)?;
        let value = g.value(l).item()?;
        g.backward(l)?;
        Ok((value, g.param_grads()))
    }
}

#[cfg(test)]
mod tests;
