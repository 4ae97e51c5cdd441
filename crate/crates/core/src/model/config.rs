use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::compress::CompressionPolicy;
use crate::ctc::Vocabulary;
use crate::error::{Error, Result};

/// End-of-sentence token; also fed as the first decoder input.
pub const EOS: &str = "</s>";

/// Decoder output vocabulary. Index 0 is always [`EOS`]; there is no blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TargetVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for TargetVocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(EOS) {
            return Err(Error::invalid(format!("target vocabulary must start with {EOS}")));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate target token {t:?}")));
            }
        }
        Ok(TargetVocabulary { tokens, index })
    }
}

impl From<TargetVocabulary> for Vec<String> {
    fn from(v: TargetVocabulary) -> Self {
        v.tokens
    }
}

impl TargetVocabulary {
    pub fn new<I, T>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut all = vec![EOS.to_string()];
        all.extend(tokens.into_iter().map(Into::into));
        Self::try_from(all)
    }

    pub const fn eos(&self) -> usize {
        0
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<T: AsRef<str>>(&self, tokens: &[T]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .filter(|&i| i != 0)
                    .ok_or_else(|| Error::invalid(format!("unknown target token {:?}", t.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

/// Architecture and placement of the CTC tap and compression block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "defaults::conv_channels")]
    pub conv_channels: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    /// 1-based encoder layer whose output feeds the CTC projection.
    pub ctc_layer: usize,
    #[serde(default)]
    pub compression: Option<CompressionPolicy>,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::ffn_dim")]
    pub ffn_dim: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default = "defaults::label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "defaults::loss_weight_ctc")]
    pub loss_weight_ctc: f64,
    /// Add `-ln(1 + |i - j|)` to encoder self-attention logits.
    #[serde(default = "defaults::yes")]
    pub distance_penalty: bool,
    /// Add sinusoidal positions to the encoder input.
    #[serde(default)]
    pub encoder_positions: bool,
    pub ctc_vocab: Vocabulary,
    pub target_vocab: TargetVocabulary,
}

mod defaults {
    pub fn feature_dim() -> usize {
        40
    }
    pub fn conv_channels() -> usize {
        64
    }
    pub fn d_model() -> usize {
        512
    }
    pub fn n_heads() -> usize {
        8
    }
    pub fn ffn_dim() -> usize {
        2048
    }
    pub fn dropout() -> f64 {
        0.2
    }
    pub fn label_smoothing() -> f64 {
        0.1
    }
    pub fn loss_weight_ctc() -> f64 {
        1.0
    }
    pub fn yes() -> bool {
        true
    }
}

impl ModelConfig {
    /// Full-size speech translation layout: 11 encoder and 4 decoder layers,
    /// CTC on layer 8.
    pub fn full_st(ctc_vocab: Vocabulary, target_vocab: TargetVocabulary) -> Self {
        ModelConfig {
            feature_dim: defaults::feature_dim(),
            conv_channels: defaults::conv_channels(),
            n_encoder_layers: 11,
            n_decoder_layers: 4,
            ctc_layer: 8,
            compression: None,
            d_model: defaults::d_model(),
            n_heads: defaults::n_heads(),
            ffn_dim: defaults::ffn_dim(),
            dropout: defaults::dropout(),
            label_smoothing: defaults::label_smoothing(),
            loss_weight_ctc: defaults::loss_weight_ctc(),
            distance_penalty: true,
            encoder_positions: false,
            ctc_vocab,
            target_vocab,
        }
    }

    /// Full-size recognition layout: 8 encoder and 6 decoder layers, CTC on
    /// the encoder output.
    pub fn full_asr(ctc_vocab: Vocabulary, target_vocab: TargetVocabulary) -> Self {
        ModelConfig {
            n_encoder_layers: 8,
            n_decoder_layers: 6,
            ctc_layer: 8,
            ..Self::full_st(ctc_vocab, target_vocab)
        }
    }

    /// Desk-scale layout: width 64, 4 encoder and 2 decoder layers, CTC on
    /// layer 3 so one layer sits above the tap (as 3 of 11 do at full size).
    pub fn desk(ctc_vocab: Vocabulary, target_vocab: TargetVocabulary) -> Self {
        ModelConfig {
            conv_channels: 8,
            n_encoder_layers: 4,
            n_decoder_layers: 2,
            ctc_layer: 3,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 256,
            dropout: 0.0,
            ..Self::full_st(ctc_vocab, target_vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_encoder_layers == 0 || self.n_decoder_layers == 0 {
            return fail("encoder and decoder need at least one layer".into());
        }
        if self.ctc_layer == 0 || self.ctc_layer > self.n_encoder_layers {
            return fail(format!(
                "ctc_layer {} outside 1..={}",
                self.ctc_layer, self.n_encoder_layers
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.feature_dim == 0 || self.conv_channels == 0 || self.ffn_dim == 0 {
            return fail("feature_dim, conv_channels and ffn_dim must be positive".into());
        }
        if self.loss_weight_ctc < 0.0 {
            return fail("loss_weight_ctc must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::PolicyKind;

    fn vocabs() -> (Vocabulary, TargetVocabulary) {
        (
            Vocabulary::with_blank(["a", "b"]).unwrap(),
            TargetVocabulary::new(["x", "y"]).unwrap(),
        )
    }

    #[test]
    fn full_profiles() {
        let (c, t) = vocabs();
        let st = ModelConfig::full_st(c.clone(), t.clone());
        assert_eq!((st.n_encoder_layers, st.n_decoder_layers, st.ctc_layer), (11, 4, 8));
        assert_eq!((st.d_model, st.n_heads, st.ffn_dim), (512, 8, 2048));
        assert_eq!(st.dropout, 0.2);
        assert_eq!(st.label_smoothing, 0.1);
        assert_eq!(st.loss_weight_ctc, 1.0);
        let asr = ModelConfig::full_asr(c, t);
        assert_eq!((asr.n_encoder_layers, asr.n_decoder_layers), (8, 6));
        st.validate().unwrap();
        asr.validate().unwrap();
    }

    #[test]
    fn validation() {
        let (c, t) = vocabs();
        let base = ModelConfig::desk(c, t);
        base.validate().unwrap();
        let mut bad = base.clone();
        bad.ctc_layer = 5;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.ctc_layer = 0;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.n_heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.label_smoothing = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let (c, t) = vocabs();
        let mut cfg = ModelConfig::desk(c, t);
        cfg.compression = Some(CompressionPolicy::new(PolicyKind::Weighted));
        let text = toml::to_string(&cfg).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn target_vocab_rules() {
        let (_, t) = vocabs();
        assert_eq!(t.eos(), 0);
        assert_eq!(t.encode(&["y", "x"]).unwrap(), vec![2, 1]);
        assert!(t.encode(&[EOS]).is_err());
        assert!(TargetVocabulary::try_from(vec!["x".to_string()]).is_err());
    }
}
