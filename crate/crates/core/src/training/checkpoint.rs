//! Versioned JSON checkpoints: `{format_version, config, ..., tensors}` where
//! each tensor is `{name, shape, data}` with `data` the base64 encoding of
//! its little-endian `f64` values.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SentimentClassifier};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    config: ModelConfig,
    has_ibil: bool,
    frozen_embedding: bool,
    vocab: Vec<String>,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

/// A model together with the vocabulary its embedding rows refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SentimentClassifier,
    pub vocab: Vocab,
}

fn encode_f64(data: &[f64]) -> String {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_f64(name: &str, text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::format(Some(name), format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(Some(name), "byte length is not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn to_bytes(model: &SentimentClassifier, vocab: &Vocab) -> Result<Vec<u8>> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let env = Envelope {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        has_ibil: model.has_ibil(),
        frozen_embedding: model.frozen_embedding,
        vocab: vocab.tokens().to_vec(),
        tensors: model
            .params()
            .into_iter()
            .map(|(name, t)| TensorRecord {
                name,
                shape: t.shape().to_vec(),
                data: encode_f64(t.data()),
            })
            .collect(),
    };
    serde_json::to_vec(&env).map_err(|e| Error::format(None, e.to_string()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let env: Envelope = serde_json::from_slice(bytes).map_err(|e| Error::format(None, e.to_string()))?;
    if env.format_version != FORMAT_VERSION {
        return Err(Error::format(
            None,
            format!("unsupported format_version {}", env.format_version),
        ));
    }
    env.config
        .validate()
        .map_err(|e| Error::format(None, format!("config: {e}")))?;
    let vocab = Vocab::from_tokens(env.vocab)?;
    if vocab.len() != env.config.vocab_size {
        return Err(Error::format(None, "vocabulary size disagrees with config"));
    }
    let expected = SentimentClassifier::expected_shapes(&env.config, env.has_ibil);
    if expected.len() != env.tensors.len() {
        return Err(Error::format(
            None,
            format!("expected {} tensors, found {}", expected.len(), env.tensors.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, shape), rec) in expected.iter().zip(&env.tensors) {
        if &rec.name != name {
            return Err(Error::format(Some(&rec.name), format!("expected tensor `{name}` here")));
        }
        if &rec.shape != shape {
            return Err(Error::format(
                Some(name),
                format!("shape {:?} does not match config shape {:?}", rec.shape, shape),
            ));
        }
        let data = decode_f64(name, &rec.data)?;
        let t = Tensor::new(shape.clone(), data)
            .map_err(|_| Error::format(Some(name), "data length does not match shape"))?;
        if !t.is_finite() {
            return Err(Error::format(Some(name), "non-finite values"));
        }
        tensors.push(t);
    }

    let mut model = SentimentClassifier::new(env.config)?;
    if env.has_ibil {
        model.insert_ibil()?;
    }
    model.frozen_embedding = env.frozen_embedding;
    for (dst, src) in model.params_mut().into_iter().zip(tensors) {
        *dst = src;
    }
    Ok(Checkpoint { model, vocab })
}

pub fn save_checkpoint(model: &SentimentClassifier, vocab: &Vocab, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, vocab)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GeneratorConfig};

    fn sample() -> (SentimentClassifier, Vocab) {
        let corpus = generate_corpus(&GeneratorConfig {
            size: 20,
            ..Default::default()
        })
        .unwrap();
        let vocab = Vocab::build(&corpus);
        let mut model = SentimentClassifier::new(ModelConfig {
            vocab_size: vocab.len(),
            high_dim: 8,
            low_dim: 2,
            ..Default::default()
        })
        .unwrap();
        model.insert_ibil().unwrap();
        model.frozen_embedding = true;
        (model, vocab)
    }

    #[test]
    fn round_trip_is_bit_exact_and_stable() {
        let (model, vocab) = sample();
        let bytes = to_bytes(&model, &vocab).unwrap();
        let ck = from_bytes(&bytes).unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.vocab, vocab);
        assert_eq!(to_bytes(&ck.model, &ck.vocab).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let (model, vocab) = sample();
        let bytes = to_bytes(&model, &vocab).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(from_bytes(cut), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let (model, vocab) = sample();
        let text = String::from_utf8(to_bytes(&model, &vocab).unwrap()).unwrap();
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        match from_bytes(bumped.as_bytes()) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("format_version")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let (model, vocab) = sample();
        let mut value: serde_json::Value = serde_json::from_slice(&to_bytes(&model, &vocab).unwrap()).unwrap();
        value["tensors"][3]["shape"] = serde_json::json!([3, 3]);
        let bytes = serde_json::to_vec(&value).unwrap();
        match from_bytes(&bytes) {
            Err(Error::Format { tensor: Some(name), .. }) => assert_eq!(name, "ibil.b_mu"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
