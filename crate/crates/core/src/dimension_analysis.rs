//! Which embedding dimensions carry a prediction: per-dimension grad×input
//! mass, accuracy after masking all but the top-k dimensions, and how often
//! each dimension lands in a sample's top-K set.

use serde::{Deserialize, Serialize};

use crate::attribution::{self, column_l1_products, ranking};
use crate::autodiff::Tensor;
use crate::data::{EncodedExample, GeneratorConfig, Vocab};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{ModelConfig, SentimentClassifier};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimScore {
    /// `Σ_i |x_ij · ∂F/∂x_ij|`.
    #[default]
    GradInput,
    /// `Σ_i |∂F/∂x_ij|`.
    RawGrad,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScope {
    /// Each sample keeps its own top-k dimensions.
    #[default]
    PerSample,
    /// One top-k set from corpus-mean importance, shared by all samples.
    Global,
}

/// Importance of each embedding dimension for the predicted class.
pub fn per_dim_importance(model: &SentimentClassifier, example: &EncodedExample, score: DimScore) -> Result<Vec<f64>> {
    let target = model.predict(example)?;
    let gi = attribution::gradients(model, example, target)?;
    Ok(match score {
        DimScore::GradInput => column_l1_products(&gi.x, &gi.x_grad),
        DimScore::RawGrad => {
            let ones = Tensor::from_fn(gi.x.shape(), |_| 1.0);
            column_l1_products(&ones, &gi.x_grad)
        }
    })
}

/// The `k` largest entries, ties to the lower index.
pub fn top_dims(importance: &[f64], k: usize) -> Vec<usize> {
    let mut order = ranking(importance, &vec![true; importance.len()]);
    order.truncate(k);
    order
}

fn importances(model: &SentimentClassifier, corpus: &[EncodedExample], score: DimScore) -> Result<Vec<Vec<f64>>> {
    exec::try_collect(exec::map(corpus, |ex| per_dim_importance(model, ex, score)))
}

fn mean_columns(rows: &[Vec<f64>], dims: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dims];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    let n = rows.len().max(1) as f64;
    mean.into_iter().map(|m| m / n).collect()
}

/// Prediction with every embedding column outside `keep` zeroed.
pub fn masked_prediction(model: &SentimentClassifier, example: &EncodedExample, keep: &[usize]) -> Result<usize> {
    let mut x = model.embed(&example.ids)?;
    let d = x.cols();
    let mut kept = vec![false; d];
    for &j in keep {
        if j >= d {
            return Err(Error::Index {
                what: "embedding dimension",
                index: j,
                bound: d,
            });
        }
        kept[j] = true;
    }
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if !kept[i % d] {
            *v = 0.0;
        }
    }
    model.predict_from_embedding(&x, &example.aspect_mask())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskPoint {
    pub k: usize,
    pub masked_accuracy: f64,
}

pub fn topk_dim_mask_accuracy(
    model: &SentimentClassifier,
    corpus: &[EncodedExample],
    ks: &[usize],
    score: DimScore,
    scope: MaskScope,
) -> Result<Vec<MaskPoint>> {
    let d = model.config.high_dim;
    if let Some(&k) = ks.iter().find(|&&k| k > d) {
        return Err(Error::Config(format!("k = {k} exceeds embedding width {d}")));
    }
    if corpus.is_empty() {
        return Err(Error::Contract("dimension masking needs a non-empty corpus".into()));
    }
    let imp = importances(model, corpus, score)?;
    let global = top_dims(&mean_columns(&imp, d), d);
    let pairs: Vec<(&EncodedExample, &Vec<f64>)> = corpus.iter().zip(&imp).collect();
    ks.iter()
        .map(|&k| {
            let hits = exec::try_collect(exec::map(&pairs, |(ex, im)| {
                let keep = match scope {
                    MaskScope::PerSample => top_dims(im, k),
                    MaskScope::Global => global[..k].to_vec(),
                };
                Ok::<_, Error>(masked_prediction(model, ex, &keep)? == ex.label)
            }))?;
            Ok(MaskPoint {
                k,
                masked_accuracy: hits.iter().filter(|h| **h).count() as f64 / corpus.len() as f64,
            })
        })
        .collect()
}

/// Fraction of samples whose top-`k` set contains each dimension.
pub fn frequency_from_importance(importance: &[Vec<f64>], dims: usize, k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; dims];
    for im in importance {
        for j in top_dims(im, k) {
            counts[j] += 1;
        }
    }
    let n = importance.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

pub fn dim_frequency(
    model: &SentimentClassifier,
    corpus: &[EncodedExample],
    k: usize,
    score: DimScore,
) -> Result<Vec<f64>> {
    let d = model.config.high_dim;
    if k > d {
        return Err(Error::Config(format!("K = {k} exceeds embedding width {d}")));
    }
    Ok(frequency_from_importance(&importances(model, corpus, score)?, d, k))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DimReport {
    pub mean_importance: Vec<f64>,
    pub top_k: usize,
    pub frequency: Vec<f64>,
    /// Three most frequent dimensions, ties to the lower index.
    pub top3: Vec<usize>,
    pub masking: Vec<MaskPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DimConfig {
    pub top_k: usize,
    /// Masking curve points; `None` means every k from 0 to D.
    pub mask_ks: Option<Vec<usize>>,
    pub score: DimScore,
    pub scope: MaskScope,
}

impl Default for DimConfig {
    fn default() -> Self {
        DimConfig {
            top_k: 10,
            mask_ks: None,
            score: DimScore::GradInput,
            scope: MaskScope::PerSample,
        }
    }
}

pub fn analyze(model: &SentimentClassifier, corpus: &[EncodedExample], config: &DimConfig) -> Result<DimReport> {
    let d = model.config.high_dim;
    if config.top_k > d {
        return Err(Error::Config(format!(
            "top_k = {} exceeds embedding width {d}",
            config.top_k
        )));
    }
    let imp = importances(model, corpus, config.score)?;
    let frequency = frequency_from_importance(&imp, d, config.top_k);
    let ks = config.mask_ks.clone().unwrap_or_else(|| (0..=d).collect());
    Ok(DimReport {
        mean_importance: mean_columns(&imp, d),
        top_k: config.top_k,
        top3: top_dims(&frequency, 3),
        frequency,
        masking: topk_dim_mask_accuracy(model, corpus, &ks, config.score, config.scope)?,
    })
}

/// A classifier whose label evidence lives only in `signal_dims`.
///
/// Opinion words of class `c` get `scale·cos(2πc/C + π(k + ¼)/r)` on the
/// k-th of the `r` signal dimensions, so codes of distinct classes have inner
/// product `r·scale²·cos(2π(c - c')/C)/2` and no signal coordinate is
/// constant across classes. Every other token/position coordinate is
/// `N(0, noise_std²)` noise.
/// Attention is uniform, value/output projections keep only the signal
/// dimensions, feed-forward blocks are zero and the head matches class codes.
/// The prediction is therefore a function of the signal coordinates alone.
pub fn planted_low_rank_model(
    vocab: &Vocab,
    generator: &GeneratorConfig,
    config: ModelConfig,
    signal_dims: &[usize],
    noise_std: f64,
    scale: f64,
) -> Result<SentimentClassifier> {
    use rand_distr::{Distribution, Normal};

    let d = config.high_dim;
    if signal_dims.len() < 2 || signal_dims.iter().any(|&j| j >= d) {
        return Err(Error::Config(format!("need >= 2 signal dims below {d}")));
    }
    let classes = config.num_classes;
    let r_dims = signal_dims.len() as f64;
    let code = |c: usize, k: usize| {
        let phase = std::f64::consts::TAU * c as f64 / classes as f64;
        let shift = std::f64::consts::PI * (k as f64 + 0.25) / r_dims;
        scale * (phase + shift).cos()
    };
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut r = rng::stream(config.seed, "planted");
    let mut signal = vec![false; d];
    signal_dims.iter().for_each(|&j| signal[j] = true);
    let mut model = SentimentClassifier::new(config)?;

    let noisy = |t: &mut Tensor, r: &mut rng::Rng| {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = if signal[i % d] { 0.0 } else { normal.sample(r) };
        }
    };
    noisy(&mut model.token_embedding, &mut r);
    if let Some(p) = model.position_embedding.as_mut() {
        noisy(p, &mut r);
    }
    for (id, token) in vocab.tokens().iter().enumerate() {
        if let Some(label) = generator.polarity_of(token) {
            let row = model.token_embedding.row_mut(id);
            for (k, &j) in signal_dims.iter().enumerate() {
                row[j] = code(label.index(), k);
            }
        }
    }
    let projection = Tensor::from_fn(&[d, d], |i| if i / d == i % d && signal[i % d] { 1.0 } else { 0.0 });
    for layer in &mut model.layers {
        layer.w_q = Tensor::zeros(&[d, d]);
        layer.w_k = Tensor::zeros(&[d, d]);
        layer.w_v = projection.clone();
        layer.w_o = projection.clone();
        layer.w_ff = Tensor::zeros(&[d, d]);
        layer.b_ff = Tensor::zeros(&[d]);
    }
    model.head_w = Tensor::zeros(&[d, classes]);
    for (k, &j) in signal_dims.iter().enumerate() {
        for c in 0..classes {
            model.head_w.data_mut()[j * classes + c] = code(c, k);
        }
    }
    model.head_b = Tensor::zeros(&[classes]);
    Ok(model)
}
