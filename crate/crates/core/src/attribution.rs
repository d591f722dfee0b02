//! Token-importance scores from gradients: grad×input on the embedding and
//! intrinsic layers, SmoothGrad, integrated gradients, and the IBG blend
//!
//! ```text
//! fscore = (1 - alpha)·norm(gamma) + alpha·norm(gamma_hat)
//! ```
//!
//! where `gamma` / `gamma_hat` are per-token L1 masses of `|x ⊙ ∂F/∂x|` and
//! `|x_hat ⊙ ∂F/∂x_hat|`, `F` is the log-probability of the target class, and
//! `norm` rescales to unit sum over selectable (non-aspect) sentence tokens.

use std::fmt;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{EncodedExample, MASK_ID};
use crate::error::{Error, Result};
use crate::model::{argmax, Bottleneck, SentimentClassifier};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Simple,
    Smooth,
    Ig,
    Ibg,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Simple, Method::Smooth, Method::Ig, Method::Ibg];

    pub fn name(self) -> &'static str {
        match self {
            Method::Simple => "simple",
            Method::Smooth => "smooth",
            Method::Ig => "ig",
            Method::Ibg => "ibg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribution method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    PredictedClass,
    GoldClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IgBaseline {
    ZeroEmbedding,
    /// Every position replaced by the mask token (position embeddings kept).
    MaskTokenEmbedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Embedding,
    Intrinsic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub alpha: f64,
    pub target: Target,
    pub smoothgrad_samples: usize,
    /// Noise std relative to the per-dimension std of the embedding table.
    pub smoothgrad_noise: f64,
    pub ig_steps: usize,
    pub ig_baseline: IgBaseline,
    /// Seed for SmoothGrad noise; each example gets its own keyed stream.
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            alpha: 0.5,
            target: Target::PredictedClass,
            smoothgrad_samples: 32,
            smoothgrad_noise: 0.1,
            ig_steps: 64,
            ig_baseline: IgBaseline::ZeroEmbedding,
            seed: 23,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.smoothgrad_samples < 1 || self.ig_steps < 2 {
            return Err(Error::Config("need smoothgrad_samples >= 1 and ig_steps >= 2".into()));
        }
        if self.smoothgrad_noise.is_nan() || self.smoothgrad_noise < 0.0 {
            return Err(Error::Config("smoothgrad_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Scores for the sentence positions of one example.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenScores {
    pub method: Method,
    pub target: usize,
    pub alpha: Option<f64>,
    /// Raw embedding-layer scores.
    pub gamma: Vec<f64>,
    /// Raw intrinsic-layer scores (IBG only).
    pub gamma_hat: Option<Vec<f64>>,
    /// Final normalized scores.
    pub fscore: Vec<f64>,
    /// False on the aspect span.
    pub selectable: Vec<bool>,
}

/// Everything one backward pass of `F` yields.
#[derive(Clone, Debug)]
pub struct GradInput {
    pub target: usize,
    /// `F` = log-probability of `target`.
    pub value: f64,
    pub x: Tensor,
    pub x_grad: Tensor,
    pub x_hat: Option<Tensor>,
    pub x_hat_grad: Option<Tensor>,
}

impl GradInput {
    pub fn token_scores(&self, layer: Layer) -> Result<Vec<f64>> {
        match layer {
            Layer::Embedding => Ok(row_l1_products(&self.x, &self.x_grad)),
            Layer::Intrinsic => match (&self.x_hat, &self.x_hat_grad) {
                (Some(v), Some(g)) => Ok(row_l1_products(v, g)),
                _ => Err(Error::Capability(
                    "intrinsic-layer scores need a bottleneck layer".into(),
                )),
            },
        }
    }
}

/// Per row `i`: `Σ_j |values[i,j] · grads[i,j]|`.
pub fn row_l1_products(values: &Tensor, grads: &Tensor) -> Vec<f64> {
    let cols = values.cols();
    values
        .data()
        .chunks(cols)
        .zip(grads.data().chunks(cols))
        .map(|(v, g)| v.iter().zip(g).map(|(a, b)| (a * b).abs()).sum())
        .collect()
}

/// Per column `j`: `Σ_i |values[i,j] · grads[i,j]|`.
pub fn column_l1_products(values: &Tensor, grads: &Tensor) -> Vec<f64> {
    let cols = values.cols();
    let mut out = vec![0.0; cols];
    for (v, g) in values.data().chunks(cols).zip(grads.data().chunks(cols)) {
        for j in 0..cols {
            out[j] += (v[j] * g[j]).abs();
        }
    }
    out
}

pub fn resolve_target(model: &SentimentClassifier, example: &EncodedExample, target: Target) -> Result<usize> {
    match target {
        Target::GoldClass => Ok(example.label),
        Target::PredictedClass => model.predict(example),
    }
}

/// Mean-mode forward from embedding values `x`, then one backward pass of
/// log p(target), reading gradients at both `x` and `x_hat`.
pub fn gradients_at(
    model: &SentimentClassifier,
    example: &EncodedExample,
    x: &Tensor,
    target: usize,
) -> Result<GradInput> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let xv = tape.leaf(x.clone())?;
    let tv = model.forward_from(&mut tape, &bound, xv, &example.aspect_mask(), Bottleneck::Mean)?;
    let nll = tape.cross_entropy(tv.logits, &[target])?;
    let f = tape.scale(nll, -1.0);
    tape.backward(f)?;
    let grad = |v| {
        tape.grad_tensor(v)
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    };
    Ok(GradInput {
        target,
        value: tape.value(f).item(),
        x: x.clone(),
        x_grad: grad(xv),
        x_hat: tv.ibil.map(|iv| tape.value(iv.x_hat).clone()),
        x_hat_grad: tv.ibil.map(|iv| grad(iv.x_hat)),
    })
}

pub fn gradients(model: &SentimentClassifier, example: &EncodedExample, target: usize) -> Result<GradInput> {
    let x = model.embed(&example.ids)?;
    gradients_at(model, example, &x, target)
}

/// Grad×input per position of the full encoded sequence.
pub fn grad_input_scores(
    model: &SentimentClassifier,
    example: &EncodedExample,
    target: usize,
    layer: Layer,
) -> Result<Vec<f64>> {
    if layer == Layer::Intrinsic && !model.has_ibil() {
        return Err(Error::Capability(
            "intrinsic-layer scores need a bottleneck layer".into(),
        ));
    }
    gradients(model, example, target)?.token_scores(layer)
}

/// Rescales to unit sum over selectable positions. If that mass is zero the
/// selectable positions share it uniformly.
pub fn normalize(scores: &[f64], selectable: &[bool]) -> Vec<f64> {
    let total: f64 = scores.iter().zip(selectable).filter(|(_, &s)| s).map(|(v, _)| v).sum();
    if total > 0.0 {
        scores.iter().map(|v| v / total).collect()
    } else {
        let count = selectable.iter().filter(|s| **s).count().max(1) as f64;
        selectable.iter().map(|&s| if s { 1.0 / count } else { 0.0 }).collect()
    }
}

pub fn blend(gamma: &[f64], gamma_hat: &[f64], alpha: f64, selectable: &[bool]) -> Vec<f64> {
    let g = normalize(gamma, selectable);
    let h = normalize(gamma_hat, selectable);
    g.iter().zip(&h).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect()
}

fn sentence(scores: &[f64], example: &EncodedExample) -> Vec<f64> {
    scores[..example.sentence_len].to_vec()
}

pub fn simple_gradient(
    model: &SentimentClassifier,
    example: &EncodedExample,
    config: &AttributionConfig,
) -> Result<TokenScores> {
    let target = resolve_target(model, example, config.target)?;
    let gamma = sentence(&grad_input_scores(model, example, target, Layer::Embedding)?, example);
    let selectable = example.selectable();
    Ok(TokenScores {
        method: Method::Simple,
        target,
        alpha: None,
        fscore: normalize(&gamma, &selectable),
        gamma,
        gamma_hat: None,
        selectable,
    })
}

/// Per-dimension standard deviation over the rows of the token table.
pub fn embedding_dim_std(model: &SentimentClassifier) -> Vec<f64> {
    let table = &model.token_embedding;
    let (rows, cols) = (table.rows() as f64, table.cols());
    (0..cols)
        .map(|j| {
            let mean = (0..table.rows()).map(|i| table.at(i, j)).sum::<f64>() / rows;
            let var = (0..table.rows()).map(|i| (table.at(i, j) - mean).powi(2)).sum::<f64>() / rows;
            var.sqrt()
        })
        .collect()
}

/// Average over `samples` noisy copies `x + ε` of the grad×input row masses
/// evaluated at the noisy input.
pub fn smooth_scores(
    x: &Tensor,
    noise_std: &[f64],
    samples: usize,
    rng: &mut rng::Rng,
    mut grad_fn: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<f64>> {
    let cols = x.cols();
    let mut acc = vec![0.0; x.rows()];
    for _ in 0..samples {
        let mut noisy = x.clone();
        for (i, v) in noisy.data_mut().iter_mut().enumerate() {
            let std = noise_std[i % cols];
            if std > 0.0 {
                let e: f64 = rng.sample(StandardNormal);
                *v += std * e;
            }
        }
        let g = grad_fn(&noisy)?;
        for (a, s) in acc.iter_mut().zip(row_l1_products(&noisy, &g)) {
            *a += s;
        }
    }
    Ok(acc.into_iter().map(|v| v / samples as f64).collect())
}

pub fn smooth_grad(
    model: &SentimentClassifier,
    example: &EncodedExample,
    config: &AttributionConfig,
) -> Result<TokenScores> {
    config.validate()?;
    let target = resolve_target(model, example, config.target)?;
    let x = model.embed(&example.ids)?;
    let std: Vec<f64> = embedding_dim_std(model)
        .into_iter()
        .map(|s| s * config.smoothgrad_noise)
        .collect();
    let mut rng = rng::stream(config.seed, &format!("smoothgrad:{}", example.id));
    let full = smooth_scores(&x, &std, config.smoothgrad_samples, &mut rng, |xn| {
        Ok(gradients_at(model, example, xn, target)?.x_grad)
    })?;
    let gamma = sentence(&full, example);
    let selectable = example.selectable();
    Ok(TokenScores {
        method: Method::Smooth,
        target,
        alpha: None,
        fscore: normalize(&gamma, &selectable),
        gamma,
        gamma_hat: None,
        selectable,
    })
}

/// Signed path attributions `(x - baseline) ⊙ mean_k ∇F(baseline + (k - ½)/m·(x - baseline))`.
pub fn integrate_path(
    x: &Tensor,
    baseline: &Tensor,
    steps: usize,
    mut grad_fn: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if x.shape() != baseline.shape() {
        return Err(Error::dim("integrate_path", x.shape(), baseline.shape()));
    }
    if steps < 2 {
        return Err(Error::Config("ig_steps must be >= 2".into()));
    }
    let diff: Vec<f64> = x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    let mut avg = vec![0.0; x.len()];
    for k in 1..=steps {
        let t = (k as f64 - 0.5) / steps as f64;
        let point = Tensor::new(
            x.shape().to_vec(),
            baseline.data().iter().zip(&diff).map(|(b, d)| b + t * d).collect(),
        )?;
        let g = grad_fn(&point)?;
        avg.iter_mut().zip(g.data()).for_each(|(a, v)| *a += v);
    }
    let signed = avg.iter().zip(&diff).map(|(a, d)| d * a / steps as f64).collect();
    Tensor::new(x.shape().to_vec(), signed)
}

#[derive(Clone, Debug)]
pub struct IgResult {
    pub scores: TokenScores,
    /// Signed per-dimension attributions over the full sequence.
    pub signed: Tensor,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl IgResult {
    /// `Σ signed - (F(x) - F(baseline))`.
    pub fn completeness_gap(&self) -> f64 {
        self.signed.data().iter().sum::<f64>() - (self.f_input - self.f_baseline)
    }
}

pub fn ig_baseline(model: &SentimentClassifier, example: &EncodedExample, kind: IgBaseline) -> Result<Tensor> {
    match kind {
        IgBaseline::ZeroEmbedding => Ok(Tensor::zeros(&[example.len(), model.config.high_dim])),
        IgBaseline::MaskTokenEmbedding => model.embed(&vec![MASK_ID; example.len()]),
    }
}

pub fn integrated_gradients(
    model: &SentimentClassifier,
    example: &EncodedExample,
    config: &AttributionConfig,
) -> Result<IgResult> {
    config.validate()?;
    let target = resolve_target(model, example, config.target)?;
    let x = model.embed(&example.ids)?;
    let baseline = ig_baseline(model, example, config.ig_baseline)?;
    let signed = integrate_path(&x, &baseline, config.ig_steps, |p| {
        Ok(gradients_at(model, example, p, target)?.x_grad)
    })?;
    let f_input = gradients_at(model, example, &x, target)?.value;
    let f_baseline = gradients_at(model, example, &baseline, target)?.value;
    let cols = signed.cols();
    let full: Vec<f64> = signed
        .data()
        .chunks(cols)
        .map(|r| r.iter().map(|v| v.abs()).sum())
        .collect();
    let gamma = sentence(&full, example);
    let selectable = example.selectable();
    Ok(IgResult {
        scores: TokenScores {
            method: Method::Ig,
            target,
            alpha: None,
            fscore: normalize(&gamma, &selectable),
            gamma,
            gamma_hat: None,
            selectable,
        },
        signed,
        f_input,
        f_baseline,
    })
}

/// IBG score: both layers from one backward pass, blended with `alpha`.
pub fn ibg_score(
    model: &SentimentClassifier,
    example: &EncodedExample,
    config: &AttributionConfig,
) -> Result<TokenScores> {
    config.validate()?;
    if !model.has_ibil() {
        return Err(Error::Capability("IBG scores need a bottleneck layer".into()));
    }
    let target = resolve_target(model, example, config.target)?;
    let gi = gradients(model, example, target)?;
    let gamma = sentence(&gi.token_scores(Layer::Embedding)?, example);
    let gamma_hat = sentence(&gi.token_scores(Layer::Intrinsic)?, example);
    let selectable = example.selectable();
    Ok(TokenScores {
        method: Method::Ibg,
        target,
        alpha: Some(config.alpha),
        fscore: blend(&gamma, &gamma_hat, config.alpha, &selectable),
        gamma,
        gamma_hat: Some(gamma_hat),
        selectable,
    })
}

pub fn explain(
    model: &SentimentClassifier,
    example: &EncodedExample,
    method: Method,
    config: &AttributionConfig,
) -> Result<TokenScores> {
    match method {
        Method::Simple => simple_gradient(model, example, config),
        Method::Smooth => smooth_grad(model, example, config),
        Method::Ig => Ok(integrated_gradients(model, example, config)?.scores),
        Method::Ibg => ibg_score(model, example, config),
    }
}

/// Source of token scores for corpus-level metrics.
pub trait TokenScorer: Sync {
    fn score(&self, example: &EncodedExample) -> Result<TokenScores>;
}

/// A model paired with an attribution method.
pub struct ModelScorer<'a> {
    pub model: &'a SentimentClassifier,
    pub method: Method,
    pub config: AttributionConfig,
}

impl TokenScorer for ModelScorer<'_> {
    fn score(&self, example: &EncodedExample) -> Result<TokenScores> {
        explain(self.model, example, self.method, &self.config)
    }
}

impl<F> TokenScorer for F
where
    F: Fn(&EncodedExample) -> Result<TokenScores> + Sync,
{
    fn score(&self, example: &EncodedExample) -> Result<TokenScores> {
        self(example)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Set when fewer than `k` selectable tokens existed.
    pub truncated: bool,
}

/// Selectable positions ordered by descending score, ties to the lower index.
pub fn ranking(scores: &[f64], selectable: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| selectable[i]).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// The `k` top-scoring selectable tokens.
pub fn extract_opinion_words(scores: &TokenScores, k: usize) -> Result<Selection> {
    if k == 0 {
        return Err(Error::Contract("k must be >= 1".into()));
    }
    let mut indices = ranking(&scores.fscore, &scores.selectable);
    let truncated = indices.len() < k;
    indices.truncate(k);
    Ok(Selection { indices, truncated })
}

/// Predicted class of a model on an example (mean mode).
pub fn predicted(model: &SentimentClassifier, example: &EncodedExample) -> Result<usize> {
    Ok(argmax(&model.probabilities(example)?))
}
