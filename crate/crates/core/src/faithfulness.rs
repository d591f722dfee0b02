//! Perturbation-based faithfulness metrics (AOPC, post-hoc accuracy) and
//! opinion-word recovery against planted gold indices.
//!
//! Token scores are computed once per example on the unperturbed input; every
//! perturbation then ranks tokens with the same order `extract_opinion_words`
//! uses. The aspect span and everything after the sentence (separator and the
//! appended aspect copy) are never touched.

use serde::{Deserialize, Serialize};

use crate::attribution::{ranking, TokenScorer, TokenScores};
use crate::data::{EncodedExample, MASK_ID};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::Predictor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    RemoveTopK,
    KeepTopK,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Replacement {
    #[default]
    MaskToken,
    /// Drops the token, shifting later positions left.
    Delete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationPolicy {
    pub mode: PerturbMode,
    pub replacement: Replacement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub example: EncodedExample,
    /// `k` exceeded the number of selectable tokens.
    pub clamped: bool,
}

/// Applies `policy` to the `k` top-ranked selectable tokens of `example`.
pub fn perturb(
    example: &EncodedExample,
    scores: &TokenScores,
    policy: PerturbationPolicy,
    k: usize,
) -> Result<Perturbed> {
    if scores.fscore.len() != example.sentence_len {
        return Err(Error::dim("perturb", &[scores.fscore.len()], &[example.sentence_len]));
    }
    let order = ranking(&scores.fscore, &example.selectable());
    let clamped = k > order.len();
    let top = &order[..k.min(order.len())];
    let mut hit = vec![false; example.sentence_len];
    match policy.mode {
        PerturbMode::RemoveTopK => top.iter().for_each(|&i| hit[i] = true),
        PerturbMode::KeepTopK => {
            order.iter().for_each(|&i| hit[i] = true);
            top.iter().for_each(|&i| hit[i] = false);
        }
    }
    let mut out = example.clone();
    match policy.replacement {
        Replacement::MaskToken => {
            for (id, &h) in out.ids.iter_mut().zip(&hit) {
                if h {
                    *id = MASK_ID;
                }
            }
        }
        Replacement::Delete => {
            let before_aspect = hit[..example.aspect[0]].iter().filter(|h| **h).count();
            let removed = hit.iter().filter(|h| **h).count();
            out.ids = example
                .ids
                .iter()
                .enumerate()
                .filter(|&(i, _)| i >= example.sentence_len || !hit[i])
                .map(|(_, &id)| id)
                .collect();
            out.sentence_len -= removed;
            out.aspect = [example.aspect[0] - before_aspect, example.aspect[1] - before_aspect];
            out.gold = example
                .gold
                .iter()
                .filter(|&&g| !hit[g])
                .map(|&g| g - hit[..g].iter().filter(|h| **h).count())
                .collect();
        }
    }
    Ok(Perturbed { example: out, clamped })
}

/// Scores every example, in corpus order.
pub fn score_corpus(scorer: &dyn TokenScorer, corpus: &[EncodedExample]) -> Result<Vec<TokenScores>> {
    exec::try_collect(exec::map(corpus, |ex| scorer.score(ex)))
}

fn accuracy_on(model: &dyn Predictor, corpus: &[EncodedExample]) -> Result<f64> {
    let hits = exec::try_collect(exec::map(corpus, |ex| Ok::<_, Error>(model.predict(ex)? == ex.label)))?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / corpus.len() as f64)
}

fn perturbed_accuracy(
    model: &dyn Predictor,
    corpus: &[EncodedExample],
    scores: &[TokenScores],
    policy: PerturbationPolicy,
    k: usize,
) -> Result<(f64, usize)> {
    let pairs: Vec<(&EncodedExample, &TokenScores)> = corpus.iter().zip(scores).collect();
    let results = exec::try_collect(exec::map(&pairs, |(ex, s)| {
        let p = perturb(ex, s, policy, k)?;
        Ok::<_, Error>((model.predict(&p.example)? == ex.label, p.clamped))
    }))?;
    let correct = results.iter().filter(|r| r.0).count();
    let clamped = results.iter().filter(|r| r.1).count();
    Ok((correct as f64 / corpus.len() as f64, clamped))
}

fn check_inputs(corpus: &[EncodedExample], scores: &[TokenScores], k: usize) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Contract("faithfulness metrics need a non-empty corpus".into()));
    }
    if scores.len() != corpus.len() {
        return Err(Error::dim("faithfulness", &[scores.len()], &[corpus.len()]));
    }
    if k == 0 {
        return Err(Error::Contract("k must be >= 1".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AopcCurve {
    pub acc_0: f64,
    /// `acc_k` for `k = 1..=k_max`.
    pub acc: Vec<f64>,
    /// Percentage.
    pub aopc: f64,
    /// Examples with fewer selectable tokens than `k_max`.
    pub clamped: usize,
}

impl AopcCurve {
    pub fn k_max(&self) -> usize {
        self.acc.len()
    }

    /// Re-aggregates the curve.
    pub fn aggregate(acc_0: f64, acc: &[f64]) -> f64 {
        100.0 * acc.iter().map(|a| acc_0 - a).sum::<f64>() / acc.len() as f64
    }
}

pub fn aopc_from_scores(
    model: &dyn Predictor,
    corpus: &[EncodedExample],
    scores: &[TokenScores],
    k_max: usize,
    replacement: Replacement,
) -> Result<AopcCurve> {
    check_inputs(corpus, scores, k_max)?;
    let policy = PerturbationPolicy {
        mode: PerturbMode::RemoveTopK,
        replacement,
    };
    let acc_0 = accuracy_on(model, corpus)?;
    let mut acc = Vec::with_capacity(k_max);
    let mut clamped = 0;
    for k in 1..=k_max {
        let (a, c) = perturbed_accuracy(model, corpus, scores, policy, k)?;
        acc.push(a);
        clamped = c;
    }
    Ok(AopcCurve {
        aopc: AopcCurve::aggregate(acc_0, &acc),
        acc_0,
        acc,
        clamped,
    })
}

pub fn aopc(
    model: &dyn Predictor,
    corpus: &[EncodedExample],
    scorer: &dyn TokenScorer,
    k_max: usize,
) -> Result<AopcCurve> {
    let scores = score_corpus(scorer, corpus)?;
    aopc_from_scores(model, corpus, &scores, k_max, Replacement::MaskToken)
}

/// Post-hoc accuracy as a percentage.
pub fn ph_acc_from_scores(
    model: &dyn Predictor,
    corpus: &[EncodedExample],
    scores: &[TokenScores],
    k: usize,
    replacement: Replacement,
) -> Result<f64> {
    check_inputs(corpus, scores, k)?;
    let policy = PerturbationPolicy {
        mode: PerturbMode::KeepTopK,
        replacement,
    };
    Ok(100.0 * perturbed_accuracy(model, corpus, scores, policy, k)?.0)
}

pub fn ph_acc(model: &dyn Predictor, corpus: &[EncodedExample], scorer: &dyn TokenScorer, k: usize) -> Result<f64> {
    let scores = score_corpus(scorer, corpus)?;
    ph_acc_from_scores(model, corpus, &scores, k, Replacement::MaskToken)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Recovery {
    pub k: usize,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub hit_at_1: f64,
    pub evaluated: usize,
    /// Examples without gold opinion indices.
    pub skipped: usize,
}

pub fn recovery_from_scores(corpus: &[EncodedExample], scores: &[TokenScores], k: usize) -> Result<Recovery> {
    if scores.len() != corpus.len() {
        return Err(Error::dim("opinion_recovery", &[scores.len()], &[corpus.len()]));
    }
    if k == 0 {
        return Err(Error::Contract("k must be >= 1".into()));
    }
    let (mut precision, mut recall, mut hits, mut evaluated) = (0.0, 0.0, 0.0, 0usize);
    for (ex, s) in corpus.iter().zip(scores) {
        if ex.gold.is_empty() {
            continue;
        }
        let order = ranking(&s.fscore, &s.selectable);
        let top = &order[..k.min(order.len())];
        let found = top.iter().filter(|i| ex.gold.contains(i)).count() as f64;
        precision += found / k as f64;
        recall += found / ex.gold.len() as f64;
        if order.first().is_some_and(|i| ex.gold.contains(i)) {
            hits += 1.0;
        }
        evaluated += 1;
    }
    let n = evaluated.max(1) as f64;
    Ok(Recovery {
        k,
        precision_at_k: precision / n,
        recall_at_k: recall / n,
        hit_at_1: hits / n,
        evaluated,
        skipped: corpus.len() - evaluated,
    })
}

pub fn opinion_recovery(corpus: &[EncodedExample], scorer: &dyn TokenScorer, k: usize) -> Result<Recovery> {
    let scores = score_corpus(scorer, corpus)?;
    recovery_from_scores(corpus, &scores, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaithfulnessConfig {
    pub k_max: usize,
    pub ph_k: usize,
    pub replacement: Replacement,
}

impl Default for FaithfulnessConfig {
    fn default() -> Self {
        FaithfulnessConfig {
            k_max: 5,
            ph_k: 3,
            replacement: Replacement::MaskToken,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KRow {
    pub k: usize,
    pub acc_k: f64,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FaithfulnessReport {
    pub method: String,
    pub alpha: Option<f64>,
    pub config: FaithfulnessConfig,
    pub curve: AopcCurve,
    pub ph_acc: f64,
    pub hit_at_1: f64,
    pub rows: Vec<KRow>,
    pub recovery_skipped: usize,
}

impl FaithfulnessReport {
    pub const CSV_HEADER: [&'static str; 9] = [
        "method",
        "alpha",
        "k",
        "acc_k",
        "aopc",
        "ph_acc",
        "precision_at_k",
        "recall_at_k",
        "hit_at_1",
    ];

    /// One CSV record per `k`; `alpha` is empty for methods without one.
    pub fn csv_records(&self) -> Vec<[String; 9]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    self.method.clone(),
                    self.alpha.map(|a| a.to_string()).unwrap_or_default(),
                    r.k.to_string(),
                    r.acc_k.to_string(),
                    self.curve.aopc.to_string(),
                    self.ph_acc.to_string(),
                    r.precision_at_k.to_string(),
                    r.recall_at_k.to_string(),
                    self.hit_at_1.to_string(),
                ]
            })
            .collect()
    }
}

/// All metrics from a single scoring pass.
pub fn evaluate_faithfulness(
    model: &dyn Predictor,
    corpus: &[EncodedExample],
    scorer: &dyn TokenScorer,
    method: &str,
    alpha: Option<f64>,
    config: &FaithfulnessConfig,
) -> Result<FaithfulnessReport> {
    let scores = score_corpus(scorer, corpus)?;
    let curve = aopc_from_scores(model, corpus, &scores, config.k_max, config.replacement)?;
    let ph_acc = ph_acc_from_scores(model, corpus, &scores, config.ph_k, config.replacement)?;
    let mut rows = Vec::with_capacity(config.k_max);
    let mut hit_at_1 = 0.0;
    let mut skipped = 0;
    for k in 1..=config.k_max {
        let r = recovery_from_scores(corpus, &scores, k)?;
        hit_at_1 = r.hit_at_1;
        skipped = r.skipped;
        rows.push(KRow {
            k,
            acc_k: curve.acc[k - 1],
            precision_at_k: r.precision_at_k,
            recall_at_k: r.recall_at_k,
        });
    }
    Ok(FaithfulnessReport {
        method: method.to_string(),
        alpha,
        config: config.clone(),
        curve,
        ph_acc,
        hit_at_1,
        rows,
        recovery_skipped: skipped,
    })
}
