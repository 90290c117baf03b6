//! Simulatability quiz construction and scoring, the Mann-Whitney U test,
//! and decoder-invariance measurements.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array3;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Outcome, OutcomePartition};
use crate::decoder::Decoder;
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::losses::{ssim_rgb, SsimConfig};

pub const CANT_TELL: &str = "I just can't tell";
pub const QUIZ_OPTIONS: usize = 5;

/// What the quiz needs to know about one classified sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizCandidate {
    pub sample_id: String,
    pub model_prediction: String,
    pub truth_labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizQuestion {
    pub question_id: String,
    pub sample_id: String,
    /// Digest of the rendered panel; filled per explainer variant.
    pub panel_digest: Option<Digest>,
    pub options: Vec<String>,
    pub model_prediction: String,
    pub truth_labels: Vec<String>,
    pub outcome: Outcome,
}

impl QuizQuestion {
    pub fn option_set(&self) -> BTreeSet<&str> {
        self.options.iter().map(String::as_str).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizConfig {
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub seed: u64,
}

impl Default for QuizConfig {
    fn default() -> Self {
        QuizConfig {
            n_correct: 16,
            n_incorrect: 14,
            seed: 0,
        }
    }
}

/// Quiz questions bundled with the explainer variant their panels show.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuizExport {
    pub explainer: String,
    pub seed: u64,
    pub questions: Vec<QuizQuestion>,
}

/// The model's prediction, up to three other target labels (extra ones are
/// dropped, missing ones padded with random classes), and the abstain
/// option, in seeded random order.
pub fn quiz_options(
    cand: &QuizCandidate,
    class_names: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let others_needed = QUIZ_OPTIONS - 2;
    if class_names.len() < others_needed + 1 {
        return Err(Error::Argument(format!(
            "a quiz needs at least {} classes, got {}",
            others_needed + 1,
            class_names.len()
        )));
    }
    let mut others: Vec<&String> = cand
        .truth_labels
        .iter()
        .filter(|t| **t != cand.model_prediction)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    others.shuffle(rng);
    others.truncate(others_needed);
    let mut options: Vec<String> = std::iter::once(cand.model_prediction.clone())
        .chain(others.into_iter().cloned())
        .collect();
    let pool: Vec<&String> = class_names
        .iter()
        .filter(|c| !options.contains(c))
        .collect();
    let missing = others_needed + 1 - options.len();
    options.extend(pool.choose_multiple(rng, missing).map(|c| (*c).clone()));
    options.push(CANT_TELL.to_string());
    options.shuffle(rng);
    Ok(options)
}

fn pick<'a>(pool: &'a [String], n: usize, what: &str, rng: &mut ChaCha8Rng) -> Result<Vec<&'a String>> {
    if pool.len() < n {
        return Err(Error::Argument(format!(
            "need {n} {what} samples but only {} are available (short by {})",
            pool.len(),
            n - pool.len()
        )));
    }
    let mut sorted: Vec<&String> = pool.iter().collect();
    sorted.sort();
    Ok(sorted.choose_multiple(rng, n).copied().collect())
}

/// Samples `n_correct` correctly and `n_incorrect` incorrectly classified
/// inputs and builds one question per input. No explainer is involved, so
/// every variant of the quiz shares the same options.
pub fn build_quiz(
    partition: &OutcomePartition,
    candidates: &BTreeMap<String, QuizCandidate>,
    class_names: &[String],
    cfg: &QuizConfig,
) -> Result<Vec<QuizQuestion>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let correct = pick(&partition.correct, cfg.n_correct, "correctly classified", &mut rng)?;
    let incorrect = pick(&partition.incorrect, cfg.n_incorrect, "incorrectly classified", &mut rng)?;
    let mut chosen: Vec<(&String, Outcome)> = correct
        .into_iter()
        .map(|id| (id, Outcome::Correct))
        .chain(incorrect.into_iter().map(|id| (id, Outcome::Incorrect)))
        .collect();
    chosen.shuffle(&mut rng);
    chosen
        .into_iter()
        .enumerate()
        .map(|(k, (id, outcome))| {
            let cand = candidates
                .get(id)
                .ok_or_else(|| Error::Argument(format!("no prediction recorded for {id}")))?;
            Ok(QuizQuestion {
                question_id: format!("q{:02}", k + 1),
                sample_id: id.clone(),
                panel_digest: None,
                options: quiz_options(cand, class_names, &mut rng)?,
                model_prediction: cand.model_prediction.clone(),
                truth_labels: cand.truth_labels.clone(),
                outcome,
            })
        })
        .collect()
}

impl QuizExport {
    /// Attaches one explainer's panel digests to a shared question list.
    /// Options and order are left untouched.
    pub fn for_explainer(
        questions: &[QuizQuestion],
        explainer: &str,
        seed: u64,
        panels: &BTreeMap<String, Digest>,
    ) -> Result<Self> {
        let questions = questions
            .iter()
            .map(|q| {
                let digest = panels.get(&q.sample_id).ok_or_else(|| {
                    Error::Argument(format!("no {explainer} panel for {}", q.sample_id))
                })?;
                Ok(QuizQuestion {
                    panel_digest: Some(*digest),
                    ..q.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(QuizExport {
            explainer: explainer.to_string(),
            seed,
            questions,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub user_id: String,
    pub question_id: String,
    pub chosen_option: String,
}

pub fn read_responses(path: &Path) -> Result<Vec<Response>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub hits: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Binomial standard error `sqrt(p(1−p)/n)`.
    pub std_error: f64,
}

impl SubsetAccuracy {
    fn new(hits: usize, total: usize) -> Self {
        let (accuracy, std_error) = if total == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let p = hits as f64 / total as f64;
            (p, (p * (1.0 - p) / total as f64).sqrt())
        };
        SubsetAccuracy {
            hits,
            total,
            accuracy,
            std_error,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub hits: usize,
    pub answered: usize,
}

impl Tally {
    /// `None` when nothing was answered.
    pub fn rate(&self) -> Option<f64> {
        (self.answered > 0).then(|| self.hits as f64 / self.answered as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserCounts {
    pub answered: usize,
    pub hits: usize,
    pub abstained: usize,
    pub correct_subset: Tally,
    pub incorrect_subset: Tally,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuizScore {
    pub correct_subset: SubsetAccuracy,
    pub incorrect_subset: SubsetAccuracy,
    pub per_user: BTreeMap<String, UserCounts>,
}

/// A response is a hit when it names the model's prediction.
pub fn score_responses(quiz: &[QuizQuestion], responses: &[Response]) -> Result<QuizScore> {
    let by_id: BTreeMap<&str, &QuizQuestion> =
        quiz.iter().map(|q| (q.question_id.as_str(), q)).collect();
    let mut bad = Vec::new();
    let mut tallies = [(0usize, 0usize); 2];
    let mut per_user: BTreeMap<String, UserCounts> = BTreeMap::new();
    for r in responses {
        let Some(q) = by_id.get(r.question_id.as_str()) else {
            bad.push(format!("unknown question {:?} (user {})", r.question_id, r.user_id));
            continue;
        };
        if !q.options.contains(&r.chosen_option) {
            bad.push(format!(
                "option {:?} is not offered by {} (user {})",
                r.chosen_option, r.question_id, r.user_id
            ));
            continue;
        }
        let hit = r.chosen_option == q.model_prediction;
        let slot = match q.outcome {
            Outcome::Correct => Some(0),
            Outcome::Incorrect => Some(1),
            Outcome::Mixed => None,
        };
        if let Some(s) = slot {
            tallies[s].0 += hit as usize;
            tallies[s].1 += 1;
        }
        let u = per_user.entry(r.user_id.clone()).or_default();
        u.answered += 1;
        u.hits += hit as usize;
        u.abstained += (r.chosen_option == CANT_TELL) as usize;
        let sub = match q.outcome {
            Outcome::Correct => Some(&mut u.correct_subset),
            Outcome::Incorrect => Some(&mut u.incorrect_subset),
            Outcome::Mixed => None,
        };
        if let Some(t) = sub {
            t.hits += hit as usize;
            t.answered += 1;
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation(bad.join("; ")));
    }
    Ok(QuizScore {
        correct_subset: SubsetAccuracy::new(tallies[0].0, tallies[0].1),
        incorrect_subset: SubsetAccuracy::new(tallies[1].0, tallies[1].1),
        per_user,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// Alternative: `a` tends to be smaller than `b`.
    Less,
    /// Alternative: `a` tends to be larger than `b`.
    Greater,
    TwoSided,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Pairs `(a_i, b_j)` with `a_i > b_j`, ties counting one half.
    pub u: f64,
    pub z: f64,
    pub p: f64,
}

/// Rank-sum U statistic with a tie-corrected normal approximation (no
/// continuity correction).
pub fn mann_whitney_u(a: &[f64], b: &[f64], tail: Tail) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("both samples must be non-empty".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Argument("samples contain NaN".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_a += mid_rank * pooled[i..=j].iter().filter(|p| p.1).count() as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let u = rank_sum_a - na * (na + 1.0) / 2.0;
    let mean = na * nb / 2.0;
    let var = if n > 1.0 {
        na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)))
    } else {
        0.0
    };
    let z = if var > 0.0 { (u - mean) / var.sqrt() } else { 0.0 };
    let normal = Normal::standard();
    let p = match tail {
        Tail::Greater => normal.sf(z),
        Tail::Less => normal.cdf(z),
        Tail::TwoSided => (2.0 * normal.sf(z.abs())).min(1.0),
    };
    Ok(MannWhitney { u, z, p })
}

/// Per-user hit rates on one outcome subset, `a` against `b`. Users who
/// answered nothing in the subset are left out.
pub fn compare_user_rates(
    a: &QuizScore,
    b: &QuizScore,
    subset: Outcome,
    tail: Tail,
) -> Result<MannWhitney> {
    let rates = |s: &QuizScore| -> Vec<f64> {
        s.per_user
            .values()
            .filter_map(|u| match subset {
                Outcome::Correct => u.correct_subset.rate(),
                Outcome::Incorrect => u.incorrect_subset.rate(),
                Outcome::Mixed => None,
            })
            .collect()
    };
    if subset == Outcome::Mixed {
        return Err(Error::Argument("quizzes have no mixed-outcome subset".into()));
    }
    mann_whitney_u(&rates(a), &rates(b), tail)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceSummary {
    pub ssim_ab: f64,
    pub mse_ab: f64,
    pub ssim_a_untrained: f64,
    pub ssim_b_untrained: f64,
    pub mse_a_untrained: f64,
    pub mse_b_untrained: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub sample_ids: Vec<String>,
    pub ssim_ab: Vec<f64>,
    pub mse_ab: Vec<f64>,
    pub ssim_a_untrained: Vec<f64>,
    pub ssim_b_untrained: Vec<f64>,
    pub mse_a_untrained: Vec<f64>,
    pub mse_b_untrained: Vec<f64>,
    pub summary: InvarianceSummary,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pixel_mse(x: &Array3<f64>, y: &Array3<f64>) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

/// Compares reconstructions of the same latents by two trained decoders,
/// with an untrained decoder as the reference point.
pub fn decoder_invariance(
    dec_a: &Decoder,
    dec_b: &Decoder,
    dec_untrained: &Decoder,
    sample_ids: &[String],
    latents: &[Array3<f64>],
    ssim: &SsimConfig,
) -> Result<InvarianceReport> {
    if latents.is_empty() || sample_ids.len() != latents.len() {
        return Err(Error::Argument("need one id per latent and at least one latent".into()));
    }
    let shape = dec_a.config().latent_shape;
    for (name, d) in [("B", dec_b), ("untrained", dec_untrained)] {
        if d.config().latent_shape != shape || d.config().output_size != dec_a.config().output_size {
            return Err(Error::Config(format!(
                "decoder {name} does not match decoder A's latent or output shape"
            )));
        }
    }
    if latents[0].shape() != shape.to_chw() {
        return Err(Error::Config(format!(
            "latents {:?} do not match the decoders' {:?}",
            latents[0].shape(),
            shape
        )));
    }
    let mut r = InvarianceReport {
        sample_ids: sample_ids.to_vec(),
        ssim_ab: Vec::new(),
        mse_ab: Vec::new(),
        ssim_a_untrained: Vec::new(),
        ssim_b_untrained: Vec::new(),
        mse_a_untrained: Vec::new(),
        mse_b_untrained: Vec::new(),
        summary: InvarianceSummary {
            ssim_ab: 0.0,
            mse_ab: 0.0,
            ssim_a_untrained: 0.0,
            ssim_b_untrained: 0.0,
            mse_a_untrained: 0.0,
            mse_b_untrained: 0.0,
        },
    };
    for chunk in latents.chunks(64) {
        let ya = dec_a.decode_raw(chunk)?;
        let yb = dec_b.decode_raw(chunk)?;
        let yu = dec_untrained.decode_raw(chunk)?;
        for k in 0..chunk.len() {
            r.ssim_ab.push(ssim_rgb(&ya[k], &yb[k], ssim)?);
            r.mse_ab.push(pixel_mse(&ya[k], &yb[k]));
            r.ssim_a_untrained.push(ssim_rgb(&ya[k], &yu[k], ssim)?);
            r.ssim_b_untrained.push(ssim_rgb(&yb[k], &yu[k], ssim)?);
            r.mse_a_untrained.push(pixel_mse(&ya[k], &yu[k]));
            r.mse_b_untrained.push(pixel_mse(&yb[k], &yu[k]));
        }
    }
    r.summary = InvarianceSummary {
        ssim_ab: mean(&r.ssim_ab),
        mse_ab: mean(&r.mse_ab),
        ssim_a_untrained: mean(&r.ssim_a_untrained),
        ssim_b_untrained: mean(&r.ssim_b_untrained),
        mse_a_untrained: mean(&r.mse_a_untrained),
        mse_b_untrained: mean(&r.mse_b_untrained),
    };
    Ok(r)
}
