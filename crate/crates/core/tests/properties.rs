use std::collections::{BTreeMap, BTreeSet};

use image::{DynamicImage, RgbImage};
use ndarray::{Array2, Array3};
use perceptvis::compose::compose_values;
use perceptvis::data::{classify_outcome, preprocess_image, Outcome, OutcomePartition, SampleOutcome};
use perceptvis::decoder::build_decoder;
use perceptvis::desk::{desk_decoder_config, desk_descriptor, generate};
use perceptvis::digest::Digest;
use perceptvis::evaluation::{
    build_quiz, decoder_invariance, mann_whitney_u, score_responses, QuizCandidate, QuizConfig, QuizExport,
    Response, Tail, CANT_TELL, QUIZ_OPTIONS,
};
use perceptvis::losses::{LossWeights, SsimConfig};
use perceptvis::model::ModelBundle;
use perceptvis::render::to_rgb;
use perceptvis::tensor::ImageSize;
use perceptvis::trainer::{evaluate_reconstruction, Reconstruct, TrainConfig, Trainer, TrainingSet};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CLASSES: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

fn unit_grid(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, h * w)
}

proptest! {
    #[test]
    fn compose_is_exact_and_bounded(
        (h, w, m, y) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), unit_grid(h, w), prop::collection::vec(0.0f64..=1.0, 3 * h * w))
        })
    ) {
        let m = Array2::from_shape_vec((h, w), m).unwrap();
        let y = Array3::from_shape_vec((3, h, w), y).unwrap();
        let p = compose_values(&m, &y).unwrap();
        for ((c, i, j), v) in p.indexed_iter() {
            let expected = (1.0 - m[[i, j]]) + m[[i, j]] * y[[c, i, j]];
            prop_assert_eq!(*v, expected);
            prop_assert!((0.0..=1.0).contains(v));
        }
        let ones = compose_values(&Array2::ones((h, w)), &y).unwrap();
        prop_assert_eq!(ones, y.clone());
        let zeros = compose_values(&Array2::zeros((h, w)), &y).unwrap();
        prop_assert!(zeros.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn u_equals_pair_count(
        a in prop::collection::vec(0u8..6, 1..12),
        b in prop::collection::vec(0u8..6, 1..12),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let pairs: f64 = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }))
            .sum();
        let g = mann_whitney_u(&a, &b, Tail::Greater).unwrap();
        prop_assert_eq!(g.u, pairs);
        prop_assert!((0.0..=1.0).contains(&g.p));
        let l = mann_whitney_u(&b, &a, Tail::Less).unwrap();
        prop_assert!((g.p - l.p).abs() < 1e-12);
        let two = mann_whitney_u(&a, &b, Tail::TwoSided).unwrap();
        let swapped = mann_whitney_u(&b, &a, Tail::TwoSided).unwrap();
        prop_assert!((two.p - swapped.p).abs() < 1e-12);
    }

    #[test]
    fn identical_groups_show_no_difference(
        a in prop::collection::vec(0u8..4, 5..15),
        seed in any::<u64>(),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let mut b = a.clone();
        b.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let r = mann_whitney_u(&a, &b, Tail::TwoSided).unwrap();
        prop_assert_eq!(r.u, (a.len() * b.len()) as f64 / 2.0);
        prop_assert!(r.p > 0.9, "p = {}", r.p);
    }

    #[test]
    fn outcome_partition_is_exhaustive(
        sets in prop::collection::vec(
            (prop::collection::btree_set(0usize..5, 0..4), prop::collection::btree_set(0usize..5, 0..4)),
            0..40,
        )
    ) {
        let outcomes: Vec<SampleOutcome> = sets
            .iter()
            .enumerate()
            .map(|(i, (targets, pred))| SampleOutcome {
                sample_id: format!("s{i:03}"),
                top_class: 0,
                prediction_set: pred.clone(),
                posteriors: vec![0.0; 5],
                outcome: classify_outcome(targets, pred),
            })
            .collect();
        let p = OutcomePartition::from_outcomes(&outcomes, 0.5);
        prop_assert_eq!(p.len(), outcomes.len());
        let mut seen = BTreeSet::new();
        for id in p.correct.iter().chain(&p.incorrect).chain(&p.mixed) {
            prop_assert!(seen.insert(id.clone()), "{} listed twice", id);
        }
        for ((targets, pred), o) in sets.iter().zip(&outcomes) {
            let expected = if targets == pred {
                Outcome::Correct
            } else if targets.intersection(pred).next().is_none() {
                Outcome::Incorrect
            } else {
                Outcome::Mixed
            };
            prop_assert_eq!(o.outcome, expected);
            prop_assert_eq!(p.outcome_of(&o.sample_id), Some(expected));
        }
    }

    #[test]
    fn quiz_is_seeded_and_explainer_free(
        seed in any::<u64>(),
        n_correct in 0usize..6,
        n_incorrect in 0usize..6,
    ) {
        let (partition, candidates) = pool(12, 12);
        let names: Vec<String> = CLASSES.iter().map(|s| s.to_string()).collect();
        let cfg = QuizConfig { n_correct, n_incorrect, seed };
        let q1 = build_quiz(&partition, &candidates, &names, &cfg).unwrap();
        let q2 = build_quiz(&partition, &candidates, &names, &cfg).unwrap();
        prop_assert_eq!(&q1, &q2);
        prop_assert_eq!(q1.len(), n_correct + n_incorrect);
        prop_assert_eq!(q1.iter().filter(|q| q.outcome == Outcome::Correct).count(), n_correct);
        for q in &q1 {
            prop_assert_eq!(q.options.len(), QUIZ_OPTIONS);
            prop_assert_eq!(q.option_set().len(), QUIZ_OPTIONS);
            prop_assert!(q.options.contains(&q.model_prediction));
            prop_assert!(q.options.iter().any(|o| o == CANT_TELL));
        }
        let panels = |tag: &str| -> BTreeMap<String, Digest> {
            q1.iter().map(|q| (q.sample_id.clone(), Digest::of_bytes(format!("{tag}{}", q.sample_id).as_bytes()))).collect()
        };
        let a = QuizExport::for_explainer(&q1, "pv", seed, &panels("pv")).unwrap();
        let b = QuizExport::for_explainer(&q1, "grad-cam", seed, &panels("gc")).unwrap();
        for ((x, y), q) in a.questions.iter().zip(&b.questions).zip(&q1) {
            prop_assert_eq!(&x.options, &q.options);
            prop_assert_eq!(&y.options, &q.options);
            prop_assert_eq!(&x.question_id, &y.question_id);
            prop_assert_ne!(x.panel_digest, y.panel_digest);
        }
    }

    #[test]
    fn scoring_ignores_response_order(seed in any::<u64>(), picks in prop::collection::vec(0usize..5, 24)) {
        let (partition, candidates) = pool(8, 8);
        let names: Vec<String> = CLASSES.iter().map(|s| s.to_string()).collect();
        let quiz = build_quiz(&partition, &candidates, &names, &QuizConfig { n_correct: 4, n_incorrect: 4, seed }).unwrap();
        let mut responses: Vec<Response> = picks
            .iter()
            .enumerate()
            .map(|(k, &pick)| {
                let q = &quiz[k % quiz.len()];
                Response {
                    user_id: format!("u{}", k / quiz.len()),
                    question_id: q.question_id.clone(),
                    chosen_option: q.options[pick].clone(),
                }
            })
            .collect();
        let before = score_responses(&quiz, &responses).unwrap();
        responses.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        prop_assert_eq!(score_responses(&quiz, &responses).unwrap(), before);
    }

    #[test]
    fn preprocessing_is_idempotent(side in 2usize..12, w in 2usize..20, h in 2usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = RgbImage::from_fn(w as u32, h as u32, |_, _| image::Rgb(rand::Rng::random(&mut rng)));
        let size = ImageSize::square(side);
        let once = preprocess_image(&DynamicImage::ImageRgb8(img), size).unwrap();
        let twice = preprocess_image(&DynamicImage::ImageRgb8(to_rgb(once.values())), size).unwrap();
        prop_assert_eq!(once.values(), twice.values());
    }
}

/// `n_correct` correctly and `n_incorrect` incorrectly classified samples
/// with one to three truth labels each.
fn pool(n_correct: usize, n_incorrect: usize) -> (OutcomePartition, BTreeMap<String, QuizCandidate>) {
    let mut partition = OutcomePartition {
        threshold: 0.5,
        ..Default::default()
    };
    let mut candidates = BTreeMap::new();
    for k in 0..n_correct + n_incorrect {
        let id = format!("s{k:03}");
        let pred = CLASSES[k % CLASSES.len()].to_string();
        let truth: Vec<String> = if k < n_correct {
            partition.correct.push(id.clone());
            vec![pred.clone()]
        } else {
            partition.incorrect.push(id.clone());
            (1..=1 + k % 3).map(|d| CLASSES[(k + d) % CLASSES.len()].to_string()).collect()
        };
        candidates.insert(
            id.clone(),
            QuizCandidate {
                sample_id: id,
                model_prediction: pred,
                truth_labels: truth,
            },
        );
    }
    (partition, candidates)
}

#[test]
fn perfect_responders_score_full_marks() {
    let (partition, candidates) = pool(10, 10);
    let names: Vec<String> = CLASSES.iter().map(|s| s.to_string()).collect();
    let quiz = build_quiz(&partition, &candidates, &names, &QuizConfig { n_correct: 6, n_incorrect: 5, seed: 2 }).unwrap();
    let responses: Vec<Response> = ["ann", "bo"]
        .iter()
        .flat_map(|u| {
            quiz.iter().map(move |q| Response {
                user_id: u.to_string(),
                question_id: q.question_id.clone(),
                chosen_option: q.model_prediction.clone(),
            })
        })
        .collect();
    let s = score_responses(&quiz, &responses).unwrap();
    assert_eq!((s.correct_subset.hits, s.correct_subset.total), (12, 12));
    assert_eq!((s.incorrect_subset.hits, s.incorrect_subset.total), (10, 10));
    assert_eq!(s.correct_subset.accuracy, 1.0);
    assert_eq!(s.correct_subset.std_error, 0.0);
    for u in s.per_user.values() {
        assert_eq!(u.correct_subset.rate(), Some(1.0));
        assert_eq!(u.incorrect_subset.rate(), Some(1.0));
        assert_eq!(u.abstained, 0);
    }
}

fn desk_set(n: usize, seed: u64) -> (ModelBundle, TrainingSet) {
    let desc = desk_descriptor();
    let bundle = ModelBundle::from_network(&desc, desc.init_network(seed).unwrap()).unwrap();
    let samples = generate(n, seed);
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let enc = bundle.truncate_encoder();
    let set = TrainingSet::encode(&enc, samples.iter().map(|s| s.id.clone()).collect(), &images).unwrap();
    (bundle, set)
}

#[test]
fn same_decoder_is_perfectly_invariant() {
    let (_, set) = desk_set(6, 3);
    let dec = build_decoder(&desk_decoder_config(), 1).unwrap();
    let untrained = build_decoder(&desk_decoder_config(), 2).unwrap();
    let r = decoder_invariance(&dec, &dec.clone(), &untrained, &set.ids, &set.latents, &SsimConfig::default()).unwrap();
    assert!(r.ssim_ab.iter().all(|&s| s == 1.0));
    assert!(r.mse_ab.iter().all(|&m| m == 0.0));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(r.summary.ssim_a_untrained, mean(&r.ssim_a_untrained));
    assert_eq!(r.summary.mse_b_untrained, mean(&r.mse_b_untrained));
    assert_eq!(r.ssim_a_untrained, r.ssim_b_untrained);
}

struct Identity;

impl Reconstruct for Identity {
    fn reconstruct(&self, images: &[Array3<f64>], _latents: &[Array3<f64>]) -> perceptvis::Result<Vec<Array3<f64>>> {
        Ok(images.to_vec())
    }
}

#[test]
fn perfect_reconstruction_scores_floor() {
    let (bundle, set) = desk_set(5, 4);
    let r = evaluate_reconstruction(
        &bundle.truncate_encoder(),
        &Identity,
        &set,
        &LossWeights::REFERENCE,
        &SsimConfig::default(),
    )
    .unwrap();
    assert_eq!(r.mse, 0.0);
    assert!((r.ssim_loss + 1.0).abs() < 1e-12, "{}", r.ssim_loss);
    assert_eq!(r.dsim, 0.0);
}

#[test]
fn training_runs_are_reproducible() {
    let (bundle, set) = desk_set(20, 5);
    let enc = bundle.truncate_encoder();
    let run = || {
        let mut cfg = TrainConfig::new(2, 7);
        cfg.batch_size = 8;
        cfg.learning_rate = 1e-3;
        let dec = build_decoder(&desk_decoder_config(), 9).unwrap();
        Trainer::new(&enc, cfg).unwrap().init_seed(9).run(dec, &set).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.decoder.digest(), b.decoder.digest());
    assert_eq!(a.record.history, b.record.history);
    assert_ne!(a.decoder.digest(), build_decoder(&desk_decoder_config(), 9).unwrap().digest());
}
