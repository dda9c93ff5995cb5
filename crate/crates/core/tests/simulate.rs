use std::time::Instant;

use infill_core::analytics::{paired_permutation_test, Source};
use infill_core::prompts::Difficulty;
use infill_core::simulate::*;

#[test]
fn full_scale_counts() {
    let t = Instant::now();
    let cfg = SimulationConfig::default();
    let (out, report) = simulate(&cfg, &HashEmbedder::default(), 11).unwrap();
    eprintln!("simulate + report: {:?}", t.elapsed());
    assert_eq!(out.export.blocks.len() + out.export.dropped.len(), 115);
    assert_eq!(out.export.blocks.len(), 109);
    let easy = out.export.blocks.iter().filter(|b| b.difficulty == Difficulty::Easy).count();
    assert_eq!((easy, 109 - easy), (53, 56));
    assert_eq!(report.n_groups, 872);
    assert_eq!(out.responses.len(), 1_744);
    assert_eq!(report.preferences_by_difficulty[0].distribution.as_ref().unwrap().total, 848);
    assert_eq!(report.preferences_by_difficulty[1].distribution.as_ref().unwrap().total, 896);
    assert_eq!(out.copied_posts, 0);
}

#[test]
fn deterministic_given_seed() {
    let cfg = SimulationConfig { n_authors: 4, drop_easy: 0, drop_hard: 0, ..Default::default() };
    assert_eq!(simulate_experiment(&cfg, 3).unwrap(), simulate_experiment(&cfg, 3).unwrap());
}

#[test]
fn full_influence_raises_post_similarity() {
    let cfg = SimulationConfig {
        model: SyntheticAuthorModel { influence_strength: 1.0, ..Default::default() },
        ..Default::default()
    };
    let (out, report) = simulate(&cfg, &HashEmbedder::default(), 2).unwrap();
    assert_eq!(out.copied_posts, 230);
    let all = &report.similarity.rows[0];
    assert!(all.mean_post.unwrap() > all.mean_pre.unwrap());
}

#[test]
fn shifted_choices_match_calibrated_gap() {
    let base = SyntheticAuthorModel::default();
    let model = SyntheticAuthorModel { post_shift: calibrate_post_shift(&base, 0.10, 0).unwrap(), ..base };
    let choices = simulate_choices(&model, 200_000, 9);
    let rate = |s: Source| choices.iter().filter(|&&c| c == s).count() as f64 / choices.len() as f64;
    // Binomial sd of each rate is about 0.0011 here.
    assert!((rate(Source::Post) - 0.4).abs() < 0.005);
    assert!((rate(Source::Pre) - 0.3).abs() < 0.005);
}

#[test]
fn null_choices_are_calibrated() {
    let model = SyntheticAuthorModel { sd: 1.0, ..Default::default() };
    assert!(model.is_null());
    let trials = 200;
    let mut rejections = 0;
    for t in 0..trials {
        let choices = simulate_choices(&model, 1_744, t);
        let ind = |s: Source| -> Vec<f64> { choices.iter().map(|&c| f64::from(u8::from(c == s))).collect() };
        let r = paired_permutation_test(&ind(Source::Pre), &ind(Source::Post), 1_000, t).unwrap();
        rejections += usize::from(r.p_value < 0.05);
    }
    let rate = rejections as f64 / trials as f64;
    // Binomial(200, 0.05) puts 99% of its mass within [0.015, 0.09].
    assert!((0.015..=0.09).contains(&rate), "rejection rate {rate}");
}
