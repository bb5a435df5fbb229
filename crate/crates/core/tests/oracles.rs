use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdr_core::*;

/// Naive repetition oracle over a char vector and a hash map.
fn repetition_oracle(text: &str, p: &RepetitionParams) -> bool {
    let chars: Vec<char> = text.chars().collect();
    if p.ngram < 2 || chars.len() < p.min_chars || chars.len() < p.ngram {
        return false;
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for w in chars.windows(p.ngram) {
        *counts.entry(w.iter().collect()).or_default() += 1;
    }
    counts.values().any(|&c| c >= p.min_repeats)
}

fn loo_oracle(rewards: &[f64]) -> Vec<f64> {
    let g = rewards.len();
    (0..g)
        .map(|i| {
            let others: f64 = (0..g).filter(|&j| j != i).map(|j| rewards[j]).sum();
            rewards[i] - others / (g - 1) as f64
        })
        .collect()
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let alphabet: &[char] = match rng.random_range(0..3) {
        0 => &['a', 'b'],
        1 => &['a', 'b', 'c', 'd', ' ', 'é'],
        _ => &['x', 'y', 'z', 'w', 'v', 'u', 't', 's', ' ', '.'],
    };
    let len = rng.random_range(0..160);
    let mut s: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
    if rng.random_bool(0.3) {
        let unit: String = s.chars().take(rng.random_range(1..8)).collect();
        for _ in 0..rng.random_range(0..12) {
            s.push_str(&unit);
        }
    }
    s
}

#[test]
fn repetition_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut flagged = 0;
    for _ in 0..10_000 {
        let text = random_text(&mut rng);
        let p = RepetitionParams {
            ngram: rng.random_range(2..10),
            min_chars: rng.random_range(0..120),
            min_repeats: rng.random_range(2..6),
        };
        let got = detect_repetition(&text, &p);
        assert_eq!(got, repetition_oracle(&text, &p), "{text:?} {p:?}");
        flagged += usize::from(got);
    }
    assert!(flagged > 500 && flagged < 9_500, "flagged {flagged}");
}

#[test]
fn repetition_defaults_on_degenerate_loop() {
    let p = RepetitionParams::default();
    let looping = "I will search the page again. ".repeat(60);
    assert!(detect_repetition(&looping, &p));
    let short = "I will search the page again. ".repeat(10);
    assert!(!detect_repetition(&short, &p));
}

#[test]
fn loo_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1_000 {
        let g = rng.random_range(2..33);
        let rewards: Vec<f64> = (0..g).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let got = loo_advantage(&rewards).unwrap();
        for (a, b) in got.iter().zip(loo_oracle(&rewards)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    assert!(loo_advantage(&[1.0]).is_err());
    assert!(loo_advantage(&[]).is_err());
}

#[test]
fn uniform_group_has_zero_advantage() {
    for r in [0.0, 1.0] {
        assert!(loo_advantage(&[r; 8]).unwrap().iter().all(|a| *a == 0.0));
    }
}

#[test]
fn cascade_terminates_after_three_errors() {
    let mut s = SafeguardState::default();
    assert_eq!(s.record(StepOutcome::ToolError), Verdict::Continue);
    assert_eq!(s.record(StepOutcome::FormatError), Verdict::Continue);
    assert_eq!(s.record(StepOutcome::Ok), Verdict::Continue);
    assert_eq!(s.record(StepOutcome::ToolError), Verdict::Continue);
    assert_eq!(s.record(StepOutcome::ToolError), Verdict::Continue);
    assert_eq!(s.record(StepOutcome::ToolError), Verdict::Terminate(Termination::ErrorCascade));
    let mut s = SafeguardState::default();
    assert_eq!(s.record(StepOutcome::Repetition), Verdict::Terminate(Termination::Repetition));
}
