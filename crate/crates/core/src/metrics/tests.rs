use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Brute-force BLEU: counts n-grams with nested loops, no hashing.
fn oracle_bleu(c: &[&str], r: &[&str]) -> f64 {
    let occurrences = |seq: &[&str], g: &[&str]| (0..=seq.len().saturating_sub(g.len())).filter(|&i| i + g.len() <= seq.len() && &seq[i..i + g.len()] == g).count();
    let mut logp = 0.0;
    for n in 1..=4usize {
        let total = if c.len() >= n { c.len() - n + 1 } else { 0 };
        let mut matched = 0;
        let mut seen: Vec<&[&str]> = Vec::new();
        for i in 0..total {
            let g = &c[i..i + n];
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            matched += occurrences(c, g).min(occurrences(r, g));
        }
        let p = if n == 1 { matched as f64 / total as f64 } else { (matched as f64 + 1.0) / (total as f64 + 1.0) };
        logp += p.ln() / 4.0;
    }
    let bp = if c.len() < r.len() { (1.0 - r.len() as f64 / c.len() as f64).exp() } else { 1.0 };
    bp * logp.exp()
}

#[test]
fn bleu_identity_is_one() {
    let s = w("returns the sum of the list");
    assert_eq!(smoothed_bleu4(&s, &s), 1.0);
}

#[test]
fn bleu_smoothing_keeps_zero_four_gram_overlap_positive() {
    let b = smoothed_bleu4(&w("a b x c d y"), &w("a b c d e f"));
    assert!(b > 0.0 && b < 1.0);
}

#[test]
fn bleu_matches_hand_oracle() {
    let (c, r) = (["the", "cat", "sat"], ["the", "cat", "sat", "down"]);
    let got = smoothed_bleu4(&c, &r);
    assert!((got - oracle_bleu(&c, &r)).abs() < 1e-9);
    assert!((got - (-1.0f64 / 3.0).exp()).abs() < 1e-9);
}

#[test]
fn bleu_empty_candidate_is_zero() {
    assert_eq!(smoothed_bleu4::<String>(&[], &w("x")), 0.0);
}

proptest! {
    #[test]
    fn bleu_agrees_with_oracle_and_is_bounded(c in prop::collection::vec(0u8..5, 1..12), r in prop::collection::vec(0u8..5, 1..12)) {
        let names = ["a", "b", "c", "d", "e"];
        let cs: Vec<&str> = c.iter().map(|&i| names[i as usize]).collect();
        let rs: Vec<&str> = r.iter().map(|&i| names[i as usize]).collect();
        let b = smoothed_bleu4(&cs, &rs);
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((b - oracle_bleu(&cs, &rs)).abs() < 1e-12);
        // bijective relabeling
        let renamed = |v: &[u8]| v.iter().map(|&i| names[(i as usize + 2) % 5]).collect::<Vec<_>>();
        prop_assert_eq!(b, smoothed_bleu4(&renamed(&c), &renamed(&r)));
    }
}

#[test]
fn report_overall_is_mean_of_languages() {
    let items = vec![
        ("go".to_string(), w("a b c d"), w("a b c d")),
        ("go".to_string(), w("x"), w("a b c d")),
        ("ruby".to_string(), w("a b c d"), w("a b c d")),
    ];
    let r = bleu_report(&items).unwrap();
    let go = r.scores.language("go").unwrap();
    assert!((r.scores.overall - (go + 1.0) / 2.0).abs() < 1e-15);
    let mut shuffled = items.clone();
    shuffled.reverse();
    let r2 = bleu_report(&shuffled).unwrap();
    assert_eq!(r.scores.per_language, r2.scores.per_language);
    assert_eq!(r.scores.overall, r2.scores.overall);
    assert_eq!(r.variant, BLEU_VARIANT);
}

#[test]
fn mrr_examples() {
    let langs = vec!["go".to_string(); 2];
    let r = mrr(&langs, &[vec![1, 2, 3], vec![4, 5, 6]], &[1, 4]).unwrap();
    assert_eq!(r.scores.overall, 1.0);
    let r = mrr(&langs, &[vec![1, 2, 3], vec![4, 5, 6]], &[1, 5]).unwrap();
    assert_eq!(r.scores.overall, 0.75);
    assert!(mrr(&langs[..1], &[vec![1, 2]], &[9]).is_err());
}

#[test]
fn mrr_random_ranking_matches_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 1000;
    let langs = vec!["go".to_string(); n];
    let ranked: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut v: Vec<usize> = (0..10).collect();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let r = mrr(&langs, &ranked, &vec![0; n]).unwrap();
    let expect: f64 = (1..=10).map(|k| 1.0 / k as f64).sum::<f64>() / 10.0;
    assert!((r.scores.overall - expect).abs() < 0.02, "{} vs {expect}", r.scores.overall);
    assert!(r.scores.per_example.iter().all(|x| *x > 0.0 && *x <= 1.0));
}

#[test]
fn accuracy_bounds() {
    assert_eq!(accuracy(&[1, 2, 3], &[1, 0, 3]), 2.0 / 3.0);
    assert_eq!(accuracy(&[], &[]), 0.0);
}

#[test]
fn ttest_contracts() {
    assert!(paired_one_sided_ttest(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    assert!(paired_one_sided_ttest(&[1.0], &[0.0]).is_err());
    assert_eq!(paired_one_sided_ttest(&[2.0, 0.0], &[1.0, 1.0]).unwrap(), 0.5);
    assert_eq!(paired_one_sided_ttest(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(paired_one_sided_ttest(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
}

#[test]
fn ttest_matches_closed_form_two_df() {
    // With 2 degrees of freedom the t CDF has the closed form
    // F(t) = 1/2 + t / (2 sqrt(2 + t^2)).
    let p = paired_one_sided_ttest(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
    let t = 2.0 / (1.0 / 3f64.sqrt());
    let expect = 0.5 - t / (2.0 * (2.0 + t * t).sqrt());
    assert!((p - expect).abs() < 1e-6, "{p} vs {expect}");
    assert!((p - 0.037090).abs() < 1e-4);
}

#[test]
fn table_renders_languages_then_overall() {
    let mut t = Table::per_language("BLEU", "Method", &["ruby".into(), "go".into()]);
    t.push("adapter", vec![1.0, 2.0, 1.5]);
    let md = t.to_markdown(2);
    assert!(md.contains("| Method | ruby | go | Overall |"));
    assert!(md.contains("| adapter | 1.00 | 2.00 | 1.50 |"));
    assert!(t.to_csv().starts_with("Method,ruby,go,Overall\nadapter,1,2,1.5"));
}
