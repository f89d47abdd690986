use polyadapt_web::{bleu, moe_routing, parameter_accounting};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn accounting_matches_known_counts() {
    let enc = parse(parameter_accounting(768, 12, 0, 128, 6));
    assert_eq!(enc["adapter_params"], 4_740_096);
    let encdec = parse(parameter_accounting(768, 12, 12, 128, 6));
    assert_eq!(encdec["adapter_params"], 9_480_192);
    let ratio = enc["ratio_vs_copies"].as_f64().unwrap();
    assert!((0.0055..0.0070).contains(&ratio), "{ratio}");
}

#[test]
fn accounting_reports_bad_shapes() {
    assert!(parse(parameter_accounting(768, 12, 0, 0, 6))["error"].is_string());
}

#[test]
fn bleu_identity_and_partial_match() {
    assert_eq!(parse(bleu("return the sum of a", "return the sum of a"))["bleu"], 1.0);
    let b = parse(bleu("the cat sat", "the cat sat down"))["bleu"].as_f64().unwrap();
    assert!((b - (-1.0f64 / 3.0).exp()).abs() < 1e-12);
}

#[test]
fn routing_keeps_exactly_top_k() {
    let r = parse(moe_routing(5, 8, 4, 2, 3));
    for t in r["tokens"].as_array().unwrap() {
        let w: Vec<f64> = t["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(w.iter().filter(|&&x| x > 0.0).count(), 2);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(parse(moe_routing(5, 8, 4, 5, 3))["error"].is_string());
}
