//! End-to-end use of the public API: corpus, base checkpoint, adapter-only
//! checkpoint, and inference on a restored model.

use indexmap::IndexMap;
use polyadapt::adapter::{AdapterBank, AdapterConfig};
use polyadapt::checkpoint::Checkpoint;
use polyadapt::corpus::minilang::builtin_languages;
use polyadapt::corpus::{generate_synthetic, split, Vocabulary};
use polyadapt::model::{ModelConfig, TransformerModel};
use polyadapt::tasks::{generate_summary, Strategy, Task};
use polyadapt::training::{finetune, DataScope, FinetuneConfig, Regime, Tuning};

fn setup() -> (Vocabulary, polyadapt::corpus::Splits, TransformerModel) {
    let specs = &builtin_languages()[..2];
    let corpus = generate_synthetic(specs, 30, 1.0, 1).unwrap();
    let splits = split(&corpus, (0.8, 0.1, 0.1), 1).unwrap();
    let names: Vec<String> = specs.iter().map(|s| s.name.to_string()).collect();
    let vocab = Vocabulary::build(&splits.train, &names, true, 1);
    let cfg = ModelConfig {
        d_model: 16,
        n_layers_encoder: 1,
        n_layers_decoder: 1,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::desk(vocab.len())
    };
    (vocab, splits, TransformerModel::new(cfg, 1).unwrap())
}

#[test]
fn adapters_ship_separately_from_the_base() {
    let (vocab, splits, base) = setup();
    let dir = tempfile::tempdir().unwrap();
    let base_path = dir.path().join("base.ckpt");
    base.save(&base_path, &IndexMap::new()).unwrap();

    let cfg = FinetuneConfig {
        epochs: 1,
        batch_size: 4,
        max_steps: Some(3),
        eval_per_language: Some(2),
        max_decode_len: 5,
        adapter: AdapterConfig::with_dim(4),
        ..FinetuneConfig::default()
    };
    let langs = vec!["ruby".to_string(), "javascript".to_string()];
    let regime = Regime::for_task(Task::Summarization, Tuning::Adapter, DataScope::Multilingual(langs), 0);
    let (tuned, _) = finetune(&base, &vocab, &splits, &regime, Task::Summarization, &cfg).unwrap();

    let bank = tuned.adapters().unwrap();
    let adapter_path = dir.path().join("adapters.ckpt");
    bank.to_checkpoint(tuned.config(), &tuned.base_hash()).save(&adapter_path).unwrap();

    let (mut restored, _) = TransformerModel::load(&base_path).unwrap();
    assert_eq!(restored.base_hash(), tuned.base_hash());
    let ck = Checkpoint::load(&adapter_path).unwrap();
    let bank = AdapterBank::from_checkpoint(&ck, restored.config(), Some(&restored.base_hash())).unwrap();
    restored.attach(bank).unwrap();

    let code = vocab.encode(&splits.test[0].code);
    for strategy in [Strategy::Greedy, Strategy::Beam(3)] {
        assert_eq!(
            generate_summary(&restored, &code, 5, strategy).unwrap(),
            generate_summary(&tuned, &code, 5, strategy).unwrap()
        );
    }
}

#[test]
fn adapter_checkpoint_rejects_a_different_base() {
    let (_, _, mut base) = setup();
    base.inject(AdapterConfig::with_dim(4), 0).unwrap();
    let ck = base.adapters().unwrap().to_checkpoint(base.config(), &base.base_hash());
    assert!(AdapterBank::from_checkpoint(&ck, base.config(), Some("not-the-base")).is_err());
}
