// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use tunedlens::activations::ActivationSet;
use tunedlens::corpus::synth_multilingual_corpus;
use tunedlens::lens::Lens;
use tunedlens::metrics::{evaluate, EvalOptions, EvalSample, MetricsReport};
use tunedlens::model::{Model, ModelSpec};
use tunedlens::numerics::{entropy, kl_divergence, softmax};
use tunedlens::report::{embedded_values, export_report, render_heatmap, report_heatmaps, ExportIndex, INDEX_FILE};
use tunedlens::sha256_hex;
use tunedlens::train::{train_lens, TrainConfig};

fn small_spec() -> ModelSpec {
    ModelSpec {
        d_model: 12,
        n_layers: 3,
        n_heads: 3,
        vocab_size: 30,
        max_seq: 10,
        final_norm: true,
        seed: 4,
    }
}

#[test]
fn capture_dump_train_checkpoint_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(small_spec()).unwrap();
    let langs = vec!["bn".to_owned(), "hi".to_owned()];
    let set = synth_multilingual_corpus(&model, &langs, 16, 8, 2).unwrap();

    let dump = dir.path().join("acts.bin");
    set.write(&dump).unwrap();
    let set = ActivationSet::read(&dump).unwrap();

    let cfg = TrainConfig {
        steps: 80,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let (lens, _) = train_lens(&set, model.head(), &cfg).unwrap();
    let ckpt = dir.path().join("lens.bin");
    lens.save(&ckpt).unwrap();
    let lens = Lens::load_for(&ckpt, model.spec()).unwrap();

    let samples = EvalSample::all(&set);
    let opts = EvalOptions::default();
    let mut report = MetricsReport::new(model.spec(), opts);
    report
        .lenses
        .push(evaluate("logit", &Lens::logit(small_spec()), model.head(), &set, &samples, opts).unwrap());
    report
        .lenses
        .push(evaluate("tuned", &lens, model.head(), &set, &samples, opts).unwrap());
    report.add_deltas_against_first().unwrap();

    // training on these states helps the earliest layer for every language
    for cells in &report.deltas[0].languages {
        assert!(cells.cells[0].delta.unwrap() > 0.0, "{}", cells.language);
        assert_eq!(cells.cells[2].delta, Some(0.0));
    }

    let out = dir.path().join("export");
    let index = export_report(&report, &out).unwrap();
    let on_disk: ExportIndex = serde_json::from_slice(&std::fs::read(out.join(INDEX_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, index);
    for entry in &index.files {
        let bytes = std::fs::read(out.join(&entry.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), entry.sha256);
        assert_eq!(bytes.len() as u64, entry.bytes);
    }

    // every exported map carries its grid exactly
    for (_, spec) in report_heatmaps(&report) {
        assert_eq!(embedded_values(&render_heatmap(&spec).unwrap()).unwrap(), spec.values);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_is_a_distribution_and_bounds_hold(z in prop::collection::vec(-1e4f64..1e4, 1..80)) {
        let p = softmax(&z).unwrap();
        let sum: f64 = p.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.probs().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (z.len() as f64).ln() + 1e-9);
        prop_assert!(kl_divergence(&p, &z).unwrap().abs() < 1e-9);
    }

    #[test]
    fn kl_is_non_negative(
        pair in (1usize..40).prop_flat_map(|n| (
            prop::collection::vec(-30.0f64..30.0, n),
            prop::collection::vec(-30.0f64..30.0, n),
        ))
    ) {
        let (zp, zq) = pair;
        let p = softmax(&zp).unwrap();
        prop_assert!(kl_divergence(&p, &zq).unwrap() >= 0.0);
    }
}
