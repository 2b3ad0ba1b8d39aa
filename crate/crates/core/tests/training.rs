use fundus_guide::autodiff::Graph;
use fundus_guide::data::{generate_corpus, AnnotatorModel, AugmentPolicy, ConsensusRule, CorpusSpec, Dataset};
use fundus_guide::model::{GuidedNet, Mode, ModelConfig};
use fundus_guide::objectives::auroc;
use fundus_guide::train::{
    assemble_batch, build_objective, cue_masks, score_dataset, train, train_from, TrainConfig,
};

fn dataset(count: usize, seed: u64, positive_fraction: f64) -> Dataset {
    let cases = generate_corpus(&CorpusSpec {
        count,
        seed,
        positive_fraction,
        ..Default::default()
    })
    .unwrap();
    Dataset::from_cases(&cases, "hemorrhage", ConsensusRule::default()).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 16,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let ds = dataset(48, 1, 0.5);
    let (d, v) = ds.split(0.75, 0).unwrap();
    let net = GuidedNet::build(ModelConfig::toy(), 3).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..quick(1)
    };
    let out = train_from(net.clone(), &cfg, &d, &v).unwrap();
    let trainable = |n: &GuidedNet| -> Vec<u64> {
        n.params()
            .trainable()
            .flat_map(|id| n.params().value(id).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    assert_eq!(trainable(&out.net), trainable(&net));
}

#[test]
fn lambda_zero_removes_the_guidance_path_exactly() {
    let ds = dataset(16, 2, 0.5);
    let net = GuidedNet::build(ModelConfig::toy(), 4).unwrap();
    let feat = net.feature_size();
    let cues = cue_masks(&ds, feat).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let batch = assemble_batch(&ds, &cues, &idx, feat, false, None).unwrap();

    let grads = |use_total: bool| {
        let mut g = Graph::new();
        let obj = build_objective(&mut g, &net, net.params(), &batch, 0.0, 1e-3, Mode::Train).unwrap();
        let root = if use_total { obj.total } else { obj.classification };
        assert_eq!(g.value(obj.total).item().unwrap(), g.value(obj.classification).item().unwrap());
        assert!(g.value(obj.guidance).item().unwrap() < 0.0);
        let gr = g.backward(root).unwrap();
        gr.params()
            .flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(grads(true), grads(false));
}

#[test]
fn random_weights_score_at_chance() {
    let ds = dataset(1000, 3, 0.5);
    let net = GuidedNet::build(ModelConfig::toy(), 5).unwrap();
    let scored = score_dataset(&net, &ds, 100).unwrap();
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label).collect();
    let a = auroc(&scores, &labels).unwrap();
    assert!((0.44..=0.56).contains(&a), "random-weight AUROC {a}");
}

#[test]
fn separable_set_is_learned_within_thirty_epochs() {
    // perfect annotators: labels follow the rendered lesions exactly
    let cases = generate_corpus(&CorpusSpec {
        count: 220,
        seed: 4,
        annotators: AnnotatorModel {
            sensitivity: 1.0,
            false_mark: 0.0,
            extra_region: 0.0,
        },
        ..Default::default()
    })
    .unwrap();
    let ds = Dataset::from_cases(&cases, "hemorrhage", ConsensusRule::default()).unwrap();
    let (d, v) = ds.split(200.0 / 220.0, 0).unwrap();
    let cfg = TrainConfig {
        max_epochs: 30,
        batch_size: 8,
        augment: AugmentPolicy::None,
        ..Default::default()
    };
    let out = train(&ModelConfig::toy(), &cfg, &d, &v).unwrap();
    let best = out
        .history
        .epochs
        .iter()
        .map(|e| e.train_classification)
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.1, "best derivation classification loss {best}");
}

#[test]
fn same_seed_same_run() {
    let ds = dataset(64, 5, 0.5);
    let (d, v) = ds.split(0.75, 1).unwrap();
    let a = train(&ModelConfig::toy(), &quick(2), &d, &v).unwrap();
    let b = train(&ModelConfig::toy(), &quick(2), &d, &v).unwrap();
    assert_eq!(a.net.to_checkpoint_bytes(), b.net.to_checkpoint_bytes());
    assert_eq!(a.history.without_timing(), b.history.without_timing());
    let c = train(
        &ModelConfig::toy(),
        &TrainConfig {
            seed: 1,
            ..quick(2)
        },
        &d,
        &v,
    )
    .unwrap();
    assert_ne!(a.net.to_checkpoint_bytes(), c.net.to_checkpoint_bytes());
}

#[test]
fn stalled_validation_stops_early() {
    let ds = dataset(32, 6, 0.5);
    let (d, v) = ds.split(0.75, 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        early_stop_patience: 2,
        plateau_patience: 1,
        ..quick(20)
    };
    let out = train(&ModelConfig::toy(), &cfg, &d, &v).unwrap();
    // running batch-norm statistics still move, so the best epoch need not be the first
    assert!(out.history.stopped_early);
    assert_eq!(out.history.epochs.len(), out.history.best_epoch + 1 + 2);
}

#[test]
fn wrong_input_size_is_rejected() {
    let ds = dataset(16, 7, 0.5);
    let (d, v) = ds.split(0.5, 0).unwrap();
    let model = ModelConfig {
        input_size: 32,
        stage_count: 1,
        downscale_factor: 2,
        ..ModelConfig::toy()
    };
    let err = train(&model, &quick(1), &d, &v).unwrap_err().to_string();
    assert!(err.contains("64x64"), "{err}");
}
