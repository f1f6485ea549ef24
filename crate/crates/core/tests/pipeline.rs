use conntext::data::{generate_synthetic, prepare_inputs, SubjectRecord, SyntheticConfig};
use conntext::eval::{interpret, InterpretConfig, Scored};
use conntext::model::ModelConfig;
use conntext::objective::{ClassWeights, LossFlags};
use conntext::train::{load_checkpoint, save_checkpoint, train_with_split, TrainConfig};
use conntext::Tape;

fn data() -> Vec<SubjectRecord> {
    let mut cfg = SyntheticConfig {
        regions: 8,
        subjects_per_class: 40,
        ..SyntheticConfig::default()
    };
    for (k, p) in cfg.planted.iter_mut().enumerate() {
        p.region = 2 * k + 1;
    }
    generate_synthetic(&cfg).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 10,
        batch_size: 8,
        seed: 3,
        model: ModelConfig {
            regions: 8,
            dim: 16,
            layers: 1,
            heads: 2,
            max_len: 48,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn sorted_desc(items: &[Scored]) -> bool {
    items.windows(2).all(|w| w[0].score >= w[1].score)
}

#[test]
fn train_interpret_and_reload() {
    let records = data();
    let cfg = config();
    let (out, test_set) = train_with_split(&cfg, &records).unwrap();

    let h = &out.history;
    assert!(h
        .iter()
        .all(|r| [r.l, r.l_cl, r.l_sl, r.l_cls].iter().all(|v| v.is_finite())));
    assert!(h[9].l < h[0].l, "epoch 10 loss {} vs epoch 1 loss {}", h[9].l, h[0].l);

    let icfg = InterpretConfig::default();
    let report = interpret(&out.model, &out.vocab, &records, &icfg).unwrap();
    assert!(sorted_desc(&report.subnetworks.ranking));
    assert_eq!(report.subnetworks.ranking.len(), 8);
    assert_eq!(report.subnetworks.top.len(), icfg.subnetworks);
    let diffs: Vec<f64> = report.tokens.ranking.iter().map(|t| t.diff).collect();
    assert!(diffs.windows(2).all(|w| w[0] >= w[1]));
    for s in &report.subnetworks.top {
        assert!(s.tokens.len() <= icfg.per_item && sorted_desc(&s.tokens));
        assert!(s.connections.len() <= icfg.per_item && sorted_desc(&s.connections));
    }
    let votes: usize = report.subnetworks.voting.iter().map(|v| v.count).sum();
    let mci = records.iter().filter(|r| r.label.index() == 1).count();
    assert_eq!(votes, mci * icfg.subnetworks);
    assert_eq!(interpret(&out.model, &out.vocab, &records, &icfg).unwrap(), report);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&out.checkpoint(&cfg), &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let m = &cfg.model;
    let inputs = prepare_inputs(&test_set, &out.vocab, m.max_len, m.input_transform).unwrap();
    assert_eq!(
        back.model.predict_logits(&inputs).unwrap(),
        out.model.predict_logits(&inputs).unwrap()
    );
}

#[test]
fn disabled_connectome_alignment_records_no_alignment_nodes() {
    let records = data();
    let cfg = config();
    let (out, _) = train_with_split(
        &TrainConfig {
            epochs: 1,
            ..cfg.clone()
        },
        &records,
    )
    .unwrap();
    let inputs = prepare_inputs(&records[..4], &out.vocab, cfg.model.max_len, cfg.model.input_transform).unwrap();
    let batch: Vec<_> = inputs.iter().collect();
    let flags = LossFlags {
        use_cl: false,
        ..LossFlags::default()
    };
    let mut tape = Tape::new();
    tape.bind_params(&out.model.params).unwrap();
    let fwd = out
        .model
        .forward_batch(&mut tape, &batch, ClassWeights::uniform(), flags)
        .unwrap();
    assert!(fwd.terms.cl.is_none());
    assert!(fwd.subjects.iter().all(|s| s.alignment.is_none()));
    let with_cl = {
        let mut t = Tape::new();
        t.bind_params(&out.model.params).unwrap();
        let f = out
            .model
            .forward_batch(&mut t, &batch, ClassWeights::uniform(), LossFlags::default())
            .unwrap();
        t.value(f.loss).item() - t.value(f.terms.cl.unwrap()).item()
    };
    assert!((tape.value(fwd.loss).item() - with_cl).abs() < 1e-12);
}
