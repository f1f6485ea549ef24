//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use conntext::align::{connectome_alignment, connectome_alignment_loss, infonce_loss};
use conntext::data::{generate_synthetic, SubjectRecord, SyntheticConfig};
use conntext::eval::{compute_metrics, interpret, run_variants, InteractionReport, InterpretConfig, Variant};
use conntext::model::{Model, ModelConfig, SubjectInput};
use conntext::nn::TransformerLayer;
use conntext::objective::{ClassWeights, LossFlags};
use conntext::rng::seeded;
use conntext::train::{train_with_split, EpochRecord, TrainConfig};
use conntext::verify::{model_grad_errors, tiny_instance, Objective};
use conntext::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use common::{instance, oracle_errors, random_mat, tensor, ORACLE_QUANTITIES};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn scalar(f: impl FnOnce(&mut Tape) -> conntext::Result<conntext::Var>) -> f64 {
    let mut tape = Tape::inference();
    let v = f(&mut tape).unwrap();
    tape.value(v).item()
}

fn gradients() -> Outcome {
    let errs = model_grad_errors(None).unwrap();
    let parts: Vec<String> = Objective::ALL
        .iter()
        .zip(&errs)
        .map(|(o, e)| format!("{} {e:.2e}", o.name()))
        .collect();
    outcome(errs.iter().all(|&e| e < 1e-4), parts.join(", "))
}

fn oracles() -> Outcome {
    let mut worst = [0.0f64; 7];
    for seed in 0..20 {
        for (w, e) in worst.iter_mut().zip(oracle_errors(&instance(seed))) {
            *w = w.max(e);
        }
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let (i, _) = worst
        .iter()
        .enumerate()
        .fold((0, 0.0), |a, (i, &e)| if e > a.1 { (i, e) } else { a });
    outcome(max <= 1e-10, format!("max error {max:.2e} ({})", ORACLE_QUANTITIES[i]))
}

fn identities() -> Outcome {
    let b = 6;
    let constant = scalar(|t| {
        let s = t.constant(Tensor::full(&[b, b], -0.2))?;
        infonce_loss(t, s, 0.07)
    });
    let two = scalar(|t| {
        let s = t.constant(Tensor::identity(2))?;
        infonce_loss(t, s, 1.0)
    });
    let e = 1f64.exp();
    let keep = [true, true, false, true, true];
    let ones = scalar(|t| {
        let s = t.constant(Tensor::full(&[3, 5], 1.0))?;
        connectome_alignment_loss(t, s, &keep)
    });
    let zeros = scalar(|t| {
        let s = t.constant(Tensor::zeros(&[3, 5]))?;
        connectome_alignment_loss(t, s, &keep)
    });
    let errs = [
        ((constant - (b as f64).ln()).abs(), 1e-12),
        ((two + (e / (e + 1.0)).ln()).abs(), 1e-10),
        (ones.abs(), 1e-12),
        ((zeros - 2f64.ln()).abs(), 1e-10),
    ];
    let detail: Vec<String> = errs.iter().map(|(err, _)| format!("{err:.1e}")).collect();
    outcome(
        errs.iter().all(|(err, tol)| err <= tol),
        format!("errors {}", detail.join(", ")),
    )
}

/// Text-side outputs of one subject: unpadded `V_local` rows, `V_global` and `L_cl`.
fn text_side(model: &Model, s: &SubjectInput) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
    let mut tape = Tape::inference();
    tape.bind_params(&model.params).unwrap();
    let (x_local, _) = model.brain.encode_patches(&mut tape, s.patches.clone()).unwrap();
    let (v_local, v_global) = model.text.encode(&mut tape, &s.token_ids, &s.mask).unwrap();
    let a = connectome_alignment(&mut tape, x_local, v_local, s.local_mask()).unwrap();
    let l_cl = connectome_alignment_loss(&mut tape, a.similarity, s.local_mask()).unwrap();
    let v = tape.value(v_local);
    let rows = (0..v.rows())
        .filter(|&j| s.local_mask()[j])
        .map(|j| v.row(j).to_vec())
        .collect();
    (rows, tape.value(v_global).data().to_vec(), tape.value(l_cl).item())
}

fn padding_error(extra: usize) -> f64 {
    let (short, batch) = tiny_instance(21).unwrap();
    let mut config = short.config.clone();
    config.max_len += extra;
    let mut rng = seeded(22);
    let mut long = Model::new(config, short.vocab_size, &mut rng).unwrap();
    for id in short.params.ids() {
        let target = long.params.find(short.params.name(id)).unwrap();
        let src = short.params.get(id);
        long.params.get_mut(target).data_mut()[..src.numel()].copy_from_slice(src.data());
    }
    let mut worst: f64 = 0.0;
    for s in &batch {
        let mut padded = s.clone();
        padded
            .token_ids
            .extend((0..extra).map(|_| rng.random_range(0..short.vocab_size)));
        padded.mask.extend(std::iter::repeat_n(false, extra));
        let (a_rows, a_global, a_cl) = text_side(&short, s);
        let (b_rows, b_global, b_cl) = text_side(&long, &padded);
        worst = worst.max((a_cl - b_cl).abs());
        worst = worst.max(common::max_abs(&vec![a_global], &vec![b_global]));
        worst = worst.max(common::max_abs(&a_rows, &b_rows));
    }
    worst
}

fn l_sl(model: &Model, batch: &[SubjectInput], order: &[usize]) -> f64 {
    let refs: Vec<&SubjectInput> = order.iter().map(|&i| &batch[i]).collect();
    let mut tape = Tape::inference();
    tape.bind_params(&model.params).unwrap();
    let flags = LossFlags {
        use_cl: false,
        use_sl: true,
        use_cls: false,
    };
    let out = model
        .forward_batch(&mut tape, &refs, ClassWeights::uniform(), flags)
        .unwrap();
    tape.value(out.terms.sl.unwrap()).item()
}

fn invariances() -> Outcome {
    let pad = padding_error(3).max(padding_error(9));
    let (model, batch) = tiny_instance(23).unwrap();
    let base = l_sl(&model, &batch, &[0, 1, 2, 3]);
    let mut rng = seeded(24);
    let mut perm = 0.0f64;
    for _ in 0..10 {
        let mut order = vec![0, 1, 2, 3];
        order.shuffle(&mut rng);
        perm = perm.max((l_sl(&model, &batch, &order) - base).abs());
    }
    outcome(
        pad <= 1e-10 && perm <= 1e-12,
        format!("padding {pad:.1e}, permutation {perm:.1e}"),
    )
}

fn zeroed_stack_is_identity(model: &mut Model, layers: &[TransformerLayer], rows: usize, mask: &[bool]) -> bool {
    for layer in layers {
        for id in layer.branch_params() {
            model.params.get_mut(id).data_mut().fill(0.0);
        }
    }
    let input = tensor(&random_mat(&mut seeded(rows as u64), rows, model.config.dim));
    let mut tape = Tape::inference();
    tape.bind_params(&model.params).unwrap();
    let mut h = tape.constant(input.clone()).unwrap();
    for layer in layers {
        h = layer.forward(&mut tape, h, Some(mask)).unwrap();
    }
    tape.value(h) == &input
}

fn residual_identity() -> Outcome {
    let (mut model, _) = tiny_instance(25).unwrap();
    let brain = model.brain.layers.clone();
    let text = model.text.layers.clone();
    let n = model.config.regions + 1;
    let m = model.config.max_len;
    let brain_ok = zeroed_stack_is_identity(&mut model, &brain, n, &vec![true; n]);
    let mask: Vec<bool> = (0..m).map(|j| j < m - 3).collect();
    let text_ok = zeroed_stack_is_identity(&mut model, &text, m, &mask);
    outcome(
        brain_ok && text_ok,
        format!("connectome stack {brain_ok}, report stack {text_ok}"),
    )
}

fn acceptance_data() -> (SyntheticConfig, Vec<SubjectRecord>) {
    let synth = SyntheticConfig {
        regions: 16,
        subjects_per_class: 200,
        seed: 7,
        ..SyntheticConfig::default()
    };
    for p in &synth.planted {
        assert_eq!((p.attenuation, p.p_present, p.p_absent), (0.2, 0.9, 0.05));
    }
    assert_eq!(synth.planted.len(), 3);
    let records = generate_synthetic(&synth).unwrap();
    (synth, records)
}

fn acceptance_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 32,
        batch_size: 8,
        seed: 7,
        model: ModelConfig {
            regions: 16,
            dim: 32,
            layers: 2,
            heads: 2,
            max_len: 48,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.split.seed = 7;
    cfg
}

struct Run {
    history: Vec<EpochRecord>,
    report: InteractionReport,
    report_text: String,
    seconds: f64,
}

fn full_run(records: &[SubjectRecord]) -> Run {
    let start = Instant::now();
    let (out, _) = train_with_split(&acceptance_config(), records).unwrap();
    let report = interpret(&out.model, &out.vocab, records, &InterpretConfig::default()).unwrap();
    let report_text = toml::to_string(&report).unwrap();
    Run {
        history: out.history,
        report,
        report_text,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn recovery(synth: &SyntheticConfig, run: &Run) -> Outcome {
    let truth = synth.ground_truth();
    let acc = run.history.last().unwrap().eval_acc;
    let token_ranks: Vec<usize> = truth
        .planted
        .iter()
        .map(|p| {
            run.report
                .tokens
                .ranking
                .iter()
                .position(|t| t.token == p.token)
                .map_or(usize::MAX, |r| r + 1)
        })
        .collect();
    let region_ranks: Vec<usize> = truth
        .planted
        .iter()
        .map(|p| {
            run.report
                .subnetworks
                .ranking
                .iter()
                .position(|r| r.name == p.region_name)
                .map_or(usize::MAX, |r| r + 1)
        })
        .collect();
    let tokens_ok = token_ranks.iter().all(|&r| r <= 5);
    let regions_ok = region_ranks.iter().filter(|&&r| r <= 6).count() >= 2;
    let fast = run.seconds < 300.0;
    outcome(
        acc >= 0.90 && tokens_ok && regions_ok && fast,
        format!(
            "accuracy {acc:.4}, token ranks {token_ranks:?}, region ranks {region_ranks:?}, {:.1} s",
            run.seconds
        ),
    )
}

fn ablation(records: &[SubjectRecord], full_acc: f64) -> Outcome {
    let table = run_variants(&acceptance_config(), records, &[Variant::ImageOnly, Variant::TextOnly]).unwrap();
    let image = table.get(Variant::ImageOnly).unwrap().acc;
    let text = table.get(Variant::TextOnly).unwrap().acc;
    outcome(
        full_acc >= image + 0.05 && full_acc >= text + 0.05,
        format!("full {full_acc:.4}, I-only {image:.4}, C-only {text:.4}"),
    )
}

fn determinism(records: &[SubjectRecord], first: &Run) -> Outcome {
    let second = full_run(records);
    let bits = |h: &[EpochRecord]| -> Vec<u64> {
        h.iter()
            .flat_map(|r| [r.l, r.l_cl, r.l_sl, r.l_cls, r.eval_acc, r.eval_f1].map(f64::to_bits))
            .collect()
    };
    let same_history = bits(&first.history) == bits(&second.history);
    let same_report = first.report_text == second.report_text;
    outcome(
        same_history && same_report,
        format!("history identical {same_history}, report identical {same_report}"),
    )
}

fn metric_identities() -> Outcome {
    let mut rng = seeded(9);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let m = compute_metrics(&preds, &labels).unwrap();
        let count = |p, y| preds.iter().zip(&labels).filter(|&(&a, &b)| a == p && b == y).count();
        let (tp, tn, fp, fn_) = (count(1, 1), count(0, 0), count(1, 0), count(0, 1));
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let ok = m.acc == frac(tp + tn, n)
            && m.sen == frac(tp, tp + fn_)
            && m.spe == frac(tn, tn + fp)
            && m.f1 == frac(2 * tp, 2 * tp + fp + fn_);
        bad += usize::from(!ok);
    }
    outcome(bad == 0, format!("{bad} of 1000 vectors disagree"))
}

fn report(id: usize, name: &str, limit: Option<f64>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let seconds = start.elapsed().as_secs_f64();
    if let Some(limit) = limit {
        if seconds >= limit {
            o.passed = false;
            o.detail.push_str(&format!(", over the {limit} s budget"));
        }
    }
    let status = if o.passed { "PASS" } else { "FAIL" };
    println!("{status} {id} {name}: {} [{seconds:.1} s]", o.detail);
    o.passed
}

fn main() -> ExitCode {
    let mut results = vec![
        report(1, "gradient correctness", Some(30.0), gradients),
        report(2, "oracle equivalence", Some(10.0), oracles),
        report(3, "loss identities", None, identities),
        report(4, "masking and permutation invariance", None, invariances),
        report(5, "residual identity", None, residual_identity),
    ];

    let (synth, records) = acceptance_data();
    let run = full_run(&records);
    let full_acc = run.history.last().unwrap().eval_acc;
    results.push(report(6, "end-to-end planted recovery", None, || {
        recovery(&synth, &run)
    }));
    results.push(report(7, "ablation direction", None, || ablation(&records, full_acc)));
    results.push(report(8, "determinism", None, || determinism(&records, &run)));
    results.push(report(9, "metric identities", None, metric_identities));

    let failed = results.iter().filter(|&&p| !p).count();
    println!("{} criteria, {failed} failed", results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
