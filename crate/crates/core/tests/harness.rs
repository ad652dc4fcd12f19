use larslab_core::adapters::{AdapterSet, AdapterSpec, LarsConfig, LoraConfig};
use larslab_core::exec::Exec;
use larslab_core::harness::{
    default_spec, make_task, run_sweep, sweep_points, train, write_csv, AdamW, AdamWConfig, GridValue, SeqclassConfig,
    SweepConfig, SweepDimension, SweepMode, SweepSettings, Task, TaskSpec, TrainConfig, TrainOptions,
};
use larslab_core::tensor::{Tape, Tensor};
use larslab_core::transformer::{Backbone, BackboneConfig};
use larslab_core::Error;

fn small() -> BackboneConfig {
    BackboneConfig {
        layers: 1,
        hidden: 16,
        ..BackboneConfig::default()
    }
}

fn short_task(cfg: &BackboneConfig, seq: usize) -> Task {
    let spec = TaskSpec::Seqclass(SeqclassConfig {
        seq_len: seq,
        ..SeqclassConfig::default()
    });
    make_task(spec, cfg.vocab, 0).unwrap()
}

fn lars(rank: usize) -> AdapterSpec {
    AdapterSpec::Lars(LarsConfig {
        rank,
        ..LarsConfig::default()
    })
}

fn snapshot<T: larslab_core::tensor::Element>(set: &AdapterSet<T>) -> Vec<Tensor<T>> {
    set.tensors().into_iter().cloned().collect()
}

#[test]
fn zero_lr_changes_nothing() {
    let cfg = small();
    let model = Backbone::<f32>::build(&cfg).unwrap();
    let frozen: Vec<Tensor<f32>> = model.tensors().into_iter().cloned().collect();
    let task = short_task(&cfg, 16);
    for name in ["lars", "lora", "ia3"] {
        let mut set = AdapterSet::<f32>::new(default_spec(name).unwrap(), &cfg, 0).unwrap();
        let before = snapshot(&set);
        let train_cfg = TrainConfig {
            steps: 5,
            lr: 0.0,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let report = train(&model, &mut set, &task, &train_cfg, TrainOptions::default()).unwrap();
        assert_eq!(report.loss_trace.len(), 5);
        assert_eq!(snapshot(&set), before, "{name}");
    }
    let after: Vec<Tensor<f32>> = model.tensors().into_iter().cloned().collect();
    assert_eq!(after, frozen);
}

#[test]
fn adamw_descends_a_quadratic() {
    // (alpha - 3)^2 with alpha as the only parameter
    let mut alpha = Tensor::<f64>::scalar(0.0);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &[&alpha],
    );
    let mut last = f64::INFINITY;
    for _ in 0..10 {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(alpha.clone(), true);
        let target = tape.constant(Tensor::scalar(3.0));
        let d = tape.sub(a, target).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let value = tape.data(loss)[0];
        assert!(value < last, "{value} !< {last}");
        last = value;
        let grad = tape.backward(loss).unwrap().take(a).unwrap();
        opt.step(&mut [&mut alpha], &[grad], 0.1).unwrap();
    }
}

#[test]
fn accumulation_matches_a_large_batch() {
    let cfg = small();
    let model = Backbone::<f64>::build(&cfg).unwrap();
    let task = short_task(&cfg, 8);
    for spec in [lars(4), default_spec("lora").unwrap()] {
        let run = |batch_size, accum_steps| {
            let mut set = AdapterSet::<f64>::new(spec.clone(), &cfg, 3).unwrap();
            let train_cfg = TrainConfig {
                steps: 3,
                batch_size,
                accum_steps,
                lr: 1e-2,
                warmup_steps: 0,
                ..TrainConfig::default()
            };
            let report = train(&model, &mut set, &task, &train_cfg, TrainOptions::default()).unwrap();
            (snapshot(&set), report.loss_trace)
        };
        let (small_params, small_loss) = run(2, 4);
        let (big_params, big_loss) = run(8, 1);
        for (a, b) in small_loss.iter().zip(&big_loss) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in small_params.iter().zip(&big_params) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6, "{spec}: {x} vs {y}");
            }
        }
    }
}

// Softmax regression on the frozen final hidden state at the last position.
#[test]
fn frozen_features_are_linearly_separable() {
    let cfg = BackboneConfig::default();
    let model = Backbone::<f64>::build(&cfg).unwrap();
    let task = short_task(&cfg, 32);
    let examples: Vec<_> = (0..task.train_size()).map(|i| task.train_example(i)).collect();
    let (tokens, _, labels) = task.batch(&examples).unwrap();
    let mut tape = Tape::new();
    let hidden = model.forward_hidden(&mut tape, &tokens, None).unwrap();
    let (s, h) = (tokens.seq, cfg.hidden);
    let data = tape.data(hidden);
    let feats: Vec<&[f64]> = (0..tokens.batch)
        .map(|b| &data[(b * s + s - 1) * h..(b * s + s) * h])
        .collect();

    let k = task.num_labels();
    let mut w = vec![vec![0.0; h + 1]; k];
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; h + 1]; k];
        for (x, &y) in feats.iter().zip(&labels) {
            let logits: Vec<f64> = w
                .iter()
                .map(|row| row[h] + row[..h].iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for c in 0..k {
                let p = (logits[c] - max).exp() / z - f64::from(u8::from(c == y));
                for j in 0..h {
                    grad[c][j] += p * x[j];
                }
                grad[c][h] += p;
            }
        }
        for c in 0..k {
            for j in 0..=h {
                w[c][j] -= 0.5 * grad[c][j] / feats.len() as f64;
            }
        }
    }
    let correct = feats
        .iter()
        .zip(&labels)
        .filter(|(x, &y)| {
            let score = |c: usize| w[c][h] + w[c][..h].iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
            (0..k).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap() == y
        })
        .count();
    let acc = correct as f64 / feats.len() as f64;
    assert!(acc >= 0.9, "linear probe accuracy {acc}");
}

#[test]
fn training_is_deterministic() {
    let cfg = small();
    let model = Backbone::<f32>::build(&cfg).unwrap();
    let task = short_task(&cfg, 16);
    let train_cfg = TrainConfig {
        steps: 20,
        lr: 1e-2,
        warmup_steps: 5,
        ..TrainConfig::default()
    };
    let run = |exec| {
        let mut set = AdapterSet::<f32>::new(lars(4), &cfg, 7).unwrap();
        let opts = TrainOptions {
            exec,
            ..TrainOptions::default()
        };
        let report = train(&model, &mut set, &task, &train_cfg, opts).unwrap();
        (serde_json::to_string(&report).unwrap(), snapshot(&set))
    };
    let first = run(Exec::Sequential);
    assert_eq!(run(Exec::Sequential), first);
    assert_eq!(run(Exec::from_jobs(3)), first);
}

#[test]
fn nan_parameters_diverge() {
    let cfg = small();
    let model = Backbone::<f32>::build(&cfg).unwrap();
    let task = short_task(&cfg, 8);
    let mut set = AdapterSet::<f32>::new(lars(4), &cfg, 0).unwrap();
    let mut params = set.tensors_mut();
    params.last_mut().unwrap().data_mut().fill(f32::NAN);
    let err = train(&model, &mut set, &task, &TrainConfig::default(), TrainOptions::default()).unwrap_err();
    assert_eq!(err, Error::Divergence { step: 0 });
}

#[test]
fn steps_zero_reports_an_untrained_model() {
    let cfg = small();
    let model = Backbone::<f32>::build(&cfg).unwrap();
    let task = short_task(&cfg, 8);
    let mut set = AdapterSet::<f32>::new(lars(4), &cfg, 0).unwrap();
    let train_cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let report = train(&model, &mut set, &task, &train_cfg, TrainOptions::default()).unwrap();
    assert!(report.loss_trace.is_empty());
    assert_eq!(report.final_loss, None);
    assert!((0.0..=1.0).contains(&report.final_acc));
}

fn settings<'a>(cfg: &'a BackboneConfig, task: &'a TaskSpec, train: &'a TrainConfig, budget: Option<u64>) -> SweepSettings<'a> {
    SweepSettings {
        backbone: cfg,
        task,
        train,
        mode: SweepMode::Measure,
        budget,
        exec: Exec::Sequential,
        timing: false,
    }
}

#[test]
fn budget_marks_rows_and_the_sweep_continues() {
    let cfg = BackboneConfig::default();
    let (task, train_cfg) = (TaskSpec::default(), TrainConfig::default());
    let points = sweep_points(&SweepConfig::default(), &[lars(8), default_spec("lora").unwrap()]).unwrap();
    let unlimited = run_sweep(&settings(&cfg, &task, &train_cfg, None), &points);
    let totals: Vec<u64> = unlimited.iter().filter_map(|r| r.total_bytes()).collect();
    let budget = (totals.iter().min().unwrap() + totals.iter().max().unwrap()) / 2;
    let rows = run_sweep(&settings(&cfg, &task, &train_cfg, Some(budget)), &points);
    assert_eq!(rows.len(), points.len());
    assert!(rows.iter().any(|r| r.status == "exceeds_budget"));
    assert!(rows.iter().any(|r| r.is_ok()));
    assert!(rows.iter().all(|r| r.is_ok() || r.status == "exceeds_budget"));

    let mut out = Vec::new();
    write_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with(
        "adapter,pooling,B,S,H,L,R,targets,step_peak_adapter_bytes,step_peak_base_bytes,est_adapter_bytes,\
         est_base_bytes,params_trainable,tokens_per_sec,final_loss,final_acc,status\n"
    ));
    assert_eq!(text.matches("exceeds_budget").count(), rows.iter().filter(|r| !r.is_ok()).count());
}

#[test]
fn rank_sweep_is_affine_in_r() {
    let cfg = BackboneConfig::default();
    let (task, train_cfg) = (TaskSpec::default(), TrainConfig::default());
    let sweep = SweepConfig {
        dimension: SweepDimension::R,
        grid: [1, 2, 4, 8, 16].into_iter().map(GridValue::Int).collect(),
        ..SweepConfig::default()
    };
    let lora = AdapterSpec::Lora(LoraConfig::default());
    let points = sweep_points(&sweep, &[lars(8), lora]).unwrap();
    let rows = run_sweep(&settings(&cfg, &task, &train_cfg, None), &points);
    for group in rows.chunks(5) {
        let bytes: Vec<i64> = group.iter().map(|r| r.step_peak_adapter_bytes.unwrap() as i64).collect();
        let ranks: Vec<i64> = group.iter().map(|r| r.rank.unwrap() as i64).collect();
        let per_rank = (bytes[1] - bytes[0]) / (ranks[1] - ranks[0]);
        assert!(per_rank > 0);
        for (b, r) in bytes.iter().zip(&ranks) {
            assert_eq!(*b, bytes[0] + per_rank * (r - ranks[0]), "{}", group[0].adapter);
        }
        if group[0].adapter == "lora" {
            assert_eq!(bytes[0], per_rank, "LoRA bytes are proportional to R");
        }
    }
}

#[test]
fn invalid_rank_is_reported_per_row() {
    let cfg = small();
    let (task, train_cfg) = (TaskSpec::default(), TrainConfig::default());
    let sweep = SweepConfig {
        dimension: SweepDimension::R,
        grid: vec![GridValue::Int(4), GridValue::Int(16)],
        ..SweepConfig::default()
    };
    let points = sweep_points(&sweep, &[lars(4)]).unwrap();
    let rows = run_sweep(&settings(&cfg, &task, &train_cfg, None), &points);
    assert!(rows[0].is_ok());
    assert!(rows[1].status.starts_with("error:"), "{}", rows[1].status);
}
