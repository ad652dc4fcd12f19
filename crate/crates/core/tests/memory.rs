use larslab_core::adapters::{AdapterSpec, GeluPosition, Ia3Config, LarsConfig, LoraConfig, Pooling};
use larslab_core::exec::Exec;
use larslab_core::harness::{
    default_spec, fit_slopes, make_task, measure_step, run_sweep, sweep_points, SweepConfig, SweepMode, SweepSettings,
    TaskSpec, TrainConfig,
};
use larslab_core::memory::{estimate_peak, Optimizer, Toggles};
use larslab_core::tensor::DType;
use larslab_core::transformer::{Backbone, BackboneConfig, Site};
use larslab_core::adapters::AdapterSet;
use proptest::prelude::*;

fn ledger_bytes(cfg: &BackboneConfig, spec: &AdapterSpec, batch: usize, seq: usize) -> (u64, u64) {
    let model = Backbone::<f32>::build(cfg).unwrap();
    let set = AdapterSet::<f32>::new(spec.clone(), cfg, 0).unwrap();
    let mut task = TaskSpec::default();
    task.set_seq_len(seq);
    let task = make_task(task, cfg.vocab, 0).unwrap();
    let m = measure_step(&model, &set, &task, batch, None).unwrap();
    (m.adapter_bytes, m.base_bytes)
}

fn estimate(cfg: &BackboneConfig, spec: &AdapterSpec, batch: usize, seq: usize) -> (u64, u64) {
    let e = estimate_peak(cfg, spec, batch, seq, Optimizer::Adamw, Toggles::default(), DType::F32).unwrap();
    (e.adapter_act_bytes, e.base_act_bytes)
}

#[test]
fn toy_lora_estimate_matches_ledger() {
    let cfg = BackboneConfig {
        layers: 2,
        hidden: 16,
        ..BackboneConfig::default()
    };
    let spec = AdapterSpec::Lora(LoraConfig {
        rank: 4,
        ..LoraConfig::default()
    });
    assert_eq!(estimate(&cfg, &spec, 2, 64), ledger_bytes(&cfg, &spec, 2, 64));
}

#[test]
fn estimate_matches_ledger_across_adapters() {
    let cfg = BackboneConfig {
        layers: 2,
        hidden: 16,
        heads: 4,
        ffn_mult: 2,
        ..BackboneConfig::default()
    };
    let specs = [
        AdapterSpec::Lars(LarsConfig {
            rank: 3,
            ..LarsConfig::default()
        }),
        AdapterSpec::Lars(LarsConfig {
            rank: 5,
            pooling: Pooling::Learned,
            gelu_position: GeluPosition::Outer,
            targets: Site::ALL.to_vec(),
            ..LarsConfig::default()
        }),
        AdapterSpec::Lars(LarsConfig {
            gating: false,
            mixing: false,
            targets: vec![Site::AttnQ, Site::MlpUp],
            ..LarsConfig::default()
        }),
        AdapterSpec::Lora(LoraConfig {
            rank: 2,
            targets: Site::ALL.to_vec(),
            ..LoraConfig::default()
        }),
        AdapterSpec::Ia3(Ia3Config {
            targets: Site::ALL.to_vec(),
        }),
    ];
    for spec in &specs {
        for (b, s) in [(1, 1), (2, 7), (3, 16)] {
            assert_eq!(estimate(&cfg, spec, b, s), ledger_bytes(&cfg, spec, b, s), "{spec} B={b} S={s}");
        }
    }
}

#[test]
fn flash_and_checkpointing_only_touch_base() {
    let cfg = BackboneConfig::default();
    let spec = default_spec("lars").unwrap();
    let run = |t| estimate_peak(&cfg, &spec, 2, 128, Optimizer::Adamw, t, DType::F32).unwrap();
    let plain = run(Toggles::default());
    let flash = run(Toggles {
        flash: true,
        gc_factor: 1.0,
    });
    let gc = run(Toggles {
        flash: false,
        gc_factor: 0.5,
    });
    assert_eq!(
        plain.base_act_bytes - flash.base_act_bytes,
        (cfg.layers * cfg.heads * 2 * 128 * 128 * 4) as u64
    );
    assert_eq!(gc.base_act_bytes * 2, plain.base_act_bytes);
    assert_eq!(flash.adapter_act_bytes, plain.adapter_act_bytes);
    assert_eq!(gc.adapter_act_bytes, plain.adapter_act_bytes);
}

#[test]
fn s_sweep_slopes() {
    let cfg = BackboneConfig::default();
    let sweep = SweepConfig::default();
    let adapters = [default_spec("lars").unwrap(), default_spec("lora").unwrap()];
    let points = sweep_points(&sweep, &adapters).unwrap();
    let task = TaskSpec::default();
    let train = TrainConfig::default();
    let settings = SweepSettings {
        backbone: &cfg,
        task: &task,
        train: &train,
        mode: SweepMode::Measure,
        budget: None,
        exec: Exec::from_jobs(4),
        timing: false,
    };
    let rows = run_sweep(&settings, &points);
    assert!(rows.iter().all(|r| r.is_ok()), "{rows:?}");
    for r in &rows {
        assert_eq!(r.step_peak_adapter_bytes, r.est_adapter_bytes);
        assert_eq!(r.step_peak_base_bytes, r.est_base_bytes);
    }
    let fits = fit_slopes(&rows);
    assert_eq!(fits.len(), 2);
    let (lars, lora) = (&fits[0], &fits[1]);
    assert_eq!(lars.adapter.slope, 0.0);
    assert_eq!(lora.adapter.r_squared, 1.0);
    assert!(lora.adapter.slope > 0.0);
    assert!(lars.total.slope < lora.total.slope);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimate_total_is_monotone(
        b in 1usize..5, s in 1usize..64, h_half in 3usize..12, l in 1usize..4, r in 1usize..4,
        kind in 0usize..3, bump in 0usize..5,
    ) {
        let h = 2 * h_half;
        let cfg = BackboneConfig { layers: l, hidden: h, heads: 2, ..BackboneConfig::default() };
        let spec = |r: usize| match kind {
            0 => AdapterSpec::Lars(LarsConfig { rank: r, ..LarsConfig::default() }),
            1 => AdapterSpec::Lora(LoraConfig { rank: r, ..LoraConfig::default() }),
            _ => AdapterSpec::Ia3(Ia3Config::default()),
        };
        let total = |cfg: &BackboneConfig, r, b, s| {
            estimate_peak(cfg, &spec(r), b, s, Optimizer::Adamw, Toggles::default(), DType::F32).unwrap().total_bytes
        };
        let base = total(&cfg, r, b, s);
        let grown = match bump {
            0 => total(&cfg, r, b + 1, s),
            1 => total(&cfg, r, b, s + 1),
            2 => total(&BackboneConfig { hidden: h + 2, ..cfg.clone() }, r, b, s),
            3 => total(&BackboneConfig { layers: l + 1, ..cfg.clone() }, r, b, s),
            _ => total(&cfg, r + 1, b, s),
        };
        prop_assert!(grown >= base);
    }
}
