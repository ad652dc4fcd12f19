//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs the `larslab` binary where a criterion is about the CLI and
//! the core library where it is about the model.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use larslab_core::adapters::{AdapterParams, AdapterSet, AdapterSpec, Ia3Config, LarsConfig, LoraConfig, Pooling};
use larslab_core::exec::Exec;
use larslab_core::harness::check_adapter_gradients;
use larslab_core::memory::fit_growth_rate;
use larslab_core::tensor::{Tape, Tensor};
use larslab_core::transformer::{Backbone, BackboneConfig, TokenBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn larslab(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_larslab"))
        .args(args)
        .env_remove("LARSLAB_SEED")
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`larslab {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Scan {
    rows: Vec<csv::StringRecord>,
    headers: csv::StringRecord,
}

impl Scan {
    fn read(path: &Path) -> Result<Self, String> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
        let headers = reader.headers().map_err(|e| e.to_string())?.clone();
        let rows = reader.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        Ok(Self { rows, headers })
    }

    fn column(&self, adapter: &str, name: &str) -> Vec<u64> {
        let a = self.headers.iter().position(|h| h == "adapter").unwrap();
        let c = self.headers.iter().position(|h| h == name).unwrap();
        self.rows
            .iter()
            .filter(|r| &r[a] == adapter)
            .map(|r| r[c].parse().unwrap_or(u64::MAX))
            .collect()
    }
}

const GRID: [u64; 4] = [64, 128, 256, 512];

fn s_independence(scan: &Scan, elapsed: Duration) -> Outcome {
    let lars = scan.column("lars", "step_peak_adapter_bytes");
    ensure(lars.len() == 4, || format!("expected 4 lars rows, got {}", lars.len()))?;
    ensure(lars.iter().all(|&b| b == lars[0]), || format!("lars adapter bytes vary: {lars:?}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("scan took {elapsed:?}"))?;
    Ok(format!("lars adapter bytes {} at every S, scan {:.1}s", lars[0], elapsed.as_secs_f64()))
}

fn lora_linearity(scan: &Scan) -> Outcome {
    let lora = scan.column("lora", "step_peak_adapter_bytes");
    ensure(lora.len() == 4 && lora[0] > 0, || format!("lora rows {lora:?}"))?;
    ensure(lora.iter().zip([1, 2, 4, 8]).all(|(&b, k)| b == k * lora[0]), || {
        format!("lora bytes not 1:2:4:8: {lora:?}")
    })?;
    let points: Vec<(f64, f64)> = GRID.iter().zip(&lora).map(|(&s, &b)| (s as f64, b as f64)).collect();
    let fit = fit_growth_rate(&points).map_err(|e| e.to_string())?;
    ensure(fit.r_squared == 1.0 && fit.slope > 0.0, || format!("fit {fit:?}"))?;
    Ok(format!("ratio 1:2:4:8, slope {} B/token, R² {}", fit.slope, fit.r_squared))
}

fn growth_reduction(scan: &Scan) -> Outcome {
    let slope = |adapter: &str| -> Result<f64, String> {
        let adapter_bytes = scan.column(adapter, "step_peak_adapter_bytes");
        let base = scan.column(adapter, "step_peak_base_bytes");
        let points: Vec<(f64, f64)> = GRID
            .iter()
            .zip(adapter_bytes.iter().zip(&base))
            .map(|(&s, (&a, &b))| (s as f64, (a + b) as f64))
            .collect();
        Ok(fit_growth_rate(&points).map_err(|e| e.to_string())?.slope)
    };
    let (lars, lora) = (slope("lars")?, slope("lora")?);
    ensure(lars < lora, || format!("lars total slope {lars} !< lora {lora}"))?;
    let cut = 100.0 * (1.0 - lars / lora);
    ensure(cut > 0.0, || format!("reduction {cut}%"))?;
    Ok(format!("total slope lars {lars:.2} vs lora {lora:.2} B/token, {cut:.2}% lower growth rate"))
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let names = ["A_pool", "W_x", "W_h", "tau1", "tau2", "M_mix", "B_pool", "alpha", "w_pool"];
    let mut worst: f64 = 0.0;
    for rank in [1, 4, 8] {
        for pooling in [Pooling::Fixed, Pooling::Learned] {
            let spec = AdapterSpec::Lars(LarsConfig {
                rank,
                pooling,
                ..LarsConfig::default()
            });
            let checks = check_adapter_gradients(&spec, 0, Exec::Sequential, None).map_err(|e| e.to_string())?;
            let expected = if pooling == Pooling::Learned { 9 } else { 8 };
            for name in &names[..expected] {
                ensure(checks.iter().any(|c| c.name == *name), || format!("R={rank}: {name} not checked"))?;
            }
            if let Some(bad) = checks.iter().find(|c| !c.passed()) {
                return Err(format!("R={rank} {}: {:e}", bad.label(), bad.max_rel_error));
            }
            worst = checks.iter().map(|c| c.max_rel_error).fold(worst, f64::max);
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("9 tensors at R=1,4,8, worst rel err {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

fn identity_at_init() -> Outcome {
    let cfg = BackboneConfig::default();
    let model = Backbone::<f32>::build(&cfg).map_err(|e| e.to_string())?;
    let specs = [
        AdapterSpec::Lars(LarsConfig::default()),
        AdapterSpec::Lora(LoraConfig::default()),
        AdapterSpec::Ia3(Ia3Config::default()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut compared = 0usize;
    for trial in 0..10 {
        let (b, s) = (rng.random_range(1..4), rng.random_range(1..48));
        let ids = (0..b * s).map(|_| rng.random_range(0..cfg.vocab)).collect();
        let tokens = TokenBatch::new(b, s, ids).map_err(|e| e.to_string())?;
        let run = |spec: Option<&AdapterSpec>| -> Result<Vec<u32>, String> {
            let mut tape = Tape::new();
            let set = spec.map(|s| AdapterSet::<f32>::new(s.clone(), &cfg, trial)).transpose();
            let set = set.map_err(|e| e.to_string())?;
            let bound = set.as_ref().map(|s| s.bind(&mut tape));
            let hook = bound.as_ref().map(|b| b as &dyn larslab_core::transformer::SiteHook<f32>);
            let out = model.forward(&mut tape, &tokens, hook).map_err(|e| e.to_string())?;
            Ok(tape.data(out).iter().map(|v| v.to_bits()).collect())
        };
        let plain = run(None)?;
        for spec in &specs {
            let adapted = run(Some(spec))?;
            ensure(adapted == plain, || format!("{spec} differs from the frozen backbone on input {trial}"))?;
            compared += adapted.len();
        }
    }
    Ok(format!("10 inputs x 3 adapters bit-identical ({compared} logits)"))
}

fn estimate_verify() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("grid.json");
    let adapters = r#"{"adapters": [{"kind": "lars"}, {"kind": "lora"}, {"kind": "ia3"}]}"#;
    std::fs::write(&cfg, adapters).map_err(|e| e.to_string())?;
    let cfg = cfg.to_string_lossy();
    let (mut matches, mut mismatches) = (0, 0);
    for s in ["32", "64", "128"] {
        let out = larslab(&["--config", &cfg, "estimate", "-B", "2", "-S", s, "--verify"])?;
        matches += out.lines().filter(|l| l.ends_with(" match")).count();
        mismatches += out.matches("MISMATCH").count();
    }
    ensure(mismatches == 0 && matches == 18, || format!("{matches} match, {mismatches} mismatch"))?;
    Ok("3 adapters x S in {32,64,128}: 18/18 activation rows match the ledger".into())
}

fn reports(path: &Path) -> Result<Vec<serde_json::Value>, String> {
    let text = std::fs::read(path).map_err(|e| e.to_string())?;
    let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| e.to_string())?;
    value.as_array().cloned().ok_or_else(|| "report is not an array".into())
}

fn number(reports: &[serde_json::Value], adapter: &str, key: &str) -> Result<f64, String> {
    reports
        .iter()
        .find(|r| r["adapter"] == adapter)
        .and_then(|r| r[key].as_f64())
        .ok_or_else(|| format!("no {key} for {adapter}"))
}

fn learning_parity(dir: &Path) -> Outcome {
    let started = Instant::now();
    let out = dir.join("seqclass.json");
    larslab(&["train", "--out", &out.to_string_lossy()])?;
    let elapsed = started.elapsed();
    let r = reports(&out)?;
    let (lars, lora) = (number(&r, "lars", "final_acc")?, number(&r, "lora", "final_acc")?);
    ensure(lars >= 0.9 && lora >= 0.9, || format!("lars {lars}, lora {lora}"))?;
    ensure(lars >= lora - 0.05, || format!("lars {lars} trails lora {lora}"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "500 steps: lars {:.1}%, lora {:.1}%, {:.0}s",
        100.0 * lars,
        100.0 * lora,
        elapsed.as_secs_f64()
    ))
}

fn niah_parity(dir: &Path) -> Outcome {
    let out = dir.join("niah.json");
    larslab(&["niah", "-S", "64", "--out", &out.to_string_lossy()])?;
    let r = reports(&out)?;
    let (lars, lora) = (number(&r, "lars", "heldout_acc")?, number(&r, "lora", "heldout_acc")?);
    let gap = 100.0 * (lars - lora);
    ensure(gap.abs() <= 10.0, || format!("lars {lars}, lora {lora}"))?;
    Ok(format!("held-out lars {:.1}%, lora {:.1}%, gap {gap:+.1} points", 100.0 * lars, 100.0 * lora))
}

// Gating, mixing and the subspace nonlinearity may add at most C_PER_BR
// saved elements per unit of B·R at each attach point, independent of S.
const C_PER_BR: u64 = 16;

fn ablation_toggles() -> Outcome {
    let cfg = BackboneConfig::default();
    let model = Backbone::<f64>::build(&cfg).map_err(|e| e.to_string())?;
    let forward = |config: LarsConfig, seq: usize| -> Result<(Vec<u64>, u64, usize), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ids: Vec<usize> = (0..2 * seq).map(|_| rng.random_range(0..cfg.vocab)).collect();
        let tokens = TokenBatch::new(2, seq, ids).map_err(|e| e.to_string())?;
        let mut set = AdapterSet::<f64>::new(AdapterSpec::Lars(config), &cfg, 5).map_err(|e| e.to_string())?;
        for m in set.modules_mut() {
            if let AdapterParams::Lars(p) = &mut m.params {
                p.b_pool = Tensor::randn(p.b_pool.shape().to_vec(), 0.5, &mut rng).map_err(|e| e.to_string())?;
            }
        }
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape);
        let out = model.forward(&mut tape, &tokens, Some(&bound)).map_err(|e| e.to_string())?;
        let bytes = tape.ledger().prefix_bytes("adapter:");
        Ok((tape.data(out).iter().map(|v| v.to_bits()).collect(), bytes, set.modules().len()))
    };
    let (mixed, _, _) = forward(LarsConfig::default(), 16)?;
    let (unmixed, _, _) = forward(
        LarsConfig {
            mixing: false,
            ..LarsConfig::default()
        },
        16,
    )?;
    ensure(mixed == unmixed, || "identity M_mix differs from the no-mixing variant".into())?;

    let (batch, rank) = (2u64, LarsConfig::default().rank as u64);
    let bare = LarsConfig {
        gating: false,
        mixing: false,
        nonlinearity: false,
        ..LarsConfig::default()
    };
    let mut diffs = Vec::new();
    let mut points = 0;
    for seq in [16, 64] {
        let (_, full, n) = forward(LarsConfig::default(), seq)?;
        let (_, plain, _) = forward(bare.clone(), seq)?;
        diffs.push(full.abs_diff(plain));
        points = n as u64;
    }
    ensure(diffs[0] == diffs[1], || format!("component bytes depend on S: {diffs:?}"))?;
    let bound = C_PER_BR * batch * rank * points * 8; // f64 elements
    ensure(diffs[0] < bound, || format!("components add {} bytes, bound {bound}", diffs[0]))?;
    Ok(format!(
        "identity mixing bit-identical; components add {} bytes at any S < c·B·R per site = {bound} (c = {C_PER_BR})",
        diffs[0]
    ))
}

fn determinism(dir: &Path) -> Outcome {
    let small = dir.join("small.json");
    std::fs::write(
        &small,
        r#"{"backbone": {"layers": 1, "hidden": 16}, "train": {"steps": 30, "warmup_steps": 5},
            "task": {"kind": "seqclass", "seq_len": 16}}"#,
    )
    .map_err(|e| e.to_string())?;
    let small = small.to_string_lossy().into_owned();
    let file = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let mut checked = Vec::new();
    for (label, args, out) in [
        ("memscan", vec!["--jobs", "JOBS", "memscan", "--out", "OUT"], true),
        ("train", vec!["--config", &small, "--jobs", "JOBS", "train", "--out", "OUT"], true),
        ("niah", vec!["--config", &small, "niah", "-S", "16", "--out", "OUT"], true),
        ("estimate", vec!["estimate", "--verify"], false),
        ("gradcheck", vec!["--jobs", "JOBS", "gradcheck"], false),
    ] {
        let mut outputs = Vec::new();
        for (run, jobs) in ["1", "2"].into_iter().enumerate() {
            let target = file(&format!("{label}{run}.out"));
            let args: Vec<&str> = args
                .iter()
                .map(|a| match *a {
                    "OUT" => target.as_str(),
                    "JOBS" => jobs,
                    other => other,
                })
                .collect();
            let stdout = larslab(&args)?;
            let bytes = if out {
                std::fs::read(&target).map_err(|e| e.to_string())?
            } else {
                stdout.into_bytes()
            };
            outputs.push(bytes);
        }
        ensure(outputs[0] == outputs[1], || format!("{label} output differs between runs"))?;
        checked.push(label);
    }
    Ok(format!("byte-identical reruns: {}", checked.join(", ")))
}

fn main() -> ExitCode {
    let dir = match TempDir::new() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("cannot create a scratch directory: {e}");
            return ExitCode::FAILURE;
        }
    };
    let scan_path = dir.path().join("scan.csv");
    let started = Instant::now();
    let scan = larslab(&["memscan", "--S-grid", "64,128,256,512", "--out", &scan_path.to_string_lossy()])
        .and_then(|_| Scan::read(&scan_path));
    let scan_time = started.elapsed();
    let with_scan = |f: &dyn Fn(&Scan) -> Outcome| scan.as_ref().map_err(Clone::clone).and_then(f);

    let criteria: Vec<Criterion<'_>> = vec![
        ("S-independence", Box::new(|| with_scan(&|s| s_independence(s, scan_time)))),
        ("baseline linearity", Box::new(|| with_scan(&lora_linearity))),
        ("growth-rate reduction", Box::new(|| with_scan(&growth_reduction))),
        ("gradient correctness", Box::new(gradients)),
        ("identity at init", Box::new(identity_at_init)),
        ("estimator-ledger equivalence", Box::new(estimate_verify)),
        ("learning parity", Box::new(|| learning_parity(dir.path()))),
        ("NIAH parity", Box::new(|| niah_parity(dir.path()))),
        ("ablation toggles", Box::new(ablation_toggles)),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
