//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#[path = "../../core/tests/suites/mod.rs"]
mod suites;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use tst_cli::{cmd_evaluate, cmd_lag_scan, cmd_predict, cmd_preprocess, cmd_synth, cmd_train, default_loss_path, RunConfig, SynthArgs};
use tst_core::metrics::{accuracy_ft, rmse, score_rul, DEFAULT_LOSS_FRACTIONS};
use tst_core::training::load_checkpoint;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cli<T>(r: tst_cli::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("exit {}: {e}", e.code()))
}

fn config(text: &str) -> RunConfig {
    RunConfig::parse_str(text).expect("acceptance configs parse")
}

fn synth_args(dir: &Path, name: &str, seed: u64, hours: f64) -> SynthArgs {
    SynthArgs {
        out: dir.join(name),
        seed,
        hours,
        channels: 4,
        sample_interval: None,
        noise_std: None,
        periodic_amplitude: None,
        noise_free: false,
    }
}

fn synth(args: &SynthArgs) -> Result<PathBuf, String> {
    cli(cmd_synth(args))?;
    Ok(args.out.clone())
}

const PUBLISHED_ERRORS: [f64; 5] = [-2.706, 0.466, -0.206, -0.269, -0.251];

fn metric_oracle() -> Outcome {
    let score = score_rul(&PUBLISHED_ERRORS.map(accuracy_ft)).map_err(|e| e.to_string())?;
    ensure((score - 0.914).abs() <= 0.005, || format!("Score_RUL {score:.5}, expected 0.914 +- 0.005"))?;
    Ok(format!("Score_RUL {score:.5}"))
}

fn gradient_suite() -> Outcome {
    let mut worst = ("", 0.0f64);
    for (name, err) in suites::primitive_gradients() {
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let block = suites::block_gradient();
    let model = suites::model_gradient(0);
    let max = worst.1.max(block).max(model);
    let detail = format!("max relative error {max:.2e} (primitives {:.2e} at {}, stage {block:.2e}, toy model {model:.2e})", worst.1, worst.0);
    ensure(max <= 1e-4, || detail.clone())?;
    Ok(detail)
}

fn vanilla_equivalence() -> Outcome {
    let worst = suites::vanilla_equivalence(100);
    ensure(worst <= 1e-9, || format!("largest gap {worst:.2e}"))?;
    Ok(format!("largest elementwise gap {worst:.2e} over 100 inputs"))
}

fn shape_clamp() -> Outcome {
    let checks = suites::shape_clamp_suite()?;
    Ok(format!("{checks} shape checks for N = 1..40"))
}

fn overfit(dir: &Path) -> Outcome {
    let raw = synth(&SynthArgs {
        sample_interval: Some(0.1),
        noise_free: true,
        ..synth_args(dir, "c5_raw.csv", 11, 200.0)
    })?;
    let cfg = config("split_hours=150\n");
    let pre = dir.join("c5_pre.csv");
    cli(cmd_preprocess(&raw, &pre, &cfg))?;
    let ck = dir.join("c5.tstc");
    let summary = cli(cmd_train(&pre, &cfg, &ck, &default_loss_path(&ck)))?;
    let losses = &summary.report.loss_history;
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let reached = losses.iter().position(|&l| l <= 1e-3).map(|e| e + 1);
    let f = cli(cmd_predict(&pre, &ck, &dir.join("c5_forecast.csv"), &cfg))?;
    let err = rmse(&f.pred, &f.truth).map_err(|e| e.to_string())?;
    let detail = format!(
        "{} windows, {} epochs, loss <= 1e-3 from epoch {}, best loss {best:.2e}, forecast RMSE {err:.4} V",
        summary.windows,
        losses.len(),
        reached.map_or("never".to_string(), |e| e.to_string())
    );
    ensure(matches!(reached, Some(e) if e <= 500) && err < 0.01, || detail.clone())?;
    Ok(detail)
}

/// Noisy run: raw samples every minute over 1000 h, voltage noise 0.5 mV and
/// a 0.05 mV periodic term on top of drift and two recoveries.
fn prognostics_config() -> RunConfig {
    config("epochs=200\n")
}

fn noisy_args(dir: &Path, name: &str) -> SynthArgs {
    SynthArgs {
        noise_std: Some(0.0005),
        periodic_amplitude: Some(0.00005),
        ..synth_args(dir, name, 2024, 1000.0)
    }
}

fn end_to_end(dir: &Path) -> Outcome {
    let args = noisy_args(dir, "c6_raw.csv");
    let raw = synth(&args)?;
    let cfg = prognostics_config();
    let pre = dir.join("c6_pre.csv");
    cli(cmd_preprocess(&raw, &pre, &cfg))?;
    let ck = dir.join("c6.tstc");
    cli(cmd_train(&pre, &cfg, &ck, &default_loss_path(&ck)))?;
    let forecast = dir.join("c6_forecast.csv");
    cli(cmd_predict(&pre, &ck, &forecast, &cfg))?;
    let report = cli(cmd_evaluate(&forecast, &dir.join("c6_report.csv"), &dir.join("c6_report.svg"), &cfg))?;

    // truth RULs must agree with the generator's closed-form crossings
    let spec = args.spec();
    let thresholds = cfg.fault_thresholds()?;
    let mut lines = Vec::new();
    for (e, fr) in report.estimates.iter().zip(DEFAULT_LOSS_FRACTIONS) {
        let analytic = spec.crossing_time(thresholds.voltage(fr), args.hours).map(|t| t - cfg.origin());
        let (t, a) = (e.rul_true.ok_or("truth never crosses")?, analytic.ok_or("no analytic crossing")?);
        ensure((t - a).abs() < 2.0, || format!("FT {fr}: observed RUL {t:.2} h vs analytic {a:.2} h"))?;
        lines.push(format!("{:.1}%: {}", fr * 100.0, e.percent_error.map_or("NA".into(), |p| format!("{p:+.2}%"))));
    }
    let score = report.score_rul;
    let all_within = report.estimates.iter().all(|e| matches!(e.percent_error, Some(p) if p.abs() <= 5.0));
    let detail = format!(
        "Score_RUL {}, %Er_FT [{}], RMSE {:.5} V",
        score.map_or("NA".into(), |s| format!("{s:.4}")),
        lines.join(", "),
        report.rmse
    );
    ensure(all_within && matches!(score, Some(s) if s >= 0.85), || detail.clone())?;
    Ok(detail)
}

fn determinism(dir: &Path) -> Outcome {
    let raw = synth(&SynthArgs {
        sample_interval: Some(0.05),
        ..synth_args(dir, "c7_raw.csv", 5, 300.0)
    })?;
    let cfg = config("split_hours=200\nepochs=5\n");
    let pre = dir.join("c7_pre.csv");
    cli(cmd_preprocess(&raw, &pre, &cfg))?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let ck = dir.join(format!("c7_{run}.tstc"));
        let loss = default_loss_path(&ck);
        cli(cmd_train(&pre, &cfg, &ck, &loss))?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
        outputs.push((read(&ck)?, read(&loss)?));
    }
    ensure(outputs[0].0 == outputs[1].0, || "checkpoints differ".into())?;
    ensure(outputs[0].1 == outputs[1].1, || "loss CSVs differ".into())?;
    load_checkpoint(&dir.join("c7_a.tstc")).map_err(|e| e.to_string())?;
    Ok(format!("checkpoints ({} bytes) and loss CSVs identical", outputs[0].0.len()))
}

fn lag_scan(dir: &Path) -> Outcome {
    let pre = dir.join("c6_pre.csv");
    if !pre.exists() {
        let raw = synth(&noisy_args(dir, "c8_raw.csv"))?;
        cli(cmd_preprocess(&raw, &pre, &prognostics_config()))?;
    }
    let cfg = config("epochs=40\nwindow_stride=2\n");
    let table = cli(cmd_lag_scan(&pre, &[32, 64, 128, 256], &dir.join("c8_lag.csv"), &cfg))?;
    ensure(table.lags.len() == 4 && table.lags.iter().all(|r| r.len() == 5), || "table is not 4 x 5".into())?;
    let present: Vec<f64> = table.lags.iter().flatten().flatten().copied().collect();
    ensure(present.iter().all(|v| v.is_finite()), || "non-finite lag".into())?;
    let rows: Vec<String> = table
        .windows
        .iter()
        .zip(&table.lags)
        .map(|(w, r)| format!("{w}: [{}]", r.iter().map(|v| v.map_or("NA".into(), |x| format!("{x:.1}"))).collect::<Vec<_>>().join(" ")))
        .collect();
    Ok(format!("4 x 5 table, {} of 20 cells crossed; lag h {}", present.len(), rows.join("; ")))
}

fn half_life() -> Outcome {
    let (a, b, c) = (accuracy_ft(-5.0), accuracy_ft(20.0), accuracy_ft(0.0));
    ensure((a - 0.5).abs() <= 1e-12 && (b - 0.5).abs() <= 1e-12 && c == 1.0, || format!("A(-5) = {a}, A(20) = {b}, A(0) = {c}"))?;
    Ok(format!("A(-5) = {a}, A(20) = {b}, A(0) = {c}"))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let d = dir.path();
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("metric oracle", Duration::from_secs(1), Box::new(metric_oracle)),
        ("gradient suite", Duration::from_secs(60), Box::new(gradient_suite)),
        ("vanilla equivalence", Duration::from_secs(10), Box::new(vanilla_equivalence)),
        ("shape/clamp suite", Duration::from_secs(5), Box::new(shape_clamp)),
        ("overfit property", Duration::from_secs(300), Box::new(|| overfit(d))),
        ("end-to-end prognostics", Duration::from_secs(600), Box::new(|| end_to_end(d))),
        ("determinism", Duration::from_secs(600), Box::new(|| determinism(d))),
        ("lag-scan", Duration::from_secs(1200), Box::new(|| lag_scan(d))),
        ("metric half-life identities", Duration::from_secs(1), Box::new(half_life)),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > *budget => Err(format!("took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if outcome.is_err() {
            failed += 1;
        }
        println!("criterion {} ({name}): {tag} in {elapsed:.1?}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
