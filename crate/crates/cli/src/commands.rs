use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use macformer_core::attention::MaskKind;
use macformer_core::bench::{
    gaussian_matrix, moving_average, run_approx_grid_with, tail_bound_check, GridConfig,
    GridResult, TailConfig, SCHEMA_VERSION,
};
use macformer_core::model::{sinusoidal_positions, Macformer, MacformerConfig};
use macformer_core::rng::{derive_seed, stream_rng};
use macformer_core::verify::{run_verification, Fault, VerifyOptions};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{overlay_file, CliError};
use crate::{BenchArgs, DemoArgs, Shared, TailArgs, VerifyArgs};

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::Config(format!("cannot write {}: {e}", path.display()))
}

/// Prints `value` and, when requested, writes it to `out` as well.
fn emit_json(value: &Value, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    println!("{text}");
    if let Some(path) = out {
        let mut file = create(path)?;
        writeln!(file, "{text}")
            .and_then(|_| file.flush())
            .map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

fn to_value<T: Serialize>(value: &T) -> Result<Value, CliError> {
    serde_json::to_value(value).map_err(|e| CliError::Config(e.to_string()))
}

fn bench_config(shared: &Shared, args: &BenchArgs) -> Result<GridConfig, CliError> {
    let mut base = GridConfig::default();
    if shared.quick {
        base.batch = 1;
        base.heads = 1;
        base.lengths = vec![200, 1000];
        base.feature_dims = vec![64, 128];
        base.repeats = 3;
    }
    let mut c = overlay_file(base, shared.config.as_deref())?;
    if let Some(seed) = shared.seed {
        c.seed = seed;
    }
    if let Some(kernel) = args.kernel {
        c.kernel = kernel;
    }
    if let Some(lengths) = &args.lengths {
        c.lengths = lengths.clone();
    }
    if let Some(dims) = &args.dims {
        c.feature_dims = dims.clone();
    }
    c.repeats = args.repeats.unwrap_or(c.repeats);
    c.batch = args.batch.unwrap_or(c.batch);
    c.heads = args.heads.unwrap_or(c.heads);
    c.d = args.d.unwrap_or(c.d);
    c.p = args.p.unwrap_or(c.p);
    c.sbn_epsilon = args.sbn_epsilon.unwrap_or(c.sbn_epsilon);
    c.include_sampling |= args.include_sampling;
    c.validate()?;
    Ok(c)
}

fn print_table(config: &GridConfig, results: &[GridResult], smooth: bool) {
    println!(
        "{:>8} {:>6} {:>16} {:>10} {:>8} {:>8}",
        "length", "D", "log10 nmse", "accel", "guarded", "failed"
    );
    for &dim in &config.feature_dims {
        let cells: Vec<&GridResult> = results.iter().filter(|r| r.feature_dim == dim).collect();
        let mut nmse: Vec<f64> = cells.iter().map(|r| r.mean_log10_nmse).collect();
        let mut accel: Vec<f64> = cells.iter().map(|r| r.mean_log10_accel).collect();
        if smooth {
            nmse = moving_average(&nmse, 1);
            accel = moving_average(&accel, 1);
        }
        for (i, r) in cells.iter().enumerate() {
            println!(
                "{:>8} {:>6} {:>16.4} {:>9.2}x {:>8.4} {:>8}",
                r.length,
                r.feature_dim,
                nmse[i],
                10f64.powf(accel[i]),
                r.guarded_row_rate,
                r.failures
            );
        }
    }
}

pub fn bench_approx(shared: &Shared, args: BenchArgs) -> Result<(), CliError> {
    let config = bench_config(shared, &args)?;
    let path = shared
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("bench-approx requires --out <FILE>".into()))?;
    let mut file = create(path)?;
    let config_json =
        serde_json::to_string(&config).map_err(|e| CliError::Config(e.to_string()))?;
    writeln!(file, "# schema_version={SCHEMA_VERSION}")
        .and_then(|_| writeln!(file, "# config={config_json}"))
        .and_then(|_| writeln!(file, "{}", GridResult::CSV_HEADER))
        .and_then(|_| file.flush())
        .map_err(|e| io_error(path, e))?;

    let mut write_error = None;
    let results = run_approx_grid_with(&config, |r| {
        if write_error.is_none() {
            if let Err(e) = writeln!(file, "{}", r.csv_row()).and_then(|_| file.flush()) {
                write_error = Some(e);
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(io_error(path, e));
    }

    print_table(&config, &results, args.smooth);
    let dead: Vec<String> = results
        .iter()
        .filter(|r| r.failures == r.repeats)
        .map(|r| format!("length {} D {}", r.length, r.feature_dim))
        .collect();
    if dead.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "every repeat failed in: {}",
            dead.join("; ")
        )))
    }
}

fn tail_config(shared: &Shared, args: &TailArgs) -> Result<TailConfig, CliError> {
    let mut base = TailConfig::default();
    if shared.quick {
        base.trials = 1000;
    }
    let mut c = overlay_file(base, shared.config.as_deref())?;
    if let Some(seed) = shared.seed {
        c.seed = seed;
    }
    if let Some(kernel) = args.kernel {
        c.kernel = kernel;
    }
    if let Some(eps) = &args.eps {
        c.epsilons = eps.clone();
    }
    c.n = args.n.unwrap_or(c.n);
    c.d = args.d.unwrap_or(c.d);
    c.feature_dim = args.feature_dim.unwrap_or(c.feature_dim);
    c.value_bound = args.value_bound.unwrap_or(c.value_bound);
    c.trials = args.trials.unwrap_or(c.trials);
    c.p = args.p.unwrap_or(c.p);
    c.validate()?;
    Ok(c)
}

pub fn tail_check(shared: &Shared, args: TailArgs) -> Result<(), CliError> {
    let config = tail_config(shared, &args)?;
    let report = tail_bound_check(&config)?;
    let mut value = json!({ "schema_version": SCHEMA_VERSION, "config": to_value(&config)? });
    if let (Some(obj), Value::Object(fields)) = (value.as_object_mut(), to_value(&report)?) {
        obj.extend(fields);
    }
    emit_json(&value, shared.out.as_deref())?;
    let violated: Vec<String> = report
        .violations()
        .map(|e| format!("ε = {}", e.epsilon))
        .collect();
    if violated.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "bound exceeded at {}",
            violated.join(", ")
        )))
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct VerifySettings {
    quick: bool,
    seed: u64,
    inject_fault: bool,
}

pub fn verify(shared: &Shared, args: VerifyArgs) -> Result<(), CliError> {
    let mut settings = overlay_file(VerifySettings::default(), shared.config.as_deref())?;
    settings.quick |= shared.quick;
    settings.inject_fault |= args.inject_fault;
    if let Some(seed) = shared.seed {
        settings.seed = seed;
    }
    let options = VerifyOptions {
        quick: settings.quick,
        seed: settings.seed,
        fault: settings.inject_fault.then_some(Fault::ScaleCoefficient {
            degree: 1,
            factor: 2.0,
        }),
    };
    let started = Instant::now();
    let results = run_verification(&options);
    for r in &results {
        println!(
            "{} {:<22} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} properties passed in {:.1}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if let Some(path) = shared.out.as_deref() {
        let entries: Vec<Value> = results
            .iter()
            .map(|r| json!({ "name": r.name, "passed": r.passed, "detail": r.detail }))
            .collect();
        let value = json!({
            "schema_version": SCHEMA_VERSION,
            "config": to_value(&settings)?,
            "properties": entries,
        });
        let mut file = create(path)?;
        let text =
            serde_json::to_string_pretty(&value).map_err(|e| CliError::Config(e.to_string()))?;
        writeln!(file, "{text}")
            .and_then(|_| file.flush())
            .map_err(|e| io_error(path, e))?;
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{failed} properties failed")))
    }
}

pub fn demo_forward(shared: &Shared, args: DemoArgs) -> Result<(), CliError> {
    let mut config = overlay_file(MacformerConfig::default(), shared.config.as_deref())?;
    if let Some(seed) = shared.seed {
        config.seed = seed;
    }
    if let Some(kernel) = args.kernel {
        config.kernel = kernel;
    }
    config.feature_dim = args.feature_dim.unwrap_or(config.feature_dim);
    config.num_layers = args.layers.unwrap_or(config.num_layers);
    config.norm = args.norm.unwrap_or(config.norm);
    if args.length == 0 {
        return Err(CliError::Config("--length must be at least 1".into()));
    }
    let model = Macformer::new(config.clone())?;
    let mut rng = stream_rng(derive_seed(config.seed, &[0x696e_7075]), 0);
    let x = gaussian_matrix(args.length, config.embed_dim, &mut rng)
        + sinusoidal_positions(args.length, config.embed_dim);
    let mask = if args.causal {
        MaskKind::Causal
    } else {
        MaskKind::None
    };

    let started = Instant::now();
    let out = model.forward(x.view(), mask)?;
    let seconds = started.elapsed().as_secs_f64();
    let count = out.len() as f64;
    let mean = out.sum() / count;
    let std = (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count).sqrt();
    let value = json!({
        "schema_version": SCHEMA_VERSION,
        "config": to_value(&config)?,
        "length": args.length,
        "causal": args.causal,
        "shape": [out.nrows(), out.ncols()],
        "mean": mean,
        "std": std,
        "seconds": seconds,
    });
    emit_json(&value, shared.out.as_deref())
}
