//! Command-line interface.
//!
//! Subcommands: `phantom` (generate a synthetic study), `track` (multi-view
//! tracker), `baseline` (demons or FFD on SAX only), `eval` (ED-to-ES metric
//! table) and `report` (volume/EF curves, strains, wall thickness).
//!
//! Exit codes: 0 success, 1 runtime failure, 2 validation failure. All
//! outputs are byte-deterministic in sequential mode (`--threads 0`, the
//! default); timing goes to stderr only.

use crate::analysis::{self, Axis, LvAxis};
use crate::baselines::{register_demons, register_ffd, DemonsConfig, FfdConfig};
use crate::error::{Error, Result};
use crate::grid::{warp_labels, DisplacementField, LABEL_MYOCARDIUM};
use crate::metrics;
use crate::phantom::{generate, PhantomConfig};
use crate::study::{self, RunMetadata};
use crate::tracker::{self, TrackerConfig, TrackingResult};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

const APP_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "cardiomotion",
    version,
    about = "Dense 3D myocardial motion estimation from multi-view 2D cine stacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic beating-LV study with analytic ground truth.
    Phantom(PhantomArgs),
    /// Estimate per-frame motion fields with the multi-view tracker.
    Track(TrackArgs),
    /// Run a classical single-view baseline (demons or FFD).
    Baseline(BaselineArgs),
    /// Evaluate ED-to-ES tracking quality against the study segmentations.
    Eval(EvalArgs),
    /// Derive clinical curves: LV volume, EF, strains, wall thickness.
    Report(ReportArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output study directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrackArgs {
    /// Study directory produced by `phantom`.
    #[arg(long)]
    study: PathBuf,
    /// Tracker config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 = sequential deterministic mode.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    study: PathBuf,
    /// Baseline method: demons or ffd.
    #[arg(long)]
    method: String,
    /// Baseline config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 = sequential deterministic mode.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    study: PathBuf,
    /// A run directory, or a directory of run directories.
    #[arg(long)]
    fields: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    study: PathBuf,
    /// A run directory with full-cycle fields.
    #[arg(long)]
    fields: PathBuf,
    /// Output directory for the CSV/JSON reports.
    #[arg(long)]
    out: PathBuf,
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| {
                Error::InvalidArgument(format!("config {}: {e}", p.display()))
            })
        }
    }
}

fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let mut config: PhantomConfig = load_json_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| {
        Error::InvalidArgument(format!("phantom config: {e}"))
    })?;
    let study = generate(&config)?;
    let manifest = study::save_study(&study, &args.out)?;
    eprintln!(
        "wrote study {} ({} frames, ES at {}) to {}",
        manifest.subject,
        manifest.frames,
        manifest.es_index,
        args.out.display()
    );
    Ok(())
}

/// Track all frames, optionally spreading independent frames over a rayon
/// pool. Frame results are independent of execution order, so the parallel
/// path produces the same bytes as the sequential one; warm-start runs are
/// inherently sequential.
fn track_study(
    study: &crate::phantom::PhantomStudy,
    cfg: &TrackerConfig,
    threads: usize,
) -> Result<TrackingResult> {
    if threads <= 1 || cfg.warm_start {
        return tracker::track_sequence(study, cfg);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Optimization(format!("thread pool: {e}")))?;
    let frames = study.frames();
    type FrameOut = (DisplacementField, Vec<crate::tracker::TraceRow>, Option<String>, f64);
    let per_frame: Vec<FrameOut> = pool.install(|| {
        use rayon::prelude::*;
        (1..frames)
            .into_par_iter()
            .map(|t| {
                let started = std::time::Instant::now();
                let out = tracker::build_context(study, t, cfg, tracker::ViewSelection::SaxAndLax)
                    .and_then(|ctx| tracker::track_pair(&ctx, cfg));
                let secs = started.elapsed().as_secs_f64();
                match out {
                    Ok((field, trace)) => (field, trace, None, secs),
                    Err(e) => (
                        DisplacementField::zeros(study.dims, study.spacing),
                        Vec::new(),
                        Some(e.to_string()),
                        secs,
                    ),
                }
            })
            .collect()
    });
    let mut result = TrackingResult {
        fields: vec![DisplacementField::zeros(study.dims, study.spacing)],
        traces: vec![Vec::new()],
        iterations: vec![0],
        wall_secs: vec![0.0],
        failures: vec![None],
    };
    for (field, trace, failure, secs) in per_frame {
        result.iterations.push(trace.len());
        result.fields.push(field);
        result.traces.push(trace);
        result.failures.push(failure);
        result.wall_secs.push(secs);
    }
    Ok(result)
}

fn write_run(
    out: &Path,
    method: &str,
    subject: &str,
    config_json: &str,
    result: &TrackingResult,
) -> Result<i32> {
    let metadata = RunMetadata {
        method: method.to_string(),
        subject: subject.to_string(),
        config_sha256: study::sha256_hex(config_json.as_bytes()),
        app_version: APP_VERSION.to_string(),
        frames: result.fields.len(),
        iterations: result.iterations.clone(),
        failures: result.failures.clone(),
    };
    study::save_run(out, &result.fields, &result.traces, &metadata)?;
    let failed = result.failures.iter().flatten().count();
    let total: f64 = result.wall_secs.iter().sum();
    eprintln!(
        "{method}: {} frames in {total:.1}s ({failed} failed) -> {}",
        result.fields.len(),
        out.display()
    );
    for (t, failure) in result.failures.iter().enumerate() {
        if let Some(msg) = failure {
            eprintln!("  frame {t} failed: {msg}");
        }
    }
    // Success when at least one non-reference frame tracked.
    Ok(if failed + 1 < result.fields.len() { 0 } else { 1 })
}

fn cmd_track(args: &TrackArgs) -> Result<i32> {
    let cfg: TrackerConfig = load_json_config(&args.config)?;
    cfg.validate()?;
    let study = study::load_study(&args.study)?;
    if cfg.weights.beta > 0.0 && !study.planes.has_lax() {
        eprintln!(
            "warning: study has no LAX planes; the shape term degrades to SAX-only supervision"
        );
    }
    let result = track_study(&study, &cfg, args.threads)?;
    let config_json = serde_json::to_string(&cfg)?;
    write_run(
        &args.out,
        "tracker",
        &study::subject_name(&study.config),
        &config_json,
        &result,
    )
}

fn cmd_baseline(args: &BaselineArgs) -> Result<i32> {
    enum Method {
        Demons(DemonsConfig),
        Ffd(FfdConfig),
    }
    let method = match args.method.as_str() {
        "demons" => Method::Demons(load_json_config(&args.config)?),
        "ffd" => Method::Ffd(load_json_config(&args.config)?),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown baseline method {other:?} (expected demons or ffd)"
            )))
        }
    };
    let study = study::load_study(&args.study)?;
    let frames = study.frames();
    let config_json = match &method {
        Method::Demons(c) => {
            c.validate()?;
            serde_json::to_string(c)?
        }
        Method::Ffd(c) => {
            c.validate()?;
            serde_json::to_string(c)?
        }
    };

    let run_frame = |t: usize| -> (DisplacementField, Option<String>, f64) {
        let started = std::time::Instant::now();
        // Baselines consume SAX volumes only: fixed is the target frame,
        // moving the ED frame, matching the tracker's field convention.
        let out = match &method {
            Method::Demons(c) => register_demons(&study.images[t], &study.images[0], c),
            Method::Ffd(c) => register_ffd(&study.images[t], &study.images[0], c),
        };
        let secs = started.elapsed().as_secs_f64();
        match out {
            Ok(field) => (field, None, secs),
            Err(e) => (
                DisplacementField::zeros(study.dims, study.spacing),
                Some(e.to_string()),
                secs,
            ),
        }
    };

    let per_frame: Vec<(DisplacementField, Option<String>, f64)> = if args.threads <= 1 {
        (1..frames).map(run_frame).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads)
            .build()
            .map_err(|e| Error::Optimization(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            (1..frames).into_par_iter().map(run_frame).collect()
        })
    };

    let mut result = TrackingResult {
        fields: vec![DisplacementField::zeros(study.dims, study.spacing)],
        traces: vec![Vec::new()],
        iterations: vec![0],
        wall_secs: vec![0.0],
        failures: vec![None],
    };
    for (field, failure, secs) in per_frame {
        result.fields.push(field);
        result.traces.push(Vec::new());
        result.iterations.push(0);
        result.failures.push(failure);
        result.wall_secs.push(secs);
    }
    write_run(
        &args.out,
        &args.method,
        &study::subject_name(&study.config),
        &config_json,
        &result,
    )
}

pub const EVAL_CSV_HEADER: &str = "subject,method,dice,hd_mm,vd_pct,negjac_pct,epe_mm,epe_z_mm";

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let study = study::load_study(&args.study)?;
    let es = tracker::find_es_frame(&study)?;
    if es.low_confidence {
        eprintln!(
            "warning: ES detection is low-confidence (max MSE {:.3e} below noise floor)",
            es.max_mse
        );
    }
    let runs = study::discover_runs(&args.fields)?;
    let mut csv = String::from(EVAL_CSV_HEADER);
    csv.push('\n');
    for (dir, meta) in &runs {
        let field_path = dir.join(study::field_file_name(es.index));
        if !field_path.exists() {
            return Err(Error::Format(format!(
                "missing ES field {}",
                field_path.display()
            )));
        }
        let field = study::load_run_field(dir, es.index)?;
        let warped = warp_labels(&study.labels[0], &field)?;
        let s_es = &study.labels[es.index];
        let dice = metrics::dice(&warped, s_es, LABEL_MYOCARDIUM)?;
        let hd = metrics::hausdorff_mm(&warped, s_es, LABEL_MYOCARDIUM, study.spacing)?;
        let vd = metrics::volume_difference_pct(&study.labels[0], &warped, LABEL_MYOCARDIUM)?;
        let negjac = metrics::negative_jacobian_fraction_pct(&field, s_es, LABEL_MYOCARDIUM)?;
        let epe = metrics::end_point_error(&field, &study.gt_fields[es.index], s_es, LABEL_MYOCARDIUM)?;
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            meta.subject, meta.method, dice, hd, vd, negjac, epe.mean_mm, epe.per_axis_mm[2]
        ));
    }
    if let Some(parent) = args.out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&args.out, csv)?;
    eprintln!("wrote {} rows to {}", runs.len(), args.out.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<i32> {
    let study = study::load_study(&args.study)?;
    let frames = study.frames();
    let mut fields = Vec::with_capacity(frames);
    for t in 0..frames {
        fields.push(study::load_run_field(&args.fields, t)?);
    }
    fs::create_dir_all(&args.out)?;
    let axis = LvAxis {
        origin_mm: study.config.center_mm,
        axis: Axis::Z,
    };
    let mut wrote = 0usize;
    let mut failed = 0usize;

    // Volume / EF curves.
    match analysis::lv_volume_curve(&study, &fields)
        .and_then(|curve| analysis::ejection_fraction(&curve.ml).map(|ef| (curve, ef)))
    {
        Ok((curve, (ef_global, ef_curve))) => {
            let mut csv = String::from("t,volume_ml,volume_norm,ef_pct\n");
            for t in 0..frames {
                csv.push_str(&format!(
                    "{t},{:.6},{:.6},{:.6}\n",
                    curve.ml[t], curve.normalized[t], ef_curve[t]
                ));
            }
            fs::write(args.out.join("volume_curve.csv"), csv)?;
            fs::write(
                args.out.join("ejection_fraction.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "ef_pct": ef_global,
                }))?,
            )?;
            wrote += 1;
        }
        Err(e) => {
            eprintln!("volume curve failed: {e}");
            failed += 1;
        }
    }

    // Global strain curve from inverted (forward) fields.
    {
        let mut csv = String::from("t,radial_pct,circ_pct,long_pct\n");
        let mut ok = true;
        for (t, field) in fields.iter().enumerate() {
            let strains = analysis::invert_field(field).and_then(|fwd| {
                analysis::global_strains(&fwd, &study.labels[0], LABEL_MYOCARDIUM, &axis)
            });
            match strains {
                Ok(s) => csv.push_str(&format!("{t},{:.6},{:.6},{:.6}\n", s[0], s[1], s[2])),
                Err(e) => {
                    eprintln!("strain at frame {t} failed: {e}");
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            fs::write(args.out.join("strain_curve.csv"), csv)?;
            wrote += 1;
        } else {
            failed += 1;
        }
    }

    // Wall thickness at ED and at the warped ES.
    let es = tracker::find_es_frame(&study)?;
    let thickness = (|| -> Result<serde_json::Value> {
        let ed = analysis::wall_thickness_global(&study.labels[0], Axis::Z)?;
        let warped = warp_labels(&study.labels[0], &fields[es.index])?;
        let es_wt = analysis::wall_thickness_global(&warped, Axis::Z)?;
        let thickening = analysis::fractional_wall_thickening(ed.global_mm, es_wt.global_mm)?;
        Ok(serde_json::json!({
            "ed_mm": ed.global_mm,
            "es_mm": es_wt.global_mm,
            "fractional_thickening_pct": thickening,
            "ed_slices_used": ed.slices_used,
            "ed_slices_skipped": ed.slices_skipped,
            "es_slices_used": es_wt.slices_used,
            "es_slices_skipped": es_wt.slices_skipped,
        }))
    })();
    match thickness {
        Ok(value) => {
            fs::write(
                args.out.join("wall_thickness.json"),
                serde_json::to_string_pretty(&value)?,
            )?;
            wrote += 1;
        }
        Err(e) => {
            eprintln!("wall thickness failed: {e}");
            failed += 1;
        }
    }

    eprintln!(
        "report: {wrote} artifacts written, {failed} failed -> {}",
        args.out.display()
    );
    Ok(if wrote > 0 { 0 } else { 1 })
}

/// Parse and run; returns the process exit code.
pub fn main_with_args<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; keep its exit code for --help.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome: Result<i32> = match &cli.command {
        Command::Phantom(a) => cmd_phantom(a).map(|_| 0),
        Command::Track(a) => cmd_track(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Eval(a) => cmd_eval(a).map(|_| 0),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
