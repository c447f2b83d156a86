//! The `airsq` command line: synth, filter, cluster, train, predict, eval,
//! sensitivity, ensemble, raster, spline-check. One JSON config file plus
//! flag overrides (flags win); outputs are written atomically via a temp
//! file and rename.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::anchors;
use crate::config::{seed_for, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, JointGroundTruth};
use crate::model::{self, Representation, TrainExample};
use crate::raster;
use crate::scenario::{self, ObjectType, Scenario};
use crate::spline;
use crate::synth;

#[derive(Parser)]
#[command(name = "airsq", version, about = "Anchored joint interaction prediction")]
pub struct Cli {
    /// JSON run configuration; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; each subcommand derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Emit the primary report as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic crossing-paths scenarios.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop scenarios whose agents jump impossibly between valid steps.
    Filter {
        #[arg(long = "max-step")]
        max_step: Option<f64>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-type anchor sets with masked K-Means.
    Cluster {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "k-vehicle")]
        k_vehicle: Option<usize>,
        #[arg(long = "k-ped")]
        k_ped: Option<usize>,
        #[arg(long = "k-cyc")]
        k_cyc: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Two-phase training: marginal pretrain, then the interaction loss.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "epochs-marginal")]
        epochs_marginal: Option<usize>,
        #[arg(long = "epochs-joint")]
        epochs_joint: Option<usize>,
        #[arg(long = "max-steps")]
        max_steps: Option<usize>,
        #[arg(long = "freeze-marginal")]
        freeze_marginal: bool,
        #[arg(long, value_parser = parse_representation)]
        representation: Option<Representation>,
        #[arg(long = "w-cls")]
        w_cls: Option<f64>,
        #[arg(long = "w-reg")]
        w_reg: Option<f64>,
        #[arg(long = "w-m")]
        w_m: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long = "loss-curve")]
        loss_curve: Option<PathBuf>,
    },
    /// Run the model over a scenario file and write predictions.
    Predict {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_representation)]
        representation: Option<Representation>,
    },
    /// Joint mAP / minADE / minFDE / loss report for a prediction file.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long = "map-config")]
        map_config: Option<PathBuf>,
        /// Score the independent-product baseline instead of the model grid.
        #[arg(long)]
        product: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metric-loss sensitivity analysis and weight recommendation.
    Sensitivity {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average predictions from multiple models (same anchors).
    Ensemble {
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one scenario to a PPM image.
    Raster {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scenario: usize,
        #[arg(long)]
        agent: usize,
        /// Prediction file; draws the partner's top mode into the image.
        #[arg(long)]
        rerasterize: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the 80x8 B-spline basis matrix as CSV.
    SplineCheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_representation(s: &str) -> std::result::Result<Representation, String> {
    match s {
        "plain" => Ok(Representation::Plain),
        "rerasterized" => Ok(Representation::Rerasterized),
        other => Err(format!("unknown representation {other:?} (plain|rerasterized)")),
    }
}

/// Write via temp file + rename so outputs are never half-written.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("invalid output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_gt_for_eval(
    gt_path: &Path,
    anchors_path: &Path,
) -> Result<(Vec<Scenario>, BTreeMap<ObjectType, anchors::AnchorSet>, Vec<JointGroundTruth>)> {
    let scenarios = scenario::load_scenarios(gt_path)?;
    let anchor_sets = anchors::load_anchor_dir(anchors_path)?;
    let truths = scenarios
        .iter()
        .map(|s| {
            let assignment = model::assignment_for(s, &anchor_sets)?;
            Ok(JointGroundTruth {
                gt0: s.pair_agent(0).future.clone(),
                gt1: s.pair_agent(1).future.clone(),
                assignment,
                types: (s.pair_agent(0).kind, s.pair_agent(1).kind),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scenarios, anchor_sets, truths))
}

#[derive(Serialize)]
struct EvalReport {
    map: f64,
    buckets: Vec<metrics::BucketAp>,
    mean_min_ade: f64,
    mean_min_fde: f64,
    mean_l_cls: f64,
    mean_l_reg: f64,
    scenarios: usize,
    product_baseline: bool,
}

fn eval_report(
    predictions: &[model::JointPrediction],
    truths: &[JointGroundTruth],
    cfg: &RunConfig,
    product: bool,
) -> Result<EvalReport> {
    let scored: Vec<model::JointPrediction> = if product {
        predictions.iter().map(|p| p.with_product_grid()).collect()
    } else {
        predictions.to_vec()
    };
    let report = metrics::joint_map(&scored, truths, &cfg.map)?;
    let n = scored.len() as f64;
    let mut ade = 0.0;
    let mut fde = 0.0;
    let mut l_cls = 0.0;
    let mut l_reg = 0.0;
    for (p, t) in scored.iter().zip(truths.iter()) {
        ade += metrics::min_joint_ade(p, t) / n;
        fde += metrics::min_joint_fde(p, t) / n;
        let cls = crate::loss::classification_loss(&p.grid, &t.assignment);
        l_cls += (cls.core + cfg.weights.w_m * cls.marginal) / n;
        let (r0, r1) = crate::loss::regression_loss(
            &p.marginal0.trajectories,
            &p.marginal1.trajectories,
            &t.gt0,
            &t.gt1,
            &t.assignment,
        );
        l_reg += (r0 + r1) / n;
    }
    Ok(EvalReport {
        map: report.mean_ap,
        buckets: report.buckets,
        mean_min_ade: ade,
        mean_min_fde: fde,
        mean_l_cls: l_cls,
        mean_l_reg: l_reg,
        scenarios: scored.len(),
        product_baseline: product,
    })
}

fn emit_report<T: Serialize>(report: &T, out: &Option<PathBuf>, _json: bool) -> Result<()> {
    let text =
        serde_json::to_string_pretty(report).map_err(|e| Error::Parse { line: 0, source: e })?;
    if let Some(path) = out {
        write_atomic(path, |tmp| {
            std::fs::write(tmp, format!("{text}\n"))?;
            Ok(())
        })?;
    }
    println!("{text}");
    Ok(())
}

/// Execute one subcommand. Errors bubble up to `main` for structured exit.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::Synth { n, out } => {
            let scenarios = synth::synth_generate(n, seed_for(cfg.seed, "synth"), &cfg.synth);
            write_atomic(&out, |tmp| scenario::save_scenarios(tmp, &scenarios))?;
            eprintln!("wrote {} scenarios to {}", scenarios.len(), out.display());
        }
        Command::Filter {
            max_step,
            input,
            out,
        } => {
            let max_step = max_step.unwrap_or(cfg.cluster.max_step);
            if max_step <= 0.0 {
                return Err(Error::Config("max-step must be positive".to_string()));
            }
            let scenarios = scenario::load_scenarios(&input)?;
            let before = scenarios.len();
            let kept: Vec<Scenario> = scenarios
                .into_iter()
                .filter(|s| {
                    s.agents
                        .iter()
                        .all(|a| !scenario::is_corrupt(&a.future, max_step))
                })
                .collect();
            write_atomic(&out, |tmp| scenario::save_scenarios(tmp, &kept))?;
            eprintln!(
                "kept {} of {before} scenarios (dropped {})",
                kept.len(),
                before - kept.len()
            );
        }
        Command::Cluster {
            input,
            out,
            k_vehicle,
            k_ped,
            k_cyc,
            iters,
        } => {
            let mut ccfg = cfg.cluster.clone();
            ccfg.seed = seed_for(cfg.seed, "cluster");
            if let Some(k) = k_vehicle {
                ccfg.k_vehicle = k;
            }
            if let Some(k) = k_ped {
                ccfg.k_pedestrian = k;
            }
            if let Some(k) = k_cyc {
                ccfg.k_cyclist = k;
            }
            if let Some(i) = iters {
                ccfg.iters = i;
            }
            let scenarios = scenario::load_scenarios(&input)?;
            let sets = anchors::fit_all_types(&scenarios, &ccfg)?;
            std::fs::create_dir_all(&out)?;
            for (kind, set) in &sets {
                let path = out.join(format!("{}.json", kind.name()));
                write_atomic(&path, |tmp| anchors::save_anchor_set(tmp, set))?;
                eprintln!("{}: K={} -> {}", kind.name(), set.k(), path.display());
            }
        }
        Command::Train {
            input,
            anchors: anchors_dir,
            out,
            epochs_marginal,
            epochs_joint,
            max_steps,
            freeze_marginal,
            representation,
            w_cls,
            w_reg,
            w_m,
            lr,
            batch,
            loss_curve,
        } => {
            let mut cfg = cfg;
            if let Some(e) = epochs_marginal {
                cfg.epochs_marginal = e;
            }
            if let Some(e) = epochs_joint {
                cfg.epochs_joint = e;
            }
            if freeze_marginal {
                cfg.freeze_marginal = true;
            }
            if let Some(r) = representation {
                cfg.model.representation = r;
            }
            if let Some(w) = w_cls {
                cfg.weights.w_cls = w;
            }
            if let Some(w) = w_reg {
                cfg.weights.w_reg = w;
            }
            if let Some(w) = w_m {
                cfg.weights.w_m = w;
            }
            if let Some(l) = lr {
                cfg.optimizer.lr = l;
            }
            if let Some(b) = batch {
                cfg.optimizer.batch_size = b;
            }

            let scenarios = scenario::load_scenarios(&input)?;
            let anchor_sets = anchors::load_anchor_dir(&anchors_dir)?;
            let examples = scenarios
                .iter()
                .map(|s| {
                    Ok(TrainExample {
                        scenario: s.clone(),
                        assignment: model::assignment_for(s, &anchor_sets)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let params = model::init_params(&cfg.model, seed_for(cfg.seed, "init"));
            eprintln!(
                "training on {} scenarios ({} marginal + {} joint epochs)",
                examples.len(),
                cfg.epochs_marginal,
                cfg.epochs_joint
            );
            let options = cfg.train_options(seed_for(cfg.seed, "train"), max_steps);
            let report = model::train(params, &examples, &anchor_sets, &cfg.raster, &options)?;
            write_atomic(&out, |tmp| model::save_checkpoint(tmp, &report.params))?;
            if let Some(curve_path) = loss_curve {
                write_atomic(&curve_path, |tmp| {
                    model::write_loss_curve(tmp, &report.curve)
                })?;
            }
            eprintln!(
                "ran {} optimizer steps; checkpoint -> {}",
                report.steps_run,
                out.display()
            );
        }
        Command::Predict {
            input,
            model: model_path,
            anchors: anchors_dir,
            out,
            representation,
        } => {
            let mut params = model::load_checkpoint(&model_path)?;
            if let Some(r) = representation {
                params.config.representation = r;
            }
            let scenarios = scenario::load_scenarios(&input)?;
            let anchor_sets = anchors::load_anchor_dir(&anchors_dir)?;
            let mut rows = Vec::with_capacity(scenarios.len());
            for s in &scenarios {
                let pred = model::predict_joint(&params, s, &anchor_sets, &cfg.raster)?;
                rows.push((s.pair_agent(0).kind, s.pair_agent(1).kind, pred));
            }
            write_atomic(&out, |tmp| model::save_predictions(tmp, &rows))?;
            eprintln!("wrote {} predictions to {}", rows.len(), out.display());
        }
        Command::Eval {
            pred,
            gt,
            anchors: anchors_dir,
            map_config,
            product,
            out,
        } => {
            let mut cfg = cfg;
            if let Some(path) = map_config {
                let data = std::fs::read_to_string(path)?;
                cfg.map =
                    serde_json::from_str(&data).map_err(|e| Error::Parse { line: 1, source: e })?;
            }
            let (_, _, truths) = load_gt_for_eval(&gt, &anchors_dir)?;
            let predictions: Vec<model::JointPrediction> = model::load_predictions(&pred)?
                .into_iter()
                .map(|(_, _, p)| p)
                .collect();
            if predictions.len() != truths.len() {
                return Err(Error::Config(format!(
                    "{} predictions vs {} ground-truth scenarios",
                    predictions.len(),
                    truths.len()
                )));
            }
            let report = eval_report(&predictions, &truths, &cfg, product)?;
            emit_report(&report, &out, cli.json)?;
        }
        Command::Sensitivity {
            pred,
            gt,
            anchors: anchors_dir,
            alpha,
            out,
        } => {
            let alpha = alpha.unwrap_or(cfg.alpha);
            let (_, _, truths) = load_gt_for_eval(&gt, &anchors_dir)?;
            let predictions: Vec<model::JointPrediction> = model::load_predictions(&pred)?
                .into_iter()
                .map(|(_, _, p)| p)
                .collect();
            let report =
                metrics::sensitivity_analysis(&predictions, &truths, alpha, &cfg.weights, &cfg.map)?;
            emit_report(&report, &out, cli.json)?;
        }
        Command::Ensemble { preds, out } => {
            let mut loaded: Vec<Vec<(ObjectType, ObjectType, model::JointPrediction)>> = Vec::new();
            for p in &preds {
                loaded.push(model::load_predictions(p)?);
            }
            let n = loaded[0].len();
            if loaded.iter().any(|l| l.len() != n) {
                return Err(Error::Config(
                    "prediction files must cover the same scenarios".to_string(),
                ));
            }
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let members: Vec<model::JointPrediction> =
                    loaded.iter().map(|l| l[i].2.clone()).collect();
                rows.push((loaded[0][i].0, loaded[0][i].1, model::ensemble_models(&members)?));
            }
            write_atomic(&out, |tmp| model::save_predictions(tmp, &rows))?;
            eprintln!(
                "ensembled {} models over {n} scenarios -> {}",
                preds.len(),
                out.display()
            );
        }
        Command::Raster {
            input,
            scenario: index,
            agent,
            rerasterize: pred_path,
            out,
        } => {
            if agent > 1 {
                return Err(Error::Config("agent must be 0 or 1".to_string()));
            }
            let scenarios = scenario::load_scenarios(&input)?;
            let s = scenarios
                .get(index)
                .ok_or_else(|| Error::Config(format!("scenario {index} out of range")))?;
            let image = match pred_path {
                Some(p) => {
                    let preds = model::load_predictions(&p)?;
                    let (_, _, pred) = preds
                        .get(index)
                        .ok_or_else(|| Error::Config(format!("prediction {index} out of range")))?;
                    let partner = if agent == 0 { &pred.marginal1 } else { &pred.marginal0 };
                    let top = &partner.trajectories[partner.top_mode()];
                    raster::rerasterize(s, agent, top, &cfg.raster)?
                }
                None => raster::rasterize(s, agent, &cfg.raster)?,
            };
            write_atomic(&out, |tmp| raster::write_ppm(&image, tmp))?;
            eprintln!("wrote {}", out.display());
        }
        Command::SplineCheck { out } => {
            let basis = spline::standard_basis();
            let mut text = String::new();
            for row in 0..basis.num_out {
                let cells: Vec<String> = basis.row(row).iter().map(|w| w.to_string()).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            match out {
                Some(path) => write_atomic(&path, |tmp| {
                    std::fs::write(tmp, &text)?;
                    Ok(())
                })?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Parse argv and execute; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints usage/help itself.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string() })
            );
            1
        }
    }
}
