use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vpd::config::ExperimentConfig;
use vpd::event_log::{densify, read_dataset, read_log_file, Channel, EventLog};
use vpd::harness::{self, ModelBundle, SearchSpec};
use vpd::morphology::{FilterOrder, MorphFilterSpec};
use vpd::passage_metric::{PqReport, PqTally};
use vpd::synth::{self, SynthConfig};

/// Vehicle passage detection from checkpoint sensor logs.
#[derive(Parser)]
#[command(name = "vpd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its manifest.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// noiseless or paper-like; replaces the config's synth section
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        n_files: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the configured model on every log in DATA.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained model on every log in DATA.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// `open,close,order` (e.g. `3,3,close-then-open`) or `none`
        #[arg(long)]
        morph: Option<String>,
    },
    /// Feature-subset ablation of the configured model.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare all model families and the basic classifier.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recurrent architecture search over cell types and hidden sizes.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        repeats: usize,
    },
    /// Score one channel of a log against a channel of another log.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "basic")]
        pred_channel: Channel,
        #[arg(long, default_value = "ref")]
        ref_channel: Channel,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn load_data(dir: &Path) -> Result<Vec<EventLog>> {
    let logs = read_dataset(dir).with_context(|| format!("reading logs from {}", dir.display()))?;
    if logs.is_empty() {
        bail!("no *.csv logs in {}", dir.display());
    }
    Ok(logs)
}

fn parse_morph(text: &str) -> Result<Option<MorphFilterSpec>> {
    if text.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let (open, close, order) = match parts.as_slice() {
        [o, c] => (*o, *c, "close-then-open"),
        [o, c, ord] => (*o, *c, *ord),
        _ => bail!("--morph expects `open,close[,order]` or `none`, got `{text}`"),
    };
    let order = match order {
        "close-then-open" => FilterOrder::CloseThenOpen,
        "open-then-close" => FilterOrder::OpenThenClose,
        other => bail!("unknown filter order `{other}`"),
    };
    let spec = MorphFilterSpec {
        open_width: open.parse().context("open width")?,
        close_width: close.parse().context("close width")?,
        order,
    };
    spec.validate()?;
    Ok(Some(spec))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Dense channel over `first..=last`: 0 before the log's first record, the
/// last value held after its final record.
fn aligned(log: &EventLog, channel: Channel, first: u64, last: u64) -> Result<Vec<bool>> {
    let series = densify(log)?;
    let values = series.channel(channel)?;
    let tail = *values.last().unwrap_or(&false);
    Ok((first..=last)
        .map(|f| {
            if f < series.first_frame() {
                false
            } else {
                values.get((f - series.first_frame()) as usize).copied().unwrap_or(tail)
            }
        })
        .collect())
}

fn score(pred: &EventLog, reference: &EventLog, pred_channel: Channel, ref_channel: Channel) -> Result<PqReport> {
    let bounds = |log: &EventLog| {
        let r = log.records();
        r.first().map(|a| (a.frame_no, r[r.len() - 1].frame_no))
    };
    let (Some((pf, pl)), Some((rf, rl))) = (bounds(pred), bounds(reference)) else {
        bail!("cannot score an empty log");
    };
    let (first, last) = (pf.min(rf), pl.max(rl));
    let mut tally = PqTally::default();
    tally.add_signals(
        &aligned(reference, ref_channel, first, last)?,
        &aligned(pred, pred_channel, first, last)?,
        first,
    )?;
    Ok(tally.report())
}

fn write_run(out: &Path, stem: &str, results: &[harness::ExperimentResult]) -> Result<()> {
    harness::write_results(out, stem, results)?;
    print!("{}", harness::render_table(results));
    log::info!("wrote {}/{stem}.json", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            out,
            preset,
            n_files,
            seed,
        } => {
            let mut synth_config = match &config {
                Some(path) => load_config(path)?.synth,
                None => SynthConfig::default(),
            };
            if let Some(name) = preset {
                let (n, s) = (synth_config.n_files, synth_config.seed);
                synth_config = match name.as_str() {
                    "noiseless" => SynthConfig::noiseless(n, s),
                    "paper-like" => SynthConfig::paper_like(n, s),
                    other => bail!("unknown preset `{other}` (noiseless, paper-like)"),
                };
            }
            if let Some(n) = n_files {
                synth_config.n_files = n;
            }
            if let Some(s) = seed {
                synth_config.seed = s;
            }
            let logs = synth::generate_corpus(&synth_config)?;
            synth::write_corpus(&out, &synth_config, &logs)?;
            let stats = synth::corpus_stats(&logs)?;
            eprintln!(
                "wrote {} files ({} frames, {} passages) to {}",
                stats.files,
                stats.frames,
                stats.passages,
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let config = load_config(&config)?;
            let logs = load_data(&data)?;
            let bundle = harness::train_bundle(&logs, &config)?;
            bundle.save(&out)?;
            eprintln!(
                "trained {} on {} files: threshold {:.2}, train PQ {:.4}",
                bundle.model.variant,
                logs.len(),
                bundle.threshold,
                bundle.train_report.pq
            );
        }
        Command::Evaluate {
            model,
            data,
            threshold,
            morph,
        } => {
            let bundle = ModelBundle::load(&model)?;
            if let Some(t) = threshold {
                if !(t > 0.0 && t < 1.0) {
                    bail!("--threshold must lie in (0, 1)");
                }
            }
            let logs = load_data(&data)?;
            let report = match morph.as_deref() {
                Some(text) => {
                    let files = harness::prepare_files(&logs, bundle.input_morph.as_ref())?;
                    harness::evaluate_model(
                        &bundle.model,
                        &bundle.features,
                        threshold.unwrap_or(bundle.threshold),
                        &files,
                        parse_morph(text)?.as_ref(),
                    )?
                }
                None => bundle.evaluate(&logs, threshold, None)?,
            };
            print_json(&report)?;
        }
        Command::Ablate { config, data, out } => {
            let config = load_config(&config)?;
            let files = harness::prepare_files(&load_data(&data)?, config.input_morph.as_ref())?;
            write_run(&out, "ablation", &harness::run_ablation(&files, &config)?)?;
        }
        Command::Compare { config, data, out } => {
            let config = load_config(&config)?;
            let files = harness::prepare_files(&load_data(&data)?, config.input_morph.as_ref())?;
            write_run(&out, "comparison", &harness::run_model_comparison(&files, &config)?)?;
        }
        Command::Search {
            config,
            data,
            out,
            repeats,
        } => {
            let config = load_config(&config)?;
            let files = harness::prepare_files(&load_data(&data)?, config.input_morph.as_ref())?;
            let search = SearchSpec {
                repeats,
                ..SearchSpec::default()
            };
            let results = harness::architecture_search(&files, &config, &search)?;
            write_run(&out, "search", &results)?;
            if let Some(best) = harness::best_by_train_pq(&results) {
                eprintln!("best by training PQ: {}", best.model);
            }
        }
        Command::Score {
            pred,
            reference,
            pred_channel,
            ref_channel,
        } => {
            let p = read_log_file(&pred).with_context(|| format!("reading {}", pred.display()))?;
            let r = read_log_file(&reference).with_context(|| format!("reading {}", reference.display()))?;
            print_json(&score(&p, &r, pred_channel, ref_channel)?)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
