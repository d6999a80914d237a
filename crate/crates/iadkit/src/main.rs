//! Command-line entry point.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use iadkit::backend::{backend_from_spec, ChatBackend, DeterministicCotBackend};
use iadkit::config::HarnessConfig;
use iadkit::eval;
use iadkit::grpo;
use iadkit::protocol::{build_prompts, ToolMode};
use iadkit::rewards::RewardCoefficients;
use iadkit::rollout::{self, EpisodeRecord, RolloutContext};
use iadkit::sample::{candidate_labels, load_manifest, SampleRecord};
use iadkit::tools::{build_exemplar_index, ExemplarIndex};
use iadkit::trajectory::{self, resolve_gt_bbox, RetryPolicy, Taxonomy, TrajectoryBuilder};
use iadkit::synthetic;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "pz_only")]
    PzOnly,
    #[value(name = "pz_cr")]
    PzCr,
}

impl From<ModeArg> for ToolMode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::PzOnly => ToolMode::PzOnly,
            ModeArg::PzCr => ToolMode::PzCr,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaxonomyArg {
    #[value(name = "pz")]
    Pz,
    #[value(name = "pz_cr")]
    PzCr,
    #[value(name = "mixed")]
    Mixed,
}

#[derive(Parser)]
#[command(
    name = "iadkit",
    about = "Tool-driven visual inspection agent harness: trajectories, rollouts, rewards, objectives, evaluation, replay.",
    version
)]
struct Cli {
    /// Harness configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bundled synthetic inspection set with masks, manifest,
    /// exemplars, and an always-correct mock script.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Build supervised trajectories from a manifest.
    BuildTrajectories {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        taxonomy: TaxonomyArg,
        /// Endpoint spec: `mock`, `mock:<script.json>`, or an http(s) URL.
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workdir: Option<PathBuf>,
        /// Exemplar manifest (required for pz_cr trajectories).
        #[arg(long)]
        exemplars: Option<PathBuf>,
    },
    /// Run K-episode rollout groups for every manifest sample.
    Rollout {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 8)]
        group_size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Backend spec; defaults to the configured endpoint URL.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        exemplars: Option<PathBuf>,
    },
    /// Recompute reward breakdowns for stored episodes.
    Score {
        #[arg(long)]
        episodes: PathBuf,
        /// Reward coefficients file (TOML). Defaults to the config values.
        #[arg(long)]
        coeffs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the group-relative objective over stored groups and token
    /// scores.
    GrpoObjective {
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        token_scores: PathBuf,
    },
    /// Evaluate a manifest and emit category-averaged accuracy reports.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Report directory: writes report.json, report.txt, episodes.jsonl.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        exemplars: Option<PathBuf>,
        /// Sampling temperature for evaluation episodes.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Re-execute stored episodes and report divergences.
    Replay {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
}

fn load_exemplars(
    cli_path: Option<&Path>,
    config: &HarnessConfig,
) -> Result<ExemplarIndex> {
    let path = cli_path.or(config.paths.exemplar_manifest.as_deref());
    match path {
        Some(path) => build_exemplar_index(path, config.paths.exemplar_seed)
            .with_context(|| format!("loading exemplar manifest {}", path.display())),
        None => Ok(ExemplarIndex::empty(config.paths.exemplar_seed)),
    }
}

fn make_backend(spec: Option<&str>, config: &HarnessConfig) -> Result<Box<dyn ChatBackend>> {
    let spec = spec.unwrap_or(&config.backend.endpoint_url);
    Ok(backend_from_spec(
        spec,
        &config.backend.model_name,
        config.backend.auth_token_env.as_deref(),
        config.backend.timeout(),
    )?)
}

fn load_samples(manifest: &Path) -> Result<Vec<SampleRecord>> {
    let mut samples =
        load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    if samples.is_empty() {
        bail!("manifest {} is empty", manifest.display());
    }
    for sample in &mut samples {
        resolve_gt_bbox(sample)?;
    }
    Ok(samples)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = HarnessConfig::load_or_default(cli.config.as_deref())?;

    match cli.command {
        Command::Synth { out, seed } => {
            let set = synthetic::generate(&out, seed)?;
            println!("manifest:  {}", set.manifest_path.display());
            println!("exemplars: {}", set.exemplars_path.display());
            println!("script:    {}", set.script_path.display());
            println!("samples:   {}", set.samples.len());
        }

        Command::BuildTrajectories {
            manifest,
            taxonomy,
            endpoint,
            out,
            workdir,
            exemplars,
        } => {
            let samples = load_samples(&manifest)?;
            let exemplars = load_exemplars(exemplars.as_deref(), &config)?;
            let workdir = workdir.unwrap_or_else(|| config.paths.workdir.clone());
            fs::create_dir_all(&workdir)?;
            let backend: Box<dyn ChatBackend> = if endpoint == "mock" {
                Box::new(DeterministicCotBackend)
            } else {
                make_backend(Some(&endpoint), &config)?
            };
            let labels = candidate_labels(&samples);
            let builder = TrajectoryBuilder {
                backend: backend.as_ref(),
                exemplars: &exemplars,
                labels: &labels,
                workdir: &workdir,
                retry: RetryPolicy {
                    attempts: config.backend.retry_attempts,
                    base_delay: config.backend.retry_delay(),
                },
            };
            let jobs: Vec<(SampleRecord, Taxonomy)> = samples
                .iter()
                .enumerate()
                .map(|(index, sample)| {
                    let tax = match taxonomy {
                        TaxonomyArg::Pz => Taxonomy::Pz,
                        TaxonomyArg::PzCr => Taxonomy::PzCr,
                        // Deterministic interleave: one comparative
                        // trajectory per 14 samples, the rest perceptive.
                        TaxonomyArg::Mixed => {
                            if index % 14 == 0 {
                                Taxonomy::PzCr
                            } else {
                                Taxonomy::Pz
                            }
                        }
                    };
                    (sample.clone(), tax)
                })
                .collect();
            let mut built = Vec::new();
            let mut skipped = 0usize;
            for (result, (sample, _)) in trajectory::build_batch(&builder, &jobs)
                .into_iter()
                .zip(&jobs)
            {
                match result {
                    Ok(trajectory) => built.push(trajectory),
                    Err(err) => {
                        skipped += 1;
                        eprintln!("skipping {}: {err}", sample.id);
                    }
                }
            }
            trajectory::write_trajectories(&out, &built)?;
            println!(
                "wrote {} trajectories to {} ({} skipped)",
                built.len(),
                out.display(),
                skipped
            );
        }

        Command::Rollout {
            manifest,
            mode,
            group_size,
            out,
            backend,
            workdir,
            exemplars,
        } => {
            if group_size < 2 {
                bail!("--group-size must be >= 2");
            }
            let mode: ToolMode = mode.into();
            let samples = load_samples(&manifest)?;
            let exemplars = load_exemplars(exemplars.as_deref(), &config)?;
            let workdir = workdir.unwrap_or_else(|| config.paths.workdir.clone());
            fs::create_dir_all(&workdir)?;
            let backend = make_backend(backend.as_deref(), &config)?;
            let ctx = RolloutContext {
                backend: backend.as_ref(),
                exemplars: &exemplars,
                workdir: &workdir,
                config: &config.backend,
                coeffs: &config.rewards,
                normalize_std: config.grpo.normalize_std,
            };
            let labels = candidate_labels(&samples);
            let mut all_episodes: Vec<EpisodeRecord> = Vec::new();
            for sample in &samples {
                let class_labels = labels
                    .get(&sample.class_name)
                    .cloned()
                    .unwrap_or_else(|| vec!["defect".to_string()]);
                let prompts = build_prompts(&sample.class_name, &class_labels, mode)?;
                all_episodes.extend(rollout::run_group(&ctx, sample, &prompts, group_size));
            }
            rollout::write_episodes(&out, &all_episodes)?;
            let filtered = all_episodes
                .iter()
                .filter(|e| e.zero_advantage_filtered)
                .count();
            println!(
                "wrote {} episodes ({} groups, {} zero-advantage-filtered episodes) to {}",
                all_episodes.len(),
                samples.len(),
                filtered,
                out.display()
            );
        }

        Command::Score {
            episodes,
            coeffs,
            out,
        } => {
            let coeffs: RewardCoefficients = match coeffs {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str(&text)
                        .with_context(|| format!("parsing coefficients {}", path.display()))?
                }
                None => config.rewards,
            };
            coeffs.validate()?;
            let mut records = rollout::load_episodes(&episodes)?;
            rollout::rescore_episodes(&mut records, &coeffs);

            #[derive(serde::Serialize)]
            struct ScoreLine<'a> {
                episode_id: &'a str,
                #[serde(flatten)]
                reward: &'a iadkit::rewards::RewardBreakdown,
            }
            let mut file = fs::File::create(&out)?;
            for record in &records {
                serde_json::to_writer(
                    &mut file,
                    &ScoreLine {
                        episode_id: &record.episode_id,
                        reward: &record.reward,
                    },
                )?;
                file.write_all(b"\n")?;
            }
            println!("scored {} episodes into {}", records.len(), out.display());
        }

        Command::GrpoObjective {
            groups,
            token_scores,
        } => {
            let records = rollout::load_episodes(&groups)?;
            let scores = grpo::load_token_scores(&token_scores)?;
            let grouped = rollout::group_by_id(records);

            #[derive(serde::Serialize)]
            struct GroupLine {
                group_id: String,
                episodes: usize,
                query_rate: f64,
                #[serde(skip_serializing_if = "Option::is_none")]
                objective: Option<f64>,
                #[serde(skip_serializing_if = "Option::is_none")]
                skipped: Option<String>,
            }

            let mut lines = Vec::new();
            let mut objectives = Vec::new();
            for (group_id, episodes) in grouped {
                let query_rate = episodes.first().map_or(0.0, |e| e.query_rate);
                let degraded = episodes.iter().any(|e| e.degraded_group);
                let filtered = episodes.iter().any(|e| e.zero_advantage_filtered);
                let skipped = if degraded {
                    Some("degraded: majority endpoint errors".to_string())
                } else if filtered && config.grpo.zero_advantage_filtering {
                    Some("zero-advantage".to_string())
                } else {
                    None
                };
                let objective = if skipped.is_some() {
                    None
                } else {
                    let group =
                        rollout::to_rollout_group(&episodes, &scores, config.grpo.normalize_std);
                    match grpo::grpo_objective(&group, &config.grpo) {
                        Ok(value) => {
                            objectives.push(value);
                            Some(value)
                        }
                        Err(err) => {
                            lines.push(GroupLine {
                                group_id,
                                episodes: episodes.len(),
                                query_rate,
                                objective: None,
                                skipped: Some(err.to_string()),
                            });
                            continue;
                        }
                    }
                };
                lines.push(GroupLine {
                    group_id,
                    episodes: episodes.len(),
                    query_rate,
                    objective,
                    skipped,
                });
            }

            let mean = if objectives.is_empty() {
                None
            } else {
                Some(objectives.iter().sum::<f64>() / objectives.len() as f64)
            };
            let report = serde_json::json!({
                "groups": lines,
                "groups_scored": objectives.len(),
                "mean_objective": mean,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }

        Command::Eval {
            manifest,
            mode,
            report,
            backend,
            workdir,
            exemplars,
            temperature,
        } => {
            let mode: ToolMode = mode.into();
            let samples = load_samples(&manifest)?;
            let exemplars = load_exemplars(exemplars.as_deref(), &config)?;
            let workdir = workdir.unwrap_or_else(|| config.paths.workdir.clone());
            fs::create_dir_all(&workdir)?;
            fs::create_dir_all(&report)?;
            let backend = make_backend(backend.as_deref(), &config)?;
            let mut eval_backend_config = config.backend.clone();
            eval_backend_config.temperature = temperature;
            let ctx = RolloutContext {
                backend: backend.as_ref(),
                exemplars: &exemplars,
                workdir: &workdir,
                config: &eval_backend_config,
                coeffs: &config.rewards,
                normalize_std: config.grpo.normalize_std,
            };
            let (eval_report, records) =
                eval::evaluate(&ctx, &samples, mode, &config.fingerprint())?;
            fs::write(
                report.join("report.json"),
                serde_json::to_string_pretty(&eval_report)?,
            )?;
            let text = eval::render_text_report(&eval_report);
            fs::write(report.join("report.txt"), &text)?;
            rollout::write_episodes(&report.join("episodes.jsonl"), &records)?;
            print!("{text}");
        }

        Command::Replay { episodes, workdir } => {
            let records = rollout::load_episodes(&episodes)?;
            let workdir = workdir.unwrap_or_else(|| {
                std::env::temp_dir().join(format!("iadkit-replay-{}", std::process::id()))
            });
            fs::create_dir_all(&workdir)?;
            let report = eval::replay(&records, &workdir);
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.is_clean() {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
