//! `wts` - run streaming watch-think-speak sessions, reproduce the
//! bounded-context and latency experiments, train the steering policy, and
//! verify cache correctness against the recomputation oracle.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wts_cli::bench::{ContextSweepConfig, LatencySweepConfig};
use wts_cli::commands::{
    cmd_bench_context, cmd_bench_latency, cmd_checksum, cmd_run, cmd_train, cmd_verify,
    final_moving_average, resolve_out_dir, CacheSpec, DecoderSpec, PoolSource,
};
use wts_cli::{AppError, EXIT_CODE_HELP, EXIT_VERIFY_FAILED};
use wts_core::grpo::GrpoConfig;
use wts_core::rewards::RewardConfig;
use wts_core::stream_core::vocab;
use wts_core::synthetic::PoolConfig;
use wts_core::toy_decoder::DecoderDims;
use wts_core::verify::{FaultSpec, VerifyConfig};
use wts_core::wts_engine::EngineConfig;

#[derive(Parser)]
#[command(name = "wts", version, about = "Streaming watch-think-speak runtime", after_long_help = EXIT_CODE_HELP)]
struct Cli {
    /// Output directory for traces and curves (env override: WTS_OUT_DIR).
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stream script; write the step trace and reward report.
    Run(RunArgs),
    /// Paired bounded-context experiment across stream lengths.
    BenchContext(BenchContextArgs),
    /// Wall-clock per chunk for eviction on/off across stream lengths.
    BenchLatency(BenchLatencyArgs),
    /// Optimize the steering policy on a script pool.
    Train(TrainArgs),
    /// Compare incremental decoding to full recomputation over K sessions.
    Verify(VerifyArgs),
    /// Print the decoder weight digest.
    Checksum(ChecksumArgs),
}

#[derive(Args)]
struct DecoderFlags {
    #[arg(long, default_value_t = 7)]
    decoder_seed: u64,
    #[arg(long, default_value_t = 256)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    num_heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 2)]
    num_layers: usize,
    /// Zero steering table instead of the format-primed initialization.
    #[arg(long)]
    raw_policy: bool,
}

impl DecoderFlags {
    fn spec(&self) -> DecoderSpec {
        DecoderSpec {
            seed: self.decoder_seed,
            dims: DecoderDims {
                vocab_size: self.vocab_size,
                embed_dim: self.embed_dim,
                num_heads: self.num_heads,
                head_dim: self.head_dim,
                num_layers: self.num_layers,
            },
            primed_policy: !self.raw_policy,
        }
    }
}

#[derive(Args)]
struct CacheFlags {
    /// Visual sliding window W, in chunks.
    #[arg(long, default_value_t = 20)]
    window_chunks: u32,
    /// Physical slot budget; sized to the script's worst case when absent.
    #[arg(long)]
    capacity_slots: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    chunk_seconds: f64,
}

impl CacheFlags {
    fn spec(&self) -> CacheSpec {
        CacheSpec {
            window_chunks: self.window_chunks,
            capacity_slots: self.capacity_slots,
            chunk_seconds: self.chunk_seconds,
        }
    }
}

#[derive(Args)]
struct EngineFlags {
    /// Per-step token cap N.
    #[arg(long, default_value_t = 64)]
    max_new_tokens: u32,
    /// Reasoning tokens allowed inside the think block per chunk.
    #[arg(long, default_value_t = 20)]
    think_budget: u32,
    #[arg(long, default_value_t = 32)]
    top_k: usize,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    /// Token ids that end a step; the sampled stop is never fed back.
    #[arg(long, value_delimiter = ',', default_values_t = [vocab::END_OF_TURN])]
    stop_tokens: Vec<u32>,
    /// Disable eviction (unbounded-context comparison mode).
    #[arg(long)]
    baseline_mode: bool,
}

impl EngineFlags {
    fn config(&self) -> EngineConfig {
        EngineConfig {
            max_new_tokens: self.max_new_tokens,
            think_budget: self.think_budget,
            top_k: self.top_k,
            top_p: self.top_p,
            temperature: self.temperature,
            rng_seed: self.rng_seed,
            stop_tokens: self.stop_tokens.iter().copied().collect::<BTreeSet<u32>>(),
            baseline_mode: self.baseline_mode,
            record_policy_tokens: false,
            capture_decode_logits: false,
        }
    }
}

#[derive(Args)]
struct RewardFlags {
    /// Time-reward tolerance window w, in chunks.
    #[arg(long, default_value_t = 3.0)]
    tolerance_w: f64,
    #[arg(long, default_value_t = 1.0)]
    format_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    time_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    acc_weight: f64,
}

impl RewardFlags {
    fn config(&self) -> RewardConfig {
        RewardConfig {
            tolerance_w: self.tolerance_w,
            format_weight: self.format_weight,
            time_weight: self.time_weight,
            acc_weight: self.acc_weight,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Stream script (line-delimited JSON).
    #[arg(long)]
    script: PathBuf,
    #[command(flatten)]
    decoder: DecoderFlags,
    #[command(flatten)]
    cache: CacheFlags,
    #[command(flatten)]
    engine: EngineFlags,
    #[command(flatten)]
    rewards: RewardFlags,
}

#[derive(Args)]
struct BenchContextArgs {
    /// Stream lengths (chunks) to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [50u32, 100, 200, 400, 1000])]
    lengths: Vec<u32>,
    #[arg(long, default_value_t = 16)]
    tokens_per_frame: u32,
    #[arg(long, default_value_t = 0)]
    sweep_seed: u64,
    #[command(flatten)]
    decoder: DecoderFlags,
    #[command(flatten)]
    cache: CacheFlags,
    #[command(flatten)]
    engine: EngineFlags,
}

#[derive(Args)]
struct BenchLatencyArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [50u32, 100, 200, 400, 1000])]
    lengths: Vec<u32>,
    #[arg(long, default_value_t = 16)]
    tokens_per_frame: u32,
    /// Real-time threshold for the summary line.
    #[arg(long, default_value_t = 500.0)]
    threshold_ms: f64,
    #[arg(long, default_value_t = 0)]
    sweep_seed: u64,
    #[command(flatten)]
    decoder: DecoderFlags,
    #[command(flatten)]
    cache: CacheFlags,
    #[command(flatten)]
    engine: EngineFlags,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of .jsonl scripts; the synthetic pool is used when absent.
    #[arg(long)]
    pool_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pool_size: usize,
    #[arg(long, default_value_t = 8)]
    pool_chunks: u32,
    #[arg(long, default_value_t = 4)]
    pool_tokens_per_frame: u32,
    #[arg(long, default_value_t = 2024)]
    pool_seed: u64,
    #[arg(long, default_value_t = 9)]
    train_seed: u64,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long, default_value_t = 0.2)]
    clip_eps: f64,
    #[arg(long, default_value_t = 0.01)]
    kl_beta: f64,
    #[arg(long, default_value_t = 0.4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 1e-8)]
    adv_epsilon: f64,
    // Training-scale engine and cache defaults: short steps, small window.
    #[arg(long, default_value_t = 16)]
    max_new_tokens: u32,
    #[arg(long, default_value_t = 6)]
    think_budget: u32,
    #[arg(long, default_value_t = 32)]
    top_k: usize,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [vocab::END_OF_TURN])]
    stop_tokens: Vec<u32>,
    #[arg(long, default_value_t = 4)]
    window_chunks: u32,
    #[arg(long)]
    capacity_slots: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    chunk_seconds: f64,
    #[command(flatten)]
    decoder: DecoderFlags,
    #[command(flatten)]
    rewards: RewardFlags,
}

#[derive(Args)]
struct VerifyArgs {
    /// Sessions to verify (K).
    #[arg(long, default_value_t = 200)]
    sessions: usize,
    #[arg(long, default_value_t = 50)]
    chunks: u32,
    #[arg(long, value_delimiter = ',', default_values_t = [3u32, 5, 20])]
    windows: Vec<u32>,
    #[arg(long, default_value_t = 4)]
    tokens_per_frame: u32,
    #[arg(long, default_value_t = 6)]
    think_budget: u32,
    #[arg(long, default_value_t = 16)]
    max_new_tokens: u32,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: corrupt one cached key after this session's chunk.
    #[arg(long, requires = "fault_chunk")]
    fault_session: Option<usize>,
    #[arg(long, requires = "fault_session")]
    fault_chunk: Option<u32>,
    #[command(flatten)]
    decoder: DecoderFlags,
}

#[derive(Args)]
struct ChecksumArgs {
    #[command(flatten)]
    decoder: DecoderFlags,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, AppError> {
    match cli.command {
        Command::Run(args) => {
            let out_dir = resolve_out_dir(&cli.out_dir)?;
            let summary = cmd_run(
                &args.script,
                &args.decoder.spec(),
                &args.cache.spec(),
                &args.engine.config(),
                &args.rewards.config(),
                &out_dir,
            )?;
            println!(
                "{} steps; rewards: format {:.3} time {:.3} acc {:.3} total {:.3}; t_resp {:?}",
                summary.steps,
                summary.breakdown.r_format,
                summary.breakdown.r_time,
                summary.breakdown.r_acc,
                summary.breakdown.total,
                summary.breakdown.t_resp,
            );
            println!("trace: {}", summary.trace_path.display());
            println!("reward report: {}", summary.report_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchContext(args) => {
            let out_dir = resolve_out_dir(&cli.out_dir)?;
            let cfg = ContextSweepConfig {
                lengths: args.lengths.clone(),
                window_chunks: args.cache.window_chunks,
                tokens_per_frame: args.tokens_per_frame,
                engine: args.engine.config(),
                seed: args.sweep_seed,
            };
            let summary = cmd_bench_context(&args.decoder.spec(), &cfg, &out_dir)?;
            println!(
                "{} rows -> {}",
                summary.rows.len(),
                summary.curve_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchLatency(args) => {
            let out_dir = resolve_out_dir(&cli.out_dir)?;
            let cfg = LatencySweepConfig {
                lengths: args.lengths.clone(),
                window_chunks: args.cache.window_chunks,
                tokens_per_frame: args.tokens_per_frame,
                engine: args.engine.config(),
                threshold_ms: args.threshold_ms,
                seed: args.sweep_seed,
            };
            let summary = cmd_bench_latency(&args.decoder.spec(), &cfg, &out_dir)?;
            for report in &summary.thresholds {
                println!(
                    "{}: {}/{} chunks under {:.1} ms ({:.1}%)",
                    report.mode.label(),
                    report.under_threshold,
                    report.chunks,
                    cfg.threshold_ms,
                    100.0 * report.fraction()
                );
            }
            println!("curve: {}", summary.curve_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => {
            let out_dir = resolve_out_dir(&cli.out_dir)?;
            let source = match &args.pool_dir {
                Some(dir) => PoolSource::Dir(dir.clone()),
                None => PoolSource::Synthetic {
                    config: PoolConfig {
                        scripts: args.pool_size,
                        chunks: args.pool_chunks,
                        fps: 2.0,
                        tokens_per_frame: args.pool_tokens_per_frame,
                        onset_min: 3.min(args.pool_chunks),
                        onset_max: (args.pool_chunks.saturating_sub(2))
                            .max(3.min(args.pool_chunks)),
                    },
                    seed: args.pool_seed,
                },
            };
            let grpo_cfg = GrpoConfig {
                group_size: args.group_size,
                clip_eps: args.clip_eps,
                kl_beta: args.kl_beta,
                learning_rate: args.learning_rate,
                iterations: args.iterations,
                adv_epsilon: args.adv_epsilon,
            };
            let engine = EngineConfig {
                max_new_tokens: args.max_new_tokens,
                think_budget: args.think_budget,
                top_k: args.top_k,
                top_p: args.top_p,
                temperature: args.temperature,
                rng_seed: 0,
                stop_tokens: args.stop_tokens.iter().copied().collect(),
                baseline_mode: false,
                record_policy_tokens: false,
                capture_decode_logits: false,
            };
            let cache = CacheSpec {
                window_chunks: args.window_chunks,
                capacity_slots: args.capacity_slots,
                chunk_seconds: args.chunk_seconds,
            };
            let summary = cmd_train(
                &source,
                &args.decoder.spec(),
                &grpo_cfg,
                &engine,
                &cache,
                &args.rewards.config(),
                args.train_seed,
                &out_dir,
            )?;
            let last = summary
                .outcome
                .curve
                .last()
                .map(|s| s.mean_reward)
                .unwrap_or(0.0);
            let ma = final_moving_average(&summary.outcome.curve, 20);
            println!(
                "{} iterations; final mean reward {last:.3}; final 20-iter moving average {:?}",
                summary.outcome.curve.len(),
                ma.map(|x| (x * 1000.0).round() / 1000.0),
            );
            println!("log: {}", summary.log_path.display());
            println!("curve: {}", summary.curve_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify(args) => {
            let fault = match (args.fault_session, args.fault_chunk) {
                (Some(session), Some(chunk)) => Some(FaultSpec { session, chunk }),
                _ => None,
            };
            let cfg = VerifyConfig {
                sessions: args.sessions,
                chunks: args.chunks,
                windows: args.windows.clone(),
                tokens_per_frame: args.tokens_per_frame,
                think_budget: args.think_budget,
                max_new_tokens: args.max_new_tokens,
                tolerance: args.tolerance,
                seed: args.seed,
                fault,
            };
            let report = cmd_verify(&args.decoder.spec(), &cfg)?;
            println!(
                "{} sessions, {} comparisons, worst abs diff {:.3e} at {:?} (tolerance {:.1e})",
                report.sessions,
                report.comparisons,
                report.worst_diff,
                report.worst,
                report.tolerance
            );
            if report.passed() {
                println!("verification passed");
                Ok(ExitCode::SUCCESS)
            } else {
                let f = report.first_failure.expect("failure recorded");
                eprintln!(
                    "verification FAILED at session {} chunk {} token {}: diff {:.3e}",
                    f.session, f.chunk, f.token_index, f.diff
                );
                Ok(ExitCode::from(EXIT_VERIFY_FAILED as u8))
            }
        }
        Command::Checksum(args) => {
            println!("{}", cmd_checksum(&args.decoder.spec())?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
