//! Command-line entry point.

pub mod config;
pub mod metrics;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_env::toy::ToyTask;
use crate::eval_env::{
    best_of_n, bon_records, make_synthetic_preferences, mean_kl_to_ref, OracleTask, RewardScorer, Scorer,
    BON_DEFAULT_N, BON_DEFAULT_TEMPERATURE,
};
use crate::lm::checkpoint::{load_kind, save};
use crate::lm::optim::StepReport;
use crate::lm::sft::{train_sft_observed, Demonstration};
use crate::lm::{decode_continuation, encode, sample, ModelKind, Params, PolicyParams};
use crate::ppo::{train_ppo_observed, PpoConfig, PpoMetrics, PpoObserver, ValueModelParams};
use crate::pref_data::{
    binarize_scored, default_excluded_aspects, downsample, filter_malformed, load_preferences, load_prompt_pool,
    load_scored, prompt_tokens, remix_prompt_pools, write_jsonl, PoolPrompt, PromptPool, ScoreMode, Turn,
};
use crate::reward::{pairwise_accuracy, train_reward_model_observed};
use crate::{dpo, seed};
use config::Config;
use metrics::{MetricsWriter, read_metrics};

pub const SEED_ENV: &str = "PREFLEARN_SEED";
pub const DEFAULT_SWEEP_BETAS: [f64; 4] = [0.01, 0.025, 0.0325, 0.05];

#[derive(Debug, Parser)]
#[command(name = "preflearn", version, about = "Learning from preference feedback on a tiny byte-level LM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat TOML file of key = value settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised finetuning on prompt/response demonstrations.
    TrainSft {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// JSONL of {"prompt": [turns], "response": "..."}.
        #[arg(long)]
        data: PathBuf,
        /// Start from this policy instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bradley–Terry reward model on top of a policy backbone.
    TrainRm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Held-out pairs for an accuracy report.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Direct preference optimization.
    TrainDpo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        policy: PathBuf,
        /// Defaults to the initial policy.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PPO against a reward model.
    TrainPpo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        models: PpoModels,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best-of-N selection with a reward model or an oracle.
    EvalBon {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        /// `rm:<checkpoint>` or `oracle:target-density:<byte>`.
        #[arg(long)]
        scorer: String,
        #[arg(long, default_value_t = BON_DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = BON_DEFAULT_TEMPERATURE)]
        tau: f64,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSONL report, one object per prompt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include every candidate in the report.
        #[arg(long)]
        audit: bool,
    },
    /// Mean exact KL of the policy to a reference over sampled continuations.
    EvalKl {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Preference-data utilities.
    #[command(subcommand)]
    Data(DataCommand),
    /// Sample one continuation.
    Gen {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = BON_DEFAULT_TEMPERATURE)]
        tau: f64,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Run PPO once per KL coefficient and report the final KL to the reference.
    SweepBeta {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        models: PpoModels,
        /// Prompts for the KL measurement; defaults to the training prompts.
        #[arg(long)]
        eval_prompts: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_BETAS)]
        betas: Vec<f64>,
        /// Runs per beta, with seeds seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct PpoModels {
    #[arg(long)]
    pub policy: PathBuf,
    /// Defaults to the initial policy.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub reward: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Turn scored response sets into chosen/rejected pairs.
    Binarize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `fine-grained` (mean of aspects) or `overall`.
        #[arg(long, default_value = "fine-grained")]
        mode: String,
        /// Aspects left out of the fine-grained mean.
        #[arg(long, value_delimiter = ',', default_values_t = default_excluded_aspects())]
        exclude: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Drop malformed pairs and report why.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Uniformly subsample pairs.
    Downsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Weighted mixture of prompt pools.
    Remix {
        /// `path:tag:weight`; repeatable.
        #[arg(long = "pool", required = true)]
        pools: Vec<String>,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Oracle-labelled pairs sampled from a policy.
    Synth {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value = "target-density:97")]
        task: String,
        #[arg(long)]
        n_pairs: usize,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the target-density toy corpus: SFT demonstrations and prompt pools.
    Toy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2048)]
        n_sft: usize,
        #[arg(long, default_value_t = 256)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_eval: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// One supervised example on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub prompt: Vec<Turn>,
    pub response: String,
}

/// Parse `argv` (program name first), run, and return the exit status:
/// 0 on success, 2 on usage errors, 1 on any other failure.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn flag_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn resolve(defaults: Vec<(&'static str, toml::Value)>, args: &ConfigArgs) -> Result<Config> {
    Config::resolve(defaults, args.config.as_deref(), &args.set, env_seed()?)
}

fn prepare_out(out: &Path, cfg: &Config) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn pool_tokens(pool: &PromptPool) -> Vec<Vec<u32>> {
    pool.prompts.iter().map(|p| prompt_tokens(&p.prompt)).collect()
}

/// Longest continuation that fits the context after BOS and every prompt.
fn fit_len(policy: &PolicyParams, prompts: &[Vec<u32>], requested: Option<usize>) -> Result<usize> {
    let longest = prompts.iter().map(Vec::len).max().unwrap_or(0);
    let room = policy.config.context.saturating_sub(1 + longest);
    match requested {
        Some(n) => Ok(n),
        None if room > 0 => Ok(room),
        None => Err(Error::Length { len: longest + 1, limit: policy.config.context, what: "BOS + prompt".into() }),
    }
}

const STEP_COLUMNS: [&str; 5] = ["step", "epoch", "loss", "lr", "grad_norm"];

/// Metrics and epoch checkpoints for the shared training loop.
fn step_logger(out: &Path, per_epoch: usize) -> Result<impl FnMut(&StepReport, &Params<f32>) -> Result<()>> {
    let mut log = MetricsWriter::create(&out.join("metrics.csv"), &STEP_COLUMNS)?;
    let out = out.to_path_buf();
    Ok(move |r: &StepReport, p: &Params<f32>| {
        log.write_row(&[r.step as f64, r.epoch as f64, r.loss, r.lr, r.grad_norm])?;
        if (r.step + 1).is_multiple_of(per_epoch) {
            save(p, &out.join(format!("epoch-{}.ckpt", r.epoch)))?;
        }
        Ok(())
    })
}

fn per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.min(n).max(1)).max(1)
}

fn load_demonstrations(path: &Path) -> Result<Vec<Demonstration>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SftRecord =
            serde_json::from_str(line).map_err(|e| Error::Schema { line: i + 1, message: e.to_string() })?;
        if rec.prompt.is_empty() || rec.response.is_empty() {
            return Err(Error::Schema { line: i + 1, message: "empty prompt or response".into() });
        }
        out.push(Demonstration::new(prompt_tokens(&rec.prompt), encode(rec.response.as_bytes())));
    }
    Ok(out)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::TrainSft { cfg, data, init, out } => {
            let cfg = resolve(config::sft_defaults(), &cfg)?;
            let tc = cfg.train_config();
            let demos = load_demonstrations(&data)?;
            let start = match init {
                Some(p) => load_kind(&p, ModelKind::Policy)?,
                None => Params::init(cfg.model_config()?, ModelKind::Policy, tc.seed)?,
            };
            prepare_out(&out, &cfg)?;
            let logger = step_logger(&out, per_epoch(demos.len(), tc.batch_size))?;
            let trained = train_sft_observed(&tc, &start, &demos, logger)?;
            save(&trained, &out.join("final.ckpt"))?;
            println!("sft: {} demonstrations, final checkpoint {}", demos.len(), out.join("final.ckpt").display());
        }
        Command::TrainRm { cfg, policy, data, heldout, out } => {
            let cfg = resolve(config::rm_defaults(), &cfg)?;
            let tc = cfg.train_config();
            let init = load_kind(&policy, ModelKind::Policy)?;
            let pairs = load_preferences(&data)?;
            prepare_out(&out, &cfg)?;
            let logger = step_logger(&out, per_epoch(pairs.len(), tc.batch_size))?;
            let rm = train_reward_model_observed(&tc, &init, &pairs, logger)?;
            save(&rm, &out.join("final.ckpt"))?;
            if let Some(h) = heldout {
                let acc = pairwise_accuracy(&rm, &load_preferences(&h)?)?;
                std::fs::write(out.join("eval.json"), serde_json::json!({ "heldout_accuracy": acc }).to_string())?;
                println!("reward model held-out accuracy {acc}");
            }
        }
        Command::TrainDpo { cfg, policy, reference, data, out } => {
            let cfg = resolve(config::dpo_defaults(), &cfg)?;
            let dc = cfg.dpo_config();
            let init = load_kind(&policy, ModelKind::Policy)?;
            let reference = match reference {
                Some(r) => load_kind(&r, ModelKind::Policy)?,
                None => init.clone(),
            };
            let pairs = load_preferences(&data)?;
            prepare_out(&out, &cfg)?;
            let logger = step_logger(&out, per_epoch(pairs.len(), dc.batch_size))?;
            let trained = dpo::train_dpo_observed(&dc, &init, &reference, &pairs, logger)?;
            save(&trained, &out.join("final.ckpt"))?;
            println!("dpo: {} pairs, final checkpoint {}", pairs.len(), out.join("final.ckpt").display());
        }
        Command::TrainPpo { cfg, models, out } => {
            let cfg = resolve(config::ppo_defaults(), &cfg)?;
            let loaded = LoadedPpo::load(&models)?;
            let (last, _, _) = run_ppo(&cfg, &loaded, &out)?;
            println!("ppo: final mean terminal reward {}, mean KL {}", last.mean_terminal_reward, last.mean_kl);
        }
        Command::EvalBon { policy, prompts, scorer, n, tau, max_len, seed, out, audit } => {
            let policy = load_kind(&policy, ModelKind::Policy)?;
            let pool = load_prompt_pool(&prompts, "eval")?;
            let toks = pool_tokens(&pool);
            let max_len = fit_len(&policy, &toks, max_len)?;
            let seed = flag_seed(seed)?;
            let rm;
            let oracle;
            let scorer: &dyn Scorer = if let Some(path) = scorer.strip_prefix("rm:") {
                rm = load_kind(Path::new(path), ModelKind::Reward)?;
                &RewardScorer(&rm)
            } else if let Some(task) = scorer.strip_prefix("oracle:") {
                oracle = OracleTask::parse(task)?;
                &oracle
            } else {
                return Err(Error::Config(format!("scorer must be rm:<path> or oracle:<task>, got `{scorer}`")));
            };
            let results = best_of_n(&policy, scorer, &toks, n, tau, max_len, seed, audit)?;
            let records = bon_records(&toks, &results, n);
            let mean = results.iter().map(|r| r.score).sum::<f64>() / results.len().max(1) as f64;
            match out {
                Some(path) => write_jsonl(&path, &records)?,
                None => {
                    for r in &records {
                        println!("{}", serde_json::to_string(r)?);
                    }
                }
            }
            println!("best-of-{n}: mean selected score {mean} over {} prompts", records.len());
        }
        Command::EvalKl { policy, reference, prompts, max_len, seed } => {
            let policy = load_kind(&policy, ModelKind::Policy)?;
            let reference = load_kind(&reference, ModelKind::Policy)?;
            let toks = pool_tokens(&load_prompt_pool(&prompts, "eval")?);
            let max_len = fit_len(&policy, &toks, max_len)?;
            let kl = mean_kl_to_ref(&policy, &reference, &toks, max_len, flag_seed(seed)?)?;
            println!("{}", serde_json::json!({ "mean_kl_to_ref": kl, "prompts": toks.len() }));
        }
        Command::Gen { checkpoint, prompt, seed, tau, max_len } => {
            let policy = load_kind(&checkpoint, ModelKind::Policy)?;
            let toks = encode(prompt.as_bytes());
            let max_len = fit_len(&policy, std::slice::from_ref(&toks), max_len)?;
            let s = sample(&policy, &toks, tau, max_len, flag_seed(seed)?)?;
            let text = String::from_utf8_lossy(&decode_continuation(&s.continuation)?).into_owned();
            println!("{text}{}", if s.truncated { "" } else { "<eos>" });
        }
        Command::SweepBeta { cfg, models, eval_prompts, betas, seeds, out } => {
            let base = resolve(config::ppo_defaults(), &cfg)?;
            sweep_beta(&base, &models, eval_prompts.as_deref(), &betas, seeds, &out)?;
        }
        Command::Data(d) => run_data(d)?,
    }
    Ok(())
}

struct LoadedPpo {
    policy: PolicyParams,
    reference: PolicyParams,
    reward: Params<f32>,
    prompts: PromptPool,
}

impl LoadedPpo {
    fn load(m: &PpoModels) -> Result<Self> {
        let policy = load_kind(&m.policy, ModelKind::Policy)?;
        let reference = match &m.reference {
            Some(r) => load_kind(r, ModelKind::Policy)?,
            None => policy.clone(),
        };
        Ok(Self {
            policy,
            reference,
            reward: load_kind(&m.reward, ModelKind::Reward)?,
            prompts: load_prompt_pool(&m.prompts, "train")?,
        })
    }
}

struct PpoFiles {
    log: MetricsWriter,
    out: PathBuf,
    last: Option<PpoMetrics>,
}

impl PpoObserver for PpoFiles {
    fn on_step(&mut self, m: &PpoMetrics, _: &PolicyParams, _: &ValueModelParams) -> Result<()> {
        self.last = Some(*m);
        self.log.write_row(&m.values())
    }

    fn on_epoch(&mut self, epoch: usize, policy: &PolicyParams, value: &ValueModelParams) -> Result<()> {
        save(policy, &self.out.join(format!("policy-epoch-{epoch}.ckpt")))?;
        save(value, &self.out.join(format!("value-epoch-{epoch}.ckpt")))
    }
}

fn run_ppo(cfg: &Config, m: &LoadedPpo, out: &Path) -> Result<(PpoMetrics, PolicyParams, PpoConfig)> {
    let pc = cfg.ppo_config()?;
    prepare_out(out, cfg)?;
    let mut files = PpoFiles {
        log: MetricsWriter::create(&out.join("metrics.csv"), &PpoMetrics::COLUMNS)?,
        out: out.to_path_buf(),
        last: None,
    };
    let (policy, value) = train_ppo_observed(&pc, &m.policy, &m.reference, &m.reward, &m.prompts, &mut files)?;
    save(&policy, &out.join("policy.ckpt"))?;
    save(&value, &out.join("value.ckpt"))?;
    let last = files.last.ok_or_else(|| Error::Config("PPO ran zero steps".into()))?;
    Ok((last, policy, pc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub beta: f64,
    pub seed: u64,
    pub mean_kl_to_ref: f64,
    pub final_mean_kl: f64,
    pub final_mean_terminal_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub beta: f64,
    pub median_kl_to_ref: f64,
    pub runs: Vec<SweepRun>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sweep_beta(
    base: &Config,
    models: &PpoModels,
    eval_prompts: Option<&Path>,
    betas: &[f64],
    seeds: u64,
    out: &Path,
) -> Result<Vec<SweepSummary>> {
    if betas.is_empty() || seeds == 0 {
        return Err(Error::Config("sweep needs at least one beta and one seed".into()));
    }
    let loaded = LoadedPpo::load(models)?;
    let eval = match eval_prompts {
        Some(p) => pool_tokens(&load_prompt_pool(p, "eval")?),
        None => pool_tokens(&loaded.prompts),
    };
    let base_seed = base.u64("seed");
    std::fs::create_dir_all(out)?;
    let mut table = MetricsWriter::create(
        &out.join("summary.csv"),
        &["beta", "seed", "mean_kl_to_ref", "final_mean_kl", "final_mean_terminal_reward"],
    )?;
    let mut summaries = Vec::new();
    for &beta in betas {
        let mut runs = Vec::new();
        for s in 0..seeds {
            let run_seed = base_seed + s;
            let mut cfg = base.clone();
            cfg.set("beta", toml::Value::Float(beta))?;
            cfg.set("seed", toml::Value::Integer(run_seed as i64))?;
            let dir = out.join(format!("beta-{beta}")).join(format!("seed-{run_seed}"));
            let (last, policy, pc) = run_ppo(&cfg, &loaded, &dir)?;
            let kl_seed = seed::derive(run_seed, &[seed::stream::EVAL]);
            let kl = mean_kl_to_ref(&policy, &loaded.reference, &eval, pc.max_len, kl_seed)?;
            table.write_row(&[beta, run_seed as f64, kl, last.mean_kl, last.mean_terminal_reward])?;
            println!("beta {beta} seed {run_seed}: mean KL to reference {kl}");
            runs.push(SweepRun {
                beta,
                seed: run_seed,
                mean_kl_to_ref: kl,
                final_mean_kl: last.mean_kl,
                final_mean_terminal_reward: last.mean_terminal_reward,
            });
        }
        let med = median(&runs.iter().map(|r| r.mean_kl_to_ref).collect::<Vec<_>>());
        println!("beta {beta}: median KL to reference {med}");
        summaries.push(SweepSummary { beta, median_kl_to_ref: med, runs });
    }
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summaries)?)?;
    Ok(summaries)
}

/// Read the per-beta medians written by `sweep-beta`.
pub fn read_sweep_summary(out: &Path) -> Result<Vec<SweepSummary>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(out.join("summary.json"))?)?)
}

/// Rows of a metrics file written by a training command.
pub fn read_training_metrics(out: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    read_metrics(&out.join("metrics.csv"))
}

fn parse_pool_spec(spec: &str) -> Result<(PathBuf, String, f64)> {
    let mut parts = spec.rsplitn(3, ':');
    let (w, tag, path) = (parts.next(), parts.next(), parts.next());
    match (path, tag, w.and_then(|w| w.parse::<f64>().ok())) {
        (Some(p), Some(t), Some(w)) => Ok((PathBuf::from(p), t.to_string(), w)),
        _ => Err(Error::Config(format!("pool spec `{spec}` is not path:tag:weight"))),
    }
}

fn run_data(cmd: DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Binarize { input, output, mode, exclude, seed } => {
            let mode = match mode.as_str() {
                "fine-grained" => ScoreMode::FineGrained,
                "overall" => ScoreMode::Overall,
                m => return Err(Error::Config(format!("mode must be fine-grained or overall, got `{m}`"))),
            };
            let base = flag_seed(seed)?;
            let sets = load_scored(&input)?;
            let mut pairs = Vec::new();
            let mut ties = 0usize;
            for (i, set) in sets.iter().enumerate() {
                match binarize_scored(set, mode, &exclude, seed::derive(base, &[seed::stream::DATA, i as u64]))? {
                    Some(p) => pairs.push(p),
                    None => ties += 1,
                }
            }
            write_jsonl(&output, &pairs)?;
            println!("binarized {} sets into {} pairs ({ties} all-tied sets skipped)", sets.len(), pairs.len());
        }
        DataCommand::Filter { input, output } => {
            let pairs = load_preferences(&input)?;
            let (kept, report) = filter_malformed(&pairs);
            write_jsonl(&output, &kept)?;
            println!("kept {} of {} pairs", kept.len(), pairs.len());
            for (reason, n) in report {
                println!("  removed {n}: {reason}");
            }
        }
        DataCommand::Downsample { input, output, n, seed } => {
            let pairs = load_preferences(&input)?;
            let kept = downsample(&pairs, n, flag_seed(seed)?);
            write_jsonl(&output, &kept)?;
            println!("kept {} of {} pairs", kept.len(), pairs.len());
        }
        DataCommand::Remix { pools, target, output, seed } => {
            let loaded = pools
                .iter()
                .map(|spec| {
                    let (path, tag, w) = parse_pool_spec(spec)?;
                    Ok((load_prompt_pool(&path, &tag)?, w))
                })
                .collect::<Result<Vec<_>>>()?;
            let mixed = remix_prompt_pools(&loaded, target, flag_seed(seed)?)?;
            write_jsonl(&output, &mixed.prompts)?;
            println!("wrote {} prompts tagged {}", mixed.len(), mixed.pool_tag);
        }
        DataCommand::Synth { policy, prompts, task, n_pairs, max_len, seed, output } => {
            let policy = load_kind(&policy, ModelKind::Policy)?;
            let task = OracleTask::parse(&task)?;
            let pool = load_prompt_pool(&prompts, "synth")?;
            let texts = pool
                .prompts
                .iter()
                .map(|p| match p.prompt.as_slice() {
                    [t] => Ok(t.content.clone()),
                    _ => Err(Error::Data("synthetic pairs need single-turn prompts".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            let max_len = fit_len(&policy, &pool_tokens(&pool), max_len)?;
            let pairs = make_synthetic_preferences(&task, &policy, &texts, n_pairs, max_len, flag_seed(seed)?)?;
            write_jsonl(&output, &pairs)?;
            println!("wrote {} pairs", pairs.len());
        }
        DataCommand::Toy { out_dir, n_sft, n_train, n_eval, seed } => {
            let seed = flag_seed(seed)?;
            let toy = ToyTask::default();
            std::fs::create_dir_all(&out_dir)?;
            let sft_prompts = toy.prompts(n_sft, 3, seed);
            let demos: Vec<SftRecord> = sft_prompts
                .iter()
                .zip(toy.demonstrations(&sft_prompts, seed))
                .map(|(p, d)| SftRecord {
                    prompt: vec![Turn::user(p.clone())],
                    response: String::from_utf8(decode_continuation(&d.target).expect("bytes")).expect("ascii"),
                })
                .collect();
            write_jsonl(&out_dir.join("sft.jsonl"), &demos)?;
            for (name, split, n) in [("prompts.jsonl", 0, n_train), ("eval_prompts.jsonl", 1, n_eval)] {
                let recs: Vec<PoolPrompt> = toy
                    .prompts(n, split, seed)
                    .into_iter()
                    .map(|p| PoolPrompt { prompt: vec![Turn::user(p)], source: None })
                    .collect();
                write_jsonl(&out_dir.join(name), &recs)?;
            }
            let m = toy.model;
            println!(
                "toy corpus in {} (model: width={} layers={} heads={} context={}; L_c={})",
                out_dir.display(),
                m.width,
                m.layers,
                m.heads,
                m.context,
                toy.max_len
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run_command(["preflearn", "frobnicate"]), 2);
        assert_eq!(run_command(["preflearn"]), 2);
    }

    #[test]
    fn sweep_defaults() {
        let cli = Cli::try_parse_from([
            "preflearn", "sweep-beta", "--policy", "p", "--reward", "r", "--prompts", "q", "--out", "o",
        ])
        .unwrap();
        match cli.command {
            Command::SweepBeta { betas, seeds, .. } => {
                assert_eq!(betas, DEFAULT_SWEEP_BETAS.to_vec());
                assert_eq!(betas.len(), 4);
                assert_eq!(seeds, 1);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn pool_specs() {
        assert_eq!(parse_pool_spec("a/b.jsonl:chat:0.5").unwrap(), (PathBuf::from("a/b.jsonl"), "chat".into(), 0.5));
        assert!(parse_pool_spec("a.jsonl:0.5").is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
