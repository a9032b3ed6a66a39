//! Command-line front end.
//!
//! Exit codes: 0 success, 1 check failure, 2 input error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use blocksparse_core::calibrate::{calibrate_model, group_by_head, CalibrationFlag, CalibrationProfile};
use blocksparse_core::config::{CliConfig, InputSource};
use blocksparse_core::mask::{write_mask_dump, MaskRecord};
use blocksparse_core::quant::{quantize_k, quantize_q};
use blocksparse_core::report::{run_pipeline, sweep, RunOptions, SweepAxis, TIMING_LABEL};
use blocksparse_core::selection::selection_pass;
use blocksparse_core::sparse::flop_accounting;
use blocksparse_core::tensorfile::read_tensor_file;
use blocksparse_core::HeadInput;

#[derive(Parser)]
#[command(name = "blocksparse", version, about = "Block-sparse attention with 4-bit block selection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Calibration profile (written by `calibrate`, read by the others).
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    /// Overrides the seed of synthetic workloads named in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "SALE_CORE_THREADS")]
    threads: Option<usize>,
    /// Treat calibration heads that hit the halving floor as failures.
    #[arg(long, global = true)]
    strict: bool,
    /// Write the machine-readable report here.
    #[arg(long, global = true)]
    json_out: Option<PathBuf>,
    /// Layer index used to match profile entries.
    #[arg(long, global = true)]
    layer: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate per-head thresholds and write a profile.
    Calibrate {
        /// Extra sample tensor files, appended to the config's samples.
        samples: Vec<PathBuf>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        tau0: Option<f64>,
        #[arg(long)]
        max_halvings: Option<u32>,
    },
    /// Run the sparse pipeline and the dense baseline.
    Run {
        tensors: Option<PathBuf>,
        /// Select every causal block instead of running selection.
        #[arg(long)]
        dense_mask: bool,
        /// Exit with code 1 unless every head's error is within theta.
        #[arg(long)]
        check: bool,
    },
    /// Tabulate sparsity and error over a threshold or error-bound grid.
    Sweep {
        tensors: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', conflicts_with = "thetas", required_unless_present = "thetas")]
        taus: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        thetas: Vec<f64>,
    },
    /// Dump block masks and print the selection pattern.
    Mask {
        tensors: Option<PathBuf>,
        /// Head index or `all`.
        #[arg(long, default_value = "0")]
        head: String,
        /// Mask dump destination.
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Input(anyhow::Error),
    Check(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let config = match &cli.common.config {
        Some(p) => CliConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => CliConfig::default(),
    };
    if let Some(n) = cli.common.threads.or(config.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let ctx = Ctx { common: cli.common, config };
    match cli.command {
        Command::Calibrate { samples, theta, tau0, max_halvings } => ctx.calibrate(&samples, theta, tau0, max_halvings),
        Command::Run { tensors, dense_mask, check } => ctx.run(tensors.as_deref(), dense_mask, check),
        Command::Sweep { tensors, taus, thetas } => ctx.sweep(tensors.as_deref(), taus, thetas),
        Command::Mask { tensors, head, out } => ctx.mask(tensors.as_deref(), &head, &out),
    }
}

struct Ctx {
    common: Common,
    config: CliConfig,
}

impl Ctx {
    fn layer(&self) -> u32 {
        self.common.layer.unwrap_or(self.config.layer)
    }

    fn profile_path(&self) -> Option<PathBuf> {
        self.common
            .profile
            .clone()
            .or_else(|| self.config.profile.as_ref().map(|p| self.config.resolve(p)))
    }

    fn load_inputs(&self, tensors: Option<&Path>) -> anyhow::Result<(Vec<HeadInput>, String)> {
        if let Some(path) = tensors {
            let inputs = read_tensor_file(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok((inputs, path.display().to_string()));
        }
        let src = self
            .config
            .input
            .as_ref()
            .ok_or_else(|| anyhow!("no input: pass a tensor file or set [input] in the config"))?;
        let inputs = src.load(&self.config.base_dir, self.common.seed)?;
        Ok((inputs, src.describe(self.common.seed)))
    }

    fn load_profile(&self) -> anyhow::Result<Option<CalibrationProfile>> {
        self.profile_path()
            .map(|p| CalibrationProfile::load(&p).with_context(|| format!("reading profile {}", p.display())))
            .transpose()
    }

    fn write_json(&self, json: String) -> anyhow::Result<()> {
        if let Some(path) = &self.common.json_out {
            std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }

    fn calibrate(&self, extra: &[PathBuf], theta: Option<f64>, tau0: Option<f64>, max_halvings: Option<u32>) -> CmdResult {
        let mut params = self.config.calibration_params();
        params.theta = theta.unwrap_or(params.theta);
        params.tau0 = tau0.unwrap_or(params.tau0);
        params.max_halvings = max_halvings.unwrap_or(params.max_halvings);
        params.selection = params.selection.with_tau(params.tau0);
        params.validate()?;

        let mut sources: Vec<(InputSource, PathBuf)> = self
            .config
            .samples
            .iter()
            .map(|s| (s.clone(), self.config.base_dir.clone()))
            .collect();
        sources.extend(extra.iter().map(|p| (InputSource::File { file: p.clone() }, PathBuf::new())));
        if sources.is_empty() {
            return Err(anyhow!("no calibration samples: list [[samples]] in the config or pass tensor files").into());
        }
        let mut ids = Vec::new();
        let mut samples = Vec::new();
        for (src, base) in &sources {
            ids.push(src.describe(self.common.seed));
            samples.push(
                src.load(base, self.common.seed)
                    .with_context(|| format!("loading sample {}", src.describe(self.common.seed)))?,
            );
        }
        let per_head = group_by_head(samples)?;
        let layer = self.layer();
        let (profile, results) = calibrate_model(&per_head, layer, &params, ids)?;

        println!("calibration  tau0={}  theta={}  max_halvings={}", params.tau0, params.theta, params.max_halvings);
        println!("{:>5} {:>5} {:>14} {:>9} {:>14} {:>12}", "layer", "head", "tau", "halvings", "flag", "max_err");
        for (h, r) in profile.heads.iter().zip(&results) {
            println!(
                "{:>5} {:>5} {:>14.6e} {:>9} {:>14} {:>12.6}",
                h.layer,
                h.head,
                h.tau,
                h.halvings,
                format!("{:?}", h.flag),
                r.errors.max
            );
        }
        let out = self
            .profile_path()
            .ok_or_else(|| anyhow!("no profile destination: pass --profile or set `profile` in the config"))?;
        profile.save(&out).with_context(|| format!("writing {}", out.display()))?;
        self.write_json(profile.to_json()?)?;
        println!("profile written to {}", out.display());

        let floored: Vec<String> = profile
            .heads
            .iter()
            .filter(|h| h.flag == CalibrationFlag::FloorReached)
            .map(|h| format!("layer {} head {}", h.layer, h.head))
            .collect();
        if !floored.is_empty() {
            eprintln!("heads at the halving floor: {}", floored.join(", "));
            if self.common.strict {
                return Err(Failure::Check(format!("{} head(s) did not converge", floored.len())));
            }
        }
        Ok(())
    }

    fn thresholds(&self, profile: Option<&CalibrationProfile>, heads: usize) -> anyhow::Result<Vec<f64>> {
        match profile {
            Some(p) => Ok(p.layer_taus(self.layer(), heads)?),
            None => Ok(vec![self.config.tau0; heads]),
        }
    }

    fn run(&self, tensors: Option<&Path>, dense_mask: bool, check: bool) -> CmdResult {
        let (inputs, label) = self.load_inputs(tensors)?;
        let profile = self.load_profile()?;
        let taus = self.thresholds(profile.as_ref(), inputs.len())?;
        let theta = profile.as_ref().map_or(self.config.theta, |p| p.theta);
        let opts = RunOptions {
            selection: self.config.selection,
            layer: self.layer(),
            dense_mask,
            check_theta: check.then_some(theta),
            input_label: label,
        };
        let report = run_pipeline(&inputs, &taus, &opts)?;

        println!("input: {}  (timings: {TIMING_LABEL})", report.input);
        println!(
            "{:>5} {:>12} {:>9} {:>9} {:>9} {:>10} {:>12} {:>10}",
            "head", "tau", "computed", "skipped", "total", "sparsity", "err", "cov_mean"
        );
        for h in &report.heads {
            println!(
                "{:>5} {:>12.4e} {:>9} {:>9} {:>9} {:>10.4} {:>12.6} {:>10.1}",
                h.head, h.tau, h.blocks.computed, h.blocks.skipped, h.blocks.total, h.blocks.sparsity, h.err, h.coverage.mean
            );
        }
        let t = &report.timings;
        println!(
            "quantization {:.3} ms | selection {:.3} ms | computation {:.3} ms | dense {:.3} ms",
            t.quantization_ms, t.selection_ms, t.computation_ms, t.dense_ms
        );
        println!(
            "overhead ratio {:.4} | computation speedup {:.3}x | total sparsity {:.4}",
            report.derived.overhead_ratio, report.derived.computation_speedup, report.totals.sparsity
        );
        self.write_json(report.to_json()?)?;
        if let Some(c) = &report.check {
            if !c.passed {
                return Err(Failure::Check(format!("max err {} exceeds theta {}", c.max_err, c.theta)));
            }
            println!("check passed: max err {:.6} <= theta {}", c.max_err, c.theta);
        }
        Ok(())
    }

    fn sweep(&self, tensors: Option<&Path>, taus: Vec<f64>, thetas: Vec<f64>) -> CmdResult {
        let (inputs, label) = self.load_inputs(tensors)?;
        let (axis, grid) = if thetas.is_empty() { (SweepAxis::Tau, taus) } else { (SweepAxis::Theta, thetas) };
        let report = sweep(&inputs, axis, &grid, &self.config.calibration_params(), label)?;
        let name = match axis {
            SweepAxis::Tau => "tau",
            SweepAxis::Theta => "theta",
        };
        println!("{name:>12} {:>10} {:>12}  per-head tau", "sparsity", "max_err");
        for row in &report.rows {
            let taus: Vec<String> = row.heads.iter().map(|h| format!("{:.3e}", h.tau)).collect();
            println!("{:>12.4e} {:>10.4} {:>12.6}  {}", row.value, row.sparsity, row.err, taus.join(" "));
        }
        self.write_json(serde_json::to_string_pretty(&report)?)?;
        if !report.monotone {
            return Err(Failure::Check("sparsity decreased as tau increased".into()));
        }
        Ok(())
    }

    fn mask(&self, tensors: Option<&Path>, head: &str, out: &Path) -> CmdResult {
        let (inputs, _) = self.load_inputs(tensors)?;
        let heads: Vec<usize> = if head == "all" {
            (0..inputs.len()).collect()
        } else {
            let h: usize = head.parse().map_err(|_| anyhow!("--head must be an index or `all`, got {head:?}"))?;
            if h >= inputs.len() {
                return Err(anyhow!("head {h} out of range: input has {} heads", inputs.len()).into());
            }
            vec![h]
        };
        let profile = self.load_profile()?;
        let taus = self.thresholds(profile.as_ref(), inputs.len())?;
        let mut records = Vec::new();
        let mut summaries = Vec::new();
        for &h in &heads {
            let input = &inputs[h];
            let cfg = self.config.selection.with_tau(taus[h]);
            let grid = cfg.grid(input.n())?;
            let mask = selection_pass(input, &quantize_q(input.q()), &quantize_k(input.k(), &grid), &cfg)?;
            let acc = flop_accounting(&mask, &grid)?;
            println!(
                "head {h}: tau {:.4e}, {} of {} causal blocks selected (sparsity {:.4})",
                taus[h], acc.computed, acc.total, acc.sparsity
            );
            println!("  '#' selected, '.' skipped, ' ' future");
            for i in 0..grid.num_q_blocks() {
                let causal = grid.causal_k_blocks(i);
                let row = mask.row(i);
                let pattern: String = (0..grid.num_k_blocks())
                    .map(|j| if j >= causal { ' ' } else if row[j] { '#' } else { '.' })
                    .collect();
                let selected = row[..causal].iter().filter(|&&b| b).count();
                println!("  {i:>5} {selected:>5}/{causal:<5} |{}|", pattern.trim_end());
            }
            summaries.push(serde_json::json!({
                "head": h,
                "tau": taus[h],
                "blocks": acc,
                "selected_per_query_block": (0..grid.num_q_blocks())
                    .map(|i| mask.row(i)[..grid.causal_k_blocks(i)].iter().filter(|&&b| b).count())
                    .collect::<Vec<_>>(),
            }));
            records.push(MaskRecord {
                head: h as u32,
                n_tokens: input.n() as u32,
                block_q: grid.block_q() as u32,
                block_k: grid.block_k() as u32,
                tau: taus[h],
                mask,
            });
        }
        write_mask_dump(out, &records).with_context(|| format!("writing {}", out.display()))?;
        println!("mask dump written to {}", out.display());
        self.write_json(serde_json::to_string_pretty(&serde_json::json!({ "heads": summaries }))?)?;
        Ok(())
    }
}
