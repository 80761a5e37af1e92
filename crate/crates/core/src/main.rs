use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mixfuse::checkpoint::{load_checkpoint, save_checkpoint};
use mixfuse::config::{FusionConfig, FIRST_WORD_TOKEN};
use mixfuse::data::{
    gen_synthetic, gen_unimodal_cm, load_jsonl, write_jsonl, Combination, CorpusDims, SplitFractions, SyntheticRule,
};
use mixfuse::gradcheck::gradcheck;
use mixfuse::mask::{build_mask, layout_roles};
use mixfuse::train::{evaluate, finetune, pretrain, Mode, RunConfig};
use mixfuse::Error;

#[derive(Parser)]
#[command(name = "mixfuse", version, about = "Masked multimodal fusion encoder: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-rule corpus (train/val/test JSONL plus a manifest).
    GenData {
        /// Combination rule of the two triggers.
        #[arg(long, default_value = "and")]
        rule: String,
        #[arg(long, default_value_t = 2500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = FIRST_WORD_TOKEN + 5)]
        text_trigger: usize,
        #[arg(long, default_value_t = 3)]
        image_trigger: usize,
        #[arg(long, default_value_t = 0.8)]
        train: f64,
        #[arg(long, default_value_t = 0.0)]
        val: f64,
        #[arg(long, default_value_t = 0.2)]
        test: f64,
        /// Also write `mixed.jsonl`: this many paired/text-only/image-only pretraining samples.
        #[arg(long, default_value_t = 0)]
        mixed: usize,
        /// Run config whose model keys fix the corpus dimensions.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain with the composite objective.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the classification head from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
    },
    /// Score the eval corpus and print AUROC, accuracy and F1.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Overrides the config's `ablation`.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Compare backprop with central finite differences on a toy batch.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the attention mask for a text/image length pair.
    InspectMask {
        #[arg(long)]
        text: usize,
        #[arg(long)]
        img: usize,
        #[arg(long)]
        max_text: Option<usize>,
        #[arg(long)]
        max_regions: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Gradcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn out_path(run: &RunConfig, config: &Path, fallback: &str) -> PathBuf {
    run.out.clone().unwrap_or_else(|| config.parent().unwrap_or(Path::new(".")).join(fallback))
}

fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf, Failure> {
    path.clone().ok_or_else(|| Failure::Usage(format!("config is missing `{key}`")))
}

// A closed pipe (e.g. `| head`) is not an error worth a panic.
fn print_text(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_line(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            rule,
            n,
            seed,
            out,
            noise,
            text_trigger,
            image_trigger,
            train,
            val,
            test,
            mixed,
            config,
        } => {
            let combination = match rule.as_str() {
                "and" => Combination::And,
                other => return Err(Failure::Usage(format!("unknown rule `{other}` (supported: and)"))),
            };
            let model = match config {
                Some(p) => RunConfig::load(&p, Mode::Pretrain)?.model,
                None => FusionConfig::default(),
            };
            let rule = SyntheticRule { text_trigger, image_trigger, combination, label_noise: noise };
            let splits = gen_synthetic(&rule, &model, n, SplitFractions { train, val, test }, seed)
                .map_err(|e| Failure::Usage(e.to_string()))?;
            fs::create_dir_all(&out).map_err(|e| Failure::Runtime(e.to_string()))?;
            write_jsonl(&splits.train, &out.join("train.jsonl"))?;
            write_jsonl(&splits.val, &out.join("val.jsonl"))?;
            write_jsonl(&splits.test, &out.join("test.jsonl"))?;
            if mixed > 0 {
                write_jsonl(&gen_unimodal_cm(&rule, &model, mixed, seed)?, &out.join("mixed.jsonl"))?;
            }
            let mut manifest = format!(
                "rule = {rule_name}\ntext_trigger = {text_trigger}\nimage_trigger = {image_trigger}\nlabel_noise = {noise}\nn = {n}\nseed = {seed}\ntrain = {}\nval = {}\ntest = {}\nmixed = {mixed}\n",
                splits.train.len(),
                splits.val.len(),
                splits.test.len(),
                rule_name = "and",
            );
            for line in model.to_lines() {
                manifest.push_str(&line);
                manifest.push('\n');
            }
            fs::write(out.join("manifest.txt"), manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
            print_line(&format!("wrote {}", out.display()));
        }
        Command::Pretrain { config } => {
            let run = RunConfig::load(&config, Mode::Pretrain)?;
            let data = require(&run.train_data, "train_data")?;
            let corpus = load_jsonl(&data, CorpusDims::from(&run.model))?;
            let ckpt = pretrain(&run, &corpus, None, &mut |l| print_line(l))?;
            let path = out_path(&run, &config, "pretrain.ckpt");
            save_checkpoint(&path, &ckpt)?;
            print_line(&format!("saved {}", path.display()));
        }
        Command::Finetune { config, init } => {
            let run = RunConfig::load(&config, Mode::Finetune)?;
            let data = require(&run.train_data, "train_data")?;
            let corpus = load_jsonl(&data, CorpusDims::from(&run.model))?;
            let init = load_checkpoint(&init)?;
            let ckpt = finetune(&run, &corpus, &init, &mut |l| print_line(l))?;
            let path = out_path(&run, &config, "finetune.ckpt");
            save_checkpoint(&path, &ckpt)?;
            print_line(&format!("saved {}", path.display()));
        }
        Command::Eval { config, ckpt, ablation } => {
            let mut run = RunConfig::load(&config, Mode::Eval)?;
            if let Some(a) = ablation {
                run.ablation = a.parse()?;
            }
            let data = require(&run.eval_data, "eval_data")?;
            let corpus = load_jsonl(&data, CorpusDims::from(&run.model))?;
            let ckpt = load_checkpoint(&ckpt)?;
            ckpt.check_params(&mixfuse::model::init_params(&run.model, 0)?)?;
            let report = evaluate(&ckpt.params, &run.model, &corpus, run.ablation)?;
            print_text(&format!("ablation = {}\n{report}", run.ablation));
        }
        Command::Gradcheck { config } => {
            let run = RunConfig::load(&config, Mode::Pretrain)?;
            let report = gradcheck(&run.model, run.weights, run.seed)?;
            print_text(&report.to_string());
            if !report.passed() {
                return Err(Failure::Gradcheck);
            }
        }
        Command::InspectMask { text, img, max_text, max_regions } => {
            let max_text = max_text.unwrap_or(text);
            let max_regions = max_regions.unwrap_or(img);
            if text > max_text || img > max_regions {
                return Err(Failure::Usage("lengths exceed the padded maxima".into()));
            }
            let mask = build_mask(&layout_roles(text, img, max_text, max_regions))?;
            print_text(&mask.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Gradcheck) => ExitCode::from(3),
    }
}
