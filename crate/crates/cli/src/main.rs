mod io;

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ctrkit::bench::{run_bench, BenchConfig};
use ctrkit::data::{gen_synthetic, synthetic_vocab, DataDir, EncodedDataset, SynthConfig, Vocab, DEFAULT_LABEL_COLUMN};
use ctrkit::metrics::feature_correlation;
use ctrkit::streams::StreamKind;
use ctrkit::train::{evaluate, fit_with, read_checkpoint, write_checkpoint, Model, Reweighter, SceReweighter, TrainConfig, Uniform};
use ctrkit::Error;

use io::{save_vocab_atomic, vocab_beside, write_atomic, write_json_line};

#[derive(Parser)]
#[command(name = "ctrkit", version, about = "Two-stream CTR model training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.ckpt, history.jsonl and vocab/ to --out.
    Train(TrainArgs),
    /// Print test AUC and log loss of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary directory; defaults to vocab/ next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Write a synthetic train.csv/test.csv pair with a spurious shortcut.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        n_train: usize,
        #[arg(long, default_value_t = 10_000)]
        n_test: usize,
        #[arg(long, default_value_t = 0.9)]
        rho_train: f64,
        #[arg(long, default_value_t = 0.1)]
        rho_test: f64,
        #[arg(long, default_value_t = 3)]
        n_causal: usize,
        #[arg(long, default_value_t = 2)]
        n_spurious: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the forward pass of one stream on random input.
    Bench {
        #[arg(long, default_value = "msr")]
        stream: StreamKind,
        #[arg(long, default_value_t = 23)]
        fields: usize,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 4096)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, value_delimiter = ',', default_value = "400,400,400")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pearson correlations among randomly chosen stream output columns.
    Correlate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        columns: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON file with any subset of the training config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_sce: bool,
    #[arg(long)]
    stream_deep: Option<StreamKind>,
    #[arg(long)]
    stream_shallow: Option<StreamKind>,
    #[arg(long)]
    depth_deep: Option<usize>,
    #[arg(long)]
    depth_shallow: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.no_sce {
            cfg.sce_enabled = false;
        }
        if let Some(k) = self.stream_deep {
            cfg.stream_deep = k;
        }
        if let Some(k) = self.stream_shallow {
            cfg.stream_shallow = k;
        }
        if let Some(m) = self.depth_deep {
            cfg.depth_deep = m;
        }
        if let Some(n) = self.depth_shallow {
            cfg.depth_shallow = n;
        }
        if let Some(e) = self.max_epochs {
            cfg.max_epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Scores {
    auc: f64,
    logloss: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    epochs: usize,
    val_auc: f64,
    test: Option<Scores>,
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config()?;
    let data = DataDir::load(&args.data, cfg.seed)?;
    let schema = data.vocab.schema().clone();
    cfg.validate(schema.num_fields())?;
    let mut rw: Box<dyn Reweighter> = if cfg.sce_enabled {
        Box::new(SceReweighter::new(cfg.sce()))
    } else {
        Box::new(Uniform)
    };
    let fit = fit_with(&data.train, &data.val, &schema, data.vocab.schema_hash(), &cfg, rw.as_mut(), |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val auc {:.5}  val logloss {:.5}  {:.1}s",
            r.epoch, r.train_loss, r.val_auc, r.val_logloss, r.seconds
        )
    })?;
    let test = match &data.test {
        Some(t) => {
            let (auc, logloss) = evaluate(&fit.model, t)?;
            Some(Scores { auc, logloss })
        }
        None => None,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    save_vocab_atomic(&data.vocab, &args.out.join("vocab"))?;
    write_atomic(&args.out.join("model.ckpt"), |w| Ok(write_checkpoint(w, &fit.model.to_checkpoint())?))?;
    write_atomic(&args.out.join("history.jsonl"), |w| {
        for r in &fit.history {
            write_json_line(w, r)?;
        }
        Ok(())
    })?;
    write_atomic(&args.out.join("config.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &cfg)?;
        Ok(writeln!(w)?)
    })?;
    let summary = TrainSummary {
        best_epoch: fit.best_epoch,
        epochs: fit.history.len(),
        val_auc: fit.history[fit.best_epoch - 1].val_auc,
        test,
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn load_model(model: &Path, vocab: Option<&Path>) -> Result<(Model, Vocab)> {
    let vdir = vocab.map_or_else(|| vocab_beside(model), Path::to_path_buf);
    let vocab = Vocab::load_dir(&vdir).with_context(|| format!("loading vocabulary {}", vdir.display()))?;
    let mut r = BufReader::new(File::open(model).with_context(|| format!("opening {}", model.display()))?);
    let ck = read_checkpoint(&mut r).with_context(|| format!("reading {}", model.display()))?;
    let model = Model::from_checkpoint(&ck, Some(vocab.schema_hash()))?;
    Ok((model, vocab))
}

fn eval(model: &Path, data: &Path, vocab: Option<&Path>) -> Result<()> {
    let (model, vocab) = load_model(model, vocab)?;
    let test = DataDir::load_test(data, &vocab, model.config().seed)?;
    let (auc, logloss) = evaluate(&model, &test)?;
    println!("{}", serde_json::to_string(&Scores { auc, logloss })?);
    Ok(())
}

fn write_csv(path: &Path, vocab: &Vocab, ds: &EncodedDataset) -> Result<()> {
    let schema = vocab.schema();
    write_atomic(path, |w| {
        let mut header: Vec<&str> = schema.fields.iter().map(|f| f.name.as_str()).collect();
        header.push(DEFAULT_LABEL_COLUMN);
        writeln!(w, "{}", header.join(","))?;
        for (i, &label) in ds.labels().iter().enumerate() {
            for (f, &ix) in ds.row(i).iter().enumerate() {
                let tok = vocab.token(f, ix).context("synthetic index outside its vocabulary")?;
                write!(w, "{},", tok)?;
            }
            writeln!(w, "{}", label)?;
        }
        Ok(())
    })
}

fn synth(out: &Path, cfg: &SynthConfig) -> Result<()> {
    let (train, test) = gen_synthetic(cfg)?;
    let vocab = synthetic_vocab(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&out.join("train.csv"), &vocab, &train)?;
    write_csv(&out.join("test.csv"), &vocab, &test)?;
    println!("{}", serde_json::to_string(cfg)?);
    Ok(())
}

fn correlate(model: &Path, data: &Path, vocab: Option<&Path>, columns: usize, out: &Path, seed: u64) -> Result<()> {
    let (model, vocab) = load_model(model, vocab)?;
    let ds = DataDir::load_test(data, &vocab, model.config().seed)?;
    let d = model.d_out();
    let m = 2 * d;
    if columns == 0 || columns > m {
        return Err(Error::Config(format!("--columns must be in 1..={}", m)).into());
    }
    let mut picked = sample(&mut ChaCha8Rng::seed_from_u64(seed), m, columns).into_vec();
    picked.sort_unstable();
    let feats = model.features(&ds, model.config().batch_size)?;
    let mut rows = Vec::with_capacity(ds.len() * columns);
    for r in feats.data().chunks(m) {
        rows.extend(picked.iter().map(|&j| r[j]));
    }
    let corr = feature_correlation(&rows, columns)?;
    let names: Vec<String> = picked
        .iter()
        .map(|&j| if j < d { format!("deep{}", j) } else { format!("shallow{}", j - d) })
        .collect();
    write_atomic(out, |w| Ok(corr.write_csv(w, &names)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(&args),
        Command::Eval { model, data, vocab } => eval(&model, &data, vocab.as_deref()),
        Command::Synth {
            out,
            n_train,
            n_test,
            rho_train,
            rho_test,
            n_causal,
            n_spurious,
            seed,
        } => {
            let cfg = SynthConfig {
                n_train,
                n_test,
                n_causal,
                n_spurious,
                rho_train,
                rho_test,
                seed,
            };
            cfg.validate()?;
            synth(&out, &cfg)
        }
        Command::Bench {
            stream,
            fields,
            dim,
            batch,
            reps,
            depth,
            heads,
            hidden,
            seed,
        } => {
            let report = run_bench(&BenchConfig {
                stream,
                fields,
                dim,
                batch,
                reps,
                depth,
                heads,
                hidden,
                d_out: None,
                seed,
            })?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::Correlate {
            model,
            data,
            columns,
            out,
            vocab,
            seed,
        } => correlate(&model, &data, vocab.as_deref(), columns, &out, seed),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
