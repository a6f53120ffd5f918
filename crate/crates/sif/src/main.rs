//! Command-line driver for the pipeline: data generation, training,
//! offline tokenization, evaluation, sweeps, gradient checking and the
//! storage-compression report.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use clap::{Args, Parser, Subcommand};
use sif::config::RunConfig;
use sif::datagen;
use sif::error::Result;
use sif::eval::{sweep, sweep_csv_header, sweep_csv_row, SweepAxis};
use sif::mixer::{MixerState, Variant};
use sif::schema::load_schema;
use sif::tokenizer::TokenizerState;
use sif::tokenstore::{build_store, compression_report, CompressionParams, TokenRepr, TokenStore};
use sif::training;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "sif", version, about = "sample-level token ranking pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic impression log with a planted history signal.
    GenData(GenDataArgs),
    /// Train a model variant end to end.
    Train(TrainArgs),
    /// Tokenize every positive sample with a frozen tokenizer into a store.
    Tokenize(TokenizeArgs),
    /// Score a split and report AUC/GAUC.
    Eval(EvalArgs),
    /// Train/evaluate one run per value of B, N, or L.
    Sweep(SweepArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Storage-compression accounting per token representation.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    users: u64,
    #[arg(long)]
    items: u64,
    #[arg(long)]
    impressions: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    signal_strength: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigOverrides {
    /// Base config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Behavior sequence length L (reference setup: 1000).
    #[arg(long)]
    seq_len: Option<usize>,
    /// Block count N (reference setup: 4).
    #[arg(long)]
    n_blocks: Option<usize>,
    /// Attention heads (reference setup: 8).
    #[arg(long)]
    heads: Option<usize>,
    /// Learning rate (reference setup: 1e-3).
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size (reference setup: 4096; desk default 256).
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// VQ-loss weight (reference setup: 1.0).
    #[arg(long)]
    beta: Option<f64>,
    /// Alignment-loss weight (reference setup: 0.25).
    #[arg(long)]
    gamma: Option<f64>,
    /// Auxiliary engagement-loss weight.
    #[arg(long)]
    token_loss_weight: Option<f64>,
    /// Disable the codebook term of the VQ loss.
    #[arg(long)]
    no_route_vq: bool,
    /// Stop auxiliary-head gradients from reaching codebooks.
    #[arg(long)]
    no_route_aux: bool,
    /// Stop sequence-lookup gradients from reaching codebooks.
    #[arg(long)]
    no_route_seq: bool,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    val_limit: Option<usize>,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            };
        }
        take!(variant);
        take!(seed);
        take!(seq_len);
        take!(n_blocks);
        take!(heads);
        take!(lr);
        take!(batch_size);
        take!(max_epochs);
        take!(patience);
        take!(beta);
        take!(gamma);
        take!(token_loss_weight);
        if self.train_limit.is_some() {
            c.train_limit = self.train_limit;
        }
        if self.val_limit.is_some() {
            c.val_limit = self.val_limit;
        }
        if self.no_route_vq {
            c.route_vq_term = false;
        }
        if self.no_route_aux {
            c.route_aux_to_codes = false;
        }
        if self.no_route_seq {
            c.route_seq_to_codes = false;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Run directory (config snapshot, metric log, checkpoints).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Print per-epoch progress.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Frozen tokenizer checkpoint (.sifc).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    mixer: PathBuf,
    /// Score history from an offline token store instead of re-tokenizing.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, value_parser = ["val", "test"], default_value = "test")]
    split: String,
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Optional CSV output path (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = ["B", "N", "L"])]
    axis: String,
    /// Comma-separated values, e.g. 8,16,32.
    #[arg(long, value_delimiter = ',')]
    values: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run the reference tiny configuration (L=4, T=3, d0=4, N=1, M=2, V=4).
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Cap on elements checked per tensor (default: all).
    #[arg(long)]
    max_per_tensor: Option<usize>,
    /// Check the ranking loss only (tokenizer losses off).
    #[arg(long)]
    bce_only: bool,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// hgaq | item_id_only | item_plus_key | dense_raw | all
    #[arg(long, default_value = "all")]
    variant: String,
    #[arg(long, default_value_t = 600)]
    fields: u64,
    #[arg(long, default_value_t = 8)]
    embed_dim: u64,
    #[arg(long, default_value_t = 27)]
    t: u64,
    #[arg(long, default_value_t = 3)]
    m: u64,
    #[arg(long, default_value_t = 256)]
    v: u64,
    #[arg(long, default_value_t = 24)]
    key_fields: u64,
    #[arg(long, default_value_t = 512)]
    dense_dim: u64,
    /// Derive the accounting from a schema file instead of the flags above.
    #[arg(long)]
    schema: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => {
            let schema = load_schema(&a.schema)?;
            let log = datagen::generate_log(
                &schema,
                a.users,
                a.items,
                a.impressions,
                a.seed,
                a.signal_strength,
            );
            datagen::write_log(&log, &a.out)?;
            println!(
                "wrote {} impressions ({} positive) to {}",
                log.samples.len(),
                log.samples.iter().filter(|s| s.label).count(),
                a.out.display()
            );
            Ok(0)
        }
        Command::Train(a) => {
            let schema = load_schema(&a.schema)?;
            let log = datagen::read_log(&schema, &a.data)?;
            let cfg = a.overrides.resolve()?;
            std::fs::create_dir_all(&a.out)?;
            cfg.snapshot(&a.out.join("config.toml"))?;
            let variant = Variant::parse(&cfg.variant)?;
            let tok = TokenizerState::init(&schema, cfg.seed)?;
            let mix = MixerState::init(
                &schema,
                cfg.seed.wrapping_add(1),
                cfg.n_blocks,
                cfg.heads,
                cfg.seq_len,
                variant,
            )?;
            let mut opts = cfg.to_train_options();
            opts.run_dir = Some(a.out.clone());
            opts.quiet = !a.verbose;
            let (tok, mix, report) = training::train(&schema, &log, tok, mix, &opts)?;
            training::save_tokenizer(&tok, &a.out.join("tokenizer.sifc"))?;
            training::save_mixer(&mix, &a.out.join("mixer.sifm"))?;
            println!(
                "variant {} best epoch {} val auc {:.4}",
                cfg.variant, report.best_epoch, report.best_val_auc
            );
            Ok(0)
        }
        Command::Tokenize(a) => {
            let schema = load_schema(&a.schema)?;
            let log = datagen::read_log(&schema, &a.data)?;
            let tok = training::load_tokenizer(&schema, &a.checkpoint)?;
            let header = build_store(&log, &tok, &a.out)?;
            println!(
                "stored {} token samples ({} bytes each) in {}",
                header.record_count,
                header.record_bytes(),
                a.out.display()
            );
            Ok(0)
        }
        Command::Eval(a) => {
            let schema = load_schema(&a.schema)?;
            let log = datagen::read_log(&schema, &a.data)?;
            let cfg = a.overrides.resolve()?;
            let variant = Variant::parse(&cfg.variant)?;
            let tok = training::load_tokenizer(&schema, &a.tokenizer)?;
            let mix = training::load_mixer(
                &schema,
                &a.mixer,
                cfg.n_blocks,
                cfg.heads,
                cfg.seq_len,
                variant,
            )?;
            let (_, val_idx, test_idx) = log.split_indices();
            let indices = if a.split == "val" { val_idx } else { test_idx };
            let report = match &a.store {
                Some(path) => {
                    let store = TokenStore::open(path)?;
                    let scores = training::evaluate_with_store(
                        &schema,
                        &tok,
                        &mix,
                        &log,
                        &store,
                        &indices,
                        cfg.seq_len,
                        cfg.batch_size,
                    )?;
                    let labels: Vec<bool> =
                        indices.iter().map(|&i| log.samples[i].label).collect();
                    let groups: Vec<u64> =
                        indices.iter().map(|&i| log.samples[i].user_id).collect();
                    let a_ = sif::eval::auc(&scores, &labels)?;
                    let g_ = sif::eval::gauc(&scores, &labels, &groups)?;
                    sif::eval::MetricReport {
                        auc: a_,
                        gauc: g_.value,
                        logloss: sif::eval::logloss(&scores, &labels),
                        n_scored: scores.len(),
                        n_groups_used: g_.groups_used,
                        n_groups_skipped: g_.groups_skipped,
                        flops_per_example: sif::eval::flops_estimate(
                            cfg.seq_len,
                            mix.t,
                            mix.d0,
                            mix.n_blocks,
                            mix.heads,
                            backbone_variant(&mix),
                        ),
                    }
                }
                None => training::evaluate(
                    &schema,
                    &tok,
                    &mix,
                    &log,
                    &indices,
                    cfg.seq_len,
                    cfg.batch_size,
                )?,
            };
            let text = format!(
                "{}\n{}\n",
                sif::eval::MetricReport::csv_header(),
                report.csv_row()
            );
            match &a.out {
                Some(path) => std::fs::write(path, &text)?,
                None => print!("{}", text),
            }
            Ok(0)
        }
        Command::Sweep(a) => {
            let schema = load_schema(&a.schema)?;
            let log = datagen::read_log(&schema, &a.data)?;
            let cfg = a.overrides.resolve()?;
            let axis = match a.axis.as_str() {
                "B" => SweepAxis::B,
                "N" => SweepAxis::N,
                _ => SweepAxis::L,
            };
            std::fs::create_dir_all(&a.out)?;
            let rows = sweep(axis, &a.values, |axis, value| {
                let mut cfg = cfg.clone();
                let mut schema = schema.clone();
                match axis {
                    SweepAxis::B => schema.sub_token_granularity = value as usize,
                    SweepAxis::N => cfg.n_blocks = value as usize,
                    SweepAxis::L => cfg.seq_len = value as usize,
                }
                let log = log.with_schema(&schema)?;
                let run_dir = a.out.join(format!("{}_{}", axis, value));
                std::fs::create_dir_all(&run_dir)?;
                cfg.snapshot(&run_dir.join("config.toml"))?;
                let variant = Variant::parse(&cfg.variant)?;
                let tok = TokenizerState::init(&schema, cfg.seed)?;
                let mix = MixerState::init(
                    &schema,
                    cfg.seed.wrapping_add(1),
                    cfg.n_blocks,
                    cfg.heads,
                    cfg.seq_len,
                    variant,
                )?;
                let mut opts = cfg.to_train_options();
                opts.run_dir = Some(run_dir.clone());
                let (tok, mix, _) = training::train(&schema, &log, tok, mix, &opts)?;
                let (_, _, test_idx) = log.split_indices();
                let capped: Vec<usize> = match cfg.val_limit {
                    Some(n) if test_idx.len() > n => test_idx[test_idx.len() - n..].to_vec(),
                    _ => test_idx,
                };
                let report = training::evaluate(
                    &schema,
                    &tok,
                    &mix,
                    &log,
                    &capped,
                    cfg.seq_len,
                    cfg.batch_size,
                )?;
                let line = format!(
                    "{}\n{}\n",
                    sif::eval::MetricReport::csv_header(),
                    report.csv_row()
                );
                std::fs::write(run_dir.join("metrics.csv"), line)?;
                Ok((report.auc, report.gauc, report.flops_per_example))
            });
            let mut table = String::from(sweep_csv_header());
            table.push('\n');
            for row in &rows {
                table.push_str(&sweep_csv_row(row));
                table.push('\n');
            }
            std::fs::write(a.out.join("sweep.csv"), &table)?;
            print!("{}", table);
            Ok(if rows.iter().any(|r| r.error.is_some()) {
                1
            } else {
                0
            })
        }
        Command::Gradcheck(a) => {
            if !a.tiny {
                eprintln!("only --tiny is supported; pass --tiny");
                return Ok(2);
            }
            let weights = if a.bce_only {
                sif::model::LossWeights {
                    beta: 0.0,
                    gamma: 0.0,
                    token_weight: 0.0,
                }
            } else {
                sif::model::LossWeights::default()
            };
            let report = training::gradcheck_tiny(a.seed, a.step, &weights, a.max_per_tensor)?;
            for grp in &report.groups {
                let flag = if grp.index_flips > 0 {
                    " NON-SMOOTH (index flips under perturbation)"
                } else {
                    ""
                };
                println!(
                    "{:<28} checked {:>5}  max rel err {:.3e}{}",
                    grp.name, grp.checked, grp.max_rel_err, flag
                );
            }
            println!("max rel err {:.3e}", report.max_rel_err);
            Ok(if report.passed(a.tolerance) { 0 } else { 1 })
        }
        Command::Report(a) => {
            let params = match &a.schema {
                Some(path) => {
                    let schema = load_schema(path)?;
                    CompressionParams::from_schema(&schema, a.key_fields)
                }
                None => CompressionParams {
                    n_fields: a.fields,
                    embed_dim: a.embed_dim,
                    t: a.t,
                    m: a.m,
                    v: a.v,
                    key_fields: a.key_fields,
                    dense_dim: a.dense_dim,
                },
            };
            let variants: Vec<TokenRepr> = match a.variant.as_str() {
                "all" => vec![
                    TokenRepr::Hgaq,
                    TokenRepr::ItemIdOnly,
                    TokenRepr::ItemPlusKey,
                    TokenRepr::DenseRaw,
                ],
                "hgaq" => vec![TokenRepr::Hgaq],
                "item_id_only" => vec![TokenRepr::ItemIdOnly],
                "item_plus_key" => vec![TokenRepr::ItemPlusKey],
                "dense_raw" => vec![TokenRepr::DenseRaw],
                other => {
                    eprintln!("unknown report variant {:?}", other);
                    return Ok(2);
                }
            };
            println!("variant,snapshot_bits,token_bits,ratio");
            for v in variants {
                let r = compression_report(&params, v);
                println!(
                    "{},{},{},{:.2}",
                    r.variant.name(),
                    r.snapshot_bits,
                    r.token_bits,
                    r.ratio
                );
            }
            Ok(0)
        }
    }
}

fn backbone_variant(mix: &MixerState) -> sif::eval::AttentionVariant {
    match mix.variant.backbone {
        sif::mixer::Backbone::Factored => sif::eval::AttentionVariant::Factored,
        sif::mixer::Backbone::Flat => sif::eval::AttentionVariant::Flat,
        sif::mixer::Backbone::Pooled => sif::eval::AttentionVariant::Pooled,
    }
}
