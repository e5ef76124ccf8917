use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acrnet::codec::{self, FeedbackPayload};
use acrnet::complexity::count_config;
use acrnet::csi::{CsiError, Dataset, GeneratorConfig, Normalization, RawSet};
use acrnet::model::{AcrNet, ActivationKind, Eta, ModelConfig};
use acrnet::planner::{plan, PlanError, PlannerOptions, ResourceBudget};
use acrnet::tensor::Tensor;
use acrnet::train::{evaluate, TrainConfig, TrainError, Trainer, WithQuantizer};
use acrnet::train::{Checkpoint, CheckpointError};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "acrnet",
    version,
    about = "Elastic ACRNet CSI feedback toolkit"
)]
struct Cli {
    /// Log progress details to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic angular-delay dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Report NMSE of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print FLOPs and parameter counts of a configuration.
    Count(ModelArgs),
    /// Choose a deployment under resource limits.
    Plan(PlanArgs),
    /// Encode a dataset into quantized feedback payloads.
    Encode(CodecArgs),
    /// Decode feedback payloads into a reconstructed dataset.
    Decode(CodecArgs),
    /// Encode, pack, unpack and decode a dataset in one go.
    Roundtrip(RoundtripArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Expansion multiple.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Compression ratio as a fraction ("1/4") or a feature length ("512").
    #[arg(long, default_value = "1/4")]
    eta: String,
    /// Feature quantizer bits.
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    binarize_enc: bool,
    #[arg(long)]
    binarize_dec: bool,
    /// prelu, lrelu or sprelu.
    #[arg(long, default_value = "prelu")]
    activation: String,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    /// Subcarriers before truncation.
    #[arg(long, default_value_t = 1024)]
    nc: usize,
    #[arg(long, default_value_t = 3)]
    paths_min: usize,
    #[arg(long, default_value_t = 12)]
    paths_max: usize,
    #[arg(long, default_value_t = 0)]
    scenario: u8,
    /// Reuse the normalization record of this dataset.
    #[arg(long)]
    norm_from: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training dataset.
    #[arg(long)]
    input: PathBuf,
    /// Validation dataset.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 200)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4e-3)]
    lr_max: f64,
    #[arg(long, default_value_t = 5e-5)]
    lr_min: f64,
    /// Warm-up epochs; defaults to 1.2% of the epochs.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, default_value_t = 1)]
    val_every: usize,
    #[arg(long)]
    freeze_slopes: bool,
    /// Checkpoint to write.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-epoch history CSV.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Quantizer bits used at evaluation, overriding the checkpoint.
    #[arg(long)]
    bits: Option<u8>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// UE parameter limit in 32-bit units.
    #[arg(long)]
    ue_params: Option<f64>,
    /// BS parameter limit in 32-bit units.
    #[arg(long)]
    bs_params: Option<f64>,
    #[arg(long)]
    ue_flops: Option<f64>,
    #[arg(long)]
    bs_flops: Option<f64>,
    #[arg(long, default_value_t = 2048)]
    max_bits: usize,
    /// Candidate ratios; repeat the flag for several.
    #[arg(long = "eta")]
    etas: Vec<String>,
    /// Candidate quantizer bits, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,6,8")]
    bits: Vec<u8>,
    #[arg(long, default_value_t = 20)]
    max_k: usize,
}

#[derive(Args, Debug)]
struct CodecArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Trained weights; without it an untrained model is built from --seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct RoundtripArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    input: PathBuf,
}

/// An error with the category printed in front of it.
#[derive(Debug)]
struct Tagged {
    category: &'static str,
    inner: anyhow::Error,
}

impl fmt::Display for Tagged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.inner)
    }
}

impl std::error::Error for Tagged {}

trait Tag<T> {
    fn tag(self, category: &'static str) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn tag(self, category: &'static str) -> anyhow::Result<T> {
        self.map_err(|e| {
            Tagged {
                category,
                inner: e.into(),
            }
            .into()
        })
    }
}

fn fail<T>(category: &'static str, msg: impl fmt::Display) -> anyhow::Result<T> {
    Err(Tagged {
        category,
        inner: anyhow!("{msg}"),
    }
    .into())
}

fn csi_category(e: &CsiError) -> &'static str {
    match e {
        CsiError::Io(_) => "io",
        _ => "format",
    }
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).map_err(|e| {
        Tagged {
            category: csi_category(&e),
            inner: anyhow::Error::new(e).context(path.display().to_string()),
        }
        .into()
    })
}

fn save_dataset(ds: &Dataset, path: &Path) -> anyhow::Result<()> {
    ds.save(path)
        .with_context(|| path.display().to_string())
        .tag("io")
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| {
        let category = match e {
            CheckpointError::Io(_) => "io",
            _ => "format",
        };
        Tagged {
            category,
            inner: anyhow::Error::new(e).context(path.display().to_string()),
        }
        .into()
    })
}

fn model_config(args: &ModelArgs, na: usize, nt: usize) -> anyhow::Result<ModelConfig> {
    let eta = Eta::parse(&args.eta, 2 * na * nt).tag("config")?;
    let activation: ActivationKind = args
        .activation
        .parse()
        .map_err(|e| anyhow!("{e}"))
        .tag("config")?;
    let config = ModelConfig {
        na,
        nt,
        expansion: args.k,
        eta,
        quant_bits: args.bits,
        binarize_encoder_fc: args.binarize_enc,
        binarize_decoder_fc: args.binarize_dec,
        activation,
    };
    config.validate().tag("config")?;
    Ok(config)
}

fn config_banner(c: &ModelConfig) -> String {
    format!(
        "k={} eta={} feature_dim={} bits={} binarize_enc={} binarize_dec={} activation={} na={} nt={}",
        c.expansion,
        c.eta,
        c.feature_dim().map(|d| d.to_string()).unwrap_or_default(),
        c.quant_bits.map(|b| b.to_string()).unwrap_or_else(|| "none".into()),
        c.binarize_encoder_fc,
        c.binarize_decoder_fc,
        c.activation.as_str(),
        c.na,
        c.nt
    )
}

fn banner(command: &str, fields: &str) {
    println!("# acrnet {command} {fields}");
}

fn check_shape(model: &ModelConfig, data: &Dataset) -> anyhow::Result<()> {
    if (model.na, model.nt) != (data.na, data.nt) {
        return fail(
            "data",
            format!(
                "dataset is {}x{} but the model expects {}x{}",
                data.na, data.nt, model.na, model.nt
            ),
        );
    }
    Ok(())
}

fn train_category(e: &TrainError) -> &'static str {
    match e {
        TrainError::Config(_) => "config",
        TrainError::Data(c) => csi_category(c),
        TrainError::Checkpoint(CheckpointError::Io(_)) => "io",
        TrainError::Checkpoint(_) => "format",
        TrainError::RecordMismatch { .. } => "data",
        TrainError::Model(_) => "model",
        TrainError::NonFinite { .. } => "train",
    }
}

fn tag_train<T>(r: Result<T, TrainError>) -> anyhow::Result<T> {
    r.map_err(|e| {
        Tagged {
            category: train_category(&e),
            inner: e.into(),
        }
        .into()
    })
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    if a.paths_min == 0 || a.paths_min > a.paths_max {
        return fail("config", "need 1 <= paths-min <= paths-max");
    }
    let cfg = GeneratorConfig {
        nc: a.nc,
        paths: a.paths_min..=a.paths_max,
        scenario: a.scenario,
        ..GeneratorConfig::default()
    };
    if cfg.nc < cfg.na {
        return fail(
            "config",
            format!("nc {} is smaller than na {}", cfg.nc, cfg.na),
        );
    }
    let norm = a
        .norm_from
        .as_deref()
        .map(load_dataset)
        .transpose()?
        .map(|d| d.norm);
    banner(
        "gen-data",
        &format!(
            "count={} seed={} nc={} nt={} na={} paths={}..={} scenario={} norm={} output={}",
            a.count,
            a.seed,
            cfg.nc,
            cfg.nt,
            cfg.na,
            a.paths_min,
            a.paths_max,
            a.scenario,
            a.norm_from
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "fit".into()),
            a.output.display()
        ),
    );
    let raw: RawSet = cfg.raw(a.count, a.seed).tag("data")?;
    let (ds, rep) = Dataset::from_raw(raw, norm, cfg.scenario).tag("data")?;
    save_dataset(&ds, &a.output)?;
    println!(
        "wrote {} samples to {} (scale={} offset={} clamp_rate={:.3e})",
        ds.len(),
        a.output.display(),
        ds.norm.scale,
        ds.norm.offset,
        rep.clamp_rate()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let data = load_dataset(&a.input)?;
    let val = a.val.as_deref().map(load_dataset).transpose()?;
    let config = model_config(&a.model, data.na, data.nt)?;
    let warmup = a
        .warmup
        .unwrap_or_else(|| (a.epochs as f64 * 0.012).round() as usize)
        .min(a.epochs.saturating_sub(1));
    let tc = TrainConfig {
        gamma_max: a.lr_max,
        gamma_min: a.lr_min,
        epochs: a.epochs,
        warmup,
        batch_size: a.batch,
        seed: a.seed,
        val_every: a.val_every,
        freeze_slopes: a.freeze_slopes,
        ..TrainConfig::default()
    };
    banner(
        "train",
        &format!(
            "{} epochs={} batch={} seed={} lr_max={:e} lr_min={:e} warmup={} input={} val={} checkpoint={}{}",
            config_banner(&config),
            tc.epochs,
            tc.batch_size,
            tc.seed,
            tc.gamma_max,
            tc.gamma_min,
            tc.warmup,
            a.input.display(),
            a.val.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()),
            a.checkpoint.display(),
            a.resume
                .as_ref()
                .map(|p| format!(" resume={}", p.display()))
                .unwrap_or_default()
        ),
    );
    if let Some(v) = &val {
        check_shape(&config, v)?;
        if v.norm != data.norm {
            return fail(
                "data",
                "validation set uses a different normalization record than the training set",
            );
        }
    }
    check_shape(&config, &data)?;
    let (mut model, mut trainer) = match &a.resume {
        Some(p) => {
            let ck = tag_train(Checkpoint::load_for(p, &config).map_err(TrainError::from))?;
            if ck.norm.is_some_and(|n| n != data.norm) {
                return fail("data", "training set record differs from the checkpoint's");
            }
            tag_train(Trainer::resume(ck, tc))?
        }
        None => {
            let mut model = AcrNet::build(&config, a.seed).tag("model")?;
            let trainer = tag_train(Trainer::new(&mut model, tc))?;
            (model, trainer)
        }
    };
    let history = tag_train(trainer.fit(&mut model, &data, val.as_ref(), |r| {
        let val = r
            .val_nmse_db
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "epoch={} lr={:.4e} train_mse={:.6e} val_nmse_db={}",
            r.epoch + 1,
            r.lr,
            r.train_mse,
            val
        );
    }))?
    .clone();
    trainer
        .checkpoint(&model, Some(data.norm))
        .save(&a.checkpoint)
        .with_context(|| a.checkpoint.display().to_string())
        .tag("io")?;
    if let Some(out) = &a.output {
        fs::write(out, history.to_csv())
            .with_context(|| out.display().to_string())
            .tag("io")?;
    }
    if let Some(v) = &val {
        let rep = tag_train(evaluate(&model, v, Some(data.norm)))?;
        println!("final {rep}");
    }
    println!("saved checkpoint {}", a.checkpoint.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.input)?;
    let bits = a.bits.or(ck.config.quant_bits);
    banner(
        "eval",
        &format!(
            "{} eval_bits={} checkpoint={} input={}",
            config_banner(&ck.config),
            bits.map(|b| b.to_string()).unwrap_or_else(|| "none".into()),
            a.checkpoint.display(),
            a.input.display()
        ),
    );
    check_shape(&ck.config, &data)?;
    let r = WithQuantizer {
        model: &ck.model,
        bits,
    };
    let rep = tag_train(evaluate(&r, &data, ck.norm))?;
    println!("{rep}");
    println!("nmse_db={:.6}", rep.nmse.db);
    Ok(())
}

fn count_cmd(a: ModelArgs) -> anyhow::Result<()> {
    let config = model_config(&a, 32, 32)?;
    banner("count", &config_banner(&config));
    let report = count_config(&config).tag("model")?;
    println!("{report}");
    print!("{}", report.key_values());
    Ok(())
}

fn plan_cmd(a: PlanArgs) -> anyhow::Result<()> {
    let mut opts = PlannerOptions {
        max_k: a.max_k,
        bits: a.bits.clone(),
        ..PlannerOptions::default()
    };
    if !a.etas.is_empty() {
        opts.etas = a
            .etas
            .iter()
            .map(|s| Eta::parse(s, 2 * opts.na * opts.nt))
            .collect::<Result<_, _>>()
            .tag("config")?;
    }
    let budget = ResourceBudget {
        ue_param_limit: a.ue_params.unwrap_or(f64::INFINITY),
        bs_param_limit: a.bs_params.unwrap_or(f64::INFINITY),
        ue_flops_limit: a.ue_flops.unwrap_or(f64::INFINITY),
        bs_flops_limit: a.bs_flops.unwrap_or(f64::INFINITY),
        max_feedback_bits: a.max_bits,
    };
    let etas: Vec<String> = opts.etas.iter().map(|e| e.to_string()).collect();
    let bits: Vec<String> = opts.bits.iter().map(|b| b.to_string()).collect();
    banner(
        "plan",
        &format!(
            "ue_params={} bs_params={} ue_flops={} bs_flops={} max_bits={} etas={} bits={} max_k={}",
            budget.ue_param_limit,
            budget.bs_param_limit,
            budget.ue_flops_limit,
            budget.bs_flops_limit,
            budget.max_feedback_bits,
            etas.join(","),
            bits.join(","),
            opts.max_k
        ),
    );
    let p = plan(&budget, &opts).map_err(|e| {
        let category = match e {
            PlanError::Budget(_) => "config",
            PlanError::Infeasible(_) => "infeasible",
            PlanError::Model(_) | PlanError::Verification(_) => "model",
        };
        anyhow::Error::from(Tagged {
            category,
            inner: e.into(),
        })
    })?;
    println!("{p}");
    println!("{}", p.report);
    Ok(())
}

/// Model for the codec commands: a checkpoint, or an untrained network
/// built from the flags.
fn codec_model(
    model: &ModelArgs,
    checkpoint: Option<&Path>,
    seed: u64,
    data: Option<&Dataset>,
) -> anyhow::Result<(AcrNet, Option<Normalization>, String)> {
    match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let trained = ck.config.quant_bits;
            match (trained, model.bits) {
                (None, _) => return fail(
                    "config",
                    "checkpoint was trained without a quantizer, so its features are not in (0, 1)",
                ),
                (Some(t), Some(b)) if t != b => {
                    return fail(
                        "config",
                        format!("--bits {b} conflicts with the checkpoint's {t}-bit quantizer"),
                    )
                }
                _ => {}
            }
            let source = format!("checkpoint={}", p.display());
            Ok((ck.model, ck.norm, source))
        }
        None => {
            if model.bits.is_none() {
                return fail("config", "--bits is required without a checkpoint");
            }
            let (na, nt) = data.map(|d| (d.na, d.nt)).unwrap_or((32, 32));
            let config = model_config(model, na, nt)?;
            let net = AcrNet::build(&config, seed).tag("model")?;
            Ok((net, None, format!("weights=untrained seed={seed}")))
        }
    }
}

fn bits_of(model: &AcrNet) -> u8 {
    model.config().quant_bits.expect("codec models quantize")
}

fn encode_cmd(a: CodecArgs) -> anyhow::Result<()> {
    let data = load_dataset(&a.input)?;
    let (model, _, source) = codec_model(&a.model, a.checkpoint.as_deref(), a.seed, Some(&data))?;
    banner(
        "encode",
        &format!(
            "{} {source} input={} output={}",
            config_banner(model.config()),
            a.input.display(),
            a.output.display()
        ),
    );
    check_shape(model.config(), &data)?;
    let bits = bits_of(&model);
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(200) {
        let v = model.encode(&data.batch(chunk)).tag("model")?;
        for row in v.data().chunks_exact(model.feature_dim()) {
            let codes = codec::quantize(row, bits).tag("codec")?;
            out.extend(FeedbackPayload::pack(&codes, bits).tag("codec")?.to_bytes());
        }
    }
    fs::write(&a.output, &out)
        .with_context(|| a.output.display().to_string())
        .tag("io")?;
    println!(
        "encoded {} samples, {} bits each, {} bytes to {}",
        data.len(),
        codec::feedback_bits(model.feature_dim(), bits),
        out.len(),
        a.output.display()
    );
    Ok(())
}

fn decode_cmd(a: CodecArgs) -> anyhow::Result<()> {
    let bytes = fs::read(&a.input)
        .with_context(|| a.input.display().to_string())
        .tag("io")?;
    let (model, norm, source) = codec_model(&a.model, a.checkpoint.as_deref(), a.seed, None)?;
    banner(
        "decode",
        &format!(
            "{} {source} input={} output={}",
            config_banner(model.config()),
            a.input.display(),
            a.output.display()
        ),
    );
    let payloads = FeedbackPayload::read_stream(&bytes).tag("format")?;
    let (bits, fd) = (bits_of(&model), model.feature_dim());
    let mut features = Vec::with_capacity(payloads.len() * fd);
    for (i, p) in payloads.iter().enumerate() {
        if p.bits != bits || p.feature_dim as usize != fd {
            return fail(
                "format",
                format!(
                    "payload {i} carries {} x {}-bit codes, the model expects {fd} x {bits}-bit",
                    p.feature_dim, p.bits
                ),
            );
        }
        features.extend(codec::dequantize(&p.unpack(), bits).tag("codec")?);
    }
    let mut recon = Vec::with_capacity(payloads.len() * model.config().input_len());
    for chunk in features.chunks(200 * fd) {
        let v = Tensor::new(vec![chunk.len() / fd, fd], chunk.to_vec()).tag("model")?;
        recon.extend_from_slice(model.decode(&v).tag("model")?.data());
    }
    let c = model.config();
    let ds = Dataset::new(
        c.na,
        c.nt,
        0,
        norm.unwrap_or(Normalization::IDENTITY),
        recon,
    )
    .tag("data")?;
    save_dataset(&ds, &a.output)?;
    println!("decoded {} samples to {}", ds.len(), a.output.display());
    Ok(())
}

fn roundtrip_cmd(a: RoundtripArgs) -> anyhow::Result<()> {
    let data = load_dataset(&a.input)?;
    let (model, norm, source) =
        codec_model(&a.model, a.checkpoint.as_deref(), a.seed, Some(&data))?;
    banner(
        "roundtrip",
        &format!(
            "{} {source} input={}",
            config_banner(model.config()),
            a.input.display()
        ),
    );
    check_shape(model.config(), &data)?;
    if norm.is_some_and(|n| n != data.norm) {
        return fail(
            "data",
            "dataset record differs from the checkpoint's training record",
        );
    }
    let (bits, fd) = (bits_of(&model), model.feature_dim());
    let mut recon = Vec::with_capacity(data.data().len());
    let mut wire_bytes = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(200) {
        let v = model.encode(&data.batch(chunk)).tag("model")?;
        let mut deq = Vec::with_capacity(v.len());
        for row in v.data().chunks_exact(fd) {
            let codes = codec::quantize(row, bits).tag("codec")?;
            let bytes = FeedbackPayload::pack(&codes, bits).tag("codec")?.to_bytes();
            wire_bytes += bytes.len();
            let back = FeedbackPayload::from_bytes(&bytes).tag("codec")?;
            if back.payload_bits() != codec::feedback_bits(fd, bits) || back.unpack() != codes {
                return fail("codec", "payload did not survive packing");
            }
            deq.extend(codec::dequantize(&back.unpack(), bits).tag("codec")?);
        }
        let v = Tensor::new(v.shape().to_vec(), deq).tag("model")?;
        recon.extend_from_slice(model.decode(&v).tag("model")?.data());
    }
    let nmse = acrnet::csi::nmse(data.data(), &recon, data.sample_len()).tag("data")?;
    println!(
        "samples={} feedback_bits={} wire_bytes={}",
        data.len(),
        codec::feedback_bits(fd, bits),
        wire_bytes
    );
    println!("NMSE {nmse} [domain: {}]", acrnet::train::NMSE_DOMAIN);
    println!("nmse_db={:.6}", nmse.db);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Count(a) => count_cmd(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Roundtrip(a) => roundtrip_cmd(a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("{e}");
                return ExitCode::from(2);
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "error[usage]: {}",
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, msg) = match e.downcast_ref::<Tagged>() {
                Some(t) => (t.category, t.to_string()),
                None => ("error", format!("{e:#}")),
            };
            eprintln!("error[{category}]: {}", one_line(&msg));
            ExitCode::FAILURE
        }
    }
}
