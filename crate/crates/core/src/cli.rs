//! Command-line front end. Reports are `key=value` lines grouped by blank lines.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{finite_mean, fmt_metric, psnr, region_psnr, sliding_eval, FrameSequence, RegionMask};
use crate::io::{read_tensor, read_tensor_dir, write_tensor, write_tensor_dir};
use crate::lipschitz::{compose_network_bound, BoundFactor};
use crate::model_io::{load_model, save_model};
use crate::nroub::{
    certify_images, degrade, run_trial_suite, verify_code_invariance, DegradationKind, DegradationSpec, Region,
};
use crate::quantizer;
use crate::tensor::Tensor;
use crate::toy::{synth_dataset, toy_config};
use crate::train::{train, ModelState, RegObjective, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "nroub", version, about = "Noise-robustness certificates for VQ autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic tile dataset as a frame directory
    Synth(SynthArgs),
    /// Train a model on a frame directory
    Train(TrainArgs),
    /// Per-layer Lipschitz bounds of a model's encoder
    Bound(BoundArgs),
    /// Robustness certificate plus perturbation trials
    Certify(CertifyArgs),
    /// Degrade one image and compare decoded outputs
    Perturb(PerturbArgs),
    /// PSNR table and sliding alignment of two frame directories
    Eval(EvalArgs),
    /// Regularizer objective x theta grid
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Objective {
    Min,
    Avg,
}

impl From<Objective> for RegObjective {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Min => RegObjective::MinimalDistance,
            Objective::Avg => RegObjective::AverageDistance,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Noise,
    Blur,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 6)]
    colours: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
struct Schedule {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.02)]
    recon_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    vq_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    reg_weight: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, value_enum, default_value_t = Objective::Min)]
    reg_objective: Objective,
    #[command(flatten)]
    schedule: Schedule,
}

#[derive(Debug, Args)]
struct BoundArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Images the certificate's gamma is measured on (the training set)
    #[arg(long)]
    data: PathBuf,
    /// Trials per image and per norm fraction
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.9, 0.99])]
    norm_fraction: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_enum, default_value_t = Kind::Noise)]
    kind: Kind,
    /// Target Frobenius norm of the perturbation (required for noise)
    #[arg(long)]
    norm: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// top,left,height,width; whole frame when absent
    #[arg(long, value_delimiter = ',')]
    region: Option<Vec<usize>>,
    /// Training images; when given, the certificate is reported too
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// Directory for degraded and decoded tensors
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    gen: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// top,left,height,width of an extra region PSNR
    #[arg(long, value_delimiter = ',')]
    region: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0])]
    theta: Vec<f64>,
    #[command(flatten)]
    schedule: Schedule,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// Directory to keep the trained models in
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn cli_main<I, T>(argv: I, stdout: &mut impl std::io::Write, stderr: &mut impl std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return code;
        }
    };
    match run(cli.command) {
        Ok(report) => {
            let _ = stdout.write_all(report.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Bound(a) => bound(a),
        Command::Certify(a) => certify(a),
        Command::Perturb(a) => perturb(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn synth(a: SynthArgs) -> Result<String> {
    if a.count == 0 {
        return Err(Error::invalid("count must be >= 1"));
    }
    let data = synth_dataset(a.count, a.colours, a.seed);
    write_tensor_dir(&a.out, &data)?;
    Ok(format!(
        "out={}\ncount={}\ncolours={}\nshape={}\n",
        a.out.display(),
        data.len(),
        a.colours,
        data[0].shape()
    ))
}

fn config_for(data: &[Tensor], objective: RegObjective, theta: f64, s: &Schedule) -> Result<TrainConfig> {
    let mut cfg = toy_config(objective, theta, s.reg_weight, s.seed);
    cfg.arch.input = data.first().ok_or_else(|| Error::invalid("empty dataset"))?.shape();
    cfg.epochs = s.epochs;
    cfg.learning_rate = s.lr;
    cfg.batch_size = s.batch_size;
    cfg.weights.recon = s.recon_weight;
    cfg.weights.vq = s.vq_weight;
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<String> {
    let data = read_tensor_dir(&a.data)?;
    let cfg = config_for(&data, a.reg_objective.into(), a.theta, &a.schedule)?;
    let out = train(&data, &cfg)?;
    save_model(&a.out, &out.state)?;
    let last = out.records.last().expect("epochs >= 1");
    let mut r = String::new();
    let _ = writeln!(r, "model={}", a.out.display());
    let _ = writeln!(r, "images={}", data.len());
    let _ = writeln!(r, "epochs={}", cfg.epochs);
    let _ = writeln!(r, "steps={}", out.state.step);
    let _ = writeln!(r, "seed={}", cfg.seed);
    let _ = writeln!(r, "theta={}", cfg.weights.theta);
    let _ = writeln!(r, "reg_objective={}", cfg.weights.objective.as_str());
    let _ = writeln!(r, "recon={}", last.recon);
    let _ = writeln!(r, "codebook_term={}", last.codebook);
    let _ = writeln!(r, "reg={}", last.reg);
    let _ = writeln!(r, "d_C={}", last.d_c);
    let _ = writeln!(r, "gamma={}", last.gamma);
    Ok(r)
}

fn bound_report(state: &ModelState) -> Result<String> {
    let lb = compose_network_bound(&state.encoder)?;
    let mut r = String::new();
    for f in &lb.factors {
        match f {
            BoundFactor::Conv { layer_index, bound } => {
                let _ = writeln!(r, "layer={layer_index}");
                let _ = writeln!(r, "kind=conv");
                let _ = writeln!(r, "method={}", bound.method.as_str());
                let _ = writeln!(r, "bound={}", bound.value);
                let _ = writeln!(r, "oracle={}", bound.oracle_value.map_or("none".into(), |v| v.to_string()));
            }
            BoundFactor::Pointwise {
                layer_index,
                name,
                constant,
            } => {
                let _ = writeln!(r, "layer={layer_index}");
                let _ = writeln!(r, "kind={name}");
                let _ = writeln!(r, "bound={constant}");
            }
        }
        r.push('\n');
    }
    let _ = writeln!(r, "L_eps={}", lb.value);
    Ok(r)
}

fn bound(a: BoundArgs) -> Result<String> {
    bound_report(&load_model(&a.model)?)
}

fn certify(a: CertifyArgs) -> Result<String> {
    let state = load_model(&a.model)?;
    let data = read_tensor_dir(&a.data)?;
    let cert = certify_images(&state.encoder, &state.codebook, &data)?;
    let mut r = format!(
        "d_C={} gamma={} L_eps={} bound={} degenerate={}\n",
        cert.d_c, cert.gamma, cert.l_eps, cert.bound, cert.degenerate
    );
    for &fraction in &a.norm_fraction {
        r.push('\n');
        if cert.degenerate {
            let _ = writeln!(r, "trials=0 matches=0 fraction={fraction} skipped=degenerate");
            continue;
        }
        let rep = run_trial_suite(
            &state.encoder,
            &state.codebook,
            Some(&state.decoder),
            &data,
            &cert,
            a.trials,
            fraction,
            a.seed,
        )?;
        let _ = writeln!(
            r,
            "trials={} matches={} fraction={} decoded_identical={} max_norm={}",
            rep.trials, rep.code_matches, fraction, rep.decoded_identical, rep.max_perturbation_norm
        );
    }
    Ok(r)
}

fn region_from(v: &Option<Vec<usize>>) -> Result<Option<Region>> {
    match v.as_deref() {
        None => Ok(None),
        Some(&[top, left, height, width]) => Ok(Some(Region {
            top,
            left,
            height,
            width,
        })),
        Some(_) => Err(Error::invalid("--region takes top,left,height,width")),
    }
}

fn perturb(a: PerturbArgs) -> Result<String> {
    let state = load_model(&a.model)?;
    let image = read_tensor(&a.image)?;
    let spec = DegradationSpec {
        kind: match a.kind {
            Kind::Noise => DegradationKind::GaussianNoise,
            Kind::Blur => DegradationKind::GaussianBlur,
        },
        region: region_from(&a.region)?,
        target_frobenius_norm: a.norm,
        blur_sigma: a.sigma,
        seed: a.seed,
    };
    let (degraded, realized) = degrade(&image, &spec)?;
    let matched = verify_code_invariance(&state.encoder, &state.codebook, &image, &degraded)?;
    let (_, clean_out) = state.reconstruct(&image)?;
    let (_, degraded_out) = state.reconstruct(&degraded)?;
    let mut r = String::new();
    let _ = writeln!(r, "kind={}", spec.kind.as_str());
    let _ = writeln!(r, "realized_norm={realized}");
    let _ = writeln!(r, "code_match={matched}");
    let _ = writeln!(r, "psnr_degraded={}", fmt_metric(psnr(&degraded, &image, a.peak)?));
    let _ = writeln!(r, "psnr_decoded_clean={}", fmt_metric(psnr(&clean_out, &image, a.peak)?));
    let _ = writeln!(r, "psnr_decoded_degraded={}", fmt_metric(psnr(&degraded_out, &image, a.peak)?));
    let _ = writeln!(r, "psnr_decoded_pair={}", fmt_metric(psnr(&degraded_out, &clean_out, a.peak)?));
    if let Some(dir) = &a.data {
        let cert = certify_images(&state.encoder, &state.codebook, &read_tensor_dir(dir)?)?;
        r.push('\n');
        let _ = writeln!(r, "bound={}", cert.bound);
        let _ = writeln!(r, "degenerate={}", cert.degenerate);
        let _ = writeln!(r, "within_bound={}", realized < cert.bound);
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
        write_tensor(&dir.join("degraded.nrb"), &degraded)?;
        write_tensor(&dir.join("decoded_clean.nrb"), &clean_out)?;
        write_tensor(&dir.join("decoded_degraded.nrb"), &degraded_out)?;
        r.push('\n');
        let _ = writeln!(r, "out={}", dir.display());
    }
    Ok(r)
}

fn eval(a: EvalArgs) -> Result<String> {
    let gen = FrameSequence::new(read_tensor_dir(&a.gen)?)?;
    let gt = FrameSequence::new(read_tensor_dir(&a.gt)?)?;
    let mut r = String::new();
    let mut values = Vec::new();
    for (i, (g, t)) in gen.frames().iter().zip(gt.frames()).enumerate() {
        let v = psnr(g, t, a.peak)?;
        values.push(v);
        let _ = writeln!(r, "frame={i} psnr={}", fmt_metric(v));
    }
    r.push('\n');
    let (mean, inf) = finite_mean(&values);
    let _ = writeln!(r, "frames={}", values.len());
    let _ = writeln!(r, "mean_psnr={}", mean.map_or("none".into(), fmt_metric));
    let _ = writeln!(r, "inf_frames={inf}");
    if let Some(region) = region_from(&a.region)? {
        let s = gen.frames()[0].shape();
        let mask = RegionMask::rect(s.h, s.w, region.top, region.left, region.height, region.width)?;
        let mut rv = Vec::new();
        for (g, t) in gen.frames().iter().zip(gt.frames()) {
            rv.push(region_psnr(g, t, &mask, a.peak)?);
        }
        let (m, inf) = finite_mean(&rv);
        let _ = writeln!(r, "region_mean_psnr={}", m.map_or("none".into(), fmt_metric));
        let _ = writeln!(r, "region_inf_frames={inf}");
    }
    r.push('\n');
    let (best, offset) = sliding_eval(&gen, &gt, |x, y| psnr(x, y, a.peak))?;
    let _ = writeln!(r, "sliding_best={}", fmt_metric(best));
    let _ = writeln!(r, "sliding_offset={offset}");
    Ok(r)
}

fn mean_recon_psnr(state: &ModelState, data: &[Tensor], peak: f64) -> Result<(Option<f64>, usize)> {
    let mut values = Vec::with_capacity(data.len());
    for x in data {
        values.push(psnr(&state.reconstruct(x)?.1, x, peak)?);
    }
    Ok(finite_mean(&values))
}

fn ablate(a: AblateArgs) -> Result<String> {
    let data = read_tensor_dir(&a.data)?;
    let mut runs: Vec<(String, RegObjective, f64, f64)> = vec![("none".into(), RegObjective::MinimalDistance, 1.0, 0.0)];
    for objective in [RegObjective::MinimalDistance, RegObjective::AverageDistance] {
        for &theta in &a.theta {
            runs.push((objective.as_str().into(), objective, theta, a.schedule.reg_weight));
        }
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let mut r = String::new();
    for (label, objective, theta, reg_weight) in runs {
        let mut cfg = config_for(&data, objective, theta, &a.schedule)?;
        cfg.weights.reg = reg_weight;
        let out = train(&data, &cfg)?;
        let cert = certify_images(&out.state.encoder, &out.state.codebook, &data)?;
        let (mean, inf) = mean_recon_psnr(&out.state, &data, a.peak)?;
        let mean_pair = quantizer::mean_pairwise_distance(&out.state.codebook)?;
        if !r.is_empty() {
            r.push('\n');
        }
        let _ = writeln!(r, "objective={label}");
        let _ = writeln!(r, "theta={theta}");
        let _ = writeln!(r, "d_C={}", cert.d_c);
        let _ = writeln!(r, "mean_distance={mean_pair}");
        let _ = writeln!(r, "gamma={}", cert.gamma);
        let _ = writeln!(r, "L_eps={}", cert.l_eps);
        let _ = writeln!(r, "nroub={}", cert.bound);
        let _ = writeln!(r, "degenerate={}", cert.degenerate);
        let _ = writeln!(r, "psnr={}", mean.map_or("none".into(), fmt_metric));
        let _ = writeln!(r, "psnr_inf={inf}");
        if let Some(dir) = &a.out {
            let path = dir.join(format!("{label}_theta{theta}.nrbm"));
            save_model(&path, &out.state)?;
            let _ = writeln!(r, "model={}", path.display());
        }
    }
    Ok(r)
}
