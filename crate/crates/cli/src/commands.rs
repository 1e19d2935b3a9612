//! One function per sub-command. Each takes resolved [`Settings`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ebm_core::boltzmann::{self, AnalyticEnergy, ToyChainConfig};
use ebm_core::bridge::{build_dataset, load_dataset, verify_dataset, Subtype};
use ebm_core::checkpoint::Checkpoint;
use ebm_core::gradcheck::{self, REL_ERR_FLOOR};
use ebm_core::langevin::{latent_init, run_chain, EnergyLandscape, LangevinConfig};
use ebm_core::net::{Arch, EnergyNet};
use ebm_core::optim::AdamConfig;
use ebm_core::pgm::{tile, GrayImage};
use ebm_core::rng::{derive_seed, seeded};
use ebm_core::tape::Mode;
use ebm_core::tensor::{self, Tensor};
use ebm_core::train::{self, cd_gradient_identity, TrainConfig, TrainOutput, Trainer};

use crate::error::{CliError, ExitCode};
use crate::settings::Settings;

/// Tag mixed into `--seed` for the initial network weights.
pub const NET_SEED_TAG: u64 = 0x6e6574;
/// Finite-difference tolerance at 32-bit storage.
pub const GRAD_TOL: f64 = 1e-3;
pub const IDENTITY_TOL: f64 = 1e-5;
pub const TV_TOL: f64 = 0.05;

const GEN_DATASET: &[(&str, &str)] = &[("out", "dataset"), ("per-subtype", "1200"), ("verify", "false")];
const TRAIN: &[(&str, &str)] = &[
    ("data", ""),
    ("out", ""),
    ("epochs", "10"),
    ("batch", "64"),
    ("reg-weight", "0.1"),
    ("lr", "0.0001"),
    ("langevin-steps", "60"),
    ("step-size", "10"),
    ("noise", "0.005"),
    ("grad-clip", "0.03"),
    ("real-noise", "0.005"),
    ("buffer-capacity", "8192"),
    ("fresh-fraction", "0.05"),
    ("checkpoint-every", "5"),
    ("subtypes", "all"),
    ("per-subtype", "all"),
    ("resume", ""),
];
const SAMPLE: &[(&str, &str)] = &[
    ("model", ""),
    ("count", "16"),
    ("steps", "2000"),
    ("step-size", "10"),
    ("noise", "0.005"),
    ("grad-clip", "0.03"),
    ("out", ""),
];
const TRACE: &[(&str, &str)] = &[
    ("model", ""),
    ("steps", "2000"),
    ("trace-every", "100"),
    ("step-size", "10"),
    ("noise", "0.005"),
    ("grad-clip", "0.03"),
    ("out", ""),
];
const VERIFY: &[(&str, &str)] = &[("suite", "all"), ("out", "")];
const INFO: &[(&str, &str)] = &[("model", "")];

pub fn defaults(command: &str) -> &'static [(&'static str, &'static str)] {
    match command {
        "gen-dataset" => GEN_DATASET,
        "train" => TRAIN,
        "sample" => SAMPLE,
        "trace" => TRACE,
        "verify" => VERIFY,
        "info" => INFO,
        other => panic!("no defaults for command {other}"),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::new(ExitCode::Io, format!("stdout: {e}")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_pgm(img: &GrayImage, path: &Path) -> Result<(), CliError> {
    img.write(path).map_err(|e| CliError::io(path, e))
}

pub fn dispatch(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let threads: usize = s.get("threads")?;
    if threads == 0 {
        return Err(CliError::usage("threads must be at least 1"));
    }
    let strict: bool = s.get("strict-determinism")?;
    tensor::set_threads(if strict { 1 } else { threads });
    match s.command.as_str() {
        "gen-dataset" => gen_dataset(s, out),
        "train" => train_cmd(s, out),
        "sample" => sample(s, out),
        "trace" => trace(s, out),
        "verify" => verify(s, out),
        "info" => info(s, out),
        other => Err(CliError::usage(format!("unknown command {other}"))),
    }
}

pub fn gen_dataset(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = PathBuf::from(s.required("out")?);
    let n: usize = s.get("per-subtype")?;
    let seed: u64 = s.get("seed")?;
    if s.get::<bool>("verify")? {
        let differing = verify_dataset(&dir, n, seed)?;
        if differing.is_empty() {
            return say(out, format!("dataset unchanged (bitwise): {} images in {}", 8 * n, dir.display()));
        }
        let shown: Vec<&str> = differing.iter().take(5).map(String::as_str).collect();
        return Err(CliError::new(
            ExitCode::Verification,
            format!("dataset differs from a fresh build in {} files: {}", differing.len(), shown.join(", ")),
        ));
    }
    let manifest = build_dataset(&dir, n, seed)?;
    s.write_snapshot(&dir)?;
    say(out, format!("{} images written to {}", manifest.entries.len(), dir.display()))?;
    for t in Subtype::ALL {
        say(out, format!("  {:<28} {}", t.name(), manifest.count(t)))?;
    }
    Ok(())
}

fn langevin_from(s: &Settings, steps_key: &str) -> Result<LangevinConfig, CliError> {
    let cfg = LangevinConfig {
        step_size: s.get("step-size")?,
        noise_std: s.get("noise")?,
        grad_clip: s.get("grad-clip")?,
        n_steps: s.get(steps_key)?,
        ..LangevinConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_subtypes(v: &str) -> Result<Vec<Subtype>, CliError> {
    if v == "all" {
        return Ok(Subtype::ALL.to_vec());
    }
    v.split(',')
        .map(|t| t.trim().parse::<Subtype>().map_err(|e| CliError::usage(e.to_string())))
        .collect()
}

pub fn train_config(s: &Settings) -> Result<TrainConfig, CliError> {
    Ok(TrainConfig {
        batch_size: s.get("batch")?,
        epochs: s.get("epochs")?,
        adam: AdamConfig { learning_rate: s.get("lr")?, ..AdamConfig::default() },
        reg_weight: s.get("reg-weight")?,
        langevin: langevin_from(s, "langevin-steps")?,
        real_noise_std: s.get("real-noise")?,
        buffer_capacity: s.get("buffer-capacity")?,
        fresh_fraction: s.get("fresh-fraction")?,
        checkpoint_every: s.get("checkpoint-every")?,
        seed: s.get("seed")?,
    })
}

pub fn train_cmd(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let data_dir = PathBuf::from(s.required("data")?);
    let out_dir = PathBuf::from(s.required("out")?);
    let cfg = train_config(s)?;
    let seed = cfg.seed;
    let dataset = load_dataset(&data_dir)?;
    let limit = match s.raw("per-subtype") {
        "all" => None,
        v => Some(v.parse::<usize>().map_err(|_| CliError::usage(format!("invalid value {v:?} for per-subtype")))?),
    };
    let idx = dataset.indices_of(&parse_subtypes(s.raw("subtypes"))?, limit);
    if idx.len() < 2 {
        return Err(CliError::usage(format!("selection holds {} images, need at least 2", idx.len())));
    }
    let data = dataset.subset(&idx).map_err(|e| CliError::usage(e.to_string()))?.images;

    let mut trainer = match s.raw("resume") {
        "" => Trainer::new(EnergyNet::build(derive_seed(seed, NET_SEED_TAG)), cfg)?,
        ck => Trainer::resume(Checkpoint::load(Path::new(ck))?, cfg)?,
    };
    create_dir(&out_dir)?;
    let output = TrainOutput { dir: out_dir.clone() };
    if s.raw("resume").is_empty() {
        let m = output.metrics_path();
        if m.exists() {
            fs::remove_file(&m).map_err(|e| CliError::io(&m, e))?;
        }
    }
    s.write_snapshot(&out_dir)?;
    say(out, format!("training on {} images from {}", data.batch(), data_dir.display()))?;
    let mut lines = Vec::new();
    let result = train::train(&mut trainer, &data, &output, |m| {
        lines.push(format!(
            "epoch {:>4}  loss {:+.6}  reg {:.6}  cdiv {:+.6}  real {:+.6}  fake {:+.6}",
            m.epoch, m.loss, m.reg, m.cdiv, m.real, m.fake
        ));
    });
    for l in &lines {
        say(out, l)?;
    }
    let e: CliError = match result {
        Ok(_) => return say(out, format!("model written to {}", output.final_path().display())),
        Err(e) => e.into(),
    };
    if e.code != ExitCode::Divergence {
        return Err(e);
    }
    let dump = out_dir.join("divergence.txt");
    let body = format!("{}\nepochs completed: {}\nlast metrics:\n{}\n", e.message, trainer.epoch, lines.join("\n"));
    fs::write(&dump, body).map_err(|err| CliError::io(&dump, err))?;
    Err(CliError::new(ExitCode::Divergence, format!("{} (details in {})", e.message, dump.display())))
}

fn load_model(s: &Settings) -> Result<EnergyNet, CliError> {
    Ok(Checkpoint::load(Path::new(s.required("model")?))?.net)
}

fn image_shape(net: &EnergyNet) -> [usize; 3] {
    [net.arch().height, net.arch().width, 1]
}

fn to_gray(x: &Tensor, i: usize) -> GrayImage {
    let shape = x.shape();
    GrayImage::from_unit(shape[2], shape[1], x.row(i).iter().map(|&v| v as f64))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sample(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let net = load_model(s)?;
    let dir = PathBuf::from(s.required("out")?);
    let count: usize = s.get("count")?;
    if count == 0 {
        return Err(CliError::usage("count must be at least 1"));
    }
    let cfg = langevin_from(s, "steps")?;
    let mut rng = seeded(s.get("seed")?);
    let x0 = latent_init(count, &image_shape(&net), &mut rng).map_err(|e| CliError::usage(e.to_string()))?;
    let chain = run_chain(&x0, &net, &cfg, &mut rng, None)?;
    let (e0, e1) = (mean(&net.energies(&x0)?), mean(&net.energies(&chain.last)?));
    create_dir(&dir)?;
    let images: Vec<GrayImage> = (0..count).map(|i| to_gray(&chain.last, i)).collect();
    for (i, img) in images.iter().enumerate() {
        write_pgm(img, &dir.join(format!("sample-{i:03}.pgm")))?;
    }
    write_pgm(&tile(&images, 4, 2), &dir.join("grid.pgm"))?;
    s.write_snapshot(&dir)?;
    say(
        out,
        format!(
            "{count} samples and grid.pgm written to {} after {} steps (mean energy {e0:+.4} -> {e1:+.4})",
            dir.display(),
            cfg.n_steps
        ),
    )
}

pub fn trace(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let net = load_model(s)?;
    let dir = PathBuf::from(s.required("out")?);
    let every: usize = s.get("trace-every")?;
    let cfg = langevin_from(s, "steps")?;
    let mut rng = seeded(s.get("seed")?);
    let x0 = latent_init(1, &image_shape(&net), &mut rng).map_err(|e| CliError::usage(e.to_string()))?;
    let chain = run_chain(&x0, &net, &cfg, &mut rng, Some(every))?;
    create_dir(&dir)?;
    let mut frames = Vec::with_capacity(chain.snapshots.len());
    for (step, x) in &chain.snapshots {
        let img = to_gray(x, 0);
        write_pgm(&img, &dir.join(format!("frame-{step:05}.pgm")))?;
        frames.push(img);
    }
    write_pgm(&tile(&frames, 7, 2), &dir.join("filmstrip.pgm"))?;
    s.write_snapshot(&dir)?;
    say(out, format!("{} frames and filmstrip.pgm written to {}", frames.len(), dir.display()))
}

/// One named pass/fail outcome of `verify`.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {:<34} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Chain-vs-quadrature comparisons for the whole catalog plus the Monte
/// Carlo convergence check.
pub fn toy_suite(seed: u64, report_dir: Option<&Path>) -> Result<Vec<Check>, CliError> {
    let lab = |e: boltzmann::LabError| CliError::usage(e.to_string());
    let mut checks = Vec::new();
    let z = boltzmann::boltzmann_density(AnalyticEnergy::Quadratic, 4000).map_err(lab)?.z.expect("quadrature");
    let z_err = (z - (2.0 * std::f64::consts::PI).sqrt()).abs();
    checks.push(Check::new("toy/quadratic-partition", z_err <= 1e-5, format!("Z {z:.8} |err| {z_err:.2e}")));
    let mut rows = Vec::new();
    for (i, e) in AnalyticEnergy::ALL.into_iter().enumerate() {
        let row = boltzmann::compare(e, &ToyChainConfig::standard(e), derive_seed(seed, i as u64)).map_err(lab)?;
        checks.push(Check::new(
            format!("toy/{}-tv", e.name()),
            row.tv <= TV_TOL,
            format!("tv_distance {:.4} (n={})", row.tv, row.samples),
        ));
        match e {
            AnalyticEnergy::Quadratic => {
                let long = boltzmann::langevin_toy_chain(e, &ToyChainConfig::long(e), derive_seed(seed, 50)).map_err(lab)?;
                let var = long.moments(0).1;
                checks.push(Check::new(
                    "toy/quadratic-variance",
                    (var - 1.0).abs() <= 0.05,
                    format!("variance {var:.4} (n={})", long.len()),
                ));
            }
            AnalyticEnergy::DoubleWell => {
                let left = row.left_mass;
                checks.push(Check::new("toy/double-well-modes", (left - 0.5).abs() <= 0.05, format!("left mass {left:.4}")));
            }
            _ => {}
        }
        rows.push(row);
    }
    let mc = boltzmann::mc_convergence(&[100, 1000, 10_000], 20, derive_seed(seed, 99));
    let monotone = mc.windows(2).all(|w| w[1].1 < w[0].1);
    let detail: Vec<String> = mc.iter().map(|(j, e)| format!("J={j}: {e:.5}")).collect();
    checks.push(Check::new("toy/mc-median-error-shrinks", monotone, detail.join(", ")));

    if let Some(dir) = report_dir {
        create_dir(dir)?;
        let csv = dir.join("toy-report.csv");
        fs::write(&csv, boltzmann::report_csv(&rows)).map_err(|e| CliError::io(&csv, e))?;
        let txt = dir.join("toy-report.txt");
        fs::write(&txt, boltzmann::report_text(&rows)).map_err(|e| CliError::io(&txt, e))?;
        for r in rows.iter().filter(|r| r.energy.dim() == 2) {
            for (kind, d) in [("exact", &r.exact), ("chain", &r.empirical)] {
                let img = d.heatmap().map_err(lab)?;
                write_pgm(&img, &dir.join(format!("{}-{kind}.pgm", r.energy.name())))?;
            }
        }
    }
    Ok(checks)
}

/// Finite-difference checks of every op and of the composed network, plus
/// the contrastive-divergence gradient identity.
pub fn grad_suite(seed: u64) -> Result<Vec<Check>, CliError> {
    let usage = |e: &dyn std::fmt::Display| CliError::usage(e.to_string());
    let mut rng = seeded(derive_seed(seed, 7));
    let mut checks = Vec::new();
    for c in gradcheck::check_all_ops(&mut rng).map_err(|e| usage(&e))? {
        checks.push(Check::new(
            format!("grad/{}", c.name),
            c.passes(GRAD_TOL),
            format!("max rel err {:.2e} over {} coords", c.max_rel_err, c.checked),
        ));
    }
    let net = EnergyNet::with_arch(Arch::mini(), derive_seed(seed, 8)).map_err(|e| usage(&e))?;
    let shape = image_shape(&net);
    let x = latent_init(3, &shape, &mut rng).map_err(|e| usage(&e))?;
    for mode in [Mode::Train, Mode::Infer] {
        let c = gradcheck::check_energy_net(&net, &x, mode, 10, 4, &mut rng).map_err(|e| usage(&e))?;
        checks.push(Check::new(
            format!("grad/energy-net-{}", if mode == Mode::Train { "train" } else { "infer" }),
            c.passes(GRAD_TOL),
            format!("max rel err {:.2e} over {} coords", c.max_rel_err, c.checked),
        ));
    }
    let real = latent_init(4, &shape, &mut rng).map_err(|e| usage(&e))?;
    let fake = latent_init(4, &shape, &mut rng).map_err(|e| usage(&e))?;
    let c = cd_gradient_identity(&net, &real, &fake, REL_ERR_FLOOR)?;
    checks.push(Check::new(
        "grad/cd-gradient-identity",
        c.max_rel_err <= IDENTITY_TOL,
        format!("max rel err {:.2e} over {} params", c.max_rel_err, c.checked),
    ));
    Ok(checks)
}

pub fn verify(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let seed: u64 = s.get("seed")?;
    let report_dir = match s.raw("out") {
        "" => None,
        d => Some(PathBuf::from(d)),
    };
    let suite = s.raw("suite");
    let mut checks = Vec::new();
    match suite {
        "toy" => checks.extend(toy_suite(seed, report_dir.as_deref())?),
        "grad" => checks.extend(grad_suite(seed)?),
        "all" => {
            checks.extend(toy_suite(seed, report_dir.as_deref())?);
            checks.extend(grad_suite(seed)?);
        }
        other => return Err(CliError::usage(format!("unknown suite {other:?} (toy, grad or all)"))),
    }
    let lines: Vec<String> = checks.iter().map(Check::line).collect();
    for l in &lines {
        say(out, l)?;
    }
    if let Some(dir) = &report_dir {
        create_dir(dir)?;
        let path = dir.join("verify-report.txt");
        fs::write(&path, lines.join("\n") + "\n").map_err(|e| CliError::io(&path, e))?;
        s.write_snapshot(dir)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        say(out, format!("all {} checks passed", checks.len()))
    } else {
        Err(CliError::new(ExitCode::Verification, format!("verification failed: {}", failed.join(", "))))
    }
}

fn shape_str(dims: &[usize]) -> String {
    let inner: Vec<String> = dims.iter().map(usize::to_string).collect();
    format!("(None, {})", inner.join(", "))
}

pub fn info(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let net = match s.raw("model") {
        "" => EnergyNet::build(derive_seed(s.get("seed")?, NET_SEED_TAG)),
        path => Checkpoint::load(Path::new(path))?.net,
    };
    say(out, format!("{:<42} {:<20} {:>8}", "Layer (type)", "Output Shape", "Param #"))?;
    for row in net.summary() {
        say(
            out,
            format!("{:<42} {:<20} {:>8}", format!("{} ({})", row.name, row.kind), shape_str(&row.output_shape), row.params),
        )?;
    }
    let c = net.count_params();
    say(out, format!("Total params: {} ({} trainable, {} non-trainable)", c.total, c.trainable, c.non_trainable))
}
