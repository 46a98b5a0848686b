//! Command-line entry points.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{generate_synthetic_clip, write_clip, DatasetManifest, Split, VideoClip};
use crate::error::{Error, Result};
use crate::gradcheck::{corrupted_conv3d_case, run_suite, standard_suite, GradCheckCase, TOLERANCE};
use crate::inflation::{boring_video_equivalence, inflate_2d_to_3d};
use crate::model::{FuthNet, Head};
use crate::tensor::{Precision, Tensor};
use crate::training::{self, appearance_baseline, Checkpoint, PhaseKind, Session};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

/// Boring-video tolerance in 32-bit mode.
pub const BORING_VIDEO_TOLERANCE: f64 = 1e-5;
/// Relative tolerance of the temporal-sum check.
pub const TEMPORAL_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "futh", version, about = "Two-pathway video classifier: data, training, evaluation and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic motion dataset with train/test manifests.
    SynthGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the training schedule and write logs, reports and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Comma-separated subset of holistic,relation,fusion.
        #[arg(long)]
        phases: Option<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a manifest and print the report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the configured test manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Which classifier to use: holistic, relation or fusion.
        #[arg(long)]
        phases: Option<String>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include a conv3d case with a deliberately wrong backward pass.
        #[arg(long, hide = true)]
        corrupt_conv3d: bool,
    },
    /// Verify the 2D-to-3D weight inflation on random frames and kernels.
    InflateCheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Outcome of a command: printed text and exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub output: String,
    pub code: i32,
}

impl Outcome {
    fn ok(output: String) -> Self {
        Outcome { output, code: EXIT_OK }
    }
}

/// Exit code for an error: internal failures map to 2, everything caused by
/// the caller's configuration or files to 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::State(_) => EXIT_CHECK_FAILED,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (program name first), runs the command, and returns its outcome.
pub fn run_args<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli.command),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            Outcome { output: e.to_string(), code }
        }
    }
}

pub fn run(command: Command) -> Outcome {
    let result = match command {
        Command::SynthGen { config, out, seed } => load_config(config.as_deref(), seed).and_then(|c| synth_gen(&c, &out)),
        Command::Train {
            config,
            out,
            phases,
            resume,
            seed,
        } => load_config(Some(&config), seed).and_then(|c| train(&c, &out, phases.as_deref(), resume.as_deref())),
        Command::Eval {
            config,
            checkpoint,
            manifest,
            phases,
            out,
        } => load_config(Some(&config), None)
            .and_then(|c| eval(&c, &checkpoint, manifest.as_deref(), phases.as_deref(), out.as_deref())),
        Command::Gradcheck { seed, out, corrupt_conv3d } => gradcheck(seed, corrupt_conv3d, out.as_deref()),
        Command::InflateCheck { seed, out } => inflate_check(seed, out.as_deref()),
    };
    result.unwrap_or_else(|e| Outcome {
        output: format!("error: {e}\n"),
        code: exit_code(&e),
    })
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set("seed", s.to_string())?;
    }
    Ok(cfg)
}

fn configure_threads(cfg: &RunConfig) -> Result<()> {
    let threads = if cfg.get_bool("deterministic")? { 1 } else { cfg.get::<usize>("threads")? };
    // The global pool can only be built once per process; later calls keep the first setting.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Seed of clip `index` of class `class` in a split.
fn clip_seed(run_seed: u64, split: Split, class: usize, index: usize) -> u64 {
    let s = match split {
        Split::Train => 1u64,
        Split::Test => 2,
    };
    run_seed
        .wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add(s << 56 | (class as u64) << 32 | index as u64)
}

pub fn synth_gen(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let spec = cfg.synth_spec()?;
    let seed = cfg.seed()?;
    let names = spec.class_names();
    let mut summary = String::new();
    for (split, per_class) in [
        (Split::Train, cfg.get::<usize>("synth.train_per_class")?),
        (Split::Test, cfg.get::<usize>("synth.test_per_class")?),
    ] {
        let dir = out.join(split.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
        let mut entries = Vec::new();
        for i in 0..per_class {
            for class in 0..spec.classes.len() {
                let clip = generate_synthetic_clip(&spec, class, clip_seed(seed, split, class, i))?;
                let name = format!("{split}/{}_{i:04}.futh", names[class].replace(':', "-"));
                write_clip(out.join(&name), &clip)?;
                entries.push((PathBuf::from(name), class));
            }
        }
        let manifest = DatasetManifest::new(entries, names.clone(), split)?;
        write_file(&out.join(format!("{split}.manifest")), manifest.to_text())?;
        let _ = writeln!(summary, "{split}: {} clips", manifest.len());
        for name in &names {
            let _ = writeln!(summary, "  {name}: {per_class}");
        }
    }
    Ok(Outcome::ok(summary))
}

fn parse_phases(list: &str) -> Result<Vec<PhaseKind>> {
    let kinds = list.split(',').map(str::parse).collect::<Result<Vec<PhaseKind>>>()?;
    if kinds.is_empty() {
        return Err(Error::config("--phases is empty"));
    }
    if kinds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!("--phases {list:?} must list phases once each, in training order")));
    }
    Ok(kinds)
}

fn load_split(cfg: &RunConfig, key: &str) -> Result<(DatasetManifest, Vec<VideoClip>)> {
    let path = cfg
        .path(key)
        .ok_or_else(|| Error::config(format!("{key} is not set")))?;
    let manifest = DatasetManifest::load(&path)?;
    if manifest.is_empty() {
        return Err(Error::input(format!("manifest {} lists no clips", path.display())));
    }
    let clips = manifest.read_clips()?;
    Ok((manifest, clips))
}

fn class_names(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<String>> {
    let k: usize = cfg.get("model.classes")?;
    if manifest.class_count() > k {
        return Err(Error::config(format!(
            "the manifest has {} classes but model.classes is {k}",
            manifest.class_count()
        )));
    }
    Ok(if manifest.class_names.len() == k {
        manifest.class_names.clone()
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    })
}

/// Run-directory layout written by `train`.
pub mod layout {
    pub const EFFECTIVE_CONFIG: &str = "effective.cfg";
    pub const LOSS_LOG: &str = "loss.csv";
    pub const FINAL_CHECKPOINT: &str = "final.ckpt";
    pub const BASELINE_REPORT: &str = "report-appearance.txt";

    pub fn report(phase: impl std::fmt::Display) -> String {
        format!("report-{phase}.txt")
    }

    pub fn checkpoint(phase: impl std::fmt::Display, epoch: usize) -> String {
        format!("{phase}-e{epoch:04}.ckpt")
    }
}

pub fn train(cfg: &RunConfig, out: &Path, phases: Option<&str>, resume: Option<&Path>) -> Result<Outcome> {
    configure_threads(cfg)?;
    let model_config = cfg.model_config()?;
    let mut plan = cfg.train_plan()?;
    if let Some(list) = phases {
        let kinds = parse_phases(list)?;
        plan = plan.restrict(&kinds);
        plan.validate()?;
    }
    let (train_manifest, train_clips) = load_split(cfg, "data.train_manifest")?;
    let (_, test_clips) = load_split(cfg, "data.test_manifest")?;
    let names = class_names(cfg, &train_manifest)?;
    fs::create_dir_all(out)?;
    write_file(&out.join(layout::EFFECTIVE_CONFIG), cfg.effective())?;

    let mut session = match resume {
        Some(path) => Session::resume(model_config.clone(), plan, names.clone(), &Checkpoint::load(path)?)?,
        None => Session::new(FuthNet::new(model_config.clone())?, plan, names.clone())?,
    };
    let every: usize = cfg.get("train.checkpoint_every")?;
    let mut hook = |s: &mut Session| -> Result<()> {
        write_file(&out.join(layout::LOSS_LOG), training::log_to_text(&s.state.log))?;
        let mid_phase = s.state.epochs_done > 0;
        if mid_phase && every > 0 && s.state.epochs_done % every == 0 {
            let kind = s.plan.phases[s.state.phase_index].kind;
            let name = layout::checkpoint(kind, s.state.epochs_done);
            s.checkpoint().save(out.join(name))?;
        }
        if !mid_phase {
            if let Some((kind, r)) = s.state.reports.last() {
                write_file(&out.join(layout::report(kind)), r.to_text())?;
            }
        }
        Ok(())
    };
    session.run(&train_clips, &test_clips, &mut hook)?;
    session.checkpoint().save(out.join(layout::FINAL_CHECKPOINT))?;
    for (kind, r) in &session.state.reports {
        write_file(&out.join(layout::report(kind)), r.to_text())?;
    }
    write_file(&out.join(layout::LOSS_LOG), training::log_to_text(&session.state.log))?;

    let mut summary = String::new();
    for (kind, r) in &session.state.reports {
        let _ = writeln!(summary, "{kind}: OA {:.4} kappa {:.4}", r.overall_accuracy, r.kappa);
    }
    let baseline_epochs: usize = cfg.get("baseline.epochs")?;
    if baseline_epochs > 0 && resume.is_none() {
        let mut phase = session.plan.phases[0].clone();
        phase.epochs = baseline_epochs;
        let r = appearance_baseline(&model_config, &train_clips, &test_clips, &phase, &names)?;
        write_file(&out.join(layout::BASELINE_REPORT), r.to_text())?;
        let _ = writeln!(summary, "appearance: OA {:.4} kappa {:.4}", r.overall_accuracy, r.kappa);
    }
    Ok(Outcome::ok(summary))
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, manifest: Option<&Path>, phases: Option<&str>, out: Option<&Path>) -> Result<Outcome> {
    configure_threads(cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = FuthNet::new(cfg.model_config()?)?;
    training::load_model_tensors(&mut model, &ck)?;
    let path = match manifest {
        Some(p) => p.to_path_buf(),
        None => cfg
            .path("data.test_manifest")
            .ok_or_else(|| Error::config("no --manifest given and data.test_manifest is not set"))?,
    };
    let m = DatasetManifest::load(&path)?;
    if m.is_empty() {
        return Err(Error::input(format!("manifest {} lists no clips", path.display())));
    }
    let clips = m.read_clips()?;
    let head = match phases {
        Some(list) => {
            let kinds = parse_phases(list)?;
            if kinds.len() != 1 {
                return Err(Error::config("eval takes exactly one phase to select the classifier"));
            }
            kinds[0].head()
        }
        None => PhaseKind::ALL
            .iter()
            .rev()
            .find(|k| ck.text(&format!("report.{k}")).is_some())
            .map_or(Head::Fusion, |k| k.head()),
    };
    let names = class_names(cfg, &m)?;
    let report = training::evaluate(&mut model, &clips, head, &names)?;
    let text = report.to_text();
    if let Some(o) = out {
        write_file(o, &text)?;
    }
    Ok(Outcome::ok(text))
}

/// Runs a set of gradient checks and renders one line per case.
pub fn gradcheck_table(cases: &[GradCheckCase], seed: u64) -> Result<(String, bool)> {
    let outcomes = run_suite(cases, seed)?;
    let mut text = format!("op,shape,max_rel_error,status  (tolerance {TOLERANCE:e})\n");
    let mut all = true;
    for o in &outcomes {
        all &= o.passed();
        let _ = writeln!(
            text,
            "{},{},{:.3e},{}",
            o.op,
            o.shape,
            o.max_rel_error,
            if o.passed() { "pass" } else { "FAIL" }
        );
    }
    Ok((text, all))
}

pub fn gradcheck(seed: u64, corrupt: bool, out: Option<&Path>) -> Result<Outcome> {
    let mut cases = standard_suite(seed);
    if corrupt {
        cases.push(corrupted_conv3d_case(1.5, seed));
    }
    let (text, all) = gradcheck_table(&cases, seed)?;
    if let Some(o) = out {
        write_file(o, &text)?;
    }
    Ok(Outcome {
        output: text,
        code: if all { EXIT_OK } else { EXIT_CHECK_FAILED },
    })
}

/// Worst deviations over random frame/kernel pairs: (boring-video, temporal-sum relative).
pub fn inflation_deviations(pairs: usize, seed: u64) -> Result<(f64, f64)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boring: f64 = 0.0;
    let mut sum_rel: f64 = 0.0;
    for _ in 0..pairs {
        let c = rng.random_range(1..4);
        let f = rng.random_range(1..9);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let size = rng.random_range(k.max(4)..17);
        let n = rng.random_range(1..6);
        let stride = rng.random_range(1..3);
        let frame = Tensor::randn(&[c, size, size], 1.0, &mut rng).to_precision(Precision::F32);
        let w = Tensor::randn(&[f, c, k, k], 0.5, &mut rng).to_precision(Precision::F32);
        let b = Tensor::randn(&[f], 0.1, &mut rng).to_precision(Precision::F32);
        boring = boring.max(boring_video_equivalence(&frame, &w, &b, n, [stride, stride], [k / 2, k / 2])?);

        let w64 = w.to_precision(Precision::F64);
        let inflated = inflate_2d_to_3d(&w64, n)?;
        let plane = k * k;
        for (fc, src) in w64.data().chunks(plane).enumerate() {
            for (j, &orig) in src.iter().enumerate() {
                let total: f64 = (0..n).map(|t| inflated.data()[(fc * n + t) * plane + j]).sum();
                sum_rel = sum_rel.max((total - orig).abs() / orig.abs().max(f64::MIN_POSITIVE));
            }
        }
    }
    Ok((boring, sum_rel))
}

pub fn inflate_check(seed: u64, out: Option<&Path>) -> Result<Outcome> {
    let (boring, sum_rel) = inflation_deviations(10, seed)?;
    let ok_b = boring < BORING_VIDEO_TOLERANCE;
    let ok_s = sum_rel < TEMPORAL_SUM_TOLERANCE;
    let status = |ok: bool| if ok { "pass" } else { "FAIL" };
    let text = format!(
        "check,max_deviation,tolerance,status\n\
         boring_video,{boring:.3e},{BORING_VIDEO_TOLERANCE:e},{}\n\
         temporal_sum,{sum_rel:.3e},{TEMPORAL_SUM_TOLERANCE:e},{}\n",
        status(ok_b),
        status(ok_s)
    );
    if let Some(o) = out {
        write_file(o, &text)?;
    }
    Ok(Outcome {
        output: text,
        code: if ok_b && ok_s { EXIT_OK } else { EXIT_CHECK_FAILED },
    })
}
