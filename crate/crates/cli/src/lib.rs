//! `vlpsense` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or data error,
//! 3 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vlpsense::channel::ChannelBase;
use vlpsense::ensemble::{
    k_sweep, k_sweep_table, member_seed, spatial_cv, train_members, EnsembleBundle,
    MEMBERS_PER_ARCHITECTURE,
};
use vlpsense::eval::{
    evaluate_with_base, export_results, random_points, random_walk, summary_table, EvalReport,
    SummaryRow, MARGIN_M, RANDOM_POINTS, WALK_STEPS, WALK_STEP_M,
};
use vlpsense::fingerprint::{
    stratified_split, sweep_grid_with, Baseline, FingerprintDataset, GridSpec, SplitRatios,
};
use vlpsense::neural::{
    build_model, load_weights, samples, save_weights, train_samples, Architecture, ModelSpec,
    TrainConfig,
};
use vlpsense::scene::{build_scene, SceneConfig, CONFIG_ENV};
use vlpsense::service::serve_loop;
use vlpsense::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "vlpsense",
    version,
    about = "Device-free visible-light localization toolkit"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Scene configuration JSON; defaults apply to missing fields.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Master seed for splitting, training, cross-validation and evaluation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Surface segment size in meters.
    #[arg(long, global = true)]
    resolution: Option<f64>,
    /// Number of reflections.
    #[arg(long, global = true)]
    bounces: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    Mlp,
    Cnn,
    Unet,
    Dense,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Mlp => Architecture::Mlp,
            ArchArg::Cnn => Architecture::Cnn,
            ArchArg::Unet => Architecture::Unet,
            ArchArg::Dense => Architecture::Dense,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the scene and print its summary.
    SceneValidate,
    /// Simulate the empty-room RSS vector.
    Baseline {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sweep the human over the position grid and write ΔRSS fingerprints.
    Sweep {
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        grid_start: f64,
        #[arg(long, default_value_t = 0.1)]
        grid_step: f64,
        #[arg(long, default_value_t = 49)]
        grid_count: usize,
    },
    /// Assign train/val/test splits stratified by wall proximity.
    Split {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        train: f64,
        #[arg(long, default_value_t = 0.2)]
        val: f64,
        #[arg(long, default_value_t = 0.2)]
        test: f64,
        /// Rows this close to a wall form the near-wall stratum.
        #[arg(long, default_value_t = 0.5)]
        near_wall: f64,
    },
    /// Train networks of one architecture.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mlp")]
        arch: ArchArg,
        /// Hidden widths for `--arch dense`, e.g. 64,256.
        #[arg(long, value_delimiter = ',', default_values_t = [64, 256])]
        hidden: Vec<usize>,
        /// Train a single member with this seed instead of the default set.
        #[arg(long)]
        member_seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Fit ensemble weights by spatial k-fold cross-validation.
    CvWeights {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Member weight files; defaults to every file in <out-dir>/models.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Also report mean fold MPE and wall time for each listed k.
        #[arg(long, value_delimiter = ',')]
        k_sweep: Option<Vec<usize>>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a bundle on the random walk and/or 100 random points.
    Evaluate {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        trajectory: bool,
        #[arg(long)]
        random100: bool,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Write trajectory and heatmap CSVs from an evaluation report.
    Export {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        trajectory_csv: Option<PathBuf>,
        #[arg(long)]
        heatmap_csv: Option<PathBuf>,
    },
    /// Serve position estimates over newline-delimited JSON.
    Serve {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Run every stage and print the ensemble comparison table.
    ReproducePaper {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SceneValidate => "scene-validate",
            Command::Baseline { .. } => "baseline",
            Command::Sweep { .. } => "sweep",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::CvWeights { .. } => "cv-weights",
            Command::Evaluate { .. } => "evaluate",
            Command::Export { .. } => "export",
            Command::Serve { .. } => "serve",
            Command::ReproducePaper { .. } => "reproduce-paper",
        }
    }
}

/// Everything needed to rerun a subcommand.
#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: String,
    argv: Vec<String>,
    tool_version: String,
    config: SceneConfig,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    scene_digest: String,
}

struct Ctx {
    global: Global,
    config: SceneConfig,
    argv: Vec<String>,
    subcommand: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.global.out_dir.join(name)
    }

    fn input(&mut self, p: &Path) -> Result<()> {
        if !p.exists() {
            return Err(Error::Config(format!("input not found: {}", p.display())));
        }
        self.inputs.push(p.to_path_buf());
        Ok(())
    }

    fn output(&mut self, p: &Path) -> Result<()> {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.outputs.push(p.to_path_buf());
        Ok(())
    }

    fn bounces(&self) -> usize {
        self.config.bounces
    }

    fn base(&self) -> Result<ChannelBase> {
        ChannelBase::new(&build_scene(&self.config)?, self.bounces())
    }

    fn train_config(&self, epochs: Option<usize>) -> TrainConfig {
        TrainConfig {
            epochs: epochs.unwrap_or(TrainConfig::default().epochs),
            seed: self.global.seed,
            ..TrainConfig::default()
        }
    }

    /// Writes one manifest per output, beside it, naming the run.
    fn write_manifests(&self) -> Result<()> {
        let m = RunManifest {
            subcommand: self.subcommand.to_owned(),
            argv: self.argv.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config: self.config.clone(),
            seeds: self.seeds.clone(),
            inputs: self
                .inputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            scene_digest: self.config.digest(),
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        let mut targets: Vec<PathBuf> = self.outputs.iter().map(|p| manifest_path(p)).collect();
        if targets.is_empty() {
            targets.push(self.out(&format!("{}.manifest.json", self.subcommand)));
        }
        for t in targets {
            if let Some(dir) = t.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(&t, &text).map_err(|e| Error::io(&t, e))?;
        }
        Ok(())
    }
}

/// `<artifact>.manifest.json` next to the artifact.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn resolve_config(g: &Global) -> Result<SceneConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config(format!("config not found: {}", p.display())));
            }
            SceneConfig::load(p)?
        }
        None => SceneConfig::default(),
    };
    if let Some(r) = g.resolution {
        cfg.resolution_m = r;
    }
    if let Some(b) = g.bounces {
        cfg.bounces = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn model_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dnnw"))
        .collect();
    files.sort();
    Ok(files)
}

fn walk_positions(seed: u64, room: [f64; 2]) -> Result<Vec<(f64, f64)>> {
    random_walk(seed, WALK_STEPS, WALK_STEP_M, MARGIN_M, room)
}

fn random100_positions(seed: u64, room: [f64; 2]) -> Vec<(f64, f64)> {
    random_points(seed.wrapping_add(1), RANDOM_POINTS, MARGIN_M, room)
}

fn print_report(name: &str, r: &EvalReport) {
    println!(
        "{name}: {} points, MPE {:.2} cm, P90 {:.2} cm ({})",
        r.points.len(),
        r.mpe_cm,
        r.p90_cm,
        r.composition
    );
}

fn dispatch(ctx: &mut Ctx, command: Command) -> Result<()> {
    let seed = ctx.global.seed;
    ctx.seeds.insert("seed".into(), seed);
    ctx.seeds.insert("noise_seed".into(), ctx.config.noise_seed);
    match command {
        Command::SceneValidate => {
            let scene = build_scene(&ctx.config)?;
            let summary = serde_json::json!({
                "scene_digest": scene.config_digest(),
                "static_segments": scene.static_segments.len(),
                "detectors": scene.detectors.iter().map(|d| serde_json::json!({
                    "index": d.index,
                    "position": d.position.to_array(),
                    "normal": d.normal.to_array(),
                })).collect::<Vec<_>>(),
                "lambertian_order": ctx.config.lambertian_order(),
                "bounces": ctx.bounces(),
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            let out = ctx.out("scene.json");
            ctx.output(&out)?;
            write_json(&out, &summary)?;
        }
        Command::Baseline { output } => {
            let out = output.unwrap_or_else(|| ctx.out("baseline.json"));
            ctx.output(&out)?;
            let scene = build_scene(&ctx.config)?;
            let b = vlpsense::fingerprint::compute_baseline(&scene, ctx.bounces())?;
            b.save(&out)?;
            println!("baseline RSS (mW): {:?}", b.rss_mw);
        }
        Command::Sweep {
            output,
            grid_start,
            grid_step,
            grid_count,
        } => {
            let out = output.unwrap_or_else(|| ctx.out("fingerprints.csv"));
            ctx.output(&out)?;
            let grid = GridSpec {
                start: grid_start,
                step: grid_step,
                count: grid_count,
            };
            let t0 = Instant::now();
            let ds = sweep_grid_with(&ctx.base()?, grid)?;
            ds.write(&out)?;
            println!(
                "{} rows in {:.1} s (largest footprint shift {:.3} m)",
                ds.rows.len(),
                t0.elapsed().as_secs_f64(),
                ds.max_clamp_m
            );
        }
        Command::Split {
            dataset,
            output,
            train,
            val,
            test,
            near_wall,
        } => {
            let input = dataset.unwrap_or_else(|| ctx.out("fingerprints.csv"));
            ctx.input(&input)?;
            let out = output.unwrap_or_else(|| ctx.out("fingerprints_split.csv"));
            let mut ds = FingerprintDataset::read_strict(&input, &ctx.config.digest())?;
            let warnings =
                stratified_split(&mut ds, SplitRatios { train, val, test }, near_wall, seed)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            ctx.output(&out)?;
            ds.write(&out)?;
            use vlpsense::fingerprint::Split;
            println!(
                "train {} / val {} / test {}",
                ds.count(Split::Train),
                ds.count(Split::Val),
                ds.count(Split::Test)
            );
        }
        Command::Train {
            dataset,
            arch,
            hidden,
            member_seed: single,
            epochs,
            output_dir,
        } => {
            let input = dataset.unwrap_or_else(|| ctx.out("fingerprints_split.csv"));
            ctx.input(&input)?;
            let ds = FingerprintDataset::read_strict(&input, &ctx.config.digest())?;
            let arch: Architecture = arch.into();
            let spec = match arch {
                Architecture::Dense => ModelSpec::dense(&hidden),
                a => ModelSpec::for_architecture(a),
            };
            let dir = output_dir.unwrap_or_else(|| ctx.out("models"));
            let seeds: Vec<u64> = match single {
                Some(s) => vec![s],
                None => (0..MEMBERS_PER_ARCHITECTURE)
                    .map(|j| member_seed(seed, arch, j))
                    .collect(),
            };
            let norm = ds
                .norm
                .clone()
                .ok_or_else(|| Error::Config("dataset has no split; run `split` first".into()))?;
            use vlpsense::fingerprint::Split;
            let tr = samples(ds.with_split(Split::Train), &norm);
            let va = samples(ds.with_split(Split::Val), &norm);
            let cfg = ctx.train_config(epochs);
            ctx.seeds.insert("epochs".into(), cfg.epochs as u64);
            use rayon::prelude::*;
            let trained: Vec<_> = seeds
                .par_iter()
                .map(|&s| {
                    let t0 = Instant::now();
                    let mut w = build_model(&spec, s)?;
                    w.norm = Some(norm.clone());
                    train_samples(
                        &mut w,
                        &tr,
                        &va,
                        &TrainConfig {
                            seed: s,
                            ..cfg.clone()
                        },
                    )?;
                    Ok((s, w, t0.elapsed().as_secs_f64()))
                })
                .collect::<Result<_>>()?;
            for (s, w, secs) in trained {
                let out = dir.join(format!("{arch}_s{s}.dnnw"));
                ctx.output(&out)?;
                save_weights(&w, &out)?;
                ctx.seeds.insert(format!("member_{arch}_{s}"), s);
                println!(
                    "{arch} seed {s}: {} params, final train MAE {:.4} m, val MAE {:.4} m, {:.1} s",
                    w.params.len(),
                    w.history.train_mae.last().copied().unwrap_or(f64::NAN),
                    w.history.val_mae.last().copied().unwrap_or(f64::NAN),
                    secs
                );
            }
        }
        Command::CvWeights {
            dataset,
            models,
            k,
            k_sweep: sweep,
            output,
        } => {
            let input = dataset.unwrap_or_else(|| ctx.out("fingerprints_split.csv"));
            ctx.input(&input)?;
            let models = if models.is_empty() {
                let dir = ctx.out("models");
                ctx.input(&dir)?;
                model_files(&dir)?
            } else {
                models
            };
            if models.is_empty() {
                return Err(Error::Config("no member weight files given".into()));
            }
            let mut members = Vec::with_capacity(models.len());
            for m in &models {
                ctx.input(m)?;
                members.push(load_weights(m)?);
            }
            let ds = FingerprintDataset::read_strict(&input, &ctx.config.digest())?;
            let (bundle, report) = spatial_cv(members, &ds, k, seed)?;
            let out = output.unwrap_or_else(|| ctx.out("bundle"));
            ctx.output(&out)?;
            bundle.save(&out)?;
            println!(
                "k = {k}: weights {:?}, fold MPEs (cm) {:?}",
                bundle.weights,
                report
                    .folds
                    .iter()
                    .map(|f| f.mpe_m * 100.0)
                    .collect::<Vec<_>>()
            );
            if let Some(ks) = sweep {
                let reports = k_sweep(&bundle, &ds, &ks, seed)?;
                let table = k_sweep_table(&reports);
                print!("{table}");
                let p = ctx.out("k_sweep.csv");
                ctx.output(&p)?;
                std::fs::write(&p, table).map_err(|e| Error::io(&p, e))?;
            }
        }
        Command::Evaluate {
            bundle,
            trajectory,
            random100,
            output_dir,
        } => {
            let path = bundle.unwrap_or_else(|| ctx.out("bundle"));
            ctx.input(&path)?;
            let b = EnsembleBundle::load(&path)?;
            let base = ctx.base()?;
            let dir = output_dir.unwrap_or_else(|| ctx.out("eval"));
            let (both, room) = (!trajectory && !random100, b.room_m);
            let mut runs = Vec::new();
            if trajectory || both {
                runs.push(("trajectory", walk_positions(seed, room)?));
            }
            if random100 || both {
                runs.push(("random100", random100_positions(seed, room)));
            }
            for (name, positions) in runs {
                let r = evaluate_with_base(&b, &base, &positions)?;
                print_report(name, &r);
                let out = dir.join(format!("{name}_report.json"));
                ctx.output(&out)?;
                write_json(&out, &r)?;
            }
        }
        Command::Export {
            report,
            trajectory_csv,
            heatmap_csv,
        } => {
            ctx.input(&report)?;
            let r = read_report(&report)?;
            let stem = report.with_extension("");
            let t = trajectory_csv
                .unwrap_or_else(|| PathBuf::from(format!("{}_trajectory.csv", stem.display())));
            let h = heatmap_csv
                .unwrap_or_else(|| PathBuf::from(format!("{}_heatmap.csv", stem.display())));
            ctx.output(&t)?;
            ctx.output(&h)?;
            export_results(&r, &t, &h)?;
        }
        Command::Serve {
            bundle,
            baseline,
            bind,
        } => {
            let path = bundle.unwrap_or_else(|| ctx.out("bundle"));
            ctx.input(&path)?;
            let baseline = match baseline {
                Some(p) => {
                    ctx.input(&p)?;
                    Some(p)
                }
                None => {
                    let p = ctx.out("baseline.json");
                    p.exists().then_some(p)
                }
            };
            ctx.write_manifests()?;
            let flag = Arc::new(AtomicBool::new(false));
            let f = flag.clone();
            ctrlc::set_handler(move || f.store(true, Ordering::SeqCst))
                .map_err(|e| Error::Misuse(format!("cannot install signal handler: {e}")))?;
            serve_loop(&path, baseline.as_deref(), &bind, flag)?;
            return Ok(());
        }
        Command::ReproducePaper { epochs, k } => reproduce(ctx, epochs, k)?,
    }
    ctx.write_manifests()
}

/// Member architectures of each compared ensemble.
pub const COMPOSITIONS: [&[Architecture]; 3] = [
    &[Architecture::Mlp],
    &[Architecture::Mlp, Architecture::Unet],
    &[Architecture::Mlp, Architecture::Cnn, Architecture::Unet],
];

fn reproduce(ctx: &mut Ctx, epochs: Option<usize>, k: usize) -> Result<()> {
    let seed = ctx.global.seed;
    let t0 = Instant::now();
    let base = ctx.base()?;
    let scene = base.scene().clone();
    let baseline = Baseline::from_gains(&scene, ctx.bounces(), base.empty_gains());
    let p = ctx.out("baseline.json");
    ctx.output(&p)?;
    baseline.save(&p)?;

    let mut ds = sweep_grid_with(&base, GridSpec::default())?;
    for w in stratified_split(&mut ds, SplitRatios::default(), 0.5, seed)? {
        eprintln!("warning: {w}");
    }
    let dataset_s = t0.elapsed().as_secs_f64();
    let p = ctx.out("fingerprints_split.csv");
    ctx.output(&p)?;
    ds.write(&p)?;
    eprintln!("dataset: {} rows in {dataset_s:.1} s", ds.rows.len());

    let cfg = ctx.train_config(epochs);
    ctx.seeds.insert("epochs".into(), cfg.epochs as u64);
    let archs = [Architecture::Mlp, Architecture::Cnn, Architecture::Unet];
    let trained = train_members(&ds, &archs, seed, &cfg)?;
    for m in &trained {
        let w = &m.weights;
        let out = ctx.out(&format!(
            "models/{}_s{}.dnnw",
            w.spec.architecture, w.init_seed
        ));
        ctx.output(&out)?;
        save_weights(w, &out)?;
        eprintln!(
            "trained {} seed {} in {:.1} s",
            w.spec.architecture, w.init_seed, m.train_s
        );
    }

    let room = ds.room_m;
    let walk = walk_positions(seed, room)?;
    let points = random100_positions(seed, room);
    let mut rows = Vec::new();
    for comp in COMPOSITIONS {
        let chosen: Vec<_> = trained
            .iter()
            .filter(|m| comp.contains(&m.weights.spec.architecture))
            .collect();
        let training_s: f64 = chosen.iter().map(|m| m.train_s).sum();
        let members = chosen.iter().map(|m| m.weights.clone()).collect();
        let tw = Instant::now();
        let (bundle, _) = spatial_cv(members, &ds, k, seed)?;
        let weight_fit_s = tw.elapsed().as_secs_f64();
        let name = bundle.composition();
        let dir = ctx.out(&format!("bundles/{name}"));
        ctx.output(&dir)?;
        bundle.save(&dir)?;

        let mut reports = Vec::new();
        for (run, positions) in [("trajectory", &walk), ("random100", &points)] {
            let mut r = evaluate_with_base(&bundle, &base, positions)?;
            r.timings.dataset_s = Some(dataset_s);
            r.timings.training_s = Some(training_s);
            r.timings.weight_fit_s = Some(weight_fit_s);
            print_report(&format!("{name} {run}"), &r);
            let stem = ctx.out(&format!("eval/{name}_{run}"));
            let (rp, tp, hp) = (
                stem.with_extension("json"),
                PathBuf::from(format!("{}_trajectory.csv", stem.display())),
                PathBuf::from(format!("{}_heatmap.csv", stem.display())),
            );
            for p in [&rp, &tp, &hp] {
                ctx.output(p)?;
            }
            write_json(&rp, &r)?;
            export_results(&r, &tp, &hp)?;
            reports.push(r);
        }
        rows.push(SummaryRow {
            composition: name,
            training_min: training_s / 60.0,
            trajectory_mpe_cm: reports[0].mpe_cm,
            trajectory_p90_cm: reports[0].p90_cm,
            random_mpe_cm: reports[1].mpe_cm,
            random_p90_cm: reports[1].p90_cm,
        });
    }
    let table = summary_table(&rows);
    print!("{table}");
    let p = ctx.out("summary.txt");
    ctx.output(&p)?;
    std::fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
    let p = ctx.out("summary.json");
    ctx.output(&p)?;
    write_json(&p, &rows)
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // A pool built by an earlier in-process run is kept.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn run_parsed(cli: Cli, argv: Vec<String>) -> Result<()> {
    init_threads(cli.global.threads)?;
    let config = resolve_config(&cli.global)?;
    let mut ctx = Ctx {
        subcommand: cli.command.name(),
        global: cli.global,
        config,
        argv,
        inputs: Vec::new(),
        outputs: Vec::new(),
        seeds: BTreeMap::new(),
    };
    dispatch(&mut ctx, cli.command)
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    let argv = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run_parsed(cli, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
