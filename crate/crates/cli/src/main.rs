//! `surfcomp`: end-to-end pipeline for mesh surface completion.
//!
//! Subcommands cover mesh synthesis (`icosphere`, `synth-data`, `augment`),
//! remeshing (`remesh`), model training (`train`, `encode`), completion
//! (`complete`), evaluation (`benchmark`), and gradient verification
//! (`gradcheck`). Every run writes its fully resolved configuration next to
//! its artifacts, and a fixed seed reproduces artifacts bitwise.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use surfcomp_core::completion::{
    complete_with_init, initialize, load_mask, multi_hypothesis, CompletionConfig, RigidTransform,
};
use surfcomp_core::evalbench::{
    load_cases, make_benchmark, run_benchmark, save_cases, summary_csv, CasesManifest, IcpConfig,
};
use surfcomp_core::gcvae::{encode, load_model, save_model, train, TrainConfig};
use surfcomp_core::mesh::{
    icosphere, load_mesh, load_pointcloud, save_mesh, write_atomic, Mesh,
};
use surfcomp_core::spectral::{
    spectral_augment, spectral_basis, synth_population, DatasetManifest, PerturbRanges,
    PerturbationSpec,
};

use config::load_config;

#[derive(Parser)]
#[command(name = "surfcomp", version, about = "Surface completion pipeline")]
struct Cli {
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override a config value by dotted path, e.g. --set train.learning_rate=1e-3
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a unit icosphere mesh.
    Icosphere {
        #[arg(long)]
        level: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remesh a target surface onto the icosphere template.
    Remesh {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a mesh population by spectral augmentation of a base mesh.
    SynthData {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Apply one spectral perturbation spec to a mesh.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the VAE on a dataset manifest.
    Train {
        #[arg(long)]
        dataset_manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the latent statistics of a mesh under a trained model.
    Encode {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Complete a partial point cloud against a trained model.
    Complete {
        #[arg(long)]
        preop: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of noise-perturbed hypotheses (overrides the config).
        #[arg(long)]
        hypotheses: Option<usize>,
        /// Skip the latent-initialization refinement.
        #[arg(long)]
        no_refine: bool,
    },
    /// Run the evaluation benchmark: completion vs the ICP baseline.
    Benchmark {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify gradients of every differentiable component.
    Gradcheck {
        #[arg(long, default_value = "all")]
        component: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    if let Err(err) = run(cli) {
        let detail: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
        let json = serde_json::json!({
            "error": err.to_string(),
            "detail": detail,
        });
        eprintln!("{json}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let overrides = &cli.overrides;
    match cli.command {
        Command::Icosphere { level, out } => cmd_icosphere(level, &out),
        Command::Remesh { target, config, out } => cmd_remesh(&target, config.as_deref(), &out, overrides),
        Command::SynthData {
            base,
            count,
            seed,
            out_dir,
        } => cmd_synth_data(&base, count, seed, &out_dir, overrides),
        Command::Augment { input, spec, out } => cmd_augment(&input, &spec, &out),
        Command::Train {
            dataset_manifest,
            config,
            out,
        } => cmd_train(&dataset_manifest, config.as_deref(), &out, overrides),
        Command::Encode { mesh, model } => cmd_encode(&mesh, &model),
        Command::Complete {
            preop,
            cloud,
            mask,
            model,
            config,
            out_dir,
            hypotheses,
            no_refine,
        } => cmd_complete(
            &preop,
            &cloud,
            &mask,
            &model,
            config.as_deref(),
            &out_dir,
            hypotheses,
            no_refine,
            overrides,
        ),
        Command::Benchmark {
            model,
            cases,
            out_dir,
            config,
        } => cmd_benchmark(&model, &cases, &out_dir, config.as_deref(), overrides),
        Command::Gradcheck { component } => cmd_gradcheck(&component),
    }
}

fn sibling_config_path(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("out")
        .to_string();
    out.with_file_name(format!("{name}.config.json"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    write_atomic(path, json.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// icosphere
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct IcosphereRun<'a> {
    level: u32,
    out: &'a Path,
}

fn cmd_icosphere(level: u32, out: &Path) -> Result<()> {
    let mesh = icosphere(level)?;
    save_mesh(&mesh, out)?;
    write_json(&sibling_config_path(out), &IcosphereRun { level, out })?;
    println!(
        "icosphere level {level}: {} vertices, {} faces -> {}",
        mesh.n_vertices(),
        mesh.topology().faces().len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// remesh
// ---------------------------------------------------------------------------

fn cmd_remesh(target: &Path, config: Option<&Path>, out: &Path, overrides: &[String]) -> Result<()> {
    let cfg: surfcomp_core::remesh::RemeshConfig = load_config(config, overrides, "remesh")?;
    let target_mesh = load_mesh(target)?;
    let (mesh, log) = surfcomp_core::remesh::remesh(&target_mesh, &cfg)?;
    save_mesh(&mesh, out)?;
    let name = out.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let log_path = out.with_file_name(format!("{name}.log.json"));
    write_json(&log_path, &log)?;
    write_json(&sibling_config_path(out), &cfg)?;
    let last = log.last().expect("at least one iteration");
    println!(
        "remeshed {} -> {} (final chamfer {:.3e}, total {:.3e})",
        target.display(),
        out.display(),
        last.chamfer,
        last.total
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthConfig {
    ranges: PerturbRanges,
}

fn cmd_synth_data(
    base: &Path,
    count: usize,
    seed: u64,
    out_dir: &Path,
    overrides: &[String],
) -> Result<()> {
    let cfg: SynthConfig = load_config(None, overrides, "synth-data")?;
    let base_mesh = load_mesh(base)?;
    let population = synth_population(&base_mesh, count, &cfg.ranges, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let mut samples = Vec::with_capacity(population.len());
    for (i, mesh) in population.iter().enumerate() {
        let name = format!("sample-{i:04}.off");
        save_mesh(mesh, out_dir.join(&name))?;
        samples.push(name);
    }
    let manifest = DatasetManifest {
        base_mesh: base.display().to_string(),
        seed,
        count,
        ranges: cfg.ranges.clone(),
        samples,
    };
    write_json(&out_dir.join("dataset.json"), &manifest)?;
    write_json(&out_dir.join("config.json"), &serde_json::json!({
        "base": base.display().to_string(),
        "count": count,
        "seed": seed,
        "ranges": cfg.ranges,
    }))?;
    println!(
        "synthesized {count} meshes from {} into {}",
        base.display(),
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

fn cmd_augment(input: &Path, spec_path: &Path, out: &Path) -> Result<()> {
    let mesh = load_mesh(input)?;
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading spec {}", spec_path.display()))?;
    let spec: PerturbationSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing spec {}", spec_path.display()))?;
    let basis = spectral_basis(mesh.topology())?;
    let augmented = spectral_augment(&mesh, &basis, &spec)?;
    save_mesh(&augmented, out)?;
    write_json(&sibling_config_path(out), &spec)?;
    println!("augmented {} -> {}", input.display(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(
    manifest_path: &Path,
    config: Option<&Path>,
    out_dir: &Path,
    overrides: &[String],
) -> Result<()> {
    let cfg: TrainConfig = load_config(config, overrides, "train")?;
    let text = std::fs::read_to_string(manifest_path)
        .with_context(|| format!("reading dataset manifest {}", manifest_path.display()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing dataset manifest {}", manifest_path.display()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut dataset: Vec<Mesh> = Vec::with_capacity(manifest.samples.len());
    for sample in &manifest.samples {
        dataset.push(load_mesh(dir.join(sample))?);
    }
    if dataset.is_empty() {
        bail!("dataset manifest lists no samples");
    }
    std::fs::create_dir_all(out_dir)?;
    let (model, log) = train(&dataset, &cfg)?;
    save_model(&model, out_dir.join("model.json"))?;
    let mut lines = String::new();
    for record in &log {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    write_atomic(&out_dir.join("train.jsonl"), lines.as_bytes())?;
    write_json(&out_dir.join("config.json"), &cfg)?;
    let last = log.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} meshes: recon {:.4e}, kl {:.4e} -> {}",
        cfg.epochs,
        dataset.len(),
        last.recon,
        last.kl,
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

fn cmd_encode(mesh_path: &Path, model_path: &Path) -> Result<()> {
    let mesh = load_mesh(mesh_path)?;
    let model = load_model(model_path)?;
    let (mu, logvar) = encode(&mesh, &model)?;
    let out = serde_json::json!({
        "fingerprint": mesh.fingerprint(),
        "mu": mu.data(),
        "logvar": logvar.data(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// complete
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CompletionReport<'a> {
    config: &'a CompletionConfig,
    initial_objective: f64,
    final_objective: f64,
    iterations: usize,
    transform: &'a RigidTransform,
    output_mesh: String,
    output_mesh_observation_frame: String,
    objective_history: &'a [f64],
}

#[allow(clippy::too_many_arguments)]
fn cmd_complete(
    preop: &Path,
    cloud: &Path,
    mask: &Path,
    model_path: &Path,
    config: Option<&Path>,
    out_dir: &Path,
    hypotheses: Option<usize>,
    no_refine: bool,
    overrides: &[String],
) -> Result<()> {
    let mut cfg: CompletionConfig = load_config(config, overrides, "complete")?;
    if let Some(h) = hypotheses {
        cfg.hypothesis_count = h;
    }
    let model = load_model(model_path)?;
    let preop_mesh = load_mesh(preop)?;
    if preop_mesh.fingerprint() != model.fingerprint() {
        bail!(
            "preoperative mesh topology {} does not match model topology {}",
            preop_mesh.fingerprint(),
            model.fingerprint()
        );
    }
    let cloud_points = load_pointcloud(cloud)?;
    let mask = load_mask(mask, model.fingerprint())?;
    std::fs::create_dir_all(out_dir)?;

    let z0 = initialize(&preop_mesh, &model, !no_refine, &cfg)?;

    if cfg.hypothesis_count <= 1 {
        let result = complete_with_init(&z0, &cloud_points, &mask, &model, &cfg)?;
        let mesh_name = "completed.off";
        let obs_name = "completed-observed.off";
        save_mesh(&result.mesh, out_dir.join(mesh_name))?;
        save_mesh(
            &result.transform.mesh_to_observation(&result.mesh),
            out_dir.join(obs_name),
        )?;
        write_json(
            &out_dir.join("report.json"),
            &CompletionReport {
                config: &cfg,
                initial_objective: result.initial_objective,
                final_objective: result.final_objective,
                iterations: cfg.iterations,
                transform: &result.transform,
                output_mesh: mesh_name.to_string(),
                output_mesh_observation_frame: obs_name.to_string(),
                objective_history: &result.history,
            },
        )?;
        write_json(&out_dir.join("config.json"), &cfg)?;
        println!(
            "completed: objective {:.4e} -> {:.4e} ({} iterations) -> {}",
            result.initial_objective,
            result.final_objective,
            cfg.iterations,
            out_dir.display()
        );
    } else {
        let results = multi_hypothesis(
            &z0,
            cfg.hypothesis_count,
            cfg.noise_variance,
            cfg.seed,
            &cloud_points,
            &mask,
            &model,
            &cfg,
        )?;
        let mut reports = Vec::new();
        for (k, result) in results.iter().enumerate() {
            let mesh_name = format!("hypothesis-{k:02}.off");
            let obs_name = format!("hypothesis-{k:02}-observed.off");
            save_mesh(&result.mesh, out_dir.join(&mesh_name))?;
            save_mesh(
                &result.transform.mesh_to_observation(&result.mesh),
                out_dir.join(&obs_name),
            )?;
            reports.push(serde_json::json!({
                "hypothesis": k,
                "initial_objective": result.initial_objective,
                "final_objective": result.final_objective,
                "transform": result.transform,
                "output_mesh": mesh_name,
                "output_mesh_observation_frame": obs_name,
                "objective_history": result.history,
            }));
        }
        write_json(
            &out_dir.join("report.json"),
            &serde_json::json!({
                "config": cfg,
                "iterations": cfg.iterations,
                "hypotheses": reports,
            }),
        )?;
        write_json(&out_dir.join("config.json"), &cfg)?;
        println!(
            "completed {} hypotheses -> {}",
            results.len(),
            out_dir.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchmarkRunConfig {
    completion: CompletionConfig,
    icp: IcpConfig,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CasesSource {
    Manifest(#[allow(dead_code)] CasesManifest),
    Generate(GenerateCases),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateCases {
    meshes: Vec<String>,
    #[serde(default)]
    deform: PerturbRanges,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_fps_cap")]
    fps_cap: usize,
}

fn default_fps_cap() -> usize {
    200
}

fn cmd_benchmark(
    model_path: &Path,
    cases_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    overrides: &[String],
) -> Result<()> {
    let cfg: BenchmarkRunConfig = load_config(config, overrides, "benchmark")?;
    let model = load_model(model_path)?;
    let text = std::fs::read_to_string(cases_path)
        .with_context(|| format!("reading cases {}", cases_path.display()))?;
    let source: CasesSource = serde_json::from_str(&text)
        .with_context(|| format!("parsing cases {}", cases_path.display()))?;
    std::fs::create_dir_all(out_dir)?;
    let cases = match source {
        CasesSource::Manifest(_) => load_cases(cases_path)?,
        CasesSource::Generate(gen) => {
            let dir = cases_path.parent().unwrap_or_else(|| Path::new("."));
            let mut meshes = Vec::new();
            for m in &gen.meshes {
                meshes.push(load_mesh(dir.join(m))?);
            }
            let cases = make_benchmark(&meshes, &gen.deform, gen.seed, gen.fps_cap)?;
            save_cases(&cases, out_dir.join("cases"))?;
            cases
        }
    };
    for case in &cases {
        if case.preop.fingerprint() != model.fingerprint() {
            bail!(
                "case {} topology {} does not match model topology {}",
                case.id,
                case.preop.fingerprint(),
                model.fingerprint()
            );
        }
    }
    let (reports, summary) = run_benchmark(&model, &cases, &cfg.completion, &cfg.icp)?;
    for report in &reports {
        write_json(&out_dir.join(format!("{}.report.json", report.case_id)), report)?;
    }
    write_json(&out_dir.join("summary.json"), &summary)?;
    write_atomic(&out_dir.join("summary.csv"), summary_csv(&reports).as_bytes())?;
    write_json(&out_dir.join("config.json"), &cfg)?;
    println!(
        "benchmark: {} cases, visible-region wins {}/{} (proposed {:.4e} vs baseline {:.4e} mean visible)",
        summary.total_cases,
        summary.proposed_wins_visible,
        summary.total_cases,
        summary.mean_visible_proposed,
        summary.mean_visible_baseline,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(component: &str) -> Result<()> {
    let checks = surfcomp_core::gradcheck::run(component)?;
    let mut failed = false;
    for check in &checks {
        let status = if check.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<12} max relative error {:.3e} (tolerance {:.0e}) {status}",
            check.name, check.max_relative_error, check.tolerance
        );
        failed |= !check.passed();
    }
    if failed {
        bail!("gradient check failed");
    }
    Ok(())
}
