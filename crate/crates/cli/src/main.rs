//! `photostereo` command line: synthetic rendering, light calibration,
//! reconstruction, evaluation and the distance sweep.
//!
//! Exit codes: 0 on success, 2 for invalid input (including unreadable
//! files), 3 when a solver or the global loop diverges.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
#[cfg(test)]
use clap::CommandFactory;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use photostereo::calibration::{calibrate_joint, refine_alternating};
use photostereo::integration::{depth_error, export_mesh, write_obj, write_ply, Alignment};
use photostereo::io::{
    read_depth, read_images, read_plane, read_proxy, read_rig, read_vector_pfm, write_depth,
    write_images, write_keypoints_csv, write_mask, write_proxy, write_rig, write_scalar_pfm,
    write_vector_pfm, ImageFormat,
};
use photostereo::pipeline::{
    evaluate_distance_sweep, reconstruct, sweep_rig, sweep_scene, write_sweep_csv, PipelineConfig,
    SceneFamily, SweepConfig,
};
use photostereo::renderer::{add_noise, angle_deg, perturb_proxy, render_with_occlusion};
use photostereo::{normalize_observations, sample_keypoints, Error};

#[derive(Parser)]
#[command(
    name = "photostereo",
    version,
    about = "Sparse near-light photometric stereo"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene with its ground truth.
    Render(RenderArgs),
    /// Calibrate the lights against a proxy and write the rig.
    Calibrate(CalibrateArgs),
    /// Run the full reconstruction loop.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against ground truth, printed as JSON.
    Evaluate(EvaluateArgs),
    /// Near-light versus parallel-light error over light distances.
    Sweep(SweepArgs),
    /// Print the default pipeline configuration as TOML.
    DefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scene {
    Sphere,
    Bumpy,
}

impl From<Scene> for SceneFamily {
    fn from(s: Scene) -> Self {
        match s {
            Scene::Sphere => SceneFamily::Sphere,
            Scene::Bumpy => SceneFamily::Bumpy,
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long, value_enum)]
    scene: Scene,
    /// Rig JSON. Without it, five lights at `--distance`.
    #[arg(long)]
    lights: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    distance: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cast_shadows: bool,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    /// RMS angular error, in degrees, of the proxy written to `out/proxy`.
    #[arg(long, default_value_t = 0.0)]
    proxy_error: f64,
    /// Standard deviation of additive Gaussian noise, relative to the
    /// brightest pixel.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write 16-bit PNG images instead of PFM.
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    proxy: PathBuf,
    #[arg(long, default_value_t = 500)]
    keypoints: usize,
    /// Prior light-to-surface distance.
    #[arg(long)]
    d: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after the joint solve.
    #[arg(long)]
    no_refine: bool,
    /// Also write the sampled key points as CSV.
    #[arg(long)]
    keypoints_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeshFormat {
    Obj,
    Ply,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    proxy: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `calibration.d` from the config.
    #[arg(long)]
    d: Option<f64>,
    /// Ground-truth directory. Records the depth error of every iteration
    /// and stops a diverging loop.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum)]
    emit_report: Option<ReportFormat>,
    #[arg(long, value_enum, default_value = "obj")]
    mesh: MeshFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Offset,
    OffsetScale,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    recon: PathBuf,
    #[arg(long, value_enum, default_value = "offset")]
    alignment: AlignArg,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "sphere")]
    family: Scene,
    #[arg(long, value_delimiter = ',', default_values_t = (1..=10).map(f64::from).collect::<Vec<_>>())]
    distances: Vec<f64>,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long, default_value_t = 10.0)]
    proxy_error: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn run_render(args: RenderArgs) -> Result<()> {
    let sweep = SweepConfig {
        resolution: args.resolution,
        seed: args.seed,
        ..Default::default()
    };
    let rig = match &args.lights {
        Some(p) => read_rig(p).with_context(|| format!("reading {}", p.display()))?,
        None => sweep_rig(args.distance, sweep.elevation_deg)?,
    };
    let scene = sweep_scene(args.scene.into(), args.distance, &sweep)?
        .with_rig(rig)
        .with_cast_shadows(args.cast_shadows);
    let rendering = render_with_occlusion(&scene);
    let mut obs = rendering.observations;
    if args.noise > 0.0 {
        obs = add_noise(&obs, args.noise * obs.max(), args.seed);
    }
    let format = if args.png {
        ImageFormat::Png
    } else {
        ImageFormat::Pfm
    };
    write_images(&args.out.join("images"), &obs, format)?;

    let truth = args.out.join("truth");
    write_proxy(&truth, &scene.proxy_truth)?;
    write_depth(&truth.join("depth.pfm"), &scene.depth())?;
    let mask = scene.proxy_truth.recon_mask();
    write_scalar_pfm(
        &truth.join("albedo.pfm"),
        scene.plane(),
        &scene.albedo,
        mask,
    )?;
    if args.cast_shadows {
        for (j, occluded) in rendering.occluded.iter().enumerate() {
            write_mask(&truth.join(format!("occluded_{j:02}.png")), occluded)?;
        }
    }
    let proxy = perturb_proxy(&scene.proxy_truth, args.proxy_error, 8.0, args.seed)?;
    write_proxy(&args.out.join("proxy"), &proxy)?;
    write_rig(&args.out.join("rig.json"), &scene.rig_truth)?;
    eprintln!(
        "rendered {} lights at {}x{} into {}",
        obs.n_lights(),
        obs.plane().width,
        obs.plane().height,
        args.out.display()
    );
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(d) = args.d {
        config.calibration.d = d;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.keypoints = args.keypoints;
    config.validate()?;
    let proxy = read_proxy(&args.proxy)?;
    let obs = read_images(&args.images, proxy.plane().pixel_scale)?;
    let obs = normalize_observations(&obs)?;
    let kp = sample_keypoints(&proxy, &obs, config.keypoints, config.seed)?;
    if let Some(path) = &args.keypoints_csv {
        write_keypoints_csv(create(path)?, &kp)?;
    }
    let mut result = calibrate_joint(&kp, &config.calibration)?;
    if !args.no_refine {
        result = refine_alternating(&result, &kp, &config.calibration)?;
    }
    write_rig(&args.out, &result.rig)?;
    eprintln!(
        "calibrated {} lights from {} key points, objective {:.4e}",
        result.rig.len(),
        kp.len(),
        result.objective_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run_reconstruct(args: ReconstructArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(d) = args.d {
        config.calibration.d = d;
    }
    let proxy = read_proxy(&args.proxy)?;
    let pixel_scale = proxy.plane().pixel_scale;
    let obs = read_images(&args.images, pixel_scale)?;
    let truth = args
        .truth
        .as_ref()
        .map(|dir| read_depth(&dir.join("depth.pfm"), pixel_scale))
        .transpose()?;
    let out = reconstruct(&obs, &proxy, &config, truth.as_ref())?;

    let dir = &args.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let plane = out.depth.plane;
    let mask = &out.depth.mask;
    write_depth(&dir.join("depth.pfm"), &out.depth)?;
    write_vector_pfm(&dir.join("normals.pfm"), &plane, &out.normals.normals, mask)?;
    write_scalar_pfm(&dir.join("albedo.pfm"), &plane, &out.albedo, mask)?;
    write_scalar_pfm(&dir.join("gx.pfm"), &plane, &out.gradients.gx, mask)?;
    write_scalar_pfm(&dir.join("gy.pfm"), &plane, &out.gradients.gy, mask)?;
    let mesh = export_mesh(&out.depth);
    match args.mesh {
        MeshFormat::Obj => {
            let mut w = create(&dir.join("mesh.obj"))?;
            write_obj(&mesh, &mut w)?;
            w.flush()?;
        }
        MeshFormat::Ply => {
            let mut w = create(&dir.join("mesh.ply"))?;
            write_ply(&mesh, &mut w)?;
            w.flush()?;
        }
    }
    write_rig(&dir.join("rig.json"), &out.rig)?;
    if let Some(ReportFormat::Json) = args.emit_report {
        let mut w = create(&dir.join("report.json"))?;
        serde_json::to_writer_pretty(&mut w, &out.report)?;
        writeln!(w)?;
        w.flush()?;
    }
    let iterations = out.report.iterations.len();
    eprintln!(
        "{} after {iterations} iteration(s)",
        if out.report.converged {
            "converged"
        } else {
            "stopped at the cap"
        }
    );
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let plane = read_plane(&args.truth.join("plane.json"))?;
    let truth = read_depth(&args.truth.join("depth.pfm"), plane.pixel_scale)?;
    let recon = read_depth(&args.recon.join("depth.pfm"), plane.pixel_scale)?;
    let (alignment, name) = match args.alignment {
        AlignArg::Offset => (Alignment::Offset, "offset"),
        AlignArg::OffsetScale => (Alignment::OffsetScale, "offset_scale"),
    };
    let mut report = json!({
        "depth_error": depth_error(&recon, &truth, alignment)?,
        "alignment": name,
        "pixels": truth.mask.count(),
    });
    let (tn, rn) = (
        args.truth.join("normals.pfm"),
        args.recon.join("normals.pfm"),
    );
    if tn.exists() && rn.exists() {
        let (_, _, t) = read_vector_pfm(&tn)?;
        let (_, _, r) = read_vector_pfm(&rn)?;
        if t.len() != r.len() {
            return Err(Error::InvalidInput("normal maps differ in size".into()).into());
        }
        let ss: f64 = truth
            .mask
            .indices()
            .map(|i| angle_deg(&t[i].normalize(), &r[i].normalize()).powi(2))
            .sum();
        report["normal_rms_deg"] = json!((ss / truth.mask.count().max(1) as f64).sqrt());
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let config = SweepConfig {
        resolution: args.resolution,
        proxy_error_deg: args.proxy_error,
        seed: args.seed,
        ..Default::default()
    };
    let rows = evaluate_distance_sweep(args.family.into(), &args.distances, &config)?;
    match &args.out {
        Some(p) => write_sweep_csv(create(p)?, &rows)?,
        None => write_sweep_csv(io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Render(a) => run_render(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::DefaultConfig => {
            print!("{}", PipelineConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if !e.is_input_error() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let diverged = anyhow::Error::from(Error::PipelineDiverged(4)).context("reconstructing");
        assert_eq!(exit_code(&diverged), 3);
        let solve = anyhow::Error::from(Error::DivergedSolve {
            stage: "joint calibration",
        });
        assert_eq!(exit_code(&solve), 3);
        assert_eq!(exit_code(&anyhow::Error::from(Error::AllZeroInput)), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("unreadable")), 2);
    }

    #[test]
    fn arguments_parse() {
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["photostereo", "sweep", "--distances", "1,2.5,4"]).unwrap();
        let Command::Sweep(args) = cli.command else {
            panic!()
        };
        assert_eq!(args.distances, vec![1.0, 2.5, 4.0]);
    }
}
