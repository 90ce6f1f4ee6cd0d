use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use hubless::harness::{
    evaluate_landmarks, generate_synthetic, read_landmarks, render_average, write_dataset, GridSpec, SyntheticSpec,
    DEFAULT_RENDER_SPACING,
};
use hubless::keypoints::{extract, load_keypoints, save_keypoints, DetectorParams, Keypoint, DESCRIPTOR_LENGTH};
use hubless::matching::{build_graph, load_matches, save_matches, MatchCriteria};
use hubless::optimizer::{register, trace_csv, BundleState, OptimizerConfig};
use hubless::transforms::{load_transform, save_transform, HalfTransform};
use hubless::volume::{load_volume, write_volume};
use hubless::Vec3;

#[derive(Parser)]
#[command(name = "hubless", version, about = "Groupwise keypoint registration of 3D volumes")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect and describe keypoints of one volume.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        detector: DetectorArgs,
    },
    /// Match keypoint files pairwise into one match file. Image ids follow argument order.
    Match {
        #[arg(long = "keypoints", required = true, num_args = 1..)]
        keypoints: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        criteria: MatchArgs,
    },
    /// Register a group; writes transform_XXX.json, trace.csv and thetas.csv.
    Register {
        #[arg(long = "keypoints", required = true, num_args = 1..)]
        keypoints: Vec<PathBuf>,
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        optimizer: OptimizerArgs,
    },
    /// Map points (CSV x,y,z) through one transform, or render the average of volumes.
    Apply {
        #[arg(long = "transform", required = true, num_args = 1..)]
        transforms: Vec<PathBuf>,
        /// Point CSV to map into the common space (one transform).
        #[arg(long, conflicts_with = "volumes")]
        points: Option<PathBuf>,
        /// Volumes to resample and average, one per transform.
        #[arg(long = "volume", num_args = 1..)]
        volumes: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RENDER_SPACING)]
        spacing: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Landmark spread in the common space.
    Evaluate {
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long = "transform", required = true, num_args = 1..)]
        transforms: Vec<PathBuf>,
        /// Report CSV (`category,mean_mm,max_mm,count`).
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic group with planted truth.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        spec: SynthArgs,
    },
    /// extract, match, register, then optionally evaluate and render.
    Pipeline {
        #[arg(long = "volume", required = true, num_args = 1..)]
        volumes: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Also write the average volume at this spacing.
        #[arg(long)]
        render_spacing: Option<f64>,
        #[command(flatten)]
        detector: DetectorArgs,
        #[command(flatten)]
        criteria: MatchArgs,
        #[command(flatten)]
        optimizer: OptimizerArgs,
    },
}

#[derive(Args)]
struct DetectorArgs {
    #[arg(long, default_value_t = 3)]
    octaves: usize,
    #[arg(long, default_value_t = 4)]
    scales_per_octave: usize,
    #[arg(long, default_value_t = 0.0)]
    response_threshold: f64,
    #[arg(long, default_value_t = 20_000)]
    max_keypoints: usize,
}

impl DetectorArgs {
    fn params(&self) -> DetectorParams {
        DetectorParams {
            octaves: self.octaves,
            scales_per_octave: self.scales_per_octave,
            response_threshold: self.response_threshold,
            max_keypoints: self.max_keypoints,
            descriptor_length: DESCRIPTOR_LENGTH,
        }
    }
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long, default_value_t = 1.0)]
    max_descriptor_distance: f64,
    #[arg(long, default_value_t = 0.9)]
    nn_ratio: f64,
    #[arg(long, default_value_t = std::f64::consts::LN_2)]
    max_scale_log_ratio: f64,
    /// Allow matches between blobs of opposite polarity.
    #[arg(long)]
    ignore_sign: bool,
}

impl MatchArgs {
    fn criteria(&self) -> MatchCriteria {
        MatchCriteria {
            max_descriptor_distance: self.max_descriptor_distance,
            nn_ratio: self.nn_ratio,
            max_scale_log_ratio: self.max_scale_log_ratio,
            require_same_sign: !self.ignore_sign,
        }
    }
}

#[derive(Args)]
struct OptimizerArgs {
    /// Grid spacings (mm), coarse to fine.
    #[arg(long, value_delimiter = ',', default_value = "200,100,50")]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 0.02)]
    alpha: f64,
    #[arg(long, default_value_t = 50)]
    init_iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 10)]
    refresh_period: usize,
}

impl OptimizerArgs {
    fn config(&self) -> OptimizerConfig {
        OptimizerConfig {
            levels: self.levels.clone(),
            iterations_per_level: self.iterations,
            alpha: self.alpha,
            init_iterations: self.init_iterations,
            gamma: self.gamma,
            theta_refresh_period: self.refresh_period,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    images: usize,
    #[arg(long, default_value_t = 2000)]
    points: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_rate: f64,
    #[arg(long, default_value_t = 100.0)]
    warp_spacing: f64,
    #[arg(long, default_value_t = 35.0)]
    max_displacement: f64,
    #[arg(long, default_value_t = 20)]
    landmarks: usize,
}

impl SynthArgs {
    fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            n_images: self.images,
            n_points: self.points,
            noise_sigma: self.noise,
            outlier_rate: self.outlier_rate,
            warp_spacing: self.warp_spacing,
            max_displacement: self.max_displacement,
            n_landmarks: self.landmarks,
            ..Default::default()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")?;
    match cli.command {
        Command::Extract {
            input,
            output,
            detector,
        } => {
            let n = extract_one(&input, &output, 0, &detector.params())?;
            println!("{n} keypoints -> {}", output.display());
        }
        Command::Match {
            keypoints,
            output,
            criteria,
        } => {
            let sets = load_sets(&keypoints)?;
            let graph = build_graph(&sets, &criteria.criteria())?;
            save_matches(&output, &graph)?;
            println!("{} matches -> {}", graph.len(), output.display());
        }
        Command::Register {
            keypoints,
            matches,
            out_dir,
            optimizer,
        } => {
            let sets = load_sets(&keypoints)?;
            let graph = load_matches(&matches)?;
            register_group(&sets, graph, &out_dir, &optimizer.config())?;
        }
        Command::Apply {
            transforms,
            points,
            volumes,
            spacing,
            output,
        } => {
            if let Some(points) = points {
                ensure!(transforms.len() == 1, "mapping points takes exactly one transform");
                let (_, t) = load_transform(&transforms[0])
                    .with_context(|| format!("loading {}", transforms[0].display()))?;
                map_points(&t, &points, &output)?;
            } else {
                ensure!(!volumes.is_empty(), "give --points or --volume");
                render(&volumes, &load_transforms(&transforms)?, spacing, &output)?;
            }
        }
        Command::Evaluate {
            landmarks,
            transforms,
            output,
        } => {
            evaluate(&landmarks, &load_transforms(&transforms)?, &output)?;
        }
        Command::Synth { out_dir, spec } => {
            let data = generate_synthetic(&spec.spec(cli.seed))?;
            write_dataset(&out_dir, &data)?;
            println!(
                "{} images, {} matches ({:.1}% planted outliers) -> {}",
                data.keypoints.len(),
                data.graph.len(),
                100.0 * data.outlier_fraction(),
                out_dir.display()
            );
        }
        Command::Pipeline {
            volumes,
            out_dir,
            landmarks,
            render_spacing,
            detector,
            criteria,
            optimizer,
        } => {
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let params = detector.params();
            let mut kp_paths = Vec::new();
            for (i, v) in volumes.iter().enumerate() {
                let path = out_dir.join(format!("kp_{i:03}.bin"));
                let n = extract_one(v, &path, i as u32, &params)?;
                info!("{}: {n} keypoints", v.display());
                kp_paths.push(path);
            }
            let sets = load_sets(&kp_paths)?;
            let graph = build_graph(&sets, &criteria.criteria())?;
            save_matches(out_dir.join("matches.txt"), &graph)?;
            info!("{} matches", graph.len());
            let transforms = register_group(&sets, graph, &out_dir, &optimizer.config())?;
            if let Some(lm) = landmarks {
                evaluate(&lm, &transforms, &out_dir.join("report.csv"))?;
            }
            if let Some(spacing) = render_spacing {
                render(&volumes, &transforms, spacing, &out_dir.join("average.nii"))?;
            }
        }
    }
    Ok(())
}

fn extract_one(input: &Path, output: &Path, image_id: u32, params: &DetectorParams) -> Result<usize> {
    let volume = load_volume(input).with_context(|| format!("loading {}", input.display()))?;
    let kps = extract(&volume, params, image_id)?;
    save_keypoints(output, &kps)?;
    Ok(kps.len())
}

fn load_sets(paths: &[PathBuf]) -> Result<Vec<Vec<Keypoint>>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| load_keypoints(p, i as u32).with_context(|| format!("loading {}", p.display())))
        .collect()
}

/// Transforms ordered by their stored image id, which must be `0..n`.
fn load_transforms(paths: &[PathBuf]) -> Result<Vec<HalfTransform>> {
    let mut loaded = paths
        .iter()
        .map(|p| load_transform(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    loaded.sort_by_key(|(id, _)| *id);
    for (k, (id, _)) in loaded.iter().enumerate() {
        ensure!(*id as usize == k, "transform image ids must be 0..{}, found {id}", loaded.len());
    }
    Ok(loaded.into_iter().map(|(_, t)| t).collect())
}

fn register_group(
    sets: &[Vec<Keypoint>],
    graph: hubless::matching::MatchGraph,
    out_dir: &Path,
    cfg: &OptimizerConfig,
) -> Result<Vec<HalfTransform>> {
    if sets.len() < 2 {
        bail!("need at least 2 images, got {}", sets.len());
    }
    ensure!(
        graph.n_images() == sets.len(),
        "match file covers {} images but {} keypoint files were given",
        graph.n_images(),
        sets.len()
    );
    for (i, s) in sets.iter().enumerate() {
        ensure!(
            graph.counts()[i] == s.len(),
            "image {i}: match file expects {} keypoints, file has {}",
            graph.counts()[i],
            s.len()
        );
    }
    let mut state = BundleState::from_keypoints(sets, graph)?;
    register(&mut state, cfg)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (i, t) in state.transforms().iter().enumerate() {
        save_transform(out_dir.join(format!("transform_{i:03}.json")), i as u32, t)?;
    }
    fs::write(out_dir.join("trace.csv"), trace_csv(state.trace()))?;
    fs::write(out_dir.join("thetas.csv"), state.theta_history().to_csv())?;
    let last = state.trace().last().map_or(0.0, |r| r.mean_weighted_distance);
    println!(
        "registered {} images, {} compositions, mean weighted distance {last:.3} mm -> {}",
        state.n_images(),
        state.compositions().iter().sum::<usize>(),
        out_dir.display()
    );
    Ok(state.into_transforms())
}

fn map_points(t: &HalfTransform, input: &Path, output: &Path) -> Result<()> {
    let reader = BufReader::new(fs::File::open(input).with_context(|| format!("opening {}", input.display()))?);
    let mut out = BufWriter::new(fs::File::create(output).with_context(|| format!("creating {}", output.display()))?);
    let mut n = 0;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(char::is_alphabetic) {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}:{}: expected x,y,z", input.display(), k + 1))?;
        ensure!(v.len() == 3, "{}:{}: expected 3 values, got {}", input.display(), k + 1, v.len());
        let q = t.apply(&Vec3::new(v[0], v[1], v[2]));
        writeln!(out, "{},{},{}", q.x, q.y, q.z)?;
        n += 1;
    }
    out.flush()?;
    println!("{n} points -> {}", output.display());
    Ok(())
}

fn render(volumes: &[PathBuf], transforms: &[HalfTransform], spacing: f64, output: &Path) -> Result<()> {
    ensure!(
        volumes.len() == transforms.len(),
        "{} volumes but {} transforms",
        volumes.len(),
        transforms.len()
    );
    let vols = volumes
        .iter()
        .map(|p| load_volume(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let grid = GridSpec::covering(&vols, transforms, spacing)?;
    let r = render_average(&vols, transforms, &grid)?;
    write_volume(output, &r.volume)?;
    println!("average {:?} ({} masked) -> {}", grid.dims, r.masked, output.display());
    Ok(())
}

fn evaluate(landmarks: &Path, transforms: &[HalfTransform], output: &Path) -> Result<()> {
    let sets = read_landmarks(landmarks)?;
    let report = evaluate_landmarks(&sets, transforms, None)?;
    fs::write(output, report.to_csv()).with_context(|| format!("writing {}", output.display()))?;
    print!("{}", report.to_table());
    Ok(())
}
