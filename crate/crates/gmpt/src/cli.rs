//! The `gmpt` command line: fixture generation, θ solves, tensor assembly, the
//! verify suite, convergence studies and dictionary build/match.
//!
//! Exit codes: 0 success, 1 verification failure, 2 numerical failure,
//! 3 input error, 4 integrity error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmpt_core::linalg::{rotation_from_vector, Vec3};
use gmpt_core::C64;
use gmpt_core::polyfield::BackgroundModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dictionary::{self, DictError, FitOptions, Measurement, ObjectInput};
use crate::fixtures::{FixtureSpec, Shape};
use crate::forward::{convergence_study, ForwardError};
use crate::mesh::{hex, load_mesh, write_mesh, MeshError, ObjectSpec, TetMesh};
use crate::polarizability::{set_from_thetas, GmptError};
use crate::transmission::{load_batch, solve_batch, theta_indices, SolveConfig, SolveError};
use crate::verify::{self, linear_background, Faults, VerifyOptions};

pub const CACHE_ENV: &str = "GMPT_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".gmpt-cache";
/// Highest expansion order the kernels and background Taylor data support.
pub const MAX_ORDER: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("integrity error: {0}")]
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Input(_) => 3,
            CliError::Integrity(_) => 4,
        }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Mesh(m) => m.into(),
            SolveError::Io(_) | SolveError::InvalidConfig(_) => CliError::Input(e.to_string()),
            SolveError::CacheCorrupt { .. } => CliError::Integrity(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<GmptError> for CliError {
    fn from(e: GmptError) -> Self {
        match e {
            GmptError::Solve(s) => s.into(),
            GmptError::InvalidOrder(_) => CliError::Input(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ForwardError> for CliError {
    fn from(e: ForwardError) -> Self {
        match e {
            ForwardError::Gmpt(g) => g.into(),
            ForwardError::Solve(s) => s.into(),
            ForwardError::PointTooClose { .. } | ForwardError::TooFewSamples | ForwardError::OrderExceeded { .. } => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<DictError> for CliError {
    fn from(e: DictError) -> Self {
        match e {
            DictError::Integrity { .. } => CliError::Integrity(e.to_string()),
            DictError::Gmpt(g) => g.into(),
            DictError::Mesh(m) => m.into(),
            DictError::Forward(f) => f.into(),
            DictError::Io { .. }
            | DictError::Json { .. }
            | DictError::EmptyMeasurement
            | DictError::EmptyDictionary
            | DictError::InvalidInput(_)
            | DictError::FrequencyMismatch { .. }
            | DictError::OrderUnavailable { .. } => CliError::Input(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<verify::VerifyError> for CliError {
    fn from(e: verify::VerifyError) -> Self {
        match e {
            verify::VerifyError::Mesh(m) => m.into(),
            verify::VerifyError::Solve(s) => s.into(),
            verify::VerifyError::Gmpt(g) => g.into(),
            verify::VerifyError::Forward(f) => f.into(),
        }
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a non-negative number, got {s:?}")),
    }
}

fn order(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(v) if (1..=MAX_ORDER).contains(&v) => Ok(v),
        _ => Err(format!("expected an order between 1 and {MAX_ORDER}, got {s:?}")),
    }
}

fn count(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if (0.0..1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1), got {s:?}")),
    }
}

fn vec3(s: &str) -> Result<Vec3, String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| format!("{s:?}: {e}"))?;
    match parts.as_slice() {
        [a, b, c] if parts.iter().all(|v| v.is_finite()) => Ok([*a, *b, *c]),
        _ => Err(format!("expected three comma-separated numbers, got {s:?}")),
    }
}

fn object_pair(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((id, path)) if !id.is_empty() && !path.is_empty() => Ok((id.to_owned(), PathBuf::from(path))),
        _ => Err(format!("expected ID=PATH, got {s:?}")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "gmpt", version, about = "Generalised magnetic polarizability tensors: solve, assemble, verify, study, identify")]
pub struct Cli {
    /// key=value file supplying defaults for the object flags; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true, value_parser = count)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ObjectArgs {
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Object size α.
    #[arg(long, value_parser = positive)]
    pub alpha: Option<f64>,
    /// Conductivity σ* of the object.
    #[arg(long, value_parser = non_negative)]
    pub sigma: Option<f64>,
    /// Relative permeability μ*/μ₀.
    #[arg(long, value_parser = positive)]
    pub mur: Option<f64>,
    /// Angular frequency ω.
    #[arg(long, value_parser = non_negative)]
    pub omega: Option<f64>,
    /// Expansion order M.
    #[arg(long, value_parser = order)]
    pub order: Option<usize>,
    /// Truncation radius in object diameters (fixture generation).
    #[arg(long, value_parser = positive)]
    pub rfar: Option<f64>,
    /// Relative residual target of the iterative solver.
    #[arg(long, value_parser = positive)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShapeArg {
    Sphere,
    Cube,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackgroundArg {
    Uniform,
    Linear,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a structured sphere/cube/box fixture mesh.
    Fixture {
        #[arg(long, value_enum)]
        shape: ShapeArg,
        /// Half-widths of the box (a,b,c).
        #[arg(long, value_parser = vec3)]
        half: Option<Vec3>,
        #[arg(long, default_value_t = 4, value_parser = count)]
        cells_in: usize,
        #[arg(long, default_value_t = 4, value_parser = count)]
        cells_out: usize,
        #[command(flatten)]
        object: ObjectArgs,
    },
    /// Solves the θ problems up to p = M − 1 and caches them.
    Solve {
        #[command(flatten)]
        object: ObjectArgs,
    },
    /// Assembles the order-M tensor set from cached θ solutions.
    Assemble {
        #[command(flatten)]
        object: ObjectArgs,
    },
    /// Runs the self-check suite.
    Verify {
        #[arg(long, default_value_t = 3, value_parser = count)]
        cells_in: usize,
        #[arg(long, default_value_t = 3, value_parser = count)]
        cells_out: usize,
        /// Drop the (−1)^m factor (fault injection).
        #[arg(long)]
        inject_m_sign_flip: bool,
        /// Use a corrupted alternating tensor in the reduction (fault injection).
        #[arg(long)]
        inject_epsilon_tamper: bool,
    },
    /// Remainder study over α, α/2, α/4, … at fixed ν; writes CSV.
    Study {
        #[command(flatten)]
        object: ObjectArgs,
        #[arg(long, default_value_t = 4, value_parser = count)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = BackgroundArg::Linear)]
        background: BackgroundArg,
        /// Evaluation distance in units of the largest α·diam(B).
        #[arg(long, default_value_t = 10.0, value_parser = positive)]
        distance: f64,
        #[arg(long, default_value_t = 6, value_parser = count)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dictionary construction and matching.
    Dict {
        #[command(subcommand)]
        command: DictCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum DictCommand {
    /// Canonicalises, solves and assembles every object at every frequency.
    Build {
        /// Object as ID=MESH_PATH; repeat for several objects.
        #[arg(long = "object", value_parser = object_pair, required = true)]
        objects: Vec<(String, PathBuf)>,
        /// Angular frequencies (comma-separated).
        #[arg(long, value_delimiter = ',', value_parser = non_negative)]
        freq: Vec<f64>,
        #[command(flatten)]
        object: ObjectArgs,
    },
    /// Ranks dictionary entries against measurement files.
    Match {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long = "measurement", required = true)]
        measurements: Vec<PathBuf>,
        /// Expansion order of the refinement stage.
        #[arg(long, default_value_t = 1, value_parser = order)]
        refine_order: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a planted measurement generated from a dictionary entry.
    Synth {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, value_parser = non_negative)]
        freq: f64,
        #[arg(long, value_parser = vec3)]
        z: Vec3,
        /// Rotation vector (axis × angle in radians).
        #[arg(long, value_parser = vec3, default_value = "0,0,0")]
        rotation: Vec3,
        /// Uniform background field direction; a dipole source is used when --source is given.
        #[arg(long, value_parser = vec3, default_value = "0,0,1")]
        field: Vec3,
        #[arg(long, value_parser = vec3)]
        source: Option<Vec3>,
        #[arg(long, default_value_t = 32, value_parser = count)]
        sensors: usize,
        #[arg(long, value_parser = positive)]
        sensor_radius: f64,
        #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
        noise: f64,
        #[arg(long, default_value_t = 1, value_parser = order)]
        order: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Object flags merged with config-file values (flags win).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub mesh: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    pub mur: Option<f64>,
    pub omega: Option<f64>,
    pub order: Option<usize>,
    pub rfar: Option<f64>,
    pub tol: Option<f64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("config line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(flags: &ObjectArgs, jobs: Option<usize>, file: &BTreeMap<String, String>) -> Result<RunConfig, CliError> {
        const KEYS: [&str; 10] = ["mesh", "alpha", "sigma", "mur", "omega", "order", "rfar", "tol", "out", "jobs"];
        if let Some(k) = file.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(CliError::Input(format!("unknown config key {k:?}")));
        }
        fn pick<T>(flag: Option<T>, file: &BTreeMap<String, String>, key: &str, parse: fn(&str) -> Result<T, String>) -> Result<Option<T>, CliError> {
            match flag {
                Some(v) => Ok(Some(v)),
                None => file.get(key).map(|s| parse(s).map_err(|e| CliError::Input(format!("config {key}: {e}")))).transpose(),
            }
        }
        let path = |s: &str| -> Result<PathBuf, String> { Ok(PathBuf::from(s)) };
        Ok(RunConfig {
            mesh: pick(flags.mesh.clone(), file, "mesh", path)?,
            alpha: pick(flags.alpha, file, "alpha", positive)?,
            sigma: pick(flags.sigma, file, "sigma", non_negative)?,
            mur: pick(flags.mur, file, "mur", positive)?,
            omega: pick(flags.omega, file, "omega", non_negative)?,
            order: pick(flags.order, file, "order", order)?,
            rfar: pick(flags.rfar, file, "rfar", positive)?,
            tol: pick(flags.tol, file, "tol", positive)?,
            out: pick(flags.out.clone(), file, "out", path)?,
            jobs: pick(jobs, file, "jobs", count)?,
        })
    }

    fn need<T: Clone>(v: &Option<T>, name: &str) -> Result<T, CliError> {
        v.clone().ok_or_else(|| CliError::Input(format!("--{name} is required")))
    }

    pub fn solve_config(&self) -> SolveConfig {
        let mut cfg = SolveConfig::default();
        if let Some(t) = self.tol {
            cfg.tol = t;
        }
        cfg
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    fn load_mesh(&self) -> Result<(Arc<TetMesh>, PathBuf), CliError> {
        let path = Self::need(&self.mesh, "mesh")?;
        let mesh = load_mesh(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Ok((Arc::new(mesh), path))
    }

    fn spec(&self) -> Result<(ObjectSpec, PathBuf), CliError> {
        let (mesh, path) = self.load_mesh()?;
        let spec = ObjectSpec::new(
            mesh,
            Self::need(&self.alpha, "alpha")?,
            [0.0; 3],
            Self::need(&self.sigma, "sigma")?,
            Self::need(&self.mur, "mur")?,
            Self::need(&self.omega, "omega")?,
        )?;
        Ok((spec, path))
    }
}

pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR), PathBuf::from)
}

#[derive(Debug, Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    command: String,
    inputs: BTreeMap<String, String>,
    config_hash: String,
}

fn provenance(command: &str, inputs: &[(&str, &Path)], config: &RunConfig) -> Result<Provenance, CliError> {
    let mut map = BTreeMap::new();
    for (name, path) in inputs {
        let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        map.insert(format!("{name}:{}", path.display()), hex(&Sha256::digest(&bytes)));
    }
    Ok(Provenance { tool: "gmpt", version: env!("CARGO_PKG_VERSION"), command: command.to_owned(), inputs: map, config_hash: config.hash() })
}

fn csv_header(p: &Provenance) -> String {
    let mut out = format!("# tool={} version={} command={} config_hash={}\n", p.tool, p.version, p.command, p.config_hash);
    for (k, v) in &p.inputs {
        out += &format!("# input {k} sha256={v}\n");
    }
    out
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serialises") + "\n"
}

fn cmd_fixture(shape: ShapeArg, half: Option<Vec3>, cells_in: usize, cells_out: usize, cfg: &RunConfig) -> Result<(), CliError> {
    let shape = match (shape, half) {
        (ShapeArg::Sphere, _) => Shape::Sphere { radius: 1.0 },
        (ShapeArg::Cube, _) => Shape::cube(1.0),
        (ShapeArg::Box, Some(h)) if h.iter().all(|v| *v > 0.0) => Shape::Box { half: h },
        (ShapeArg::Box, Some(_)) => return Err(CliError::Input("box half-widths must be positive".into())),
        (ShapeArg::Box, None) => Shape::Box { half: [1.0, 0.6, 0.35] },
    };
    let mut spec = FixtureSpec::new(shape, cells_in, cells_out);
    if let Some(f) = cfg.rfar {
        spec.far_factor = f;
    }
    let out = RunConfig::need(&cfg.out, "out")?;
    let mesh = spec.build()?;
    write_mesh(&mesh, &out)?;
    eprintln!("wrote {} ({} tets, {} object tets)", out.display(), mesh.tets().len(), mesh.object_tets().count());
    Ok(())
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    provenance: Provenance,
    cache_dir: String,
    operator_key: &'a str,
    nu: f64,
    solutions: usize,
    from_cache: usize,
    solved: usize,
    max_residual: f64,
}

fn cmd_solve(cfg: &RunConfig) -> Result<(), CliError> {
    let (spec, path) = cfg.spec()?;
    let order = RunConfig::need(&cfg.order, "order")?;
    let dir = cache_dir();
    let thetas = solve_batch(&spec, order - 1, &cfg.solve_config(), Some(&dir))?;
    let summary = SolveSummary {
        provenance: provenance("solve", &[("mesh", &path)], cfg)?,
        cache_dir: dir.display().to_string(),
        operator_key: &thetas.key,
        nu: thetas.nu,
        solutions: thetas.solutions.len(),
        from_cache: thetas.from_cache,
        solved: thetas.solutions.len() - thetas.from_cache,
        max_residual: thetas.max_residual(),
    };
    write_output(cfg.out.as_deref(), &json(&summary))
}

#[derive(Serialize)]
struct AssembleOutput<'a> {
    provenance: Provenance,
    gmpt: &'a crate::polarizability::GmptSet,
}

fn cmd_assemble(cfg: &RunConfig) -> Result<(), CliError> {
    let (spec, path) = cfg.spec()?;
    let order = RunConfig::need(&cfg.order, "order")?;
    let thetas = load_batch(&spec, order - 1, &cfg.solve_config(), &cache_dir())?;
    let set = set_from_thetas(&thetas, &spec, order)?;
    set.validate().map_err(CliError::Numerical)?;
    let out = AssembleOutput { provenance: provenance("assemble", &[("mesh", &path)], cfg)?, gmpt: &set };
    write_output(cfg.out.as_deref(), &json(&out))
}

fn cmd_verify(cells_in: usize, cells_out: usize, faults: Faults, cfg: &RunConfig) -> Result<(), CliError> {
    let mut opts = VerifyOptions { cells_in, cells_out, faults, solve: cfg.solve_config(), ..VerifyOptions::default() };
    if let Some(f) = cfg.rfar {
        opts.far_factor = f;
    }
    let report = verify::run(&opts)?;
    let table = report.to_table();
    write_output(cfg.out.as_deref(), &table)?;
    if cfg.out.is_some() {
        print!("{table}");
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<String> = report.failures().iter().map(|c| c.name.clone()).collect();
        Err(CliError::Verification(names.join(", ")))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_study(
    cfg: &RunConfig,
    steps: usize,
    background: BackgroundArg,
    distance: f64,
    points: usize,
    seed: u64,
) -> Result<(), CliError> {
    if steps < 2 {
        return Err(CliError::Input("--steps must be at least 2".into()));
    }
    let (spec, path) = cfg.spec()?;
    let order = RunConfig::need(&cfg.order, "order")?;
    let h0 = match background {
        BackgroundArg::Uniform => gmpt_core::polyfield::PolyField::uniform(spec.z, [C64::new(1.0, 0.0), C64::new(0.5, 0.0), C64::new(-0.3, 0.0)]),
        BackgroundArg::Linear => linear_background(&spec.z, 5.0),
    };
    let max_p = (order - 1).max(h0.degree());
    let thetas = solve_batch(&spec, max_p, &cfg.solve_config(), Some(&cache_dir()))?;
    let alphas: Vec<f64> = (0..steps).map(|k| spec.alpha * 0.5f64.powi(k as i32)).collect();
    let r = distance * spec.alpha * spec.mesh.object_diameter();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec3> = (0..points)
        .map(|_| loop {
            let d: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if n > 0.1 && n <= 1.0 {
                break std::array::from_fn(|i| spec.z[i] + r * d[i] / n);
            }
        })
        .collect();
    let orders: Vec<usize> = (1..=order).collect();
    let table = convergence_study(&thetas, &spec, &alphas, &h0, &pts, &orders, 4)?;
    let p = provenance("study", &[("mesh", &path)], cfg)?;
    write_output(cfg.out.as_deref(), &(csv_header(&p) + &table.to_csv()))
}

#[derive(Serialize)]
struct BuildSummary {
    provenance: Provenance,
    entries: Vec<String>,
    failures: Vec<(String, String)>,
}

fn cmd_dict_build(objects: &[(String, PathBuf)], freq: Vec<f64>, cfg: &RunConfig) -> Result<(), CliError> {
    let out = RunConfig::need(&cfg.out, "out")?;
    let order = RunConfig::need(&cfg.order, "order")?;
    let frequencies = if freq.is_empty() { vec![RunConfig::need(&cfg.omega, "omega or --freq")?] } else { freq };
    let mut inputs = Vec::new();
    let mut failures = Vec::new();
    for (id, path) in objects {
        match load_mesh(path) {
            Ok(mesh) => inputs.push(ObjectInput {
                id: id.clone(),
                mesh: Arc::new(mesh),
                alpha: RunConfig::need(&cfg.alpha, "alpha")?,
                sigma_star: RunConfig::need(&cfg.sigma, "sigma")?,
                mu_r: RunConfig::need(&cfg.mur, "mur")?,
            }),
            Err(e) => failures.push((id.clone(), format!("{}: {e}", path.display()))),
        }
    }
    let build = dictionary::build_dictionary(&inputs, &frequencies, order, &cfg.solve_config(), Some(&cache_dir()));
    dictionary::save_dictionary(&out, &build.entries)?;
    failures.extend(build.failures.iter().map(|(id, e)| (id.clone(), e.to_string())));
    let named: Vec<(&str, &Path)> = objects.iter().map(|(_, p)| ("mesh", p.as_path())).filter(|(_, p)| p.exists()).collect();
    let summary = BuildSummary {
        provenance: provenance("dict build", &named, cfg)?,
        entries: build.entries.iter().map(|e| e.id.clone()).collect(),
        failures: failures.clone(),
    };
    let text = json(&summary);
    std::fs::write(out.join("build.json"), &text).map_err(|e| CliError::Input(e.to_string()))?;
    print!("{text}");
    if failures.is_empty() {
        Ok(())
    } else {
        let ids: Vec<&str> = failures.iter().map(|f| f.0.as_str()).collect();
        Err(CliError::Numerical(format!("entries failed: {}", ids.join(", "))))
    }
}

fn read_measurements(paths: &[PathBuf]) -> Result<Vec<Measurement>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        let value = value.get("measurement").cloned().unwrap_or(value);
        let parsed: Vec<Measurement> = if value.is_array() {
            serde_json::from_value(value)
        } else {
            serde_json::from_value(value).map(|m| vec![m])
        }
        .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        out.extend(parsed);
    }
    Ok(out)
}

#[derive(Serialize)]
struct MatchOutput {
    provenance: Provenance,
    ranking: Vec<dictionary::Candidate>,
    failures: Vec<(String, String)>,
}

fn cmd_dict_match(dict: &Path, measurements: &[PathBuf], refine_order: usize, out: Option<&Path>, cfg: &RunConfig) -> Result<(), CliError> {
    let entries = dictionary::load_dictionary(dict)?;
    let data = read_measurements(measurements)?;
    let result = dictionary::classify(&data, &entries, &FitOptions { refine_order, ..FitOptions::default() })?;
    let inputs: Vec<(&str, &Path)> = measurements.iter().map(|p| ("measurement", p.as_path())).collect();
    let mut index = dict.join(dictionary::INDEX_FILE);
    if !index.exists() {
        index = dict.to_path_buf();
    }
    let mut all = inputs;
    all.push(("dictionary_index", index.as_path()));
    let output = MatchOutput {
        provenance: provenance("dict match", &all, cfg)?,
        ranking: result.ranking,
        failures: result.failures.iter().map(|(id, e)| (id.clone(), e.to_string())).collect(),
    };
    for (rank, c) in output.ranking.iter().enumerate() {
        eprintln!("{:>3}  {:<16} residual {:.6e}", rank + 1, c.id, c.fit.residual);
    }
    write_output(out, &json(&output))
}

#[derive(Serialize)]
struct SynthOutput {
    provenance: Provenance,
    measurement: Measurement,
}

#[allow(clippy::too_many_arguments)]
fn cmd_dict_synth(
    dict: &Path,
    id: &str,
    freq: f64,
    z: Vec3,
    rotation: Vec3,
    field: Vec3,
    source: Option<Vec3>,
    sensors: usize,
    sensor_radius: f64,
    noise: f64,
    order: usize,
    seed: u64,
    out: &Path,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let entries = dictionary::load_dictionary(dict)?;
    let entry = entries.iter().find(|e| e.id == id).ok_or_else(|| CliError::Input(format!("no entry {id:?}")))?;
    let background = match source {
        Some(position) => BackgroundModel::Dipole { position, moment: field },
        None => BackgroundModel::uniform(field),
    };
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let positions: Vec<Vec3> = (0..sensors)
        .map(|k| {
            let y = 1.0 - 2.0 * (k as f64 + 0.5) / sensors as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * k as f64;
            [z[0] + sensor_radius * r * phi.cos(), z[1] + sensor_radius * y, z[2] + sensor_radius * r * phi.sin()]
        })
        .collect();
    let q = rotation_from_vector(&rotation);
    let measurement = dictionary::synthesize(entry, freq, &background, &positions, &z, &q, order, noise, seed)?;
    let output = SynthOutput { provenance: provenance("dict synth", &[("dictionary_index", &dict.join(dictionary::INDEX_FILE))], cfg)?, measurement };
    write_output(Some(out), &json(&output))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => parse_config(&std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?)?,
        None => BTreeMap::new(),
    };
    let resolve = |o: &ObjectArgs| RunConfig::resolve(o, cli.jobs, &file);
    let empty = ObjectArgs::default();
    let base = resolve(&empty)?;
    if let Some(j) = base.jobs {
        // the global pool can only be set once per process; a second call is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match cli.command {
        Command::Fixture { shape, half, cells_in, cells_out, object } => cmd_fixture(shape, half, cells_in, cells_out, &resolve(&object)?),
        Command::Solve { object } => cmd_solve(&resolve(&object)?),
        Command::Assemble { object } => cmd_assemble(&resolve(&object)?),
        Command::Verify { cells_in, cells_out, inject_m_sign_flip, inject_epsilon_tamper } => cmd_verify(
            cells_in,
            cells_out,
            Faults { flip_m_sign: inject_m_sign_flip, tamper_epsilon: inject_epsilon_tamper },
            &base,
        ),
        Command::Study { object, steps, background, distance, points, seed } => {
            cmd_study(&resolve(&object)?, steps, background, distance, points, seed)
        }
        Command::Dict { command } => match command {
            DictCommand::Build { objects, freq, object } => cmd_dict_build(&objects, freq, &resolve(&object)?),
            DictCommand::Match { dict, measurements, refine_order, out } => {
                cmd_dict_match(&dict, &measurements, refine_order, out.as_deref(), &base)
            }
            DictCommand::Synth { dict, id, freq, z, rotation, field, source, sensors, sensor_radius, noise, order, seed, out } => {
                cmd_dict_synth(&dict, &id, freq, z, rotation, field, source, sensors, sensor_radius, noise, order, seed, &out, &base)
            }
        },
    }
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gmpt: {e}");
            e.exit_code()
        }
    }
}

/// Number of cache files `gmpt solve` writes for order M.
pub fn expected_cache_files(order: usize) -> usize {
    theta_indices(order.saturating_sub(1)).len()
}
