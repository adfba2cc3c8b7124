//! Subcommand implementations.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::Args;
use groupreg::config::RunConfig;
use groupreg::engine::{register_group, register_group_scaled};
use groupreg::experiment::{group_size_sweep, sweep_csv, velocity_norms_csv, warped_labels};
use groupreg::grid::{Field, GridSpec, LabelField, VectorField};
use groupreg::io::state::{decode_extractor, decode_trace, encode_codebooks, encode_extractor, encode_state, encode_trace};
use groupreg::io::{self, Dtype, Header, Volume};
use groupreg::metrics::{groupwise_assd, groupwise_dice, groupwise_warping_index, negative_jacobian_fraction};
use groupreg::structrep::TaggedImage;
use groupreg::synth::make_phantom_group;
use groupreg::Error;

use crate::manifest::{sha256_hex, InputRecord, Manifest, OutputRecord};
use crate::Common;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Internal(String),
    Lib(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
            CliError::Lib(Error::Degenerate(_)) => 1,
            CliError::Lib(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Internal(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    Ok(std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?)
}

/// Output directory that remembers a digest of everything written into it.
struct OutDir {
    dir: PathBuf,
    records: Vec<OutputRecord>,
}

impl OutDir {
    fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            records: vec![],
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        write_file(&self.dir.join(name), bytes)?;
        self.records.push(OutputRecord {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn volume(&mut self, name: &str, v: Volume, modality: Option<&str>) -> CliResult<()> {
        self.write(name, &io::encode(&v, Dtype::Float32, modality))
    }

    fn finish(self, mut manifest: Manifest) -> CliResult<()> {
        manifest.outputs = self.records;
        manifest.write(&self.dir)
    }
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn read_volume_at(path: &Path) -> CliResult<(Volume, Header, Vec<u8>)> {
    let bytes = read_file(path)?;
    let is_nifti = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("nii"));
    let named = |e: Error| CliError::Usage(format!("{}: {e}", path.display()));
    if is_nifti {
        let (v, h) = io::read_volume(path).map_err(named)?;
        return Ok((v, h, bytes));
    }
    let (v, h) = io::decode(&bytes).map_err(named)?;
    Ok((v, h, bytes))
}

fn expect_grid(path: &Path, grid: &GridSpec, reference: &GridSpec) -> CliResult<()> {
    if grid != reference {
        return Err(CliError::Usage(format!(
            "{}: grid {:?} does not match {:?}",
            path.display(),
            grid.dims(),
            reference.dims()
        )));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Images as `path` (modality from the header) or `modality=path`.
    #[arg(required = true)]
    pub inputs: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse trained extractors (an `extractor.txt` from an earlier run) instead of fitting.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
}

pub fn register(common: &Common, args: RegisterArgs) -> CliResult<()> {
    let cfg = load_config(common)?;
    let mut manifest = Manifest::new("register", &cfg);
    let mut images = Vec::with_capacity(args.inputs.len());
    let mut grid: Option<GridSpec> = None;
    for spec in &args.inputs {
        let (tag, path) = match spec.split_once('=') {
            Some((m, p)) if !m.is_empty() && !m.contains(['/', '\\']) => (Some(m.to_string()), PathBuf::from(p)),
            _ => (None, PathBuf::from(spec)),
        };
        let (volume, header, bytes) = read_volume_at(&path)?;
        let image = volume
            .into_image()
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let modality = tag.or(header.modality).ok_or_else(|| {
            CliError::Usage(format!(
                "{}: no modality tag in the header; pass it as `modality=path`",
                path.display()
            ))
        })?;
        match &grid {
            Some(g) => expect_grid(&path, image.grid(), g)?,
            None => grid = Some(image.grid().clone()),
        }
        manifest.inputs.push(InputRecord {
            path: path.display().to_string(),
            modality: Some(modality.clone()),
            sha256: sha256_hex(&bytes),
        });
        images.push(TaggedImage::new(modality, image));
    }
    let engine = cfg.engine_config();
    let state = match &args.extractor {
        Some(p) => {
            let bytes = read_file(p)?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| CliError::Usage(format!("{}: not UTF-8 text", p.display())))?;
            let params = decode_extractor(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            manifest.extractor = Some(InputRecord {
                path: p.display().to_string(),
                modality: None,
                sha256: sha256_hex(&bytes),
            });
            register_group_scaled(&images, &params, &engine)?
        }
        None => register_group(&images, &engine)?,
    };

    let mut out = OutDir::create(&args.out)?;
    for (j, (f, b)) in state.transforms.forward.iter().zip(&state.transforms.inverse).enumerate() {
        out.volume(&format!("phi_{j:03}.vol"), Volume::Vector(f.clone()), None)?;
        out.volume(&format!("phi_inv_{j:03}.vol"), Volume::Vector(b.clone()), None)?;
    }
    out.volume("fused.vol", Volume::Categorical(state.fused()?), None)?;
    let mut codebooks = String::from("# image modality levels...\n");
    for (j, (img, cb)) in state.images.iter().zip(&state.codebooks).enumerate() {
        codebooks.push_str(&format!("{j} {} {}", img.modality, encode_codebooks(std::slice::from_ref(cb))));
    }
    out.write("codebooks.txt", codebooks.as_bytes())?;
    out.write("extractor.txt", encode_extractor(&state.extractor).as_bytes())?;
    out.write("trace.csv", encode_trace(&state.trace).as_bytes())?;
    out.write("state.grs", &encode_state(&state)?)?;
    out.finish(manifest)
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Forward displacements, one per image (identity if omitted).
    #[arg(long, num_args = 1..)]
    pub transforms: Vec<PathBuf>,
    /// Label volumes, one per image.
    #[arg(long, num_args = 1..)]
    pub labels: Vec<PathBuf>,
    /// Ground-truth displacements, one per image.
    #[arg(long = "ground-truth", num_args = 1..)]
    pub ground_truth: Vec<PathBuf>,
    /// Label volume whose nonzero voxels define the gWI foreground (default: every voxel).
    #[arg(long)]
    pub foreground: Option<PathBuf>,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Read a list of volumes sharing one grid, converting each with `pick`.
fn read_all<T>(
    paths: &[PathBuf],
    grid: &mut Option<GridSpec>,
    pick: impl Fn(Volume) -> groupreg::Result<T>,
) -> CliResult<Vec<T>> {
    paths
        .iter()
        .map(|p| {
            let (v, _, _) = read_volume_at(p)?;
            match grid {
                Some(g) => expect_grid(p, v.grid(), g)?,
                None => *grid = Some(v.grid().clone()),
            }
            pick(v).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        })
        .collect()
}

pub fn evaluate(common: &Common, args: EvaluateArgs) -> CliResult<()> {
    let cfg = load_config(common)?;
    if args.labels.is_empty() && args.ground_truth.is_empty() && args.transforms.is_empty() {
        return Err(CliError::Usage("evaluate needs --transforms, --labels or --ground-truth".into()));
    }
    let mut grid = None;
    let labels = read_all(&args.labels, &mut grid, Volume::into_labels)?;
    let truth = read_all(&args.ground_truth, &mut grid, Volume::into_vector)?;
    let mut transforms = read_all(&args.transforms, &mut grid, Volume::into_vector)?;
    let grid = grid.expect("at least one volume was read");
    let n = [labels.len(), truth.len(), transforms.len()].into_iter().max().unwrap_or(0);
    for (name, len) in [("--labels", labels.len()), ("--ground-truth", truth.len()), ("--transforms", transforms.len())] {
        if len != 0 && len != n {
            return Err(CliError::Usage(format!("{name} lists {len} files but the group has {n} images")));
        }
    }
    if n < 2 {
        return Err(CliError::Usage("groupwise metrics need at least two images".into()));
    }
    if transforms.is_empty() {
        transforms = vec![VectorField::zeros(grid.clone()); n];
    }
    let foreground = match &args.foreground {
        Some(p) => {
            let (v, _, _) = read_volume_at(p)?;
            expect_grid(p, v.grid(), &grid)?;
            v.into_labels()
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
                .foreground()
        }
        None => vec![true; grid.len()],
    };

    let mut csv = String::from("metric,class,value\n");
    if !labels.is_empty() {
        let warped: Vec<LabelField> = warped_labels(&labels, &transforms)?;
        let classes: Vec<u32> = if cfg.evaluate.classes.is_empty() {
            (1..labels.iter().map(LabelField::classes).max().unwrap_or(1)).collect()
        } else {
            cfg.evaluate.classes.clone()
        };
        csv.push_str(&format!("dsc,all,{}\n", groupwise_dice(&warped, None)?));
        for &c in &classes {
            csv.push_str(&format!("dsc,{c},{}\n", groupwise_dice(&warped, Some(c))?));
        }
        for &c in &classes {
            let r = groupwise_assd(&warped, c)?;
            csv.push_str(&format!("assd,{c},{}\n", r.mean));
            csv.push_str(&format!("assd_excluded_pairs,{c},{}\n", r.excluded.len()));
        }
    }
    if !truth.is_empty() {
        csv.push_str(&format!(
            "gwi,all,{}\n",
            groupwise_warping_index(&truth, &transforms, &foreground)?
        ));
    }
    csv.push_str(&format!(
        "negative_jacobian_percent,all,{}\n",
        negative_jacobian_fraction(&transforms, None)?
    ));
    write_file(&args.out, csv.as_bytes())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(common: &Common, args: SynthArgs) -> CliResult<()> {
    let cfg = load_config(common)?;
    let spec = cfg.phantom_spec();
    let group = make_phantom_group(&spec)?;
    let mut out = OutDir::create(&args.out)?;
    out.volume("anatomy.vol", Volume::Label(group.anatomy.clone()), None)?;
    for (j, img) in group.images.iter().enumerate() {
        out.volume(&format!("image_{j:03}.vol"), Volume::Image(img.image.clone()), Some(&img.modality))?;
        out.volume(&format!("label_{j:03}.vol"), Volume::Label(group.labels[j].clone()), None)?;
        out.volume(&format!("gt_{j:03}.vol"), Volume::Vector(group.displacements[j].clone()), None)?;
    }
    let mut levels = String::from("# modality levels per class\n");
    for (m, cb) in spec.modalities.iter().zip(&group.codebooks) {
        levels.push_str(&format!("{m} {}", encode_codebooks(&[groupreg::generative::IntensityCodebook::new(cb.clone())?])));
    }
    out.write("codebooks.txt", levels.as_bytes())?;
    out.finish(Manifest::new("synth", &cfg))
}

#[derive(Debug, Args)]
pub struct PlotdataArgs {
    /// A state file written by `register`.
    #[arg(long, conflicts_with = "trace")]
    pub state: Option<PathBuf>,
    /// A `trace.csv` written by `register`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Also run the group-size sweep from the configuration.
    #[arg(long)]
    pub sweep: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn plotdata(common: &Common, args: PlotdataArgs) -> CliResult<()> {
    let cfg = load_config(common)?;
    if args.state.is_none() && args.trace.is_none() && !args.sweep {
        return Err(CliError::Usage("plotdata needs --state, --trace or --sweep".into()));
    }
    let mut out = OutDir::create(&args.out)?;
    let mut manifest = Manifest::new("plotdata", &cfg);
    let mut record = |p: &Path, bytes: &[u8]| {
        manifest.inputs.push(InputRecord {
            path: p.display().to_string(),
            modality: None,
            sha256: sha256_hex(bytes),
        })
    };
    if let Some(p) = &args.state {
        let bytes = read_file(p)?;
        record(p, &bytes);
        let state = groupreg::io::state::decode_state(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        out.write("trace.csv", encode_trace(&state.trace).as_bytes())?;
        out.write("velocity_norms.csv", velocity_norms_csv(&state).as_bytes())?;
    }
    if let Some(p) = &args.trace {
        let bytes = read_file(p)?;
        record(p, &bytes);
        let text = String::from_utf8_lossy(&bytes);
        let trace = decode_trace(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        out.write("trace.csv", encode_trace(&trace).as_bytes())?;
    }
    if args.sweep {
        let (_, reports) = group_size_sweep(&cfg.phantom_spec(), &cfg.engine_config(), &cfg.sweep.group_sizes)?;
        out.write("sweep.csv", sweep_csv(&reports).as_bytes())?;
    }
    out.finish(manifest)
}

