use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng;

use rnadot::bppm::{self, Bppm, EnergyModel};
use rnadot::dataset::{self, BppmSource, DatasetConfig, DatasetManifest, Split};
use rnadot::imaging::{self, Transfer};
use rnadot::nn::{Model, ModelSpec, TrainConfig};
use rnadot::pipeline::{self, SplitData};
use rnadot::seqio::{self, Family, RnaSequence};

/// RNA dot-plot pair images and same-family classification.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute base-pair probability matrices for every sequence of a FASTA file.
    Bppm(BppmArgs),
    /// Render a directory of BPPM files as resized PGM dot-plots.
    Render(RenderArgs),
    /// Build and materialize a family-disjoint pair dataset.
    Dataset(DatasetArgs),
    /// Train a classifier on a materialized dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Compare the dynamic program against exhaustive enumeration.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 0.6163)]
    rt: f64,
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    e_gc: f64,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    e_au: f64,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    e_gu: f64,
    #[arg(long, default_value_t = 3)]
    min_hairpin: usize,
    /// Outside-pass prune threshold (default: 0 up to length 64, 1e-6 above).
    #[arg(long)]
    prune: Option<f64>,
    /// Read `<family>__<id>.bppm` files from this directory instead of computing.
    #[arg(long, conflicts_with = "prune")]
    import_bppm: Option<PathBuf>,
}

impl ModelArgs {
    fn model(&self) -> Result<EnergyModel> {
        let m = EnergyModel {
            e_gc: self.e_gc,
            e_au: self.e_au,
            e_gu: self.e_gu,
            rt: self.rt,
            min_hairpin: self.min_hairpin,
        };
        m.validate()?;
        Ok(m)
    }

    fn source(&self) -> Result<BppmSource> {
        if let Some(p) = self.prune {
            ensure!((0.0..1.0).contains(&p), "--prune must be in [0, 1)");
        }
        Ok(match &self.import_bppm {
            Some(dir) => BppmSource::Import(dir.clone()),
            None => BppmSource::Compute {
                model: self.model()?,
                prune: self.prune,
            },
        })
    }
}

#[derive(Args)]
struct BppmArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Family for headers without a `FAMILY/` prefix.
    #[arg(long)]
    family: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    bppm: PathBuf,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long)]
    out: PathBuf,
    /// Use sqrt(P) as intensity instead of P.
    #[arg(long)]
    sqrt: bool,
}

#[derive(Args)]
struct DatasetArgs {
    /// A FASTA/Stockholm file, or a directory of them (file stem = default family).
    #[arg(long, required_unless_present = "synth")]
    families: Option<PathBuf>,
    /// Synthetic families instead of input files: F,M,L,MU.
    #[arg(long, conflicts_with = "families")]
    synth: Option<String>,
    #[arg(long, default_value_t = 200)]
    min_len: usize,
    #[arg(long, default_value_t = 260)]
    max_len: usize,
    #[arg(long, default_value_t = 2)]
    min_members: usize,
    #[arg(long, default_value_t = 30)]
    cap: usize,
    /// Family counts TRAIN,VAL,TEST (default 70/10/rest).
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long)]
    sqrt: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// `minivgg`, `linear`, or a comma-separated layer list.
    #[arg(long, default_value = "minivgg")]
    arch: String,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Different:same batch composition.
    #[arg(long, default_value = "1:1")]
    ratio: String,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.25)]
    decay: f64,
    #[arg(long, default_value_t = 50)]
    decay_every: usize,
    #[arg(long, default_value_t = 50)]
    validate_every: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 16)]
    n_max: usize,
    #[arg(long, default_value_t = 50)]
    cases: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Bppm(a) => cmd_bppm(a)?,
        Command::Render(a) => cmd_render(a)?,
        Command::Dataset(a) => cmd_dataset(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::OracleCheck(a) => return cmd_oracle(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn cmd_bppm(a: BppmArgs) -> Result<()> {
    let seqs = seqio::parse_fasta(&read(&a.input)?, a.family.as_deref())
        .with_context(|| format!("parsing {}", a.input.display()))?;
    create_dir(&a.out)?;
    let source = a.model.source()?;
    for s in &seqs {
        let stem = dataset::file_stem(&s.key());
        let b = match &source {
            BppmSource::Compute { model, prune } => {
                bppm::compute_bppm(s, model, prune.unwrap_or_else(|| bppm::default_prune_threshold(s.len())))
            }
            BppmSource::Import(dir) => {
                let path = dir.join(format!("{stem}.bppm"));
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let b = Bppm::from_text(&text).with_context(|| format!("parsing {}", path.display()))?;
                ensure!(b.n() == s.len(), "{}: size {} but {} has length {}", path.display(), b.n(), s, s.len());
                b
            }
        };
        let path = a.out.join(format!("{stem}.bppm"));
        fs::write(&path, b.to_text()).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} BPPMs to {}", seqs.len(), a.out.display());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    ensure!(a.side > 0, "--side must be positive");
    create_dir(&a.out)?;
    let transfer = if a.sqrt { Transfer::Sqrt } else { Transfer::Linear };
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.bppm)
        .with_context(|| format!("listing {}", a.bppm.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "bppm"));
    paths.sort();
    for p in &paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let b = Bppm::from_text(&text).with_context(|| format!("parsing {}", p.display()))?;
        let img = imaging::resize_bilinear(&imaging::bppm_to_image_with(&b, transfer), a.side);
        let out = a.out.join(p.with_extension("pgm").file_name().unwrap());
        fs::write(&out, imaging::write_pgm(&img)).with_context(|| format!("writing {}", out.display()))?;
    }
    println!("rendered {} dot-plots to {}", paths.len(), a.out.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, sep: char, n: usize, what: &str) -> Result<Vec<T>> {
    let parts: Vec<T> = s
        .split(sep)
        .map(|p| p.trim().parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow::anyhow!("cannot parse {what} {s:?}"))?;
    ensure!(parts.len() == n, "{what} needs {n} values separated by '{sep}', got {s:?}");
    Ok(parts)
}

fn load_families(path: &Path) -> Result<Vec<Family>> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        v.retain(|p| p.is_file());
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut seqs: Vec<RnaSequence> = Vec::new();
    for f in &files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("unknown");
        let bytes = read(f)?;
        let ext = f.extension().and_then(|e| e.to_str()).unwrap_or("");
        if matches!(ext, "sto" | "stk" | "stockholm") {
            let fams = seqio::parse_stockholm(&bytes, stem).with_context(|| format!("parsing {}", f.display()))?;
            seqs.extend(fams.into_iter().flat_map(|f| f.members));
        } else {
            seqs.extend(seqio::parse_fasta(&bytes, Some(stem)).with_context(|| format!("parsing {}", f.display()))?);
        }
    }
    Ok(seqio::group_families(seqs)?)
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let split = match &a.split {
        Some(s) => {
            let v: Vec<usize> = parse_list(s, ',', 3, "--split")?;
            Some((v[0], v[1], v[2]))
        }
        None => None,
    };
    let families = match (&a.families, &a.synth) {
        (Some(p), _) => load_families(p)?,
        (None, Some(s)) => {
            let v: Vec<f64> = parse_list(s, ',', 4, "--synth")?;
            ensure!(v[..3].iter().all(|x| x.fract() == 0.0 && *x >= 1.0), "--synth F,M,L must be positive integers");
            ensure!((0.0..=1.0).contains(&v[3]), "--synth MU must be in [0, 1]");
            let mut rng = dataset::stream_rng(a.seed, "synth", &[]);
            dataset::synth_families(v[0] as usize, v[1] as usize, v[2] as usize, v[3], &mut rng)
        }
        (None, None) => bail!("one of --families or --synth is required"),
    };
    let cfg = DatasetConfig {
        min_len: a.min_len,
        max_len: a.max_len,
        min_members: a.min_members,
        cap: a.cap,
        split,
        reps: a.reps,
        seed: a.seed,
        image_side: a.side,
    };
    let model = a.model.model()?;
    let (manifest, selected) = dataset::build_manifest(families, &cfg, &model)?;
    let seqs: Vec<RnaSequence> = selected.into_iter().flat_map(|f| f.members).collect();
    let transfer = if a.sqrt { Transfer::Sqrt } else { Transfer::Linear };
    let manifest = dataset::materialize(&manifest, &seqs, &a.model.source()?, transfer, &a.out)?;
    let plan = &manifest.header.plan;
    println!(
        "families train/val/test: {}/{}/{}",
        plan.train.len(),
        plan.val.len(),
        plan.test.len()
    );
    for s in Split::ALL {
        println!(
            "{:5} same {:7} different {:7}",
            s.as_str(),
            manifest.count(s, dataset::Label::Same),
            manifest.count(s, dataset::Label::Different)
        );
    }
    println!("wrote {}", a.out.join("manifest.jsonl").display());
    Ok(())
}

fn load_manifest(data: &Path) -> Result<DatasetManifest> {
    let path = data.join("manifest.jsonl");
    DatasetManifest::read(&path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ratio: Vec<usize> = parse_list(&a.ratio, ':', 2, "--ratio")?;
    let cfg = TrainConfig {
        lr0: a.lr,
        momentum: a.momentum,
        decay_factor: a.decay,
        decay_every: a.decay_every,
        batch: a.batch,
        ratio: (ratio[0], ratio[1]),
        iterations: a.iters,
        validate_every: a.validate_every,
        seed: a.seed,
    };
    cfg.validate()?;
    let manifest = load_manifest(&a.data)?;
    let spec = ModelSpec::from_arch(&a.arch, manifest.header.image_side)?;
    let train = SplitData::load(&a.data, &manifest, Split::Train)?;
    let val = SplitData::load(&a.data, &manifest, Split::Val)?;
    let out = pipeline::train(&spec, &cfg, &train, Some(&val))?;
    create_dir(&a.out)?;
    let ckpt = a.out.join("best.ckpt");
    fs::write(&ckpt, out.best.save()).with_context(|| format!("writing {}", ckpt.display()))?;
    let log = a.out.join("train.log");
    fs::write(&log, &out.log).with_context(|| format!("writing {}", log.display()))?;
    match out.best_val {
        Some(m) => println!("best checkpoint after {} iterations: val {m}", out.best_iter),
        None => println!("no validation ran; saved the model after {} iterations", out.best_iter),
    }
    println!("wrote {} and {}", ckpt.display(), log.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = Model::load(&read(&a.checkpoint)?).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let manifest = load_manifest(&a.data)?;
    let data = SplitData::load(&a.data, &manifest, a.split)?;
    let m = pipeline::evaluate(&model, &data)?;
    println!("split {} ({} records)", a.split.as_str(), data.len());
    println!("acc_diff {}\nacc_same {}\navg {}", m.acc_diff, m.acc_same, m.avg);
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> Result<ExitCode> {
    ensure!(
        (1..=bppm::MAX_ENUMERATION_LEN).contains(&a.n_max),
        "--n-max must be in 1..={}",
        bppm::MAX_ENUMERATION_LEN
    );
    let model = EnergyModel::default();
    let n_min = a.n_max.min(8);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for case in 0..a.cases {
        let mut rng = dataset::stream_rng(a.seed, "oracle-check", &[case as u64]);
        let n = rng.random_range(n_min..=a.n_max);
        let residues: String = (0..n).map(|_| b"ACGU"[rng.random_range(0..4)] as char).collect();
        let seq = RnaSequence::new(format!("case{case}"), "ORACLE", &residues)?;
        let diff = bppm::compute_bppm(&seq, &model, 0.0).max_abs_diff(&bppm::oracle_bppm(&seq, &model)?);
        worst = worst.max(diff);
        if diff.is_nan() || diff > a.tol {
            failures += 1;
            println!("MISMATCH {residues} max |dp - oracle| = {diff:e}");
        }
    }
    println!("{} cases, n in [{n_min}, {}], max |dp - oracle| = {worst:e}", a.cases, a.n_max);
    Ok(if failures == 0 {
        println!("ok");
        ExitCode::SUCCESS
    } else {
        println!("{failures} mismatches");
        ExitCode::FAILURE
    })
}
