//! Trains MiniVGG on a synthetic family dataset and reports test accuracy.
//!
//! Usage: cargo run --release --example generalization -- [iters] [lr0] [decay] [decay_every] [sqrt|linear] [seed]

use std::time::Instant;

use rnadot::bppm::EnergyModel;
use rnadot::dataset::{self, BppmSource, DatasetConfig, Split};
use rnadot::imaging::Transfer;
use rnadot::nn::{ModelSpec, TrainConfig};
use rnadot::pipeline::{self, SplitData};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map_or(Ok(600), |s| s.parse())?;
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let lr0: f64 = arg(2, "0.01").parse()?;
    let decay_factor: f64 = arg(3, "0.25").parse()?;
    let decay_every: usize = arg(4, "50").parse()?;
    let transfer = if arg(5, "linear") == "sqrt" { Transfer::Sqrt } else { Transfer::Linear };
    let seed: u64 = arg(6, "7").parse()?;
    let out = std::path::PathBuf::from(format!("target/generalization-{}-{seed}", arg(5, "linear")));
    let t = Instant::now();
    let families = dataset::synth_families(20, 10, 120, 0.15, &mut dataset::stream_rng(seed, "synth", &[]));
    let cfg = DatasetConfig { min_len: 1, max_len: 10_000, split: Some((14, 3, 3)), reps: 20, seed, ..Default::default() };
    let model = EnergyModel::default();
    let (manifest, fams) = dataset::build_manifest(families, &cfg, &model)?;
    let seqs: Vec<_> = fams.into_iter().flat_map(|f| f.members).collect();
    let manifest = dataset::materialize(&manifest, &seqs, &BppmSource::Compute { model, prune: None }, transfer, &out)?;
    println!("materialized {} records in {:.1?}", manifest.records.len(), t.elapsed());
    let load = |s| SplitData::load(&out, &manifest, s);
    let (train, val, test) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);
    let tcfg = TrainConfig { batch: 30, ratio: (2, 1), iterations: iters, lr0, decay_factor, decay_every, seed, ..Default::default() };
    let t = Instant::now();
    let res = pipeline::train(&ModelSpec::minivgg(64), &tcfg, &train, Some(&val))?;
    println!("trained {iters} iterations in {:.1?}", t.elapsed());
    print!("{}", res.log.lines().filter(|l| !l.ends_with('-')).collect::<Vec<_>>().join("\n"));
    println!();
    println!("best iter {} val {:?}", res.best_iter, res.best_val);
    println!("test {}", pipeline::evaluate(&res.best, &test)?);
    Ok(())
}
