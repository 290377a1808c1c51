//! Picks the detection confidence threshold on a validation split.
//!
//! A model is overfit on 20 synthetic images. The validation split holds the
//! same images in detector form: the true objects at confidence 0.5 and two
//! distractor objects at 0.3. Only a threshold between the two recovers the
//! training graphs.

#[path = "overfit_toy.rs"]
#[allow(dead_code)]
mod overfit_toy;

use std::path::Path;

use graphcap::checkpoint::save_checkpoint;
use graphcap::cli::{cmd_sweep_threshold, RunConfig, SweepResult};
use graphcap::dataset::{write_split, Vocabulary};
use graphcap::{toy, Result, Variant};

pub fn sweep_in(dir: &Path, variant: Variant) -> Result<SweepResult> {
    let seed = 7;
    let (_, model) = overfit_toy::overfit(variant, 20, 2000, seed)?;
    let records = toy::corpus(20, seed)?;
    let captions: Vec<&str> = records.iter().map(|r| r.captions[0].as_str()).collect();
    Vocabulary::build(&captions)?.save(&dir.join("vocab.txt"))?;
    toy::labels().save(&dir.join("objects.txt"), &dir.join("predicates.txt"))?;
    save_checkpoint(&model, None, &dir.join("model.gcap"))?;
    let val = toy::detection_fixture(&records, 2, 0.5, 0.3, seed)?;
    write_split(&dir.join("val.jsonl"), &val)?;
    let config = "\
objects = objects.txt
predicates = predicates.txt
vocab = vocab.txt
checkpoint = model.gcap
val = val.jsonl
out = sweep
thresholds = 0.2, 0.4, 0.6, 0.8
max_nodes = 4
";
    std::fs::write(dir.join("sweep.conf"), config).map_err(|e| graphcap::Error::io(dir, e))?;
    cmd_sweep_threshold(&RunConfig::load(&dir.join("sweep.conf"))?)
}

pub fn run_example() -> Result<SweepResult> {
    let dir = std::env::temp_dir().join(format!("graphcap-sweep-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| graphcap::Error::io(&dir, e))?;
    let result = sweep_in(&dir, Variant::Base)?;
    print!("{}", result.to_tsv());
    let _ = std::fs::remove_dir_all(&dir);
    Ok(result)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
