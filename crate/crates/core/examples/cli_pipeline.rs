//! The command-line workflow end to end, driven in-process:
//! prepare, train, generate, evaluate.

use std::path::Path;

use graphcap::cli::run;
use graphcap::dataset::write_split;
use graphcap::{toy, Result};

pub fn pipeline_in(dir: &Path) -> Result<Vec<i32>> {
    let records = toy::corpus(24, 5)?;
    toy::labels().save(&dir.join("objects.txt"), &dir.join("predicates.txt"))?;
    write_split(&dir.join("train.jsonl"), &records[..20])?;
    write_split(&dir.join("val.jsonl"), &records[20..])?;
    write_split(&dir.join("test.jsonl"), &records[..6])?;
    let config = "\
# small model for a quick run
objects = objects.txt
predicates = predicates.txt
train = train.jsonl
val = val.jsonl
test = test.jsonl
out = run
variant = att
embed_dim = 16
hidden_dim = 32
gat_layers = 2
lr = 0.003
batch = 5
epochs = 30
seed = 1
";
    let conf = dir.join("run.conf");
    std::fs::write(&conf, config).map_err(|e| graphcap::Error::io(&conf, e))?;
    let conf = conf.to_string_lossy().to_string();
    let mut codes = Vec::new();
    for cmd in ["prepare", "train", "generate", "evaluate"] {
        codes.push(run(["graphcap", cmd, "--config", &conf]));
    }
    Ok(codes)
}

pub fn run_example() -> Result<Vec<i32>> {
    let dir = std::env::temp_dir().join(format!("graphcap-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| graphcap::Error::io(&dir, e))?;
    let codes = pipeline_in(&dir)?;
    for f in ["captions.tsv", "metrics.txt"] {
        if let Ok(text) = std::fs::read_to_string(dir.join("run").join(f)) {
            println!("== {f}\n{}", text.lines().take(6).collect::<Vec<_>>().join("\n"));
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(codes)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let codes = run_example()?;
    println!("exit codes: {codes:?}");
    Ok(())
}
