//! Trains on a 200-image synthetic corpus, then compares METEOR on the
//! annotated graphs against the same graphs with half the object labels
//! replaced at random.

#[path = "overfit_toy.rs"]
#[allow(dead_code)]
mod overfit_toy;

use graphcap::dataset::Vocabulary;
use graphcap::eval::{evaluate_model, GraphSource};
use graphcap::metrics::MetricReport;
use graphcap::model::DecodeConfig;
use graphcap::{toy, Result, Variant};

pub struct Comparison {
    pub gold: MetricReport,
    pub corrupted: MetricReport,
}

pub fn compare(variant: Variant, pairs: usize, steps: usize, seed: u64) -> Result<Comparison> {
    let (_, model) = overfit_toy::overfit(variant, pairs, steps, seed)?;
    let labels = toy::labels();
    let records = toy::corpus(pairs, seed)?;
    let captions: Vec<&str> = records.iter().map(|r| r.captions[0].as_str()).collect();
    let vocab = Vocabulary::build(&captions)?;
    let corrupted = toy::corrupt_labels(&records, 0.5, &labels, seed + 1);
    let decode = DecodeConfig::default();
    let gold = evaluate_model(&model, &records, &vocab, &labels, GraphSource::Gold, usize::MAX, &decode)?;
    let bad = evaluate_model(&model, &corrupted, &vocab, &labels, GraphSource::Gold, usize::MAX, &decode)?;
    Ok(Comparison {
        gold: gold.report,
        corrupted: bad.report,
    })
}

pub fn run_example() -> Result<Comparison> {
    let c = compare(Variant::Att, 200, 4000, 11)?;
    println!("{}", MetricReport::table_header());
    println!("{}", c.gold.table_row("gold"));
    println!("{}", c.corrupted.table_row("corrupted 50%"));
    Ok(c)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
