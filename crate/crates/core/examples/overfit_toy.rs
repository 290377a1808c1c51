//! Overfits a 20-caption synthetic corpus and checks that greedy decoding
//! reproduces the training captions.

use std::time::Instant;

use graphcap::dataset::Vocabulary;
use graphcap::model::{samples_from_records, CaptionModel, ModelConfig};
use graphcap::train::{mean_loss, train, TrainConfig};
use graphcap::{toy, Result, Variant};

pub struct OverfitResult {
    pub variant: Variant,
    pub steps: usize,
    pub final_loss: f64,
    pub exact: usize,
    pub total: usize,
    pub seconds: f64,
}

pub fn overfit(variant: Variant, pairs: usize, max_steps: usize, seed: u64) -> Result<(OverfitResult, CaptionModel)> {
    let start = Instant::now();
    let labels = toy::labels();
    let records = toy::corpus(pairs, seed)?;
    let captions: Vec<&str> = records.iter().map(|r| r.captions[0].as_str()).collect();
    let vocab = Vocabulary::build(&captions)?;
    let samples = samples_from_records(&records, &vocab, &labels)?;
    let mut model = CaptionModel::new(
        ModelConfig::small(variant, vocab.len(), labels.joint_size(), 32, 64),
        seed,
    )?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs: usize::MAX,
        max_steps: Some(max_steps),
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &samples, &cfg, None, |_, _, _| Ok(()))?;
    let final_loss = mean_loss(&model, &samples)?;
    let exact = samples
        .iter()
        .filter(|s| model.greedy_decode(&s.graph, 20).map(|y| y == s.tokens).unwrap_or(false))
        .count();
    Ok((
        OverfitResult {
            variant,
            steps: outcome.steps,
            final_loss,
            exact,
            total: samples.len(),
            seconds: start.elapsed().as_secs_f64(),
        },
        model,
    ))
}

pub fn run_example() -> Result<Vec<OverfitResult>> {
    let mut out = Vec::new();
    for variant in [Variant::Base, Variant::Att] {
        let (r, _) = overfit(variant, 20, 2000, 7)?;
        println!(
            "{:<12} {} steps  loss {:.4}  exact {}/{}  {:.1}s",
            variant.to_string(),
            r.steps,
            r.final_loss,
            r.exact,
            r.total,
            r.seconds
        );
        out.push(r);
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
