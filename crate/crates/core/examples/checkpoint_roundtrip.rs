//! Saves a model with optimizer state and reloads it bit for bit.

use graphcap::checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
use graphcap::dataset::Vocabulary;
use graphcap::model::{samples_from_records, CaptionModel, ModelConfig};
use graphcap::train::{mean_loss, train, TrainConfig};
use graphcap::{toy, Result, Variant};

pub fn run_example() -> Result<(bool, bool)> {
    let labels = toy::labels();
    let records = toy::corpus(8, 3)?;
    let captions: Vec<&str> = records.iter().map(|r| r.captions[0].as_str()).collect();
    let vocab = Vocabulary::build(&captions)?;
    let samples = samples_from_records(&records, &vocab, &labels)?;
    let mut model = CaptionModel::new(ModelConfig::small(Variant::EncAtt, vocab.len(), labels.joint_size(), 16, 24), 3)?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs: 3,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &samples, &cfg, None, |_, _, _| Ok(()))?;
    let bytes = checkpoint_bytes(&model, Some(&outcome.adam));
    let restored = checkpoint_from_bytes(&bytes)?;
    let same_bytes = checkpoint_bytes(&restored.model, restored.adam.as_ref()) == bytes;
    let before = mean_loss(&model, &samples)?;
    let after = mean_loss(&restored.model, &samples)?;
    println!("{} bytes, {} tensors", bytes.len(), model.params.len());
    println!("re-saved identical: {same_bytes}");
    println!("loss before {before:?} after {after:?}");
    Ok((same_bytes, before.to_bits() == after.to_bits()))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
