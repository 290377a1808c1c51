//! BLEU and METEOR on a handful of captions with several references each.

use graphcap::metrics::{EvalRecord, MetricReport};
use graphcap::Result;

pub fn run_example() -> Result<MetricReport> {
    let records = vec![
        EvalRecord::from_strs(
            1,
            "a bird is perched on a rock .",
            &["a bird perched on a large rock .", "a small bird sitting on a rock ."],
        ),
        EvalRecord::from_strs(2, "two dogs play in the grass .", &["a dog plays in the grass ."]),
        EvalRecord::from_strs(3, "a man riding a horse .", &["a man rides a brown horse .", "a person on a horse ."]),
    ];
    let report = MetricReport::compute(&records, 0)?;
    println!("{}", MetricReport::table_header());
    println!("{}", report.table_row("example"));
    print!("{}", report.to_kv());
    Ok(report)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
