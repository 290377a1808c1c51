//! Small corpora with scores worked out by hand.

use graphcap::metrics::EvalRecord;

pub struct BleuFixture {
    pub name: &'static str,
    pub records: Vec<EvalRecord>,
    /// Expected B-1..B-4.
    pub expected: [f64; 4],
}

pub struct MeteorFixture {
    pub name: &'static str,
    pub record: EvalRecord,
    pub expected: f64,
}

fn rec(h: &str, refs: &[&str]) -> EvalRecord {
    EvalRecord::from_strs(0, h, refs)
}

pub fn bleu_fixtures() -> Vec<BleuFixture> {
    let third = (-1.0f64 / 3.0).exp();
    let e04 = (-0.4f64).exp();
    vec![
        BleuFixture {
            name: "brevity penalty, 3 of 4 words",
            records: vec![rec("the cat sat", &["the cat sat down"])],
            expected: [third, third, third, 0.0],
        },
        BleuFixture {
            name: "exact match",
            records: vec![rec("a dog on a table .", &["a dog on a table ."])],
            expected: [1.0; 4],
        },
        BleuFixture {
            name: "clipped repeated unigram",
            records: vec![rec("the the the the the the the", &["the cat is on the mat"])],
            expected: [2.0 / 7.0, 0.0, 0.0, 0.0],
        },
        BleuFixture {
            name: "one substitution in four",
            records: vec![rec("a b c d", &["a b x d"])],
            expected: [0.75, 0.5, 0.0, 0.0],
        },
        BleuFixture {
            name: "closest reference is the shorter one",
            records: vec![rec("a b c", &["a b c d e", "a b"])],
            expected: [1.0, 1.0, 1.0, 0.0],
        },
        BleuFixture {
            name: "length tie picks the shorter reference",
            records: vec![rec("a b c", &["a b c d", "a b"])],
            expected: [1.0, 1.0, 1.0, 0.0],
        },
        BleuFixture {
            name: "corpus-level brevity penalty",
            records: vec![rec("a b", &["a b c d"]), rec("x y z", &["x y z"])],
            expected: [e04, e04, e04, 0.0],
        },
        BleuFixture {
            name: "clip by the maximum over references",
            records: vec![rec("the the cat", &["the cat", "the the dog"])],
            expected: [1.0, 1.0, 0.0, 0.0],
        },
        BleuFixture {
            name: "repeated bigram clipping",
            records: vec![rec("a a b b", &["a b a b"])],
            expected: [1.0, (1.0f64 / 3.0).sqrt(), 0.0, 0.0],
        },
        BleuFixture {
            name: "empty hypothesis",
            records: vec![rec("", &["a b c"])],
            expected: [0.0; 4],
        },
        BleuFixture {
            name: "six of eight words",
            records: vec![rec(
                "one two three four five six",
                &["one two three four five six seven eight"],
            )],
            expected: [third; 4],
        },
        BleuFixture {
            name: "last word wrong",
            records: vec![rec("a b c d e", &["a b c d f"])],
            expected: [0.8, 0.6f64.sqrt(), 0.4f64.cbrt(), 0.2f64.powf(0.25)],
        },
    ]
}

pub fn meteor_fixtures() -> Vec<MeteorFixture> {
    vec![
        MeteorFixture {
            name: "perfect match of five",
            record: rec("a b c d e", &["a b c d e"]),
            expected: 0.996,
        },
        MeteorFixture {
            name: "stem-only match",
            record: rec("dogs", &["dog"]),
            expected: 0.5,
        },
        MeteorFixture {
            name: "no overlap",
            record: rec("x y", &["a b"]),
            expected: 0.0,
        },
        MeteorFixture {
            name: "prefix of a longer reference",
            record: rec("the cat sat", &["the cat sat on the mat"]),
            expected: 265.0 / 513.0,
        },
        MeteorFixture {
            name: "reversed order",
            record: rec("a b c", &["c b a"]),
            expected: 0.5,
        },
        MeteorFixture {
            name: "exact and stem matches in two chunks",
            record: rec("the dogs are running", &["the dog is run"]),
            expected: 23.0 / 36.0,
        },
        MeteorFixture {
            name: "best of two references",
            record: rec("a b", &["x y", "a b"]),
            expected: 15.0 / 16.0,
        },
        MeteorFixture {
            name: "repeated hypothesis word",
            record: rec("a a", &["a"]),
            expected: 5.0 / 11.0,
        },
        MeteorFixture {
            name: "gap in the hypothesis",
            record: rec("a x b", &["a b"]),
            expected: 10.0 / 21.0,
        },
        MeteorFixture {
            name: "swapped pair, extra reference word",
            record: rec("b a", &["a b c"]),
            expected: 10.0 / 29.0,
        },
        MeteorFixture {
            name: "exact matches take precedence over stems",
            record: rec("dog dogs", &["dogs dog"]),
            expected: 0.5,
        },
        MeteorFixture {
            name: "empty hypothesis",
            record: rec("", &["a"]),
            expected: 0.0,
        },
    ]
}
