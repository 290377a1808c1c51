use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use graphcap::checkpoint::load_checkpoint;
use graphcap::cli::RunConfig;
use graphcap::dataset::{write_split, DatasetRecord, Vocabulary};
use graphcap::scene_graph::{ObjectNode, SceneGraph};
use graphcap::{toy, CaptionModel};

fn graphcap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphcap"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = "\
objects = objects.txt
predicates = predicates.txt
train = train.jsonl
test = test.jsonl
out = run
variant = enc_att
embed_dim = 8
hidden_dim = 12
attn_dim = 6
lr = 0.003
batch = 4
epochs = 2
seed = 3
";

fn setup(dir: &Path) {
    let records = toy::corpus(12, 4).unwrap();
    toy::labels().save(&dir.join("objects.txt"), &dir.join("predicates.txt")).unwrap();
    write_split(&dir.join("train.jsonl"), &records[..8]).unwrap();
    let lonely = SceneGraph::new(vec![ObjectNode::new(0, "dog", 1.0)], vec![]).unwrap();
    let mut test = records[8..].to_vec();
    test.push(DatasetRecord::from_graph(99, &lonely, vec!["a dog .".into()]));
    write_split(&dir.join("test.jsonl"), &test).unwrap();
    fs::write(dir.join("run.conf"), CONFIG).unwrap();
}

#[test]
fn full_workflow_and_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let conf = ["--config", "run.conf"];

    assert_eq!(graphcap(dir, &[&["prepare"][..], &conf].concat()).status.code(), Some(0));
    let vocab = fs::read(dir.join("run/vocab.txt")).unwrap();
    assert_eq!(graphcap(dir, &[&["prepare"][..], &conf].concat()).status.code(), Some(0));
    assert_eq!(fs::read(dir.join("run/vocab.txt")).unwrap(), vocab);
    let stats = fs::read_to_string(dir.join("run/stats.txt")).unwrap();
    assert!(stats.contains("train.max_object_nodes=2"), "{stats}");

    let out = graphcap(dir, &[&["train"][..], &conf].concat());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let log = fs::read_to_string(dir.join("run/train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let out = graphcap(dir, &[&["generate"][..], &conf].concat());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let caps = fs::read_to_string(dir.join("run/captions.tsv")).unwrap();
    assert_eq!(caps.lines().count(), 4);
    let rejected = fs::read_to_string(dir.join("run/rejected.tsv")).unwrap();
    assert!(rejected.starts_with("99\t"), "{rejected}");

    let sample = |out: &str| {
        let args = [
            &["generate"][..],
            &conf,
            &["--mode", "sample", "--temp", "0.8", "--vocab", "run/vocab.txt", "--checkpoint", "run/final.gcap"],
            &["--out", out],
        ]
        .concat();
        assert_eq!(graphcap(dir, &args).status.code(), Some(0));
        fs::read_to_string(dir.join(out).join("captions.tsv")).unwrap()
    };
    assert_eq!(sample("s1"), sample("s2"));

    let out = graphcap(dir, &[&["evaluate"][..], &conf].concat());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.join("run/metrics.txt")).unwrap();
    let keys: Vec<&str> = metrics.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["B-1", "B-2", "B-3", "B-4", "METEOR"]);
}

#[test]
fn data_errors_exit_two_and_name_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let out = graphcap(dir, &["prepare", "--config", "run.conf", "--train", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.jsonl"), "{}", stderr(&out));

    fs::write(dir.join("bad.jsonl"), "{\"schema\": 1}\nnot json\n").unwrap();
    let out = graphcap(dir, &["prepare", "--config", "run.conf", "--train", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));

    fs::write(dir.join("broken.gcap"), b"GCAP\x01\x00").unwrap();
    assert_eq!(graphcap(dir, &["prepare", "--config", "run.conf"]).status.code(), Some(0));
    let out = graphcap(dir, &["generate", "--config", "run.conf", "--checkpoint", "broken.gcap"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    fs::write(dir.join("typo.conf"), "lerning_rate = 0.1\n").unwrap();
    assert_eq!(graphcap(dir, &["train", "--config", "typo.conf"]).status.code(), Some(1));
    assert_eq!(graphcap(dir, &["train", "--config", "run.conf", "--lr=-1"]).status.code(), Some(1));
    assert_eq!(graphcap(dir, &["bogus"]).status.code(), Some(1));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    assert_eq!(graphcap(dir, &["prepare", "--config", "run.conf"]).status.code(), Some(0));
    let out = graphcap(dir, &["train", "--config", "run.conf", "--lr", "0"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("learning rate is 0"));
    let cfg = RunConfig::load(&dir.join("run.conf")).unwrap();
    let vocab = Vocabulary::load(&dir.join("run/vocab.txt")).unwrap();
    let init = CaptionModel::new(cfg.model_config(vocab.len(), toy::labels().joint_size()), 3).unwrap();
    let trained = load_checkpoint(&dir.join("run/final.gcap")).unwrap().model;
    assert_eq!(trained.params, init.params);
}

#[test]
fn gradcheck_command_and_fault_injection() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = graphcap(dir, &["gradcheck", "--variant", "base", "--out", "gc"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let tsv = fs::read_to_string(dir.join("gc/gradcheck.tsv")).unwrap();
    assert!(tsv.lines().any(|l| l.starts_with("dec/lstm/w_ih\t")));

    let out = graphcap(dir, &["gradcheck", "--variant", "base", "--out", "gc", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("gradient check failed"), "{}", stderr(&out));
}
