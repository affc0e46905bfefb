use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_conceptscope"));
    cmd.env_remove("CONCEPTSCOPE_WORKERS");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_corpus(dir: &Path, name: &str, captions: &[&str]) -> PathBuf {
    let shard = dir.join(format!("{name}.jsonl"));
    let lines: String = captions
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}\n", serde_json::json!({ "id": 100 + i, "caption": c })))
        .collect();
    fs::write(&shard, lines).unwrap();
    let manifest = dir.join(format!("{name}.json"));
    let body = serde_json::json!({
        "corpus_name": name,
        "format_version": 1,
        "shards": [format!("{name}.jsonl")],
        "sample_count": captions.len(),
    });
    fs::write(&manifest, body.to_string()).unwrap();
    manifest
}

struct Fixture {
    dir: tempfile::TempDir,
    corpus: PathBuf,
    index: PathBuf,
    tags: PathBuf,
    concepts: PathBuf,
}

/// Four pairs: two share a concept between caption and image, two do not.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(
        dir.path(),
        "tiny",
        &[
            "A cat sitting in a tree",
            "a red car",
            "a car parked",
            "the car",
        ],
    );
    let tags = dir.path().join("tags.csv");
    fs::write(
        &tags,
        "sample_index,concept,score\n0,cat,0.9\n1,dog,0.8\n2,dog,0.55\n3,tree,0.75\n3,car,0.95\n",
    )
    .unwrap();
    let concepts = dir.path().join("concepts.txt");
    fs::write(&concepts, "cat\ndog\ntree\ncar\n").unwrap();
    let index = dir.path().join("tiny.cfix");
    ok_json(&["index", "--corpus", p(&corpus), "--out", p(&index)]);
    Fixture {
        dir,
        corpus,
        index,
        tags,
        concepts,
    }
}

#[test]
fn index_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(
        dir.path(),
        "three",
        &[
            "A quick brown fox",
            "The fox jumps over the lazy dog",
            "A red car",
        ],
    );
    let a = dir.path().join("a.cfix");
    let b = dir.path().join("b.cfix");
    let report = ok_json(&["index", "--corpus", p(&corpus), "--out", p(&a)]);
    assert_eq!(report["result"]["sample_count"], 3);
    assert!(report["result"]["vocabulary_size"].as_u64().unwrap() >= 2);
    assert_eq!(report["tool"], "conceptscope");
    assert_eq!(report["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(report["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(!report["pipeline_fingerprint"].as_str().unwrap().is_empty());
    ok_json(&[
        "--workers",
        "1",
        "index",
        "--corpus",
        p(&corpus),
        "--out",
        p(&b),
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn empty_corpus_warns_and_writes_index() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), "empty", &[]);
    let out = dir.path().join("e.cfix");
    let result = run(&["index", "--corpus", p(&corpus), "--out", p(&out)]);
    assert!(result.status.success());
    assert!(String::from_utf8_lossy(&result.stderr).contains("warning"));
    assert!(out.is_file());
}

fn read_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn frequency_with_and_without_tags() {
    let f = fixture();
    let out = f.dir.path().join("freq.csv");
    ok_json(&[
        "frequency",
        "--index",
        p(&f.index),
        "--tags",
        p(&f.tags),
        "--concepts",
        p(&f.concepts),
        "--out",
        p(&out),
    ]);
    assert_eq!(
        read_rows(&out),
        [
            "concept,text_count,image_count,matched_count",
            "cat,1,1,1",
            "dog,0,1,0",
            "tree,1,1,0",
            "car,3,1,1"
        ]
    );

    let text_only = f.dir.path().join("text.csv");
    let report = ok_json(&[
        "frequency",
        "--index",
        p(&f.index),
        "--concepts",
        p(&f.concepts),
        "--out",
        p(&text_only),
    ]);
    assert_eq!(report["config"]["text_only"], true);
    assert_eq!(read_rows(&text_only)[1], "cat,1,,");

    let low = f.dir.path().join("low.csv");
    ok_json(&[
        "frequency",
        "--index",
        p(&f.index),
        "--tags",
        p(&f.tags),
        "--concepts",
        p(&f.concepts),
        "--threshold",
        "0.5",
        "--out",
        p(&low),
    ]);
    let image_counts = |rows: Vec<String>| -> Vec<u64> {
        rows[1..]
            .iter()
            .map(|r| r.split(',').nth(2).unwrap().parse().unwrap())
            .collect()
    };
    let (strict, loose) = (image_counts(read_rows(&out)), image_counts(read_rows(&low)));
    assert!(strict.iter().zip(&loose).all(|(a, b)| a <= b));
    assert_eq!(loose[1], 2);
}

#[test]
fn misalignment_fixture_and_export() {
    let f = fixture();
    let export = f.dir.path().join("misaligned.csv");
    let report = ok_json(&[
        "misalignment",
        "--corpus",
        p(&f.corpus),
        "--index",
        p(&f.index),
        "--tags",
        p(&f.tags),
        "--concepts",
        p(&f.concepts),
        "--export",
        p(&export),
    ]);
    assert_eq!(report["result"]["degree"], 0.5);
    assert_eq!(report["result"]["degree_percent"], "50.00%");
    assert_eq!(
        read_rows(&export),
        [
            "sample_id,image_concepts,text_concepts",
            "101,dog,car",
            "102,,car"
        ]
    );

    let aligned = f.dir.path().join("aligned.csv");
    fs::write(
        &aligned,
        "sample_index,concept,score\n0,cat,1\n1,car,1\n2,car,1\n3,car,1\n",
    )
    .unwrap();
    let report = ok_json(&[
        "misalignment",
        "--corpus",
        p(&f.corpus),
        "--index",
        p(&f.index),
        "--tags",
        p(&aligned),
        "--concepts",
        p(&f.concepts),
    ]);
    assert_eq!(report["result"]["degree"], 0.0);
}

fn write_trend_inputs(dir: &Path, constant: bool) -> (PathBuf, PathBuf) {
    let freq = dir.join("f.csv");
    let perf = dir.join("p.csv");
    let mut f = String::from("concept,text_count\n");
    let mut s = String::from("concept,score\n");
    for i in 0..60u32 {
        let count = 10u64.pow(i % 6) * u64::from(1 + i % 7);
        f += &format!("c{i},{count}\n");
        if i != 59 {
            let score = if constant {
                0.5
            } else {
                0.1 * (count as f64).log10() + 0.05
            };
            s += &format!("c{i},{score}\n");
        }
    }
    fs::write(&freq, f).unwrap();
    fs::write(&perf, s).unwrap();
    (freq, perf)
}

#[test]
fn trend_reports_fit_and_unmatched() {
    let dir = tempfile::tempdir().unwrap();
    let (freq, perf) = write_trend_inputs(dir.path(), false);
    let report = ok_json(&[
        "trend",
        "--frequencies",
        p(&freq),
        "--performance",
        p(&perf),
    ]);
    let r = &report["result"];
    assert_eq!(r["unmatched_concepts"], serde_json::json!(["c59"]));
    assert!(r["binned"]["rho"].as_f64().unwrap() >= 0.95);
    assert_eq!(r["binned"]["significant"], true);
    assert_eq!(r["bin_edges"].as_array().unwrap().len(), 21);
    assert_eq!(report["config"]["field"], "text");

    let (freq, perf) = write_trend_inputs(dir.path(), true);
    let out = dir.path().join("trend.json");
    assert!(run(&[
        "trend",
        "--frequencies",
        p(&freq),
        "--performance",
        p(&perf),
        "--bins",
        "8",
        "--out",
        p(&out)
    ])
    .status
    .success());
    let written: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(written["result"]["binned"]["slope"], 0.0);
    assert_eq!(written["result"]["binned"]["significant"], false);
    assert_eq!(written["config"]["bins"], 8);
}

#[test]
fn tail_over_several_tables() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let mut ta = String::from("concept,text_count\n");
    let mut tb = ta.clone();
    for i in 0..400u64 {
        ta += &format!("c{i:03},{}\n", 1000 / (i + 1));
        tb += &format!("c{i:03},{}\n", 900 / (i + 1) + i % 3);
    }
    fs::write(&a, ta).unwrap();
    fs::write(&b, tb).unwrap();
    let report = ok_json(&[
        "tail",
        "--frequencies",
        p(&a),
        "--frequencies",
        p(&b),
        "--k",
        "290",
    ]);
    assert_eq!(report["result"]["bottom_k"].as_array().unwrap().len(), 290);
    assert_eq!(report["config"]["aggregation"], "min");
    assert!(report["result"]["fraction_below_mean"].as_f64().unwrap() > 0.5);
}

fn write_f32(path: &Path, rows: &[Vec<f32>]) {
    let bytes: Vec<u8> = rows
        .iter()
        .flatten()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    fs::write(path, bytes).unwrap();
    let side = format!("{}.json", path.display());
    fs::write(
        side,
        serde_json::json!({ "count": rows.len(), "dim": rows[0].len(), "dtype": "f32" })
            .to_string(),
    )
    .unwrap();
}

#[test]
fn cmc_self_match() {
    let dir = tempfile::tempdir().unwrap();
    let gallery = dir.path().join("g.f32");
    let rows = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    write_f32(&gallery, &rows);
    let labels = dir.path().join("g.txt");
    fs::write(&labels, "a\nb\nc\n").unwrap();
    let tail = dir.path().join("t.f32");
    write_f32(
        &tail,
        &[
            vec![0.0, 1.0, 0.1],
            vec![1.0, 0.0, 0.2],
            vec![0.0, 1.0, 0.3],
        ],
    );
    let report = ok_json(&[
        "cmc",
        "--queries",
        p(&gallery),
        "--query-labels",
        p(&labels),
        "--gallery",
        p(&gallery),
        "--gallery-labels",
        p(&labels),
        "--tail-queries",
        p(&tail),
        "--tail-query-labels",
        p(&labels),
    ]);
    assert_eq!(report["result"]["cmc"], serde_json::json!([1.0, 1.0, 1.0]));
    assert_eq!(report["result"]["k"], serde_json::json!([1, 2, 5]));
    assert!(report["result"]["delta_cmc_points"][0].as_f64().unwrap() > 0.0);
}

fn write_pgm(path: &Path, seed: u32) {
    let mut state = seed.wrapping_mul(2_654_435_761).max(1);
    let cells: Vec<u8> = (0..72)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            (state >> 24) as u8
        })
        .collect();
    let mut body = b"P5\n36 32\n255\n".to_vec();
    for y in 0..32 {
        for x in 0..36 {
            body.push(cells[(y / 4) * 9 + x / 4]);
        }
    }
    fs::write(path, body).unwrap();
}

#[test]
fn curate_fixture_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("img");
    fs::create_dir(&images).unwrap();
    let mut rows = Vec::new();
    let mut pool = String::from("image_id,class_name,embedding_row,phash_hex\n");
    for (c, class) in ["owl", "tram"].iter().enumerate() {
        for i in 0..12u32 {
            let id = format!("{class}{i:02}");
            let mut e = vec![0.1f32; 6];
            e[c] = 1.0;
            e[2 + (i as usize % 4)] += 0.2 * i as f32;
            pool += &format!("{id},{class},{},\n", rows.len());
            rows.push(e);
            // the last two images of each class are pixel copies of the first
            write_pgm(
                &images.join(format!("{id}.pgm")),
                if i >= 10 {
                    c as u32 * 100
                } else {
                    c as u32 * 100 + i
                },
            );
        }
    }
    let emb = dir.path().join("pool.f32");
    write_f32(&emb, &rows);
    let pool_path = dir.path().join("pool.csv");
    fs::write(&pool_path, pool).unwrap();
    let exclude = dir.path().join("exclude.txt");
    fs::write(&exclude, "tram05\n").unwrap();
    let out = dir.path().join("curated.csv");
    let report = ok_json(&[
        "curate",
        "--pool",
        p(&pool_path),
        "--embeddings",
        p(&emb),
        "--images",
        p(&images),
        "--exclude",
        p(&exclude),
        "--out",
        p(&out),
    ]);
    let stages = report["result"]["stages"].as_array().unwrap();
    let kept: Vec<u64> = stages.iter().map(|s| s["kept"].as_u64().unwrap()).collect();
    assert_eq!(stages.len(), 5);
    assert!(kept.windows(2).all(|w| w[1] <= w[0]), "{kept:?}");
    assert!(stages[3]["removed"].as_u64().unwrap() >= 2);
    let target = report["config"]["target_per_class"].as_u64().unwrap();
    assert_eq!(read_rows(&out).len() as u64, 1 + 2 * target);
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&[
        "index",
        "--corpus",
        p(&missing),
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(err["error"]["command"], "index");
    assert!(!err["error"]["message"].as_str().unwrap().is_empty());

    let f = fixture();
    let out = run(&[
        "frequency",
        "--index",
        p(&f.index),
        "--tags",
        p(&f.tags),
        "--concepts",
        p(&f.concepts),
        "--threshold",
        "1.5",
        "--out",
        p(&f.dir.path().join("o.csv")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("threshold"));
}

#[test]
fn config_file_with_flag_override() {
    let f = fixture();
    let config = f.dir.path().join("run.toml");
    fs::write(&config, "workers = 2\n[frequency]\nthreshold = 0.5\n").unwrap();
    let out = f.dir.path().join("o.csv");
    let base = [
        "frequency",
        "--index",
        p(&f.index),
        "--tags",
        p(&f.tags),
        "--concepts",
        p(&f.concepts),
        "--out",
        p(&out),
    ];
    let mut args = vec!["--config", p(&config)];
    args.extend(base);
    assert_eq!(ok_json(&args)["config"]["threshold"], 0.5);
    args.extend(["--threshold", "0.8"]);
    assert_eq!(ok_json(&args)["config"]["threshold"], 0.8);

    fs::write(&config, "[frequency]\nthreshhold = 0.5\n").unwrap();
    let out = run(&[
        "--config",
        p(&config),
        "frequency",
        "--index",
        p(&f.index),
        "--concepts",
        p(&f.concepts),
        "--out",
        p(&f.dir.path().join("z.csv")),
    ]);
    assert!(!out.status.success());

    let env = bin()
        .env("CONCEPTSCOPE_WORKERS", "1")
        .args([
            "index",
            "--corpus",
            p(&f.corpus),
            "--out",
            p(&f.dir.path().join("w.cfix")),
        ])
        .output()
        .unwrap();
    assert!(env.status.success());
    assert_eq!(
        fs::read(f.dir.path().join("w.cfix")).unwrap(),
        fs::read(&f.index).unwrap()
    );
}
