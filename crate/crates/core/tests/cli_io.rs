//! File formats and the command-line binary: dataset loading errors, adapter
//! container corruption, exit codes and a short end-to-end pipeline.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use lora_fusion::adapter::ConceptAdapter;
use lora_fusion::cli_io::{decode_adapter, encode_adapter, load_adapter_for, load_dataset, EvalReport};
use lora_fusion::client_tuning::{tune_concept, TuningConfig};
use lora_fusion::error::Error;
use lora_fusion::fusion::FusionReport;
use lora_fusion::toy_diffusion::pretrain::{demo_concepts, vocabulary};
use lora_fusion::toy_diffusion::{ModelConfig, ModelWeights};

use common::{run_in, run_ok};

fn grid_text(h: usize, w: usize, v: f64) -> String {
    (0..h).map(|_| vec![format!("{v}"); w].join(",") + "\n").collect()
}

fn write_dataset(dir: &Path, grids: &[String], list_images: bool) {
    fs::create_dir_all(dir).unwrap();
    let names: Vec<String> = (0..grids.len()).map(|i| format!("g{i}.csv")).collect();
    for (g, n) in grids.iter().zip(&names) {
        fs::write(dir.join(n), g).unwrap();
    }
    let mut manifest = "concept_name = \"V\"\ncaption_template = \"a photo of V\"\nclass_token = \"circle\"\n".to_string();
    if list_images {
        let quoted: Vec<String> = names.iter().map(|n| format!("{n:?}")).collect();
        manifest.push_str(&format!("images = [{}]\n", quoted.join(", ")));
    }
    fs::write(dir.join("manifest.toml"), manifest).unwrap();
}

#[test]
fn dataset_with_five_grids_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let grids: Vec<String> = (0..5).map(|i| grid_text(8, 8, i as f64 * 0.25)).collect();
    write_dataset(tmp.path(), &grids, true);
    let d = load_dataset(tmp.path()).unwrap();
    assert_eq!(d.images.len(), 5);
    assert_eq!(d.caption_template, vec!["a", "photo", "of", "V"]);
    assert_eq!(d.class_token, "circle");
    for (i, img) in d.images.iter().enumerate() {
        assert_eq!(img.shape(), (8, 8, 1));
        assert!(img.values().iter().all(|&v| v == i as f64 * 0.25));
    }

    // Without an explicit list every csv is read in name order.
    let other = tmp.path().join("implicit");
    write_dataset(&other, &grids, false);
    assert_eq!(load_dataset(&other).unwrap().images, d.images);
}

#[test]
fn mismatched_grid_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let mut grids: Vec<String> = (0..4).map(|_| grid_text(8, 8, 0.0)).collect();
    grids.push(grid_text(8, 7, 0.0));
    write_dataset(tmp.path(), &grids, true);
    match load_dataset(tmp.path()) {
        Err(Error::ShapeInconsistent { path, .. }) => assert_eq!(path, tmp.path().join("g4.csv")),
        other => panic!("expected ShapeInconsistent, got {other:?}"),
    }
}

#[test]
fn non_numeric_cell_reports_its_position() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bad = grid_text(8, 8, 1.0);
    bad = bad.replacen("1,1,1,1", "1,1,x,1", 1);
    write_dataset(tmp.path(), &[grid_text(8, 8, 1.0), bad], true);
    match load_dataset(tmp.path()) {
        Err(Error::ParseError { path, row, col, .. }) => {
            assert_eq!(path, tmp.path().join("g1.csv"));
            assert_eq!((row, col), (1, 3));
        }
        other => panic!("expected ParseError, got {other:?}"),
    }
}

#[test]
fn directory_without_manifest_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("a.csv"), grid_text(8, 8, 0.0)).unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(Error::MissingManifest(p)) if p == tmp.path()));
}

/// A barely tuned adapter on an untrained base; enough for format checks.
fn small_adapter() -> &'static (ModelWeights, ConceptAdapter) {
    static CELL: OnceLock<(ModelWeights, ConceptAdapter)> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = ModelWeights::init(ModelConfig::default(), &vocabulary(), 0).unwrap();
        let data = &demo_concepts(&base.config).unwrap()[0];
        let cfg = TuningConfig {
            steps: 5,
            ..TuningConfig::default()
        };
        let adapter = tune_concept(&base, data, &cfg).unwrap();
        (base, adapter)
    })
}

#[test]
fn corrupted_adapter_files_are_classified() {
    let (base, adapter) = small_adapter();
    let bytes = encode_adapter(adapter).unwrap();
    assert_eq!(&decode_adapter(&bytes, "ok").unwrap(), adapter);

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_adapter(&magic, "m"), Err(Error::BadMagic(_))));

    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        decode_adapter(&version, "v"),
        Err(Error::VersionMismatch { found: 7, expected: 1 })
    ));

    // Too short to hold the magic at all.
    assert!(matches!(decode_adapter(&bytes[..3], "s"), Err(Error::BadMagic(_))));
    for cut in [6, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(decode_adapter(&bytes[..cut], "t"), Err(Error::TruncatedFile(_))),
            "cut at {cut}"
        );
    }

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode_adapter(&trailing, "x").is_err());

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("v.edlr");
    fs::write(&path, &bytes).unwrap();
    assert!(load_adapter_for(&path, base).is_ok());
    let other = ModelWeights::init(ModelConfig::default(), &vocabulary(), 1).unwrap();
    assert!(matches!(
        load_adapter_for(&path, &other),
        Err(Error::FingerprintMismatch { .. })
    ));
}

/// Short pretraining, the demo fixture and two briefly tuned adapters,
/// all produced through the binary.
fn pipeline() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        run_ok(&dir, &["pretrain", "--out", "base.bin", "--steps", "40"]);
        run_ok(&dir, &["demo", "--out", "demo"]);
        for (c, seed) in [("V", "1"), ("W", "2")] {
            let out = format!("{c}.edlr");
            let data = format!("demo/{c}");
            run_ok(
                &dir,
                &["tune", "--dataset", &data, "--base", "base.bin", "--out", &out, "--steps", "40", "--seed", seed],
            );
        }
        dir
    })
}

fn stderr_of(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn diverging_tuning_exits_with_code_two() {
    let dir = pipeline();
    let out = run_in(
        dir,
        &[
            "tune", "--dataset", "demo/V", "--base", "base.bin", "--out", "boom.edlr", "--steps", "20",
            "--lr-denoiser", "1e200", "--lr-encoder", "1e200",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(!dir.join("boom.edlr").exists());
}

#[test]
fn malformed_inputs_fail_cleanly() {
    let dir = pipeline();
    fs::write(dir.join("junk.edlr"), b"not an adapter").unwrap();
    fs::create_dir_all(dir.join("empty")).unwrap();
    let cases: [&[&str]; 4] = [
        &["fuse", "--base", "base.bin", "--adapters", "junk.edlr", "--method", "weight", "--out", "f.bin"],
        &["fuse", "--base", "V.edlr", "--adapters", "V.edlr", "--method", "weight", "--out", "f.bin"],
        &["tune", "--dataset", "empty", "--base", "base.bin", "--out", "e.edlr"],
        &["fuse", "--base", "base.bin", "--adapters", "V.edlr", "--method", "average", "--out", "f.bin"],
    ];
    for args in cases {
        let out = run_in(dir, args);
        let err = stderr_of(&out);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "), "{err}");
        assert!(!err.contains("panicked"));
    }
}

#[test]
fn single_adapter_gradient_fusion_keeps_identity() {
    let dir = pipeline();
    run_ok(
        dir,
        &["fuse", "--base", "base.bin", "--adapters", "V.edlr", "--method", "gradient", "--out", "v_only.bin"],
    );
    run_ok(
        dir,
        &[
            "eval", "--base", "base.bin", "--fused", "v_only.bin", "--adapters", "V.edlr", "--prompts",
            "demo/prompts.txt", "--seeds", "1..5", "--out", "v_only.csv",
        ],
    );
    let report = EvalReport::read_csv(&dir.join("v_only.csv")).unwrap();
    let v = report.get("V").unwrap();
    assert!(v.alignment_fused >= 0.999, "{v:?}");
    assert_eq!(report.method, "gradient");
}

#[test]
fn weight_fusion_defaults_to_equal_weights() {
    let dir = pipeline();
    run_ok(
        dir,
        &["fuse", "--base", "base.bin", "--adapters", "V.edlr,W.edlr", "--method", "weight", "--out", "avg.bin"],
    );
    let text = fs::read_to_string(dir.join("avg.bin.report.json")).unwrap();
    let report: FusionReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.weights, vec![0.5, 0.5]);
    assert_eq!(report.concepts, vec!["V", "W"]);

    let bad = run_in(
        dir,
        &[
            "fuse", "--base", "base.bin", "--adapters", "V.edlr,W.edlr", "--method", "weight", "--weights", "0.7,0.7",
            "--out", "x.bin",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr_of(&bad).contains("sum to 1"));
}

#[test]
fn regional_sampling_writes_a_grid() {
    let dir = pipeline();
    run_ok(
        dir,
        &["fuse", "--base", "base.bin", "--adapters", "V.edlr,W.edlr", "--method", "weight", "--out", "vw.bin"],
    );
    let args = [
        "sample", "--model", "vw.bin", "--prompt", "a photo of V and W", "--region", "demo/left.mask:a photo of V",
        "--region", "demo/right.mask:a photo of W", "--seed", "3", "--out",
    ];
    let mut a = args.to_vec();
    a.push("s1.csv");
    run_ok(dir, &a);
    a.pop();
    a.push("s2.csv");
    run_ok(dir, &a);
    let s1 = fs::read(dir.join("s1.csv")).unwrap();
    assert_eq!(s1, fs::read(dir.join("s2.csv")).unwrap());
    assert_eq!(String::from_utf8(s1).unwrap().lines().count(), 8);
}
