//! Frozen per-cut activation checksums at resolution 56. Set
//! `SPLITLOC_BLESS=1` to rewrite the file after an intentional change.

use std::fmt::Write as _;
use std::path::PathBuf;

use splitloc_core::exec::{preprocess, run_prefix};
use splitloc_core::frame::Frame;
use splitloc_core::weights::init_weights;
use splitloc_core::{build_backbone, Cut};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/activations_res56.csv")
}

fn current() -> String {
    let g = build_backbone(56, 2048).unwrap();
    let w = init_weights(&g, 42);
    let x = preprocess(&Frame::synthetic(7, 0, 56, 56), 56).unwrap();
    let mut out = String::from("cut,crc32_hex\n");
    for cut in Cut::all() {
        let act = run_prefix(&g, &w, &x, cut).unwrap();
        writeln!(out, "{},{:08x}", cut.name(), act.crc32()).unwrap();
    }
    out
}

#[test]
fn activations_match_golden_file() {
    let actual = current();
    if std::env::var_os("SPLITLOC_BLESS").is_some() {
        std::fs::write(golden_path(), &actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(golden_path()).expect("golden file missing; run with SPLITLOC_BLESS=1");
    assert_eq!(actual, expected);
}

#[test]
fn weight_checksums_are_seed_sensitive() {
    let g = build_backbone(56, 16).unwrap();
    let a = init_weights(&g, 1);
    let b = init_weights(&g, 2);
    assert_eq!(a.layer_crc32(0), init_weights(&g, 1).layer_crc32(0));
    assert_ne!(a.layer_crc32(0), b.layer_crc32(0));
}
