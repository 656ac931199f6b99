#![allow(dead_code)]

use std::path::PathBuf;

use face_core::data::{load_site_csv, Role};
use face_core::SiteData;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// The target site and the four source sites of the fixture federation.
pub fn fixture_sites() -> (SiteData, Vec<SiteData>) {
    let dir = fixture_dir();
    let target = load_site_csv(&dir.join("target.csv"), Role::Target).unwrap();
    let sources = (1..=4)
        .map(|j| load_site_csv(&dir.join(format!("source{j:02}.csv")), Role::Source).unwrap())
        .collect();
    (target, sources)
}
