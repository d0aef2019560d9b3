//! MNIST download and import into a data directory.

use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flate2::read::GzDecoder;
use ldam_core::dataset::{load_mnist, Split};

pub const DEFAULT_BASE_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

pub enum Source {
    /// Base URL; files are fetched as `<base><name>.gz`.
    Url(String),
    /// Local directory holding the files, gzipped or not.
    Dir(PathBuf),
}

fn gunzip_if_needed(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn obtain(source: &Source, name: &str) -> Result<Vec<u8>> {
    match source {
        Source::Dir(d) => {
            for candidate in [d.join(name), d.join(format!("{name}.gz"))] {
                if candidate.is_file() {
                    let raw = std::fs::read(&candidate)
                        .with_context(|| format!("reading {}", candidate.display()))?;
                    return gunzip_if_needed(raw);
                }
            }
            bail!("{name} (or {name}.gz) not found in {}", d.display())
        }
        Source::Url(base) => {
            let url = format!("{}/{name}.gz", base.trim_end_matches('/'));
            let resp = reqwest::blocking::get(&url)
                .and_then(|r| r.error_for_status())
                .with_context(|| format!("downloading {url}"))?;
            gunzip_if_needed(resp.bytes()?.to_vec())
        }
    }
}

fn expected_len(split: Split) -> usize {
    match split {
        Split::Train => 60_000,
        Split::Test => 10_000,
    }
}

fn complete(dir: &Path, split: Split) -> bool {
    load_mnist(dir, split).is_ok_and(|d| d.len() == expected_len(split))
}

/// Makes sure both splits are present and parse; returns the files written.
pub fn fetch(dir: &Path, source: &Source) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for split in [Split::Train, Split::Test] {
        if complete(dir, split) {
            continue;
        }
        let (img, lab) = split.file_names();
        for name in [img, lab] {
            let bytes = obtain(source, name)?;
            let path = dir.join(name);
            let tmp = dir.join(format!("{name}.partial"));
            std::fs::write(&tmp, &bytes)?;
            std::fs::rename(&tmp, &path)?;
            written.push(path);
        }
        let ds = load_mnist(dir, split).with_context(|| format!("validating {img}"))?;
        if ds.len() != expected_len(split) {
            bail!("{img} holds {} records, expected {}", ds.len(), expected_len(split));
        }
    }
    Ok(written)
}
