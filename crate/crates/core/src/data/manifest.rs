//! `manifest.tsv`: one sample per line, `image<TAB>mask<TAB>labels`, where
//! labels are comma-separated ascending class indices including 0. Paths are
//! relative to the manifest's directory. No header line.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::pnm::{decode_pgm, decode_ppm};
use crate::data::synth::Sample;
use crate::error::{Error, Result};
use crate::mil::LabelBag;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub bag: LabelBag,
}

pub fn format_manifest_line(image: &str, mask: &str, bag: &LabelBag) -> String {
    let labels: Vec<String> = bag.labels().map(|l| l.to_string()).collect();
    format!("{image}\t{mask}\t{}\n", labels.join(","))
}

pub fn parse_manifest(text: &str, path: &Path, num_fg_classes: usize) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [image, mask, labels] = fields[..] else {
            return Err(err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        };
        let labels = labels
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| err(format!("bad label {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let bag = LabelBag::new(labels, num_fg_classes).map_err(|e| err(e.to_string()))?;
        entries.push(ManifestEntry {
            image: PathBuf::from(image),
            mask: PathBuf::from(mask),
            bag,
        });
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path, num_fg_classes: usize) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_manifest(&text, path, num_fg_classes)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Loads every sample listed in `dir/manifest.tsv`.
pub fn load_split(dir: &Path, num_fg_classes: usize) -> Result<Vec<Sample>> {
    let entries = load_manifest(&dir.join(MANIFEST_FILE), num_fg_classes)?;
    entries
        .into_iter()
        .map(|e| {
            let image = decode_ppm(&read(&dir.join(&e.image))?)?;
            let mask = decode_pgm(&read(&dir.join(&e.mask))?)?;
            mask.check_classes(num_fg_classes + 1)?;
            let (_, h, w) = image.dims3()?;
            if (h, w) != (mask.height(), mask.width()) {
                return Err(Error::Invalid(format!(
                    "{} is {}x{} but {} is {}x{}",
                    e.image.display(),
                    h,
                    w,
                    e.mask.display(),
                    mask.height(),
                    mask.width()
                )));
            }
            Ok(Sample {
                image,
                mask,
                bag: e.bag,
            })
        })
        .collect()
}
