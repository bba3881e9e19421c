//! Dataset manifests: one `left=…<TAB>right=…<TAB>gt=…` record per line.
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sample::{sparse_mask_from_gt, MaskPolicy, StereoSample};

use super::{pfm, raster};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub gt: PathBuf,
}

pub fn parse(text: &str, base: &Path) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (mut left, mut right, mut gt) = (None, None, None);
        for field in line.split('\t') {
            let (k, v) = field.split_once('=').ok_or_else(|| Error::Format {
                format: "manifest",
                offset: at,
                msg: format!("expected key=value, got {field:?}"),
            })?;
            let slot = match k.trim() {
                "left" => &mut left,
                "right" => &mut right,
                "gt" => &mut gt,
                other => {
                    return Err(Error::Format {
                        format: "manifest",
                        offset: at,
                        msg: format!("unknown field {other:?}"),
                    })
                }
            };
            *slot = Some(base.join(v.trim()));
        }
        match (left, right, gt) {
            (Some(left), Some(right), Some(gt)) => out.push(Entry { left, right, gt }),
            _ => {
                return Err(Error::Format {
                    format: "manifest",
                    offset: at,
                    msg: "record needs left, right and gt".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let entries = parse(&text, base)?;
    if entries.is_empty() {
        return Err(Error::Format {
            format: "manifest",
            offset: 0,
            msg: "no records".into(),
        });
    }
    Ok(entries)
}

/// Renders records with paths as given.
pub fn render(entries: &[Entry]) -> String {
    entries
        .iter()
        .map(|e| format!("left={}\tright={}\tgt={}\n", e.left.display(), e.right.display(), e.gt.display()))
        .collect()
}

pub fn load_entry(e: &Entry, policy: MaskPolicy) -> Result<StereoSample> {
    let left = raster::read_image(&e.left)?;
    let right = raster::read_image(&e.right)?;
    let gt = pfm::read_map(&e.gt)?;
    let (mask, _) = sparse_mask_from_gt(&gt, policy)?;
    StereoSample::new(left, right, gt, mask)
}

/// Loads every sample listed in a manifest.
pub fn load_dataset(path: &Path, policy: MaskPolicy) -> Result<Vec<StereoSample>> {
    read(path)?.iter().map(|e| load_entry(e, policy)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records() {
        let text = "# header\nleft=a.pgm\tright=b.pgm\tgt=c.pfm\n\n";
        let e = parse(text, Path::new("/d")).unwrap();
        assert_eq!(e[0].gt, PathBuf::from("/d/c.pfm"));
        let err = parse("left=a\tright=b\n", Path::new("")).unwrap_err();
        assert!(err.to_string().contains("needs"));
    }
}
