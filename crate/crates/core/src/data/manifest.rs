use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use super::lvol::load_lvol;
use super::nifti::load_nifti;
use super::volume::{Grid3, VolumeCase, DEFAULT_MODALITIES};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MANIFEST_HEADER: [&str; 7] = ["case_id", "flair", "dwi", "t1", "t1c", "mask", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Data(format!("split must be `train` or `val`, got `{other}`"))),
        }
    }
}

/// One manifest row. Paths are as written in the file (relative paths are
/// resolved against the manifest's directory).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub flair: PathBuf,
    pub dwi: PathBuf,
    pub t1: PathBuf,
    pub t1c: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

impl ManifestEntry {
    pub fn modality_paths(&self) -> [&Path; 4] {
        [&self.flair, &self.dwi, &self.t1, &self.t1c]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Manifest {
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Parses manifest text without touching the filesystem.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| Error::Data(format!("manifest header: {e}")))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Data(format!(
                "manifest header must be `{}`, found `{}`",
                MANIFEST_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (row, rec) in rdr.deserialize::<ManifestEntry>().enumerate() {
            // header is line 1
            let line = row + 2;
            let entry = rec.map_err(|e| Error::Data(format!("manifest line {line}: {e}")))?;
            if !seen.insert(entry.case_id.clone()) {
                return Err(Error::Data(format!(
                    "manifest line {line}: duplicate case_id `{}`",
                    entry.case_id
                )));
            }
            entries.push(entry);
        }
        Ok(Manifest::new(entries, base_dir))
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(e).at_path(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest::parse(&text, base).map_err(|e| e.at_path(path))?;
        for (row, e) in m.entries.iter().enumerate() {
            for p in e.modality_paths().into_iter().chain([e.mask.as_path()]) {
                let full = m.resolve(p);
                if !full.is_file() {
                    return Err(Error::Data(format!(
                        "manifest line {} (case {}): missing file {}",
                        row + 2,
                        e.case_id,
                        full.display()
                    ))
                    .at_path(path));
                }
            }
        }
        Ok(m)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::Data(e.to_string()))?;
        }
        if self.entries.is_empty() {
            w.write_record(MANIFEST_HEADER).map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads one case and z-scores its modalities.
    pub fn load_case(&self, entry: &ManifestEntry) -> Result<VolumeCase> {
        let mut grids = Vec::with_capacity(4);
        for (name, p) in DEFAULT_MODALITIES.iter().zip(entry.modality_paths()) {
            grids.push((name.to_string(), load_volume(&self.resolve(p))?));
        }
        let mask = load_volume(&self.resolve(&entry.mask))?;
        Ok(VolumeCase::new(entry.case_id.clone(), grids, &mask)
            .map_err(|e| Error::Data(format!("case {}: {e}", entry.case_id)))?
            .zscore())
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<VolumeCase>> {
        self.split(split).map(|e| self.load_case(e)).collect()
    }

    pub fn find(&self, case_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }
}

/// Loads a grid by extension: `.lvol`, or `.nii`/`.hdr` as NIfTI-1.
pub fn load_volume(path: &Path) -> Result<Grid3> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("lvol") => load_lvol(path),
        Some("nii") | Some("hdr") | Some("gz") => load_nifti(path),
        _ => Err(Error::Data(format!(
            "unrecognised volume extension (expected .lvol, .nii or .hdr): {}",
            path.display()
        ))),
    }
}

/// Uniform random partition into `n_train` and the rest. Each part keeps the
/// input order.
pub fn split_cases<T>(items: Vec<T>, n_train: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if n_train >= items.len() {
        return Err(Error::Parameter(format!(
            "n_train ({n_train}) must be smaller than the number of cases ({})",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut Pcg64::seed_from_u64(seed));
    let mut is_train = vec![false; items.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, t) in items.into_iter().zip(is_train) {
        if t {
            train.push(item);
        } else {
            val.push(item);
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn twenty_eight_split_twenty_eight() {
        let (tr, va) = split_cases((0..28).collect(), 20, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (20, 8));
        assert_eq!(split_cases((0..28).collect::<Vec<_>>(), 20, 3).unwrap().0, tr);
        assert!(matches!(split_cases(vec![1, 2], 2, 0), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..60, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let k = ((n - 1) as f64 * frac) as usize;
            let (tr, va) = split_cases((0..n).collect(), k, seed).unwrap();
            prop_assert_eq!(tr.len(), k);
            let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let text = "case_id,flair,dwi,t1,t1c,mask,split\n\
                    a,a/f.lvol,a/d.lvol,a/t1.lvol,a/t1c.lvol,a/m.lvol,train\n\
                    b,b/f.nii,b/d.nii,b/t1.nii,b/t1c.nii,b/m.nii,val\n";
        let m = Manifest::parse(text, "/data").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].split, Split::Val);
        assert_eq!(m.resolve(&m.entries[0].mask), PathBuf::from("/data/a/m.lvol"));
        assert_eq!(m.to_csv().unwrap(), text);
    }

    #[test]
    fn bad_rows_are_located() {
        let text = "case_id,flair,dwi,t1,t1c,mask,split\n\
                    a,f,d,t1,t1c,m,train\n\
                    b,f,d,t1,t1c,m,test\n";
        let err = Manifest::parse(text, ".").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = Manifest::parse("id,x\n", ".").unwrap_err().to_string();
        assert!(err.contains("header"), "{err}");
    }

    #[test]
    fn missing_file_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "case_id,flair,dwi,t1,t1c,mask,split\nq,f,d,t1,t1c,m,val\n").unwrap();
        let err = Manifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("case q"), "{err}");
    }
}
