//! On-disk facade dataset: one PGM per image, `manifest.tsv` listing
//! `filename<TAB>subtype<TAB>seed`, and a JSON summary.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{ranges, render, BridgeSpec, SpecError, Subtype, GENERATOR_VERSION, HEIGHT, WIDTH};
use crate::pgm::{GrayImage, PgmError};
use crate::rng::derive_seed;
use crate::tensor::{Float, Tensor, TensorError};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Pgm { path: PathBuf, source: PgmError },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("manifest/file mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub subtype: Subtype,
    /// Spec seed; `BridgeSpec::from_seed(subtype, seed)` re-renders the file.
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Deterministic content of a dataset built with these arguments.
    pub fn plan(n_per_subtype: usize, seed: u64) -> Self {
        let entries = Subtype::ALL
            .into_iter()
            .flat_map(|t| {
                (0..n_per_subtype).map(move |i| ManifestEntry {
                    file: format!("{}_{:05}.pgm", t.name(), i),
                    subtype: t,
                    seed: derive_seed(seed, ((t.index() as u64) << 32) | i as u64),
                })
            })
            .collect();
        Manifest { entries }
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.file, e.subtype, e.seed))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |detail: String| DatasetError::Manifest { line: i + 1, detail };
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [file, subtype, seed] = fields[..] else {
                return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            if file.is_empty() || file.contains(['/', '\\']) {
                return Err(bad(format!("invalid file name {file:?}")));
            }
            entries.push(ManifestEntry {
                file: file.to_string(),
                subtype: subtype.parse().map_err(|e| bad(format!("{e}")))?,
                seed: seed.parse().map_err(|_| bad(format!("invalid seed {seed:?}")))?,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn count(&self, subtype: Subtype) -> usize {
        self.entries.iter().filter(|e| e.subtype == subtype).count()
    }
}

fn summary(manifest: &Manifest, n_per_subtype: usize, seed: u64) -> String {
    let counts: serde_json::Map<String, serde_json::Value> = Subtype::ALL
        .into_iter()
        .map(|t| (t.name().to_string(), json!(manifest.count(t))))
        .collect();
    let param_ranges: serde_json::Map<String, serde_json::Value> = Subtype::ALL
        .into_iter()
        .map(|t| {
            let r: serde_json::Map<String, serde_json::Value> =
                ranges(t).named().into_iter().map(|(k, v)| (k.to_string(), json!([v.lo, v.hi]))).collect();
            (t.name().to_string(), r.into())
        })
        .collect();
    let value = json!({
        "generator_version": GENERATOR_VERSION,
        "seed": seed,
        "n_per_subtype": n_per_subtype,
        "total": manifest.entries.len(),
        "width": WIDTH,
        "height": HEIGHT,
        "counts": counts,
        "ranges_px": param_ranges,
        "spans_m": {
            "beam": Subtype::BeamConstantSection.spans(),
            "other": Subtype::ArchTopBearing.spans(),
        },
    });
    let mut s = serde_json::to_string_pretty(&value).expect("json values serialize");
    s.push('\n');
    s
}

fn render_entry(e: &ManifestEntry) -> Result<Vec<u8>, DatasetError> {
    Ok(render(&BridgeSpec::from_seed(e.subtype, e.seed))?.to_gray().encode())
}

/// Write `8 * n_per_subtype` images plus manifest and summary into `out_dir`
/// (created if missing). The manifest is written last. On failure every file
/// this call created is removed again.
pub fn build_dataset(out_dir: &Path, n_per_subtype: usize, seed: u64) -> Result<Manifest, DatasetError> {
    let created_dir = !out_dir.exists();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let manifest = Manifest::plan(n_per_subtype, seed);
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        for e in &manifest.entries {
            let bytes = render_entry(e)?;
            let path = out_dir.join(&e.file);
            written.push(path.clone());
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        let path = out_dir.join(SUMMARY_FILE);
        written.push(path.clone());
        fs::write(&path, summary(&manifest, n_per_subtype, seed)).map_err(io_err(&path))?;
        let path = out_dir.join(MANIFEST_FILE);
        written.push(path.clone());
        fs::write(&path, manifest.to_tsv()).map_err(io_err(&path))
    })();
    if let Err(e) = result {
        for p in &written {
            let _ = fs::remove_file(p);
        }
        if created_dir {
            let _ = fs::remove_dir(out_dir);
        }
        return Err(e);
    }
    Ok(manifest)
}

/// Paths under `dir` whose bytes differ from a fresh build with the same
/// arguments (missing files included). Empty means bitwise identical.
pub fn verify_dataset(dir: &Path, n_per_subtype: usize, seed: u64) -> Result<Vec<String>, DatasetError> {
    let manifest = Manifest::plan(n_per_subtype, seed);
    let mut differing = Vec::new();
    let mut check = |name: &str, want: &[u8]| match fs::read(dir.join(name)) {
        Ok(got) if got == want => {}
        _ => differing.push(name.to_string()),
    };
    check(MANIFEST_FILE, manifest.to_tsv().as_bytes());
    check(SUMMARY_FILE, summary(&manifest, n_per_subtype, seed).as_bytes());
    for e in &manifest.entries {
        check(&e.file, &render_entry(e)?);
    }
    Ok(differing)
}

/// Images as `[N, 48, 192, 1]` in `[0, 1]`, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub subtypes: Vec<Subtype>,
    pub files: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.subtypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtypes.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, TensorError> {
        let rows: Vec<&[Float]> = indices.iter().map(|&i| self.images.row(i)).collect();
        Ok(Dataset {
            images: Tensor::stack(&rows, &[HEIGHT, WIDTH, 1])?,
            subtypes: indices.iter().map(|&i| self.subtypes[i]).collect(),
            files: indices.iter().map(|&i| self.files[i].clone()).collect(),
        })
    }

    /// Indices of the first `limit` images (all if `None`) of each listed
    /// sub-type, grouped in the order given.
    pub fn indices_of(&self, subtypes: &[Subtype], limit: Option<usize>) -> Vec<usize> {
        subtypes
            .iter()
            .flat_map(|&t| {
                self.subtypes
                    .iter()
                    .enumerate()
                    .filter(move |(_, &s)| s == t)
                    .map(|(i, _)| i)
                    .take(limit.unwrap_or(usize::MAX))
            })
            .collect()
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let path = dir.join(MANIFEST_FILE);
    let manifest = Manifest::parse(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    if manifest.entries.is_empty() {
        return Err(DatasetError::Mismatch(format!("{} lists no images", path.display())));
    }
    let mut data = Vec::with_capacity(manifest.entries.len() * WIDTH * HEIGHT);
    for e in &manifest.entries {
        let path = dir.join(&e.file);
        let img = GrayImage::read(&path).map_err(|source| match source {
            PgmError::Io(err) if err.kind() == io::ErrorKind::NotFound => {
                DatasetError::Mismatch(format!("{} is listed but missing", e.file))
            }
            source => DatasetError::Pgm { path: path.clone(), source },
        })?;
        if (img.width, img.height) != (WIDTH, HEIGHT) {
            return Err(DatasetError::Mismatch(format!(
                "{} is {}x{}, expected {WIDTH}x{HEIGHT}",
                e.file, img.width, img.height
            )));
        }
        data.extend(img.to_unit().into_iter().map(|v| v as Float));
    }
    let n = manifest.entries.len();
    Ok(Dataset {
        images: Tensor::new(vec![n, HEIGHT, WIDTH, 1], data)?,
        subtypes: manifest.entries.iter().map(|e| e.subtype).collect(),
        files: manifest.entries.into_iter().map(|e| e.file).collect(),
    })
}
