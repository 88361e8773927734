//! SPD datasets: a binary sample format with a JSON index, CSV import, a
//! synthetic class-structured generator, stratified splits and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig_unchecked, Mat};
use crate::manifold::{exp_map, SpdMatrix, SymMatrix};
use crate::rng::substream;

pub const SAMPLE_MAGIC: &[u8; 4] = b"SPD1";
/// Samples whose smallest eigenvalue falls below this are rejected.
pub const NEG_EIG_TOL: f64 = 1e-10;
/// Samples whose smallest eigenvalue is at most this are lifted.
pub const LIFT_THRESHOLD: f64 = 1e-12;
pub const LIFT: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub matrix: SpdMatrix<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
    /// Indices of samples that were lifted by `LIFT·I` on load.
    pub lifted: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexFile {
    dim: usize,
    classes: usize,
    samples: Vec<IndexEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    path: String,
    label: usize,
}

/// Symmetrizes `m` and checks it is positive definite, lifting spectra that
/// sit within round-off of zero. Returns whether a lift was applied.
pub fn validate_spd(m: &Mat<f64>, what: &str) -> Result<(SpdMatrix<f64>, bool)> {
    if !m.is_square() {
        return Err(Error::shape(format!("{what} is {}x{}, not square", m.rows(), m.cols())));
    }
    if !m.is_finite() {
        return Err(Error::Domain(format!("{what} has non-finite entries")));
    }
    let s = m.symmetrize();
    let lmin = sym_eig_unchecked(&s).min_value();
    if lmin <= -NEG_EIG_TOL {
        return Err(Error::Domain(format!(
            "{what} is not positive definite: smallest eigenvalue {lmin:e}"
        )));
    }
    if lmin <= LIFT_THRESHOLD {
        let mut lifted = s;
        for i in 0..lifted.rows() {
            lifted[(i, i)] += LIFT;
        }
        return Ok((SpdMatrix::from_mat_unchecked(&lifted), true));
    }
    Ok((SpdMatrix::from_mat_unchecked(&s), false))
}

pub fn encode_sample(m: &Mat<f64>) -> Vec<u8> {
    let n = m.rows();
    let mut out = Vec::with_capacity(8 + 8 * n * n);
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<Mat<f64>> {
    if bytes.len() < 4 || &bytes[..4] != SAMPLE_MAGIC {
        return Err(Error::data(path, "bad magic at byte offset 0 (expected \"SPD1\")"));
    }
    if bytes.len() < 8 {
        return Err(Error::data(path, format!("truncated header at byte offset {}", bytes.len())));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if n == 0 {
        return Err(Error::data(path, "zero dimension at byte offset 4"));
    }
    let need = n
        .checked_mul(n)
        .and_then(|k| k.checked_mul(8))
        .and_then(|k| k.checked_add(8))
        .ok_or_else(|| Error::data(path, format!("dimension {n} at byte offset 4 is too large")))?;
    if bytes.len() < need {
        let whole = (bytes.len() - 8) / 8;
        return Err(Error::data(
            path,
            format!("truncated payload at byte offset {}: {n}x{n} needs {need} bytes", 8 + whole * 8),
        ));
    }
    if bytes.len() > need {
        return Err(Error::data(path, format!("trailing bytes from byte offset {need}")));
    }
    let data = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Mat::from_vec(n, n, data))
}

pub fn read_sample(path: &Path) -> Result<Mat<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes, path)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_sample(path: &Path, m: &Mat<f64>) -> Result<()> {
    write_atomic(path, &encode_sample(m))
}

/// `n` on the first line, then `n` rows of `n` comma-separated reals.
pub fn import_csv(path: &Path) -> Result<Mat<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::data(path, "empty file"))?;
    let n: usize = header
        .trim()
        .parse()
        .map_err(|_| Error::data(path, format!("line 1: expected the dimension, got {header:?}")))?;
    let body = lines.map(|(_, l)| l).collect::<Vec<_>>().join("\n");
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let mut data = Vec::with_capacity(n * n);
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::data(path, e.to_string()))?;
        rows += 1;
        if rec.len() != n {
            return Err(Error::data(path, format!("row {rows}: {} values, expected {n}", rec.len())));
        }
        for (j, f) in rec.iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::data(path, format!("row {rows}, column {}: {f:?} is not a number", j + 1)))?;
            data.push(v);
        }
    }
    if rows != n {
        return Err(Error::data(path, format!("{rows} rows, expected {n}")));
    }
    Ok(Mat::from_vec(n, n, data))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: IndexFile = serde_json::from_str(&text).map_err(|e| Error::data(&index_path, e.to_string()))?;
    if index.classes == 0 {
        return Err(Error::data(&index_path, "no classes"));
    }
    let loaded: Vec<(Sample, bool)> = index
        .samples
        .par_iter()
        .map(|entry| {
            let path: PathBuf = dir.join(&entry.path);
            let m = read_sample(&path)?;
            if m.rows() != index.dim {
                return Err(Error::data(&path, format!("{}x{} sample in a {}-dimensional dataset", m.rows(), m.rows(), index.dim)));
            }
            if entry.label >= index.classes {
                return Err(Error::data(&path, format!("label {} outside {} classes", entry.label, index.classes)));
            }
            let (matrix, lifted) = validate_spd(&m, &path.display().to_string())
                .map_err(|e| Error::data(&path, e.to_string()))?;
            Ok((
                Sample {
                    matrix,
                    label: entry.label,
                },
                lifted,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seen = vec![false; index.classes];
    for (s, _) in &loaded {
        seen[s.label] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::data(&index_path, format!("labels are not contiguous: class {missing} has no samples")));
    }
    let lifted: Vec<usize> = loaded.iter().enumerate().filter(|(_, (_, l))| *l).map(|(i, _)| i).collect();
    if !lifted.is_empty() {
        log::info!("lifted {} near-singular samples by {LIFT:e}·I", lifted.len());
    }
    Ok(Dataset {
        dim: index.dim,
        classes: index.classes,
        samples: loaded.into_iter().map(|(s, _)| s).collect(),
        lifted,
    })
}

/// Writes `samples` as `sample_XXXXX.spd` files plus `index.json`.
pub fn save_dataset(dir: &Path, samples: &[Sample], classes: usize) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::contract("saving an empty dataset"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}.spd");
        write_sample(&dir.join(&name), s.matrix.as_mat())?;
        entries.push(IndexEntry {
            path: name,
            label: s.label,
        });
    }
    let index = IndexFile {
        dim: first.matrix.dim(),
        classes,
        samples: entries,
    };
    write_atomic(&dir.join("index.json"), (serde_json::to_string_pretty(&index)? + "\n").as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            dim: 20,
            per_class: 300,
            noise: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.classes < 2 {
            p.push(format!("synth.classes must be at least 2, got {}", self.classes));
        }
        if self.dim < 2 {
            p.push(format!("synth.dim must be at least 2, got {}", self.dim));
        }
        if self.per_class == 0 {
            p.push("synth.per_class must be positive".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            p.push(format!("synth.noise must be a nonnegative number, got {}", self.noise));
        }
        p
    }
}

/// Per class `c`, a base `B_c = A_c A_cᵀ + I` from a standard-normal `A_c`;
/// each sample is `exp_map(B_c, σ·S)` with `S` symmetric, entries standard
/// normal over `n`. Samples come out class by class.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    let p = cfg.problems();
    if !p.is_empty() {
        return Err(Error::config(p.join("; ")));
    }
    let n = cfg.dim;
    let mut r = substream(seed, "synth");
    let bases: Vec<SpdMatrix<f64>> = (0..cfg.classes)
        .map(|_| {
            let a = Mat::from_fn(n, n, |_, _| StandardNormal.sample(&mut r));
            let mut b = a.matmul_t(&a);
            for i in 0..n {
                b[(i, i)] += 1.0;
            }
            SpdMatrix::from_mat_unchecked(&b)
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (label, base) in bases.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let mut s = Mat::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v: f64 = StandardNormal.sample(&mut r);
                    s[(i, j)] = v / n as f64;
                    s[(j, i)] = v / n as f64;
                }
            }
            let matrix = if cfg.noise == 0.0 {
                base.clone()
            } else {
                exp_map(base, &SymMatrix::from_symmetrized(&s.scale(cfg.noise)))?
            };
            out.push(Sample { matrix, label });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        }
    }
}

impl SplitSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(f > 0.0) {
                p.push(format!("split.{name} must be positive, got {f}"));
            }
        }
        let s = self.train + self.val + self.test;
        if (s - 1.0).abs() > 1e-9 {
            p.push(format!("split fractions sum to {s}, expected 1"));
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Per-class `[train, val, test]` counts: each within one sample of
/// `n_c·f`, with totals following largest-remainder rounding of `N·f`
/// whenever the greedy assignment can reach them.
fn allocate(sizes: &[usize], fracs: [f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = sizes.iter().sum();
    let exact_total = fracs.map(|f| total as f64 * f);
    let mut target = exact_total.map(|x| x.floor() as usize);
    let mut parts = [0, 1, 2];
    parts.sort_by(|&a, &b| {
        let fa = exact_total[a] - exact_total[a].floor();
        let fb = exact_total[b] - exact_total[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &p in parts.iter().take(total.saturating_sub(target.iter().sum())) {
        target[p] += 1;
    }
    let mut alloc: Vec<[usize; 3]> = sizes
        .iter()
        .map(|&n| fracs.map(|f| (n as f64 * f).floor() as usize))
        .collect();
    let mut need: [usize; 3] = std::array::from_fn(|p| {
        target[p].saturating_sub(alloc.iter().map(|a| a[p]).sum())
    });
    for (c, &n) in sizes.iter().enumerate() {
        let extra = n - alloc[c].iter().sum::<usize>();
        let frac = fracs.map(|f| n as f64 * f - (n as f64 * f).floor());
        let mut cand: Vec<usize> = (0..3).filter(|&p| frac[p] > 0.0).collect();
        cand.sort_by(|&a, &b| need[b].cmp(&need[a]).then(frac[b].total_cmp(&frac[a])).then(a.cmp(&b)));
        for &p in cand.iter().take(extra) {
            alloc[c][p] += 1;
            need[p] = need[p].saturating_sub(1);
        }
    }
    alloc
}

/// Stratified, seeded split into train/validation/test.
pub fn split(samples: &[Sample], spec: &SplitSpec, seed: u64) -> Result<Splits> {
    let p = spec.problems();
    if !p.is_empty() {
        return Err(Error::config(p.join("; ")));
    }
    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut r = substream(seed, "split");
    for idx in &mut by_class {
        idx.shuffle(&mut r);
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let counts = allocate(&sizes, [spec.train, spec.val, spec.test]);
    let mut out = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, idx) in by_class.iter().enumerate() {
        let (a, b) = (counts[c][0], counts[c][0] + counts[c][1]);
        out.train.extend(idx[..a].iter().map(|&i| samples[i].clone()));
        out.val.extend(idx[a..b].iter().map(|&i| samples[i].clone()));
        out.test.extend(idx[b..].iter().map(|&i| samples[i].clone()));
    }
    Ok(out)
}

/// Index batches of one epoch: a permutation drawn from the named stream,
/// cut into chunks of `batch_size`, keeping the final short chunk.
pub fn batches(len: usize, batch_size: usize, seed: u64, stream: &str, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut substream(seed, &format!("{stream}/{epoch}")));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
