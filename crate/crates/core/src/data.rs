//! Datasets on the radius-√d sphere: synthetic generation, image-format
//! readers and the plain CSV matrix format.
//!
//! # CSV matrix format
//!
//! ```text
//! d,n
//! <d>,<n>
//! x_11,x_21,...,x_d1      <- column 1
//! ...
//! x_1n,x_2n,...,x_dn      <- column n
//! ```
//!
//! The first line is the literal header `d,n`, the second holds the two
//! dimensions, and each following line is one column (one data point).
//! Values are written with Rust's shortest round-trip float formatting, so
//! a write/read cycle is bit-exact. Label files are a single column with
//! header `y`. Blank lines and lines starting with `#` (provenance
//! metadata) are ignored by the readers.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DeqError, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng;

/// Default bound on `|y_i|`.
pub const Y_CAP: f64 = 10.0;
/// Two columns count as parallel when `|cos| > 1 − PARALLEL_TOL`.
pub const PARALLEL_TOL: f64 = 1e-9;
/// Relative tolerance on column norms `‖x_i‖ = √d`.
pub const NORM_TOL: f64 = 1e-8;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Mnist,
    Cifar10,
    File,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Synthetic => "synthetic",
            Provenance::Mnist => "mnist",
            Provenance::Cifar10 => "cifar10",
            Provenance::File => "file",
        }
    }
}

/// Inputs `x` (d × n, one point per column) with labels `y`.
///
/// Every constructed dataset has column norms `√d`, no parallel pair of
/// columns and bounded labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vector,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vector, provenance: Provenance) -> Result<Self> {
        Self::with_cap(x, y, provenance, Y_CAP)
    }

    pub fn with_cap(x: Matrix, y: Vector, provenance: Provenance, y_cap: f64) -> Result<Self> {
        let (d, n) = x.shape();
        if d == 0 || n == 0 {
            return Err(DeqError::Input(format!("dataset must be non-empty, got {d}x{n}")));
        }
        if y.len() != n {
            return Err(DeqError::shape("Dataset::new", format!("{n} labels"), format!("{}", y.len())));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(DeqError::Input("dataset has non-finite values".into()));
        }
        let target = (d as f64).sqrt();
        for (i, col) in x.column_iter().enumerate() {
            let norm = col.norm();
            if (norm - target).abs() > NORM_TOL * target {
                return Err(DeqError::Assumption(format!(
                    "column {i} has norm {norm}, expected sqrt(d) = {target}"
                )));
            }
        }
        if let Some((i, j)) = parallel_pairs(&x).first() {
            return Err(DeqError::Assumption(format!("columns {i} and {j} are parallel")));
        }
        if let Some(i) = y.iter().position(|v| v.abs() > y_cap) {
            return Err(DeqError::Assumption(format!("label {i} = {} exceeds cap {y_cap}", y[i])));
        }
        Ok(Self { x, y, provenance })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Vector {
        &self.y
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Same inputs, new labels (still validated).
    pub fn with_labels(&self, y: Vector) -> Result<Self> {
        Dataset::new(self.x.clone(), y, self.provenance)
    }
}

/// Index pairs `(i, j)`, `i < j`, whose columns are parallel within [`PARALLEL_TOL`].
pub fn parallel_pairs(x: &Matrix) -> Vec<(usize, usize)> {
    let g = x.tr_mul(x);
    let n = x.ncols();
    let mut out = Vec::new();
    for j in 0..n {
        for i in 0..j {
            let denom = (g[(i, i)] * g[(j, j)]).sqrt();
            if denom > 0.0 && (g[(i, j)] / denom).abs() > 1.0 - PARALLEL_TOL {
                out.push((i, j));
            }
        }
    }
    out
}

/// Largest `|cos∠(x_i, x_j)|` over distinct pairs (0 for a single column).
pub fn max_abs_cosine(x: &Matrix) -> f64 {
    let g = x.tr_mul(x);
    let n = x.ncols();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..j {
            let c = g[(i, j)] / (g[(i, i)] * g[(j, j)]).sqrt();
            worst = worst.max(c.abs());
        }
    }
    worst
}

fn is_parallel(a: &[f64], b: &[f64]) -> bool {
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let na: f64 = a.iter().map(|p| p * p).sum();
    let nb: f64 = b.iter().map(|p| p * p).sum();
    (dot / (na * nb).sqrt()).abs() > 1.0 - PARALLEL_TOL
}

/// `n` points uniform on the radius-√d sphere in `R^d` with standard
/// Gaussian labels clipped to `[−Y_CAP, Y_CAP]`.
///
/// `n = 1` is accepted: the pairwise condition is vacuous then.
pub fn gen_sphere_data(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n < 1 || d < 2 {
        return Err(DeqError::Input(format!("gen_sphere_data needs n >= 1 and d >= 2, got n={n}, d={d}")));
    }
    let mut rng = rng::rng(seed);
    let radius = (d as f64).sqrt();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|p| p * p).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|p| *p *= radius / norm);
        if cols.iter().any(|c| is_parallel(c, &v)) {
            continue;
        }
        cols.push(v);
    }
    let x = Matrix::from_fn(d, n, |r, c| cols[c][r]);
    let y = Vector::from_fn(n, |_, _| {
        let g: f64 = StandardNormal.sample(&mut rng);
        g.clamp(-Y_CAP, Y_CAP)
    });
    Dataset::new(x, y, Provenance::Synthetic)
}

/// Rescales every column to norm `√d` with `d` the row count.
pub fn normalize_to_sphere(raw: &Matrix) -> Result<Matrix> {
    let d = raw.nrows();
    let radius = (d as f64).sqrt();
    let mut out = raw.clone();
    for (i, mut col) in out.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(DeqError::Input(format!("column {i} has zero or non-finite norm")));
        }
        col *= radius / norm;
    }
    Ok(out)
}

/// Raw images with integer class labels, one image per column.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImages {
    pub pixels: Matrix,
    pub labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DeqError::Parse(format!("{what}: truncated header")))
}

/// Parses an IDX3 (unsigned byte) image file into a `rows·cols × count` matrix.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DeqError::Parse(format!("idx images: bad magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let d = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * d {
        return Err(DeqError::Parse(format!(
            "idx images: expected {} pixel bytes, found {}",
            count * d,
            body.len()
        )));
    }
    Ok(Matrix::from_fn(d, count, |r, c| body[c * d + r] as f64))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DeqError::Parse(format!("idx labels: bad magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(DeqError::Parse(format!("idx labels: expected {count} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

/// Reads an IDX image file and its label file (uncompressed).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawImages> {
    let pixels = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if pixels.ncols() != labels.len() {
        return Err(DeqError::Parse(format!(
            "idx: {} images but {} labels",
            pixels.ncols(),
            labels.len()
        )));
    }
    Ok(RawImages { pixels, labels })
}

/// Parses CIFAR-10 binary batch records: one label byte then 3072 pixel bytes.
pub fn parse_cifar_bin(bytes: &[u8]) -> Result<RawImages> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DeqError::Parse(format!(
            "cifar: file size {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(DeqError::Parse(format!("cifar: record {k} has label {}", rec[0])));
        }
        labels.push(rec[0]);
    }
    let pixels = Matrix::from_fn(CIFAR_PIXELS, count, |r, c| bytes[c * CIFAR_RECORD + 1 + r] as f64);
    Ok(RawImages { pixels, labels })
}

pub fn load_cifar_bin(path: impl AsRef<Path>) -> Result<RawImages> {
    parse_cifar_bin(&fs::read(path)?)
}

/// Binary task from two classes: `per_class` samples of each, labelled
/// −1 (`class_a`) and +1 (`class_b`), columns normalized to `√d`.
///
/// A sample parallel to one already chosen is replaced by another unused
/// sample of the same class; if the class runs out the offending indices
/// are reported.
pub fn subset_binary(raw: &RawImages, class_a: u8, class_b: u8, per_class: usize, seed: u64, provenance: Provenance) -> Result<Dataset> {
    if class_a == class_b {
        return Err(DeqError::Input("subset_binary: classes must differ".into()));
    }
    if per_class == 0 {
        return Err(DeqError::Input("subset_binary: per_class must be positive".into()));
    }
    let mut rng = rng::rng(seed);
    let d = raw.pixels.nrows();
    let radius = (d as f64).sqrt();
    let mut chosen: Vec<(usize, Vec<f64>)> = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);

    for (class, label) in [(class_a, -1.0), (class_b, 1.0)] {
        let pool: Vec<usize> = raw
            .labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect();
        if pool.len() < per_class {
            return Err(DeqError::Input(format!(
                "class {class} has {} samples, need {per_class}",
                pool.len()
            )));
        }
        let order = index::sample(&mut rng, pool.len(), pool.len());
        let mut taken = 0;
        let mut rejected: BTreeSet<(usize, usize)> = BTreeSet::new();
        for k in order.iter() {
            if taken == per_class {
                break;
            }
            let idx = pool[k];
            let col = raw.pixels.column(idx);
            let norm = col.norm();
            if norm == 0.0 {
                rejected.insert((idx, idx));
                continue;
            }
            let v: Vec<f64> = col.iter().map(|p| p * radius / norm).collect();
            if let Some((other, _)) = chosen.iter().find(|(_, c)| is_parallel(c, &v)) {
                rejected.insert((*other, idx));
                continue;
            }
            chosen.push((idx, v));
            labels.push(label);
            taken += 1;
        }
        if taken < per_class {
            let listing: Vec<String> = rejected
                .iter()
                .map(|(a, b)| if a == b { format!("{a} (all-zero)") } else { format!("{a}~{b}") })
                .collect();
            return Err(DeqError::Assumption(format!(
                "class {class}: only {taken} of {per_class} samples usable; parallel or zero samples: {}",
                listing.join(", ")
            )));
        }
    }
    let n = chosen.len();
    let x = Matrix::from_fn(d, n, |r, c| chosen[c].1[r]);
    Dataset::new(x, Vector::from_vec(labels), provenance)
}

fn fmt_f64(out: &mut String, v: f64) {
    write!(out, "{v:?}").expect("write to string");
}

/// Serializes a matrix in the CSV matrix format.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let (d, n) = m.shape();
    let mut out = String::with_capacity(20 * d * n + 16);
    writeln!(out, "d,n\n{d},{n}").expect("write to string");
    for col in m.column_iter() {
        for (k, v) in col.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            fmt_f64(&mut out, *v);
        }
        out.push('\n');
    }
    out
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .map_err(|e| DeqError::Parse(format!("line {line}: bad number {tok:?}: {e}")))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('#')
    })
}

pub fn matrix_from_csv(text: &str) -> Result<Matrix> {
    let mut lines = data_lines(text);
    match lines.next() {
        Some((_, h)) if h.trim() == "d,n" => {}
        _ => return Err(DeqError::Parse("matrix csv: missing `d,n` header".into())),
    }
    let (ln, dims) = lines
        .next()
        .ok_or_else(|| DeqError::Parse("matrix csv: missing dimension line".into()))?;
    let dims: Vec<&str> = dims.split(',').collect();
    if dims.len() != 2 {
        return Err(DeqError::Parse(format!("line {}: expected `<d>,<n>`", ln + 1)));
    }
    let parse_dim = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|e| DeqError::Parse(format!("line {}: bad dimension {s:?}: {e}", ln + 1)))
    };
    let (d, n) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
    let mut data = Vec::with_capacity(d * n);
    let mut cols = 0;
    for (ln, line) in lines {
        let before = data.len();
        for tok in line.split(',') {
            data.push(parse_f64(tok, ln + 1)?);
        }
        if data.len() - before != d {
            return Err(DeqError::Parse(format!("line {}: expected {d} values, found {}", ln + 1, data.len() - before)));
        }
        cols += 1;
    }
    if cols != n {
        return Err(DeqError::Parse(format!("matrix csv: expected {n} columns, found {cols}")));
    }
    Ok(Matrix::from_vec(d, n, data))
}

pub fn labels_to_csv(y: &Vector) -> String {
    let mut out = String::from("y\n");
    for v in y.iter() {
        fmt_f64(&mut out, *v);
        out.push('\n');
    }
    out
}

pub fn labels_from_csv(text: &str) -> Result<Vector> {
    let mut lines = data_lines(text);
    match lines.next() {
        Some((_, h)) if h.trim() == "y" => {}
        _ => return Err(DeqError::Parse("labels csv: missing `y` header".into())),
    }
    let vals = lines.map(|(ln, l)| parse_f64(l, ln + 1)).collect::<Result<Vec<_>>>()?;
    Ok(Vector::from_vec(vals))
}

/// Loads a dataset from the CSV matrix + label files, normalizing the
/// columns onto the √d sphere.
pub fn load_dataset_csv(x_path: impl AsRef<Path>, y_path: impl AsRef<Path>) -> Result<Dataset> {
    let raw = matrix_from_csv(&fs::read_to_string(x_path)?)?;
    let y = labels_from_csv(&fs::read_to_string(y_path)?)?;
    Dataset::new(normalize_to_sphere(&raw)?, y, Provenance::File)
}
