//! Synthetic class-conditional data.
//!
//! The same class geometry (blob centers, ring radii, grid cells) backs both
//! the hidden "true" data the teacher is trained on and the proxy pool the
//! attacker draws from. The geometry is a pure function of the spec seed;
//! sampling noise comes from the caller's random source. Proxy samples get
//! their noise inflated by `1 + distribution_shift`.
//!
//! Each class is produced from two interleaved noise streams so that half of
//! every class comes from each variant.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{argmax, one_hot};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        line: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("line {line}: cannot parse {value:?}")]
    BadValue { line: usize, value: String },
    #[error("sidecar has {found} rows but the pool has {expected}")]
    SidecarMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianBlobs,
    ConcentricRings,
    XorGrid,
}

impl std::str::FromStr for Generator {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" | "blobs" => Ok(Self::GaussianBlobs),
            "concentric_rings" | "rings" => Ok(Self::ConcentricRings),
            "xor_grid" | "xor" => Ok(Self::XorGrid),
            other => Err(DataError::InvalidSpec(format!("unknown generator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub num_classes: usize,
    pub input_dim: usize,
    pub per_class_count: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub distribution_shift: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// Ten Gaussian blobs in 8 dimensions, 200 samples per class.
    fn default() -> Self {
        Self {
            generator: Generator::GaussianBlobs,
            num_classes: 10,
            input_dim: 8,
            per_class_count: 200,
            class_separation: 3.0,
            noise_scale: 1.0,
            distribution_shift: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_owned()));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.input_dim < 2 {
            return bad("input_dim must be >= 2");
        }
        if self.per_class_count == 0 {
            return bad("per_class_count must be >= 1");
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation must be positive");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be positive");
        }
        if !(self.distribution_shift >= 0.0 && self.distribution_shift.is_finite()) {
            return bad("distribution_shift must be non-negative");
        }
        Ok(())
    }

    /// Total sample count `per_class_count × num_classes`.
    pub fn total(&self) -> usize {
        self.per_class_count * self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn one_hot_targets(&self) -> Vec<Vec<f64>> {
        self.labels.iter().map(|&c| one_hot(c, self.num_classes)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Stratified split into `(train, validation)`; see [`stratified_split`].
    pub fn split_validation<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> (Self, Self) {
        let (train, val) = stratified_split(&self.labels, self.num_classes, fraction, rng);
        (self.subset(&train), self.subset(&val))
    }
}

/// Proxy samples with their provenance class and current pseudo-label.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyPool {
    pub features: Vec<Vec<f64>>,
    pub provenance_class: Vec<usize>,
    pub pseudo_label: Vec<Vec<f64>>,
    /// `false` once the sample has been promoted into the teacher-labeled set.
    pub active: Vec<bool>,
    pub num_classes: usize,
}

impl ProxyPool {
    /// Fresh pool: every sample active, pseudo-label one-hot at its provenance class.
    pub fn new(features: Vec<Vec<f64>>, provenance_class: Vec<usize>, num_classes: usize) -> Self {
        let pseudo_label = provenance_class.iter().map(|&c| one_hot(c, num_classes)).collect();
        let active = vec![true; features.len()];
        Self {
            features,
            provenance_class,
            pseudo_label,
            active,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.active[i]).collect()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Argmax of the current pseudo-label.
    pub fn cluster_key(&self, index: usize) -> usize {
        argmax(&self.pseudo_label[index])
    }

    /// Marks a sample as teacher-labeled. Promotion is one-way.
    pub fn promote(&mut self, index: usize) {
        self.active[index] = false;
    }

    /// Checks every pseudo-label is a distribution within `tol`.
    pub fn labels_normalized(&self, tol: f64) -> bool {
        self.pseudo_label.iter().all(|p| {
            p.len() == self.num_classes
                && p.iter().all(|&v| v >= 0.0)
                && (p.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

/// Class geometry shared by true data and proxy pool.
struct Geometry {
    spec: DatasetSpec,
    /// Blob centers (blobs only).
    centers: Vec<Vec<f64>>,
    /// Grid cells per class (xor grid only).
    cells: Vec<Vec<(usize, usize)>>,
}

const GEOMETRY_SALT: u64 = 0x6765_6f6d_6574_7279;

impl Geometry {
    fn new(spec: &DatasetSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ GEOMETRY_SALT);
        let centers = match spec.generator {
            Generator::GaussianBlobs => (0..spec.num_classes)
                .map(|_| {
                    (0..spec.input_dim)
                        .map(|_| spec.class_separation * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect()
                })
                .collect(),
            _ => Vec::new(),
        };
        let cells = match spec.generator {
            Generator::XorGrid => {
                let side = spec.num_classes;
                let mut cells = vec![Vec::new(); spec.num_classes];
                for i in 0..side {
                    for j in 0..side {
                        cells[(i + j) % spec.num_classes].push((i, j));
                    }
                }
                cells
            }
            _ => Vec::new(),
        };
        Self {
            spec: spec.clone(),
            centers,
            cells,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, class: usize, noise: f64, rng: &mut R) -> Vec<f64> {
        let spec = &self.spec;
        let mut x: Vec<f64> = match spec.generator {
            Generator::GaussianBlobs => self.centers[class].clone(),
            Generator::ConcentricRings => {
                let radius = (class + 1) as f64 * spec.class_separation;
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let mut x = vec![0.0; spec.input_dim];
                x[0] = radius * angle.cos();
                x[1] = radius * angle.sin();
                x
            }
            Generator::XorGrid => {
                let cells = &self.cells[class];
                let (i, j) = cells[rng.random_range(0..cells.len())];
                let mut x = vec![0.0; spec.input_dim];
                x[0] = i as f64 * spec.class_separation;
                x[1] = j as f64 * spec.class_separation;
                x
            }
        };
        for v in &mut x {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise * z;
        }
        x
    }
}

/// Two independent noise streams, one per template variant.
fn variant_streams<R: Rng + ?Sized>(rng: &mut R) -> [ChaCha8Rng; 2] {
    [ChaCha8Rng::from_seed(rng.random()), ChaCha8Rng::from_seed(rng.random())]
}

/// Draws the hidden training data and splits it 80/20 (stratified) into
/// `(train, test)`.
pub fn generate_true_dataset<R: Rng + ?Sized>(
    spec: &DatasetSpec,
    rng: &mut R,
) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let geometry = Geometry::new(spec);
    let mut streams = variant_streams(rng);
    let mut features = Vec::with_capacity(spec.total());
    let mut labels = Vec::with_capacity(spec.total());
    for class in 0..spec.num_classes {
        for i in 0..spec.per_class_count {
            features.push(geometry.sample(class, spec.noise_scale, &mut streams[i % 2]));
            labels.push(class);
        }
    }
    let all = LabeledDataset {
        features,
        labels,
        num_classes: spec.num_classes,
    };
    let (train, test) = all.split_validation(0.2, rng);
    Ok((train, test))
}

/// Draws `m = per_class_count × num_classes` proxy samples, each with a class
/// chosen uniformly at random and noise inflated by `1 + distribution_shift`.
pub fn generate_proxy_pool<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Result<ProxyPool> {
    spec.validate()?;
    let geometry = Geometry::new(spec);
    let mut streams = variant_streams(rng);
    let noise = spec.noise_scale * (1.0 + spec.distribution_shift);
    let mut per_class_seen = vec![0usize; spec.num_classes];
    let mut features = Vec::with_capacity(spec.total());
    let mut classes = Vec::with_capacity(spec.total());
    for _ in 0..spec.total() {
        let class = rng.random_range(0..spec.num_classes);
        let variant = per_class_seen[class] % 2;
        per_class_seen[class] += 1;
        features.push(geometry.sample(class, noise, &mut streams[variant]));
        classes.push(class);
    }
    Ok(ProxyPool::new(features, classes, spec.num_classes))
}

/// Stratified split of sample indices into `(train, validation)`.
///
/// The validation part holds exactly `⌊fraction · m⌋` samples. Each class
/// contributes the floor of its proportional share; the leftover slots go to
/// the classes with the largest fractional remainders (lowest class first on
/// ties). Which samples of a class land in validation is chosen by `rng`.
/// Both returned index lists are ascending.
pub fn stratified_split<R: Rng + ?Sized>(
    classes: &[usize],
    num_classes: usize,
    fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let m = classes.len();
    let fraction = fraction.clamp(0.0, 1.0);
    let target = (fraction * m as f64).floor() as usize;
    let mut members = vec![Vec::new(); num_classes];
    for (i, &c) in classes.iter().enumerate() {
        members[c].push(i);
    }
    let mut quota: Vec<usize> = members
        .iter()
        .map(|g| (fraction * g.len() as f64).floor() as usize)
        .collect();
    let mut leftover = target.saturating_sub(quota.iter().sum());
    let mut by_remainder: Vec<usize> = (0..num_classes).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = fraction * members[a].len() as f64 - quota[a] as f64;
        let rb = fraction * members[b].len() as f64 - quota[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    while leftover > 0 {
        let before = leftover;
        for &c in &by_remainder {
            if leftover > 0 && quota[c] < members[c].len() {
                quota[c] += 1;
                leftover -= 1;
            }
        }
        if before == leftover {
            break;
        }
    }

    let mut train = Vec::with_capacity(m - target);
    let mut val = Vec::with_capacity(target);
    for (c, group) in members.iter_mut().enumerate() {
        group.shuffle(rng);
        val.extend_from_slice(&group[..quota[c]]);
        train.extend_from_slice(&group[quota[c]..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn header(prefix: char, dim: usize, last: &str) -> Vec<String> {
    let mut h: Vec<String> = (0..dim).map(|i| format!("{prefix}{i}")).collect();
    h.push(last.to_owned());
    h
}

fn write_rows<W: Write>(mut out: W, head: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    writeln!(out, "{}", head.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Dataset CSV: header `f0,...,f{d-1},label`, one sample per line.
pub fn write_dataset<W: Write>(out: W, data: &LabeledDataset) -> Result<()> {
    let rows = data.features.iter().zip(&data.labels).map(|(x, y)| {
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        row.push(y.to_string());
        row
    });
    write_rows(out, &header('f', data.input_dim(), "label"), rows)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    write_dataset(std::io::BufWriter::new(std::fs::File::create(path)?), data)
}

struct Table {
    width: usize,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table<B: BufRead>(input: B, last_column: &str, prefix: char) -> Result<Table> {
    let mut lines = input.lines().enumerate();
    let head = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(DataError::MalformedHeader("file is empty".into())),
    };
    let cols: Vec<&str> = head.trim_end_matches('\r').split(',').collect();
    let width = cols.len();
    let well_formed = width >= 2
        && cols[width - 1] == last_column
        && cols[..width - 1]
            .iter()
            .enumerate()
            .all(|(i, c)| *c == format!("{prefix}{i}"));
    if !well_formed {
        return Err(DataError::MalformedHeader(head));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_owned).collect();
        if fields.len() != width {
            return Err(DataError::RaggedRow {
                line: idx + 1,
                expected: width,
                found: fields.len(),
            });
        }
        rows.push((idx + 1, fields));
    }
    Ok(Table { width, rows })
}

fn parse_f64(line: usize, s: &str) -> Result<f64> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::BadValue {
            line,
            value: s.to_owned(),
        }),
    }
}

fn parse_usize(line: usize, s: &str) -> Result<usize> {
    s.trim().parse::<usize>().map_err(|_| DataError::BadValue {
        line,
        value: s.to_owned(),
    })
}

pub fn read_dataset<B: BufRead>(input: B, num_classes: usize) -> Result<LabeledDataset> {
    let table = read_table(input, "label", 'f')?;
    let dim = table.width - 1;
    let mut features = Vec::with_capacity(table.rows.len());
    let mut labels = Vec::with_capacity(table.rows.len());
    for (line, fields) in table.rows {
        let x = fields[..dim]
            .iter()
            .map(|s| parse_f64(line, s))
            .collect::<Result<Vec<_>>>()?;
        let label = parse_usize(line, &fields[dim])?;
        if label >= num_classes {
            return Err(DataError::LabelOutOfRange {
                line,
                label,
                num_classes,
            });
        }
        features.push(x);
        labels.push(label);
    }
    Ok(LabeledDataset {
        features,
        labels,
        num_classes,
    })
}

pub fn load_dataset(path: impl AsRef<Path>, num_classes: usize) -> Result<LabeledDataset> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?), num_classes)
}

/// Writes the pool as a dataset CSV (label = provenance class) plus a sidecar
/// with one `p0,...,p{C-1},active` row per sample.
pub fn save_pool(features_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>, pool: &ProxyPool) -> Result<()> {
    let data = LabeledDataset {
        features: pool.features.clone(),
        labels: pool.provenance_class.clone(),
        num_classes: pool.num_classes,
    };
    save_dataset(features_path, &data)?;
    let out = std::io::BufWriter::new(std::fs::File::create(sidecar_path)?);
    let rows = pool.pseudo_label.iter().zip(&pool.active).map(|(p, a)| {
        let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        row.push(if *a { "1" } else { "0" }.to_owned());
        row
    });
    write_rows(out, &header('p', pool.num_classes, "active"), rows)
}

pub fn load_pool(features_path: impl AsRef<Path>, sidecar_path: Option<&Path>, num_classes: usize) -> Result<ProxyPool> {
    let data = load_dataset(features_path, num_classes)?;
    let mut pool = ProxyPool::new(data.features, data.labels, num_classes);
    if let Some(path) = sidecar_path {
        let table = read_table(std::io::BufReader::new(std::fs::File::open(path)?), "active", 'p')?;
        if table.width - 1 != num_classes {
            return Err(DataError::MalformedHeader(format!(
                "sidecar has {} label columns, expected {num_classes}",
                table.width - 1
            )));
        }
        if table.rows.len() != pool.len() {
            return Err(DataError::SidecarMismatch {
                expected: pool.len(),
                found: table.rows.len(),
            });
        }
        for (i, (line, fields)) in table.rows.into_iter().enumerate() {
            pool.pseudo_label[i] = fields[..num_classes]
                .iter()
                .map(|s| parse_f64(line, s))
                .collect::<Result<Vec<_>>>()?;
            pool.active[i] = match fields[num_classes].trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(DataError::BadValue {
                        line,
                        value: other.to_owned(),
                    })
                }
            };
        }
    }
    Ok(pool)
}
