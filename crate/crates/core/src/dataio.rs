//! Labeled feature-vector shards: synthetic hospital cohorts, CSV I/O,
//! stratified hold-out splits and increment scheduling.
//!
//! Feature vectors stand in for image embeddings. Each class is an isotropic
//! Gaussian cluster; class centres sit at `offset_h ± separation * u` where
//! `u` is a seeded unit direction shared by every site and `offset_h` is a
//! per-site shift that makes hospitals non-identically distributed.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const HEALTHY: usize = 0;
pub const COVID: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    pub hospital_id: u16,
    pub samples: Vec<Sample>,
}

impl DatasetShard {
    pub fn new(hospital_id: u16, samples: Vec<Sample>) -> Result<Self> {
        let shard = DatasetShard {
            hospital_id,
            samples,
        };
        shard.validate()?;
        Ok(shard)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    /// `[healthy, covid]` counts.
    pub fn class_counts(&self) -> [usize; 2] {
        class_counts(&self.samples)
    }

    pub fn to_matrix(&self) -> (Array2<f64>, Vec<usize>) {
        to_matrix(&self.samples)
    }

    fn validate(&self) -> Result<()> {
        let Some(dim) = self.feature_dim() else {
            return Ok(());
        };
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::dims(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
            if s.label > COVID {
                return Err(Error::LabelOutOfRange { label: s.label });
            }
            if !s.features.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("sample features"));
            }
        }
        Ok(())
    }
}

pub fn class_counts(samples: &[Sample]) -> [usize; 2] {
    let mut c = [0; 2];
    for s in samples {
        c[s.label] += 1;
    }
    c
}

/// Row matrix of features and the matching label vector.
pub fn to_matrix(samples: &[Sample]) -> (Array2<f64>, Vec<usize>) {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut flat = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        flat.extend_from_slice(&s.features);
    }
    let x = Array2::from_shape_vec((samples.len(), dim), flat).expect("uniform feature dim");
    (x, samples.iter().map(|s| s.label).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCounts {
    pub healthy: usize,
    pub covid: usize,
}

/// Shifts one hospital's data from a given increment onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftInjection {
    pub hospital_id: u16,
    /// 1-based increment at which the shift starts; it persists afterwards.
    pub increment: usize,
    /// Norm of the class-mean shift, along the discriminant direction.
    pub kappa: f64,
    #[serde(default)]
    pub flip_labels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub hospitals: Vec<ClassCounts>,
    pub feature_dim: usize,
    /// Distance from each class centre to its site centre, in noise units
    /// when `noise` is 1.
    pub separation: f64,
    /// Norm of each site's random mean offset.
    pub hospital_offset: f64,
    pub noise: f64,
    pub public_size: usize,
    pub test_healthy: usize,
    pub test_covid: usize,
    pub seed: u64,
    pub drift: Option<DriftInjection>,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let table = [(216, 237), (220, 213), (258, 198), (265, 237), (219, 237)];
        CohortSpec {
            hospitals: table
                .iter()
                .map(|&(healthy, covid)| ClassCounts { healthy, covid })
                .collect(),
            feature_dim: 32,
            separation: 3.0,
            hospital_offset: 0.5,
            noise: 1.0,
            public_size: 400,
            test_healthy: 15,
            test_covid: 15,
            seed: 0,
            drift: None,
        }
    }
}

impl CohortSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 1 {
            return Err(Error::InvalidArgument(
                "feature_dim must be at least 1".into(),
            ));
        }
        let total: usize = self.hospitals.iter().map(|c| c.healthy + c.covid).sum();
        if total == 0 {
            return Err(Error::InvalidArgument(
                "cohort has zero hospital samples".into(),
            ));
        }
        if self.hospitals.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument("too many hospitals".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidArgument("separation must be positive".into()));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument("noise must be positive".into()));
        }
        if !(self.hospital_offset >= 0.0 && self.hospital_offset.is_finite()) {
            return Err(Error::InvalidArgument(
                "hospital_offset must be nonnegative".into(),
            ));
        }
        if let Some(d) = &self.drift {
            if d.increment == 0 || !d.kappa.is_finite() {
                return Err(Error::InvalidArgument(
                    "drift needs a 1-based increment and finite kappa".into(),
                ));
            }
            if d.hospital_id == 0 || d.hospital_id as usize > self.hospitals.len() {
                return Err(Error::UnknownHospital(d.hospital_id));
            }
        }
        Ok(())
    }
}

/// Hospital shards (ids `1..=H`), a public pretraining shard and a global
/// test pool, all drawn from independent streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub hospitals: Vec<DatasetShard>,
    pub public: DatasetShard,
    pub test: DatasetShard,
    /// Unit discriminant direction shared by every site.
    pub direction: Vec<f64>,
}

const STREAM_DIRECTION: u64 = 0xD1;
const STREAM_PUBLIC: u64 = 0xB0;
const STREAM_TEST: u64 = 0x7E;
const STREAM_HOSPITAL: u64 = 0x40;

fn gaussian_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn draw_site(
    spec: &CohortSpec,
    direction: &[f64],
    stream: u64,
    healthy: usize,
    covid: usize,
    with_offset: bool,
) -> Vec<Sample> {
    let mut rng = seed::rng(seed::derive(spec.seed, &[stream]));
    let dim = spec.feature_dim;
    let offset: Vec<f64> = if with_offset {
        unit_vec(&mut rng, dim)
            .into_iter()
            .map(|x| x * spec.hospital_offset)
            .collect()
    } else {
        vec![0.0; dim]
    };
    let mut samples = Vec::with_capacity(healthy + covid);
    for (label, count, sign) in [(HEALTHY, healthy, -1.0), (COVID, covid, 1.0)] {
        for _ in 0..count {
            let noise = gaussian_vec(&mut rng, dim);
            let features = (0..dim)
                .map(|j| offset[j] + sign * spec.separation * direction[j] + spec.noise * noise[j])
                .collect();
            samples.push(Sample { features, label });
        }
    }
    samples.shuffle(&mut rng);
    samples
}

pub fn synthesize_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(spec.seed, &[STREAM_DIRECTION]));
    let direction = unit_vec(&mut rng, spec.feature_dim);

    let hospitals = spec
        .hospitals
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let id = (i + 1) as u16;
            DatasetShard {
                hospital_id: id,
                samples: draw_site(
                    spec,
                    &direction,
                    STREAM_HOSPITAL + id as u64,
                    c.healthy,
                    c.covid,
                    true,
                ),
            }
        })
        .collect();
    let half = spec.public_size / 2;
    let public = DatasetShard {
        hospital_id: 0,
        samples: draw_site(
            spec,
            &direction,
            STREAM_PUBLIC,
            half,
            spec.public_size - half,
            true,
        ),
    };
    let test = DatasetShard {
        hospital_id: 0,
        samples: draw_site(
            spec,
            &direction,
            STREAM_TEST,
            spec.test_healthy,
            spec.test_covid,
            false,
        ),
    };
    Ok(Cohort {
        hospitals,
        public,
        test,
        direction,
    })
}

/// Adds `kappa * direction` to every sample and optionally flips labels.
pub fn inject_drift(samples: &mut [Sample], direction: &[f64], kappa: f64, flip_labels: bool) {
    for s in samples {
        for (f, d) in s.features.iter_mut().zip(direction) {
            *f += kappa * d;
        }
        if flip_labels {
            s.label = 1 - s.label;
        }
    }
}

pub fn load_csv(path: &Path, hospital_id: u16) -> Result<DatasetShard> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path, hospital_id)
}

fn parse_csv(text: &str, path: &Path, hospital_id: u16) -> Result<DatasetShard> {
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "label" {
        return Err(perr(1, "header must be `label,f0,...,f{d-1}`".into()));
    }
    for (j, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(perr(1, format!("expected column `f{j}`, found `{c}`")));
        }
    }
    let dim = cols.len() - 1;

    let mut samples = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(perr(
                lineno,
                format!("expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        let label = match fields[0] {
            "0" => HEALTHY,
            "1" => COVID,
            other => {
                return Err(perr(
                    lineno,
                    format!("label must be 0 or 1, found `{other}`"),
                ))
            }
        };
        let mut features = Vec::with_capacity(dim);
        for (j, f) in fields[1..].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| perr(lineno, format!("column f{j}: `{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(perr(lineno, format!("column f{j}: non-finite value")));
            }
            features.push(v);
        }
        samples.push(Sample { features, label });
    }
    if samples.is_empty() {
        return Err(Error::Empty("shard"));
    }
    Ok(DatasetShard {
        hospital_id,
        samples,
    })
}

/// Writes the shard in the CSV layout `load_csv` reads. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv(path: &Path, shard: &DatasetShard) -> Result<()> {
    let dim = shard.feature_dim().unwrap_or(0);
    let mut out = String::from("label");
    for j in 0..dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for s in &shard.samples {
        out.push_str(&s.label.to_string());
        for v in &s.features {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Class-stratified seeded split. The test side receives
/// `round(len * test_fraction)` samples (at least one, never all), spread
/// over classes by largest remainder.
pub fn split_holdout(
    shard: &DatasetShard,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetShard, DatasetShard)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let n = shard.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split a shard of {n} samples"
        )));
    }
    let test_total = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);

    let mut rng = seed::rng(seed);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in shard.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    for idx in by_class.iter_mut() {
        idx.shuffle(&mut rng);
    }

    let exact: Vec<f64> = by_class
        .iter()
        .map(|idx| idx.len() as f64 * test_total as f64 / n as f64)
        .collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..2).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut short = test_total - take.iter().sum::<usize>();
    for &c in order.iter().cycle().take(4) {
        if short == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            short -= 1;
        }
    }

    let mut in_test = vec![false; n];
    for (c, idx) in by_class.iter().enumerate() {
        for &i in &idx[..take[c]] {
            in_test[i] = true;
        }
    }
    let mut train = Vec::with_capacity(n - test_total);
    let mut test = Vec::with_capacity(test_total);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    for i in perm {
        let s = shard.samples[i].clone();
        if in_test[i] {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((
        DatasetShard {
            hospital_id: shard.hospital_id,
            samples: train,
        },
        DatasetShard {
            hospital_id: shard.hospital_id,
            samples: test,
        },
    ))
}

/// Disjoint index sets over a shard, one per increment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementSchedule {
    pub parts: Vec<Vec<usize>>,
}

impl IncrementSchedule {
    pub fn increment_count(&self) -> usize {
        self.parts.len()
    }

    pub fn materialize(&self, shard: &DatasetShard) -> Vec<Vec<Sample>> {
        self.parts
            .iter()
            .map(|p| p.iter().map(|&i| shard.samples[i].clone()).collect())
            .collect()
    }
}

/// Seeded balanced partition of `0..len` into `n` parts whose sizes differ
/// by at most one; the larger parts come first.
pub fn schedule_increments(len: usize, n: usize, seed: u64) -> Result<IncrementSchedule> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "increment count must be at least 1".into(),
        ));
    }
    if n > len {
        return Err(Error::InvalidArgument(format!(
            "cannot split {len} samples into {n} increments"
        )));
    }
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut seed::rng(seed));
    let (base, extra) = (len / n, len % n);
    let mut parts = Vec::with_capacity(n);
    let mut start = 0;
    for k in 0..n {
        let size = base + usize::from(k < extra);
        parts.push(perm[start..start + size].to_vec());
        start += size;
    }
    Ok(IncrementSchedule { parts })
}
