//! LIBSVM-format datasets and their partition across simulated clients.
//!
//! Feature indices are 1-based in the text format and stored 0-based here.
//! Raw labels are mapped to dense class indices by the sorted order of the
//! distinct raw values, unless an explicit [`LabelMap`] is supplied.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled example with a sparse feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub label: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Example {
    pub fn features(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Explicit raw-label to class-index mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    /// Raw label values; position is the class index.
    pub raw: Vec<f64>,
}

impl LabelMap {
    /// Sorted distinct raw labels become classes `0..k`.
    pub fn from_sorted<I: IntoIterator<Item = f64>>(labels: I) -> Self {
        let mut raw: Vec<f64> = labels.into_iter().collect();
        raw.sort_by(f64::total_cmp);
        raw.dedup();
        LabelMap { raw }
    }

    pub fn class_of(&self, raw: f64) -> Option<usize> {
        self.raw.iter().position(|&r| r == raw)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    num_features: usize,
    labels: LabelMap,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    pub label_map: Option<LabelMap>,
    /// Lower bound on the feature count; the parsed count is
    /// `max(hint, largest index seen)`.
    pub num_features: Option<usize>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_features: usize, labels: LabelMap) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if labels.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                labels.len()
            )));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= labels.len() {
                return Err(Error::InvalidArgument(format!(
                    "example {i}: label {} out of range",
                    ex.label
                )));
            }
            if ex.indices.len() != ex.values.len() {
                return Err(Error::InvalidArgument(format!(
                    "example {i}: index/value length mismatch"
                )));
            }
            if ex.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "example {i}: feature indices not strictly increasing"
                )));
            }
            if ex.indices.last().is_some_and(|&j| j >= num_features) {
                return Err(Error::InvalidArgument(format!(
                    "example {i}: feature index beyond {num_features}"
                )));
            }
        }
        Ok(Dataset {
            examples,
            num_features,
            labels,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn example(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.labels
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// Checks that every class has at least one example.
    pub fn check_class_coverage(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(k) => Err(Error::InvalidArgument(format!(
                "class {k} (raw label {}) has no examples",
                self.labels.raw[k]
            ))),
            None => Ok(()),
        }
    }

    /// Widens the feature space, e.g. to align a test split with training.
    pub fn set_num_features(&mut self, num_features: usize) -> Result<()> {
        let max_seen = self
            .examples
            .iter()
            .filter_map(|e| e.indices.last().copied())
            .max()
            .map_or(0, |m| m + 1);
        if num_features < max_seen {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink feature space below {max_seen}"
            )));
        }
        self.num_features = num_features;
        Ok(())
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let examples = rows.iter().map(|&r| self.examples[r].clone()).collect();
        Dataset::new(examples, self.num_features, self.labels.clone())
    }

    /// Scales every stored value in place by a per-feature factor.
    pub fn scale_features(&mut self, factors: &[f64]) {
        for ex in &mut self.examples {
            for (j, v) in ex.indices.iter().zip(ex.values.iter_mut()) {
                *v *= factors[*j];
            }
        }
    }

    pub fn load(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<Dataset> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        parse_libsvm(file, opts)
    }
}

/// Parses LIBSVM text (`label idx:val idx:val ...`, 1-based indices).
/// Gzip input is detected by its magic bytes.
pub fn parse_libsvm<R: Read>(source: R, opts: &ParseOptions) -> Result<Dataset> {
    let mut reader = BufReader::new(source);
    let is_gzip = {
        let head = reader.fill_buf()?;
        head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b
    };
    if is_gzip {
        parse_lines(BufReader::new(GzDecoder::new(reader)), opts)
    } else {
        parse_lines(reader, opts)
    }
}

struct RawExample {
    label: f64,
    indices: Vec<usize>,
    values: Vec<f64>,
}

fn parse_lines<R: BufRead>(reader: R, opts: &ParseOptions) -> Result<Dataset> {
    let mut raw = Vec::new();
    let mut max_index = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_ascii_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad label {label_tok:?}"),
        })?;
        if !label.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("non-finite label {label_tok:?}"),
            });
        }
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected idx:val, got {tok:?}"),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad feature index {idx:?}"),
            })?;
            if idx == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "feature indices are 1-based".into(),
                });
            }
            let val: f64 = val.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad feature value {val:?}"),
            })?;
            if !val.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite feature value {val:?}"),
                });
            }
            let idx = idx - 1;
            if indices.last().is_some_and(|&prev| prev >= idx) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("feature index {} not increasing", idx + 1),
                });
            }
            max_index = max_index.max(idx + 1);
            indices.push(idx);
            values.push(val);
        }
        raw.push((lineno, RawExample { label, indices, values }));
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let labels = match &opts.label_map {
        Some(map) => map.clone(),
        None => LabelMap::from_sorted(raw.iter().map(|(_, r)| r.label)),
    };
    let mut examples = Vec::with_capacity(raw.len());
    for (lineno, r) in raw {
        let label = labels.class_of(r.label).ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("label {} not in label map", r.label),
        })?;
        examples.push(Example {
            label,
            indices: r.indices,
            values: r.values,
        });
    }
    let num_features = max_index.max(opts.num_features.unwrap_or(0));
    Dataset::new(examples, num_features, labels)
}

/// Canonical LIBSVM writer: raw labels, 1-based indices, shortest
/// round-trip float formatting.
pub fn write_libsvm<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    for ex in data.examples() {
        write!(out, "{}", data.labels.raw[ex.label])?;
        for (j, v) in ex.features() {
            write!(out, " {}:{}", j + 1, v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Per-feature max-abs scaling factors (1 for all-zero features).
pub fn max_abs_factors(data: &Dataset) -> Vec<f64> {
    let mut max_abs = vec![0.0f64; data.num_features()];
    for ex in data.examples() {
        for (j, v) in ex.features() {
            max_abs[j] = max_abs[j].max(v.abs());
        }
    }
    max_abs
        .into_iter()
        .map(|m| if m > 0.0 { 1.0 / m } else { 1.0 })
        .collect()
}

/// A client's slice of the training rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionScheme {
    Iid,
    NonIid,
}

impl std::str::FromStr for PartitionScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(PartitionScheme::Iid),
            "noniid" | "non-iid" => Ok(PartitionScheme::NonIid),
            other => Err(Error::InvalidArgument(format!("unknown partition scheme {other:?}"))),
        }
    }
}

impl std::fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PartitionScheme::Iid => "iid",
            PartitionScheme::NonIid => "noniid",
        })
    }
}

/// Uniform seeded permutation cut into `n_clients` contiguous blocks whose
/// sizes differ by at most one.
pub fn partition_iid(data: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    let n = data.len();
    if n_clients < 2 {
        return Err(Error::InvalidArgument("need at least 2 clients".into()));
    }
    if n_clients > n {
        return Err(Error::InvalidArgument(format!(
            "{n_clients} clients but only {n} examples"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(split_even(&perm, n_clients)
        .into_iter()
        .enumerate()
        .map(|(client_id, block)| {
            let mut indices = block.to_vec();
            indices.sort_unstable();
            ClientShard { client_id, indices }
        })
        .collect())
}

/// Label-sorted shards, `shards_per_client` of them dealt to each client by
/// a seeded permutation.
pub fn partition_noniid(
    data: &Dataset,
    n_clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    let n = data.len();
    if n_clients < 2 || shards_per_client == 0 {
        return Err(Error::InvalidArgument(
            "need at least 2 clients and 1 shard per client".into(),
        ));
    }
    let n_shards = n_clients * shards_per_client;
    if n_shards > n {
        return Err(Error::InvalidArgument(format!(
            "{n_shards} label shards but only {n} examples"
        )));
    }
    let mut by_label: Vec<usize> = (0..n).collect();
    by_label.sort_by_key(|&i| (data.example(i).label, i));
    let shards = split_even(&by_label, n_shards);

    let mut order: Vec<usize> = (0..n_shards).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(shards_per_client)
        .enumerate()
        .map(|(client_id, ids)| {
            let mut indices: Vec<usize> = ids.iter().flat_map(|&s| shards[s].iter().copied()).collect();
            indices.sort_unstable();
            ClientShard { client_id, indices }
        })
        .collect())
}

fn split_even(items: &[usize], parts: usize) -> Vec<&[usize]> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

/// Persisted form of a partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub seed: u64,
    pub scheme: PartitionScheme,
    pub shards: Vec<Vec<usize>>,
}

impl ShardManifest {
    pub fn new(seed: u64, scheme: PartitionScheme, shards: &[ClientShard]) -> Self {
        ShardManifest {
            seed,
            scheme,
            shards: shards.iter().map(|s| s.indices.clone()).collect(),
        }
    }

    pub fn to_shards(&self) -> Vec<ClientShard> {
        self.shards
            .iter()
            .enumerate()
            .map(|(client_id, idx)| ClientShard {
                client_id,
                indices: idx.clone(),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Checks disjointness, completeness and non-emptiness against `n` rows.
pub fn validate_partition(shards: &[ClientShard], n: usize) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in shards {
        if s.is_empty() {
            return Err(Error::InvalidArgument(format!("shard {} is empty", s.client_id)));
        }
        for &i in &s.indices {
            if i >= n || !seen.insert(i) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range or assigned twice"
                )));
            }
        }
    }
    if seen.len() != n {
        return Err(Error::InvalidArgument(format!(
            "partition covers {} of {n} rows",
            seen.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dataset> {
        parse_libsvm(s.as_bytes(), &ParseOptions::default())
    }

    fn toy(labels: &[usize]) -> Dataset {
        let examples = labels
            .iter()
            .map(|&l| Example {
                label: l,
                indices: vec![0],
                values: vec![1.0],
            })
            .collect();
        let k = labels.iter().max().unwrap() + 1;
        Dataset::new(examples, 1, LabelMap::from_sorted((0..k.max(2)).map(|c| c as f64))).unwrap()
    }

    #[test]
    fn parses_signed_binary_labels() {
        let d = parse("+1 3:0.5 7:1.0\n-1 1:2.0").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.num_features(), 7);
        assert_eq!(d.example(0).label, 1);
        assert_eq!(d.example(1).label, 0);
        assert_eq!(d.example(0).features().collect::<Vec<_>>(), vec![(2, 0.5), (6, 1.0)]);
        assert_eq!(d.example(1).features().collect::<Vec<_>>(), vec![(0, 2.0)]);
    }

    #[test]
    fn skips_blank_lines_and_honours_hint() {
        let opts = ParseOptions {
            num_features: Some(10),
            ..Default::default()
        };
        let d = parse_libsvm("1 1:1\n\n   \n2 2:1\n".as_bytes(), &opts).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.num_features(), 10);
    }

    #[test]
    fn explicit_label_map() {
        let opts = ParseOptions {
            label_map: Some(LabelMap { raw: vec![5.0, 3.0, 9.0] }),
            ..Default::default()
        };
        let d = parse_libsvm("3 1:1\n5 1:2\n".as_bytes(), &opts).unwrap();
        assert_eq!(d.example(0).label, 1);
        assert_eq!(d.example(1).label, 0);
        assert_eq!(d.num_classes(), 3);
        assert!(d.check_class_coverage().is_err());
        let err = parse_libsvm("4 1:1\n".as_bytes(), &opts).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(parse("1 1:1\n0 x:1"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("1 1:1\nfoo 1:1"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("1 3:1 2:1\n0 1:1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("1 3:1 3:1\n0 1:1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("1 0:1\n0 1:1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("1 1:abc\n0 1:1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse(""), Err(Error::EmptyDataset)));
        assert!(matches!(parse("\n\n"), Err(Error::EmptyDataset)));
    }

    #[test]
    fn single_class_rejected() {
        assert!(parse("1 1:1\n1 2:1").is_err());
    }

    #[test]
    fn gzip_input_detected() {
        use flate2::write::GzEncoder;
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(b"+1 3:0.5 7:1.0\n-1 1:2.0\n").unwrap();
        let gz = enc.finish().unwrap();
        let d = parse_libsvm(gz.as_slice(), &ParseOptions::default()).unwrap();
        assert_eq!(d, parse("+1 3:0.5 7:1.0\n-1 1:2.0").unwrap());
    }

    #[test]
    fn iid_sizes_and_coverage() {
        let d = toy(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let shards = partition_iid(&d, 5, 42).unwrap();
        assert_eq!(shards.len(), 5);
        assert!(shards.iter().all(|s| s.len() == 2));
        validate_partition(&shards, 10).unwrap();
        assert_eq!(shards, partition_iid(&d, 5, 42).unwrap());

        let d = toy(&[0, 1, 0, 1, 0, 1, 0]);
        let shards = partition_iid(&d, 3, 1).unwrap();
        let sizes: Vec<_> = shards.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        validate_partition(&shards, 7).unwrap();
    }

    #[test]
    fn iid_rejects_too_many_clients() {
        let d = toy(&[0, 1, 0]);
        assert!(partition_iid(&d, 4, 0).is_err());
        assert!(partition_iid(&d, 1, 0).is_err());
    }

    #[test]
    fn noniid_forced_assignment() {
        let d = toy(&[0, 0, 1, 1]);
        let shards = partition_noniid(&d, 2, 1, 7).unwrap();
        let mut got: Vec<Vec<usize>> = shards.iter().map(|s| s.indices.clone()).collect();
        got.sort();
        assert_eq!(got, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(shards, partition_noniid(&d, 2, 1, 7).unwrap());
        assert!(partition_noniid(&d, 3, 2, 7).is_err());
    }

    #[test]
    fn manifest_json_round_trip() {
        let d = toy(&[0, 1, 0, 1, 0, 1]);
        let shards = partition_noniid(&d, 3, 2, 3).unwrap();
        let m = ShardManifest::new(3, PartitionScheme::NonIid, &shards);
        let json = m.to_json().unwrap();
        assert!(json.contains("\"scheme\":\"noniid\""));
        let back = ShardManifest::from_json(&json).unwrap();
        assert_eq!(back.to_shards(), shards);
    }

    #[test]
    fn max_abs_scaling() {
        let mut d = parse("1 1:-4 2:2\n0 1:2 3:0.5").unwrap();
        let f = max_abs_factors(&d);
        assert_eq!(f, vec![0.25, 0.5, 2.0]);
        d.scale_features(&f);
        assert_eq!(d.example(0).values, vec![-1.0, 1.0]);
        assert_eq!(d.example(1).values, vec![0.5, 1.0]);
    }
}
