//! Reader and writer for the neutral dataset directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{io_error, DataError, DatasetBundle, FeatureFormat, Result, Split};
use crate::bytes::ByteCursor;
use crate::graph::SparseGraph;
use crate::hash::fnv1a64;
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.txt";
const EDGES: &str = "edges.bin";
const FEATURES: &str = "features.bin";
const LABELS: &str = "labels.bin";
const SPLITS: &str = "splits.bin";

const MANIFEST_KEYS: [&str; 11] = [
    "name",
    "n",
    "d",
    "num_classes",
    "directed",
    "num_edges",
    "features_format",
    "checksum_edges",
    "checksum_features",
    "checksum_labels",
    "checksum_splits",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LoadOptions {
    /// L1-normalize every feature row after loading.
    pub row_normalize: bool,
}

/// Loads a dataset exactly as stored.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    load_dataset_with(dir, LoadOptions::default())
}

pub fn load_dataset_with(dir: &Path, options: LoadOptions) -> Result<DatasetBundle> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_error(&manifest_path, e))?;
    let manifest = Manifest::parse(&text, &manifest_path)?;

    let read = |file: &str, checksum_key: &str| -> Result<(PathBuf, Vec<u8>)> {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
        let expected = manifest.hex(checksum_key)?;
        let actual = fnv1a64(&bytes);
        if actual != expected {
            return Err(DataError::Checksum {
                path,
                expected,
                actual,
            });
        }
        Ok((path, bytes))
    };

    let n = manifest.usize("n")?;
    let d = manifest.usize("d")?;
    let num_classes = manifest.usize("num_classes")?;
    let directed = manifest.bool("directed")?;

    let (path, bytes) = read(EDGES, "checksum_edges")?;
    let edges = parse_edges(&path, &bytes, n)?;
    let declared = manifest.usize("num_edges")?;
    if declared != edges.len() {
        return Err(DataError::CountMismatch {
            path,
            what: "num_edges",
            declared,
            actual: edges.len(),
        });
    }

    let (path, bytes) = read(FEATURES, "checksum_features")?;
    let (features, stored_format) = parse_features(&path, &bytes)?;
    let declared_format = manifest.format()?;
    if stored_format != declared_format {
        return Err(DataError::Malformed {
            path,
            reason: "feature format flag disagrees with manifest".into(),
        });
    }
    for (what, declared, actual) in [("n", n, features.rows()), ("d", d, features.cols())] {
        if declared != actual {
            return Err(DataError::CountMismatch {
                path: path.clone(),
                what,
                declared,
                actual,
            });
        }
    }
    if !features.is_finite() {
        return Err(DataError::Malformed {
            path,
            reason: "non-finite feature value".into(),
        });
    }

    let (path, bytes) = read(LABELS, "checksum_labels")?;
    let labels = parse_labels(&path, &bytes, n, num_classes)?;
    let (path, bytes) = read(SPLITS, "checksum_splits")?;
    let split = parse_splits(&path, &bytes, n)?;

    let name = manifest.get("name")?.to_string();
    let mut bundle = DatasetBundle::new(
        name.clone(),
        edges,
        directed,
        features,
        labels,
        num_classes,
        split,
    )?;
    bundle.feature_format = declared_format;
    let binary_corpus = matches!(name.to_ascii_lowercase().as_str(), "cora" | "citeseer");
    if binary_corpus && !is_binary(bundle.graph.features()) {
        log::warn!("{name}: bag-of-words features are not all 0/1");
    }
    if options.row_normalize {
        bundle = bundle.row_normalized();
    }
    Ok(bundle)
}

fn is_binary(x: &Tensor) -> bool {
    x.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Writes `bundle` into `dir`, creating it if needed.
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let g = &bundle.graph;
    let files = [
        (EDGES, encode_edges(&bundle.edges)),
        (FEATURES, encode_features(g.features(), bundle.feature_format)),
        (LABELS, encode_labels(g)),
        (SPLITS, encode_splits(&bundle.split)),
    ];
    let mut manifest = format!(
        "name={}\nn={}\nd={}\nnum_classes={}\ndirected={}\nnum_edges={}\nfeatures_format={}\n",
        bundle.name,
        g.num_nodes(),
        g.feature_dim(),
        g.num_classes(),
        g.is_directed(),
        bundle.edges.len(),
        match bundle.feature_format {
            FeatureFormat::Dense => "dense",
            FeatureFormat::Csr => "csr",
        }
    );
    for (file, bytes) in &files {
        let key = file.trim_end_matches(".bin");
        manifest.push_str(&format!("checksum_{key}={:016x}\n", fnv1a64(bytes)));
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(|e| io_error(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| io_error(&path, e))
}

struct Manifest<'a> {
    path: &'a Path,
    entries: BTreeMap<String, String>,
}

impl<'a> Manifest<'a> {
    fn parse(text: &str, path: &'a Path) -> Result<Self> {
        let bad = |reason: String| DataError::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            if !MANIFEST_KEYS.contains(&key) {
                return Err(bad(format!("unknown key '{key}'")));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(bad(format!("duplicate key '{key}'")));
            }
        }
        Ok(Self { path, entries })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| self.bad(format!("missing key '{key}'")))
    }

    fn bad(&self, reason: String) -> DataError {
        DataError::Malformed {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| self.bad(format!("{key}: '{v}' is not a non-negative integer")))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.bad(format!("{key}: '{v}' is not true/false"))),
        }
    }

    fn hex(&self, key: &str) -> Result<u64> {
        let v = self.get(key)?;
        u64::from_str_radix(v, 16).map_err(|_| self.bad(format!("{key}: '{v}' is not hex")))
    }

    fn format(&self) -> Result<FeatureFormat> {
        match self.get("features_format")? {
            "dense" => Ok(FeatureFormat::Dense),
            "csr" => Ok(FeatureFormat::Csr),
            v => Err(self.bad(format!("features_format: unknown '{v}'"))),
        }
    }
}

fn malformed(path: &Path, reason: &str) -> DataError {
    DataError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn parse_edges(path: &Path, bytes: &[u8], n: usize) -> Result<Vec<(u32, u32, f64)>> {
    if !bytes.len().is_multiple_of(16) {
        return Err(malformed(path, "length is not a multiple of 16-byte records"));
    }
    let mut cur = ByteCursor::new(bytes);
    let mut edges = Vec::with_capacity(bytes.len() / 16);
    while !cur.is_empty() {
        let (a, b, w) = (
            cur.u32().expect("whole record"),
            cur.u32().expect("whole record"),
            cur.f64().expect("whole record"),
        );
        for node in [a, b] {
            if node as usize >= n {
                return Err(DataError::DanglingNode {
                    path: path.to_path_buf(),
                    node: node as usize,
                    n,
                });
            }
        }
        edges.push((a, b, w));
    }
    Ok(edges)
}

fn encode_edges(edges: &[(u32, u32, f64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(edges.len() * 16);
    for &(a, b, w) in edges {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

fn parse_features(path: &Path, bytes: &[u8]) -> Result<(Tensor, FeatureFormat)> {
    let mut cur = ByteCursor::new(bytes);
    let truncated = || malformed(path, "truncated");
    let rows = cur.u64().ok_or_else(truncated)? as usize;
    let cols = cur.u64().ok_or_else(truncated)? as usize;
    let format = cur.u64().ok_or_else(truncated)?;
    let x = match format {
        0 => {
            let len = rows.checked_mul(cols).ok_or_else(truncated)?;
            if cur.remaining() != len * 8 {
                return Err(malformed(path, "dense body length disagrees with shape"));
            }
            let data = (0..len).map(|_| cur.f64().expect("length checked")).collect();
            (Tensor::from_vec(rows, cols, data), FeatureFormat::Dense)
        }
        1 => {
            let nnz = cur.u64().ok_or_else(truncated)? as usize;
            let expect = (rows + 1) * 8 + nnz * 12;
            if cur.remaining() != expect {
                return Err(malformed(path, "CSR body length disagrees with header"));
            }
            let indptr = (0..=rows).map(|_| cur.u64().expect("length checked") as usize).collect();
            let indices = (0..nnz).map(|_| cur.u32().expect("length checked") as usize).collect();
            let values = (0..nnz).map(|_| cur.f64().expect("length checked")).collect();
            let m = SparseMatrix::try_new(rows, cols, indptr, indices, values)
                .map_err(|e| malformed(path, &e.to_string()))?;
            (m.to_dense(), FeatureFormat::Csr)
        }
        f => return Err(malformed(path, &format!("unknown format flag {f}"))),
    };
    Ok(x)
}

fn encode_features(x: &Tensor, format: FeatureFormat) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(x.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(x.cols() as u64).to_le_bytes());
    match format {
        FeatureFormat::Dense => {
            out.extend_from_slice(&0u64.to_le_bytes());
            for v in x.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        FeatureFormat::Csr => {
            let m = SparseMatrix::from_dense(x);
            out.extend_from_slice(&1u64.to_le_bytes());
            out.extend_from_slice(&(m.nnz() as u64).to_le_bytes());
            for &p in m.indptr() {
                out.extend_from_slice(&(p as u64).to_le_bytes());
            }
            for &c in m.indices() {
                out.extend_from_slice(&(c as u32).to_le_bytes());
            }
            for v in m.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn parse_labels(path: &Path, bytes: &[u8], n: usize, classes: usize) -> Result<Vec<Option<usize>>> {
    if bytes.len() != n * 4 {
        return Err(DataError::CountMismatch {
            path: path.to_path_buf(),
            what: "n",
            declared: n,
            actual: bytes.len() / 4,
        });
    }
    let mut cur = ByteCursor::new(bytes);
    (0..n)
        .map(|i| match cur.i32().expect("length checked") {
            -1 => Ok(None),
            c if c >= 0 && (c as usize) < classes => Ok(Some(c as usize)),
            c => Err(malformed(path, &format!("node {i}: label {c} outside 0..{classes}"))),
        })
        .collect()
}

fn encode_labels(g: &SparseGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(g.num_nodes() * 4);
    for label in g.labels() {
        let v: i32 = label.map_or(-1, |c| c as i32);
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_splits(path: &Path, bytes: &[u8], n: usize) -> Result<Split> {
    let mut cur = ByteCursor::new(bytes);
    let mut lists = Vec::with_capacity(3);
    for _ in 0..3 {
        let len = cur.u32().ok_or_else(|| malformed(path, "truncated"))? as usize;
        let mut ids = Vec::with_capacity(len);
        for _ in 0..len {
            let id = cur.u32().ok_or_else(|| malformed(path, "truncated"))? as usize;
            if id >= n {
                return Err(DataError::DanglingNode {
                    path: path.to_path_buf(),
                    node: id,
                    n,
                });
            }
            ids.push(id);
        }
        lists.push(ids);
    }
    if !cur.is_empty() {
        return Err(malformed(path, "trailing bytes"));
    }
    let test = lists.pop().expect("three lists");
    let val = lists.pop().expect("three lists");
    let train = lists.pop().expect("three lists");
    Ok(Split { train, val, test })
}

fn encode_splits(split: &Split) -> Vec<u8> {
    let mut out = Vec::new();
    for list in [&split.train, &split.val, &split.test] {
        out.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for &id in list {
            out.extend_from_slice(&(id as u32).to_le_bytes());
        }
    }
    out
}
