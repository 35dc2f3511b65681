//! Regression datasets: in-memory representation, CSV ingestion with
//! train-split standardization, and a binary on-disk cache.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> f64 {
        match self {
            Split::Train => 0.0,
            Split::Val => 1.0,
            Split::Test => 2.0,
        }
    }

    pub fn from_tag(tag: f64) -> Result<Split> {
        match tag as i64 {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Z-scoring parameters computed on the train split only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardization {
    pub fn target_to_original(&self, standardized: f64) -> f64 {
        standardized * self.target_std + self.target_mean
    }

    pub fn target_to_standardized(&self, original: f64) -> f64 {
        (original - self.target_mean) / self.target_std
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// A regression dataset, optionally carrying the generative ground truth
/// (clean targets, log-noise-scales, and the stored standard-normal draws).
///
/// When the ground-truth fields are present, every row satisfies
/// `y = f_true + exp(g_true) * eps` exactly as computed in 64-bit floats.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub f_true: Option<Vec<f64>>,
    pub g_true: Option<Vec<f64>>,
    pub eps: Option<Vec<f64>>,
    pub splits: Vec<Split>,
    pub standardization: Option<Standardization>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn rows_of(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let mut n = (0, 0, 0);
        for s in &self.splits {
            match s {
                Split::Train => n.0 += 1,
                Split::Val => n.1 += 1,
                Split::Test => n.2 += 1,
            }
        }
        n
    }

    /// Feature rows and targets for the given row indices.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<f64>) {
        let x = self.x.gather_rows(idx);
        let y = idx.iter().map(|&i| self.y[i]).collect();
        (x, y)
    }

    pub fn has_ground_truth(&self) -> bool {
        self.f_true.is_some() && self.g_true.is_some() && self.eps.is_some()
    }

    /// Largest absolute defect of the `y = f + exp(g) * eps` identity, or
    /// None when the dataset carries no ground truth.
    pub fn noise_identity_defect(&self) -> Option<f64> {
        let (f, g, e) = (self.f_true.as_ref()?, self.g_true.as_ref()?, self.eps.as_ref()?);
        let mut worst = 0.0f64;
        for i in 0..self.y.len() {
            let rebuilt = f[i] + g[i].exp() * e[i];
            worst = worst.max((self.y[i] - rebuilt).abs());
        }
        Some(worst)
    }

    /// Mean and population variance of the targets on one split.
    pub fn target_moments(&self, split: Split) -> (f64, f64) {
        let idx = self.rows_of(split);
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / n;
        let var = idx
            .iter()
            .map(|&i| (self.y[i] - mean) * (self.y[i] - mean))
            .sum::<f64>()
            / n;
        (mean, var)
    }

    /// Writes the dataset as a cache directory: a `meta` JSON file plus raw
    /// little-endian f64 column files.
    pub fn save_cache(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let header = CacheHeader {
            rows: self.n_rows(),
            cols: self.n_features(),
            has_ground_truth: self.has_ground_truth(),
            standardization: self.standardization.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string_pretty(&header)
            .map_err(|e| Error::Config(format!("meta serialization: {e}")))?;
        fs::write(dir.join("meta"), json)?;
        for j in 0..self.n_features() {
            let col: Vec<f64> = (0..self.n_rows()).map(|i| self.x.get(i, j)).collect();
            write_f64_column(&dir.join(format!("col_x{j}.f64")), &col)?;
        }
        write_f64_column(&dir.join("col_y.f64"), &self.y)?;
        let split_tags: Vec<f64> = self.splits.iter().map(|s| s.tag()).collect();
        write_f64_column(&dir.join("col_split.f64"), &split_tags)?;
        if let (Some(f), Some(g), Some(e)) = (&self.f_true, &self.g_true, &self.eps) {
            write_f64_column(&dir.join("col_f_true.f64"), f)?;
            write_f64_column(&dir.join("col_g_true.f64"), g)?;
            write_f64_column(&dir.join("col_eps.f64"), e)?;
        }
        Ok(())
    }

    pub fn load_cache(dir: &Path) -> Result<Dataset> {
        let json = fs::read_to_string(dir.join("meta"))?;
        let header: CacheHeader =
            serde_json::from_str(&json).map_err(|e| Error::Config(format!("meta parse: {e}")))?;
        let mut x = Matrix::zeros(header.rows, header.cols);
        for j in 0..header.cols {
            let col = read_f64_column(&dir.join(format!("col_x{j}.f64")), header.rows)?;
            for i in 0..header.rows {
                x.set(i, j, col[i]);
            }
        }
        let y = read_f64_column(&dir.join("col_y.f64"), header.rows)?;
        let split_tags = read_f64_column(&dir.join("col_split.f64"), header.rows)?;
        let splits = split_tags
            .iter()
            .map(|&t| Split::from_tag(t))
            .collect::<Result<Vec<_>>>()?;
        let (f_true, g_true, eps) = if header.has_ground_truth {
            (
                Some(read_f64_column(&dir.join("col_f_true.f64"), header.rows)?),
                Some(read_f64_column(&dir.join("col_g_true.f64"), header.rows)?),
                Some(read_f64_column(&dir.join("col_eps.f64"), header.rows)?),
            )
        } else {
            (None, None, None)
        };
        Ok(Dataset {
            x,
            y,
            f_true,
            g_true,
            eps,
            splits,
            standardization: header.standardization,
            meta: header.meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    rows: usize,
    cols: usize,
    has_ground_truth: bool,
    standardization: Option<Standardization>,
    meta: DatasetMeta,
}

fn write_f64_column(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

fn read_f64_column(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Config(format!(
            "column file {} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// How to assign split tags to CSV rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of rows tagged train; the remainder is split between val and
    /// test according to `val_fraction` (of the whole).
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// When set, rows are shuffled with this seed before tagging.
    pub shuffle_seed: Option<u64>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            val_fraction: 0.1,
            shuffle_seed: None,
        }
    }
}

/// Assigns contiguous train/val/test tags over `n` rows (after an optional
/// seeded shuffle of row order).
pub fn assign_splits(n: usize, spec: &SplitSpec) -> Vec<Split> {
    let n_train = (n as f64 * spec.train_fraction).round() as usize;
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = spec.shuffle_seed {
        crate::rng::StreamRng::from_seed(seed)
            .child("split")
            .shuffle(&mut order);
    }
    let mut tags = vec![Split::Test; n];
    for (pos, &row) in order.iter().enumerate() {
        tags[row] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    tags
}

/// Loads a comma-separated file with a header row. All feature columns and
/// the target must be numeric. When `standardize` is set, features are
/// z-scored and the target standardized using train-split statistics only;
/// a constant column gets its denominator clamped to 1.
pub fn load_csv(
    path: &Path,
    target_column: &str,
    split_spec: &SplitSpec,
    standardize: bool,
) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty file", path.display())))?;
    let names: Vec<&str> = header.split(',').map(|s| s.trim()).collect();
    let target_idx = names
        .iter()
        .position(|&n| n == target_column)
        .ok_or_else(|| {
            Error::Config(format!(
                "target column '{target_column}' not found in header [{}]",
                names.join(", ")
            ))
        })?;
    let d = names.len() - 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(Error::Parse {
                row: line_no + 2,
                col: 0,
                msg: format!("expected {} cells, found {}", names.len(), cells.len()),
            });
        }
        let mut feat = Vec::with_capacity(d);
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: line_no + 2,
                col: c + 1,
                msg: format!("'{}' is not numeric", cell.trim()),
            })?;
            if c == target_idx {
                targets.push(v);
            } else {
                feat.push(v);
            }
        }
        rows.push(feat);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no data rows", path.display())));
    }
    let mut x = Matrix::from_rows(&rows);
    let mut y = targets;
    let splits = assign_splits(x.rows(), split_spec);
    let mut standardization = None;
    if standardize {
        let train_idx: Vec<usize> = splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == Split::Train)
            .map(|(i, _)| i)
            .collect();
        if train_idx.is_empty() {
            return Err(Error::Config("standardization needs a train split".into()));
        }
        let nt = train_idx.len() as f64;
        let mut feature_mean = vec![0.0; d];
        let mut feature_std = vec![0.0; d];
        for j in 0..d {
            let mean = train_idx.iter().map(|&i| x.get(i, j)).sum::<f64>() / nt;
            let var = train_idx
                .iter()
                .map(|&i| (x.get(i, j) - mean) * (x.get(i, j) - mean))
                .sum::<f64>()
                / nt;
            let std = var.sqrt();
            feature_mean[j] = mean;
            feature_std[j] = if std == 0.0 { 1.0 } else { std };
        }
        let target_mean = train_idx.iter().map(|&i| y[i]).sum::<f64>() / nt;
        let tvar = train_idx
            .iter()
            .map(|&i| (y[i] - target_mean) * (y[i] - target_mean))
            .sum::<f64>()
            / nt;
        let tstd = tvar.sqrt();
        let target_std = if tstd == 0.0 { 1.0 } else { tstd };
        for i in 0..x.rows() {
            for j in 0..d {
                x.set(i, j, (x.get(i, j) - feature_mean[j]) / feature_std[j]);
            }
            y[i] = (y[i] - target_mean) / target_std;
        }
        standardization = Some(Standardization {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        });
    }
    Ok(Dataset {
        x,
        y,
        f_true: None,
        g_true: None,
        eps: None,
        splits,
        standardization,
        meta: DatasetMeta {
            generator: format!("csv:{}", path.display()),
            seed: 0,
            extra: BTreeMap::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp_csv(name: &str, content: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("tabunc-tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn csv_two_rows_standardize_to_plus_minus_one() {
        let path = write_temp_csv("two_rows.csv", "a,y\n1.0,0.0\n2.0,2.0\n");
        let spec = SplitSpec {
            train_fraction: 1.0,
            val_fraction: 0.0,
            shuffle_seed: None,
        };
        let ds = load_csv(&path, "y", &spec, true).unwrap();
        assert_eq!(ds.y, vec![-1.0, 1.0]);
    }

    #[test]
    fn csv_constant_column_becomes_all_zero() {
        let path = write_temp_csv("const_col.csv", "a,b,y\n5.0,1.0,0.0\n5.0,2.0,1.0\n5.0,3.0,2.0\n");
        let spec = SplitSpec {
            train_fraction: 1.0,
            val_fraction: 0.0,
            shuffle_seed: None,
        };
        let ds = load_csv(&path, "y", &spec, true).unwrap();
        for i in 0..3 {
            assert_eq!(ds.x.get(i, 0), 0.0);
        }
    }

    #[test]
    fn csv_standardize_roundtrip_on_train_targets() {
        let path = write_temp_csv("roundtrip.csv", "a,y\n1,3.5\n2,-0.25\n3,7.125\n4,2.0\n");
        let spec = SplitSpec {
            train_fraction: 1.0,
            val_fraction: 0.0,
            shuffle_seed: None,
        };
        let ds = load_csv(&path, "y", &spec, true).unwrap();
        let st = ds.standardization.as_ref().unwrap();
        let originals = [3.5, -0.25, 7.125, 2.0];
        for (i, &orig) in originals.iter().enumerate() {
            let back = st.target_to_original(ds.y[i]);
            assert!((back - orig).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_non_numeric_cell_reports_row_and_column() {
        let path = write_temp_csv("bad_cell.csv", "a,y\n1.0,2.0\nbogus,3.0\n");
        let err = load_csv(&path, "y", &SplitSpec::default(), false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("column 1"), "{msg}");
    }

    #[test]
    fn csv_missing_target_is_a_config_error() {
        let path = write_temp_csv("no_target.csv", "a,b\n1,2\n");
        let err = load_csv(&path, "y", &SplitSpec::default(), false).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn split_assignment_partitions_rows() {
        let spec = SplitSpec {
            train_fraction: 0.8,
            val_fraction: 0.1,
            shuffle_seed: Some(3),
        };
        let tags = assign_splits(100, &spec);
        let train = tags.iter().filter(|&&s| s == Split::Train).count();
        let val = tags.iter().filter(|&&s| s == Split::Val).count();
        let test = tags.iter().filter(|&&s| s == Split::Test).count();
        assert_eq!((train, val, test), (80, 10, 10));
    }

    #[test]
    fn cache_roundtrip_is_exact() {
        let path = write_temp_csv("cache_src.csv", "a,b,y\n1,2,3\n4,5,6\n7,8,9\n-1,0.5,2\n");
        let ds = load_csv(&path, "y", &SplitSpec::default(), true).unwrap();
        let dir = std::env::temp_dir().join("tabunc-tests/cache_roundtrip");
        let _ = fs::remove_dir_all(&dir);
        ds.save_cache(&dir).unwrap();
        let loaded = Dataset::load_cache(&dir).unwrap();
        assert_eq!(loaded.x, ds.x);
        assert_eq!(loaded.y, ds.y);
        assert_eq!(loaded.splits, ds.splits);
        assert_eq!(loaded.standardization, ds.standardization);
        assert_eq!(loaded.meta, ds.meta);
    }
}
