//! Datasets: synthetic generation with a certified distinguishability margin,
//! row normalization, and headerless CSV ingestion.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::network::{self, NetworkSpec, Params};

/// Total rejected candidates allowed before sphere sampling gives up.
pub const MAX_REJECTIONS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Regression,
    /// One integer label per row, stored as an `n × 1` column.
    ClassIndex,
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic {
        n: usize,
        input_dim: usize,
        output_dim: usize,
        min_margin: f64,
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub kind: TargetKind,
    /// Number of classes for classification targets.
    pub num_classes: Option<usize>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    /// Width of the training targets (`m_y`).
    pub fn output_dim(&self) -> usize {
        match self.kind {
            TargetKind::ClassIndex => self.num_classes.unwrap_or(1),
            _ => self.y.cols(),
        }
    }

    /// Targets as used by the loss: class indices are expanded to one-hot rows.
    pub fn targets(&self) -> Matrix {
        match self.kind {
            TargetKind::ClassIndex => {
                let k = self.output_dim();
                let mut out = Matrix::zeros(self.len(), k);
                for i in 0..self.len() {
                    out.set(i, self.y.get(i, 0) as usize, 1.0);
                }
                out
            }
            _ => self.y.clone(),
        }
    }

    /// Integer labels for classification datasets.
    pub fn labels(&self) -> Option<Vec<usize>> {
        match self.kind {
            TargetKind::Regression => None,
            TargetKind::ClassIndex => Some((0..self.len()).map(|i| self.y.get(i, 0) as usize).collect()),
            TargetKind::OneHot => Some(
                (0..self.len())
                    .map(|i| {
                        let row = self.y.row(i);
                        (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0)
                    })
                    .collect(),
            ),
        }
    }

    /// Writes features followed by target columns, one sample per line.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(csv_err)?;
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            match self.kind {
                TargetKind::ClassIndex => fields.push((self.y.get(i, 0) as usize).to_string()),
                _ => fields.extend(self.y.row(i).iter().map(|v| v.to_string())),
            }
            w.write_record(&fields).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.position() {
        Some(pos) => Error::Data(format!("line {}: {}", pos.line(), e)),
        None => Error::Data(e.to_string()),
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = linalg::norm2(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

/// Points uniform on the unit sphere of `R^dim` whose pairwise squared
/// distances are all at least `2 · min_margin`.
pub fn sphere_points(n: usize, dim: usize, min_margin: f64, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let min_d2 = 2.0 * min_margin;
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut rejected = 0usize;
    while points.len() < n {
        let cand = unit_vector(rng, dim);
        let ok = points.iter().all(|p| {
            let d2: f64 = p.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 >= min_d2
        });
        if ok {
            points.push(cand);
        } else {
            rejected += 1;
            if rejected >= MAX_REJECTIONS {
                return Err(Error::Data(format!(
                    "placed only {} of {} points on the unit sphere in R^{} with margin {} after {} rejections; lower the margin, raise the input dimension or reduce n",
                    points.len(),
                    n,
                    dim,
                    min_margin,
                    rejected
                )));
            }
        }
    }
    Matrix::from_rows(&points)
}

/// Synthetic dataset with unit-norm inputs at distinguishability margin at
/// least `min_margin`. Regression targets come from a random softplus teacher;
/// classification labels are uniform over `output_dim` classes.
pub fn synth_gen(
    n: usize,
    input_dim: usize,
    output_dim: usize,
    min_margin: f64,
    kind: TargetKind,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || input_dim == 0 || output_dim == 0 {
        return Err(Error::Config("n, input and output dimensions must be at least 1".into()));
    }
    if !(min_margin > 0.0 && min_margin < 1.0) {
        return Err(Error::Config(format!("margin must lie in (0, 1), got {min_margin}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = sphere_points(n, input_dim, min_margin, &mut rng)?;
    let (y, num_classes) = match kind {
        TargetKind::Regression => {
            let teacher = NetworkSpec::plain(input_dim, vec![16], output_dim, 1.0)?;
            let params = Params::init_gaussian(&teacher, 1.0, &mut rng);
            (network::forward_output(&teacher, &params, &x)?, None)
        }
        TargetKind::ClassIndex | TargetKind::OneHot => {
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..output_dim)).collect();
            let y = if kind == TargetKind::ClassIndex {
                Matrix::new(n, 1, labels.iter().map(|&l| l as f64).collect())?
            } else {
                let mut y = Matrix::zeros(n, output_dim);
                for (i, &l) in labels.iter().enumerate() {
                    y.set(i, l, 1.0);
                }
                y
            };
            (y, Some(output_dim))
        }
    };
    Ok(Dataset {
        x,
        y,
        kind,
        num_classes,
        provenance: Provenance::Synthetic {
            n,
            input_dim,
            output_dim,
            min_margin,
            seed,
        },
    })
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_inputs(x: &Matrix) -> Result<Matrix> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let norm = linalg::norm2(x.row(i));
        if norm == 0.0 {
            return Err(Error::Data(format!("row {i} is zero and cannot be normalized")));
        }
        for v in out.row_mut(i) {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Reads a headerless CSV: `input_dim` feature columns, then targets.
pub fn load_csv(path: &Path, input_dim: usize, kind: TargetKind) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() <= input_dim {
            return Err(Error::Data(format!(
                "line {line}: expected {input_dim} features followed by targets, found {} fields",
                record.len()
            )));
        }
        if let Some(w) = width {
            if w != record.len() {
                return Err(Error::Data(format!("line {line}: {} fields, previous rows had {w}", record.len())));
            }
        }
        width = Some(record.len());
        let mut row = Vec::with_capacity(record.len());
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Data(format!("line {line}, column {}: cannot parse {field:?}", k + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line}, column {}: non-finite value", k + 1)));
            }
            row.push(v);
        }
        let targets = row.split_off(input_dim);
        if kind == TargetKind::ClassIndex {
            if targets.len() != 1 || targets[0] < 0.0 || targets[0].fract() != 0.0 {
                return Err(Error::Data(format!(
                    "line {line}: class-index targets must be a single nonnegative integer"
                )));
            }
        }
        if kind == TargetKind::OneHot {
            let sum: f64 = targets.iter().sum();
            if targets.iter().any(|&t| t < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!("line {line}: one-hot targets must be nonnegative and sum to 1")));
            }
        }
        xs.push(row);
        ys.push(targets);
    }
    if xs.is_empty() {
        return Err(Error::Data(format!("{} contains no rows", path.display())));
    }
    let x = Matrix::from_rows(&xs)?;
    let y = Matrix::from_rows(&ys)?;
    let num_classes = match kind {
        TargetKind::Regression => None,
        TargetKind::ClassIndex => Some(ys.iter().map(|t| t[0] as usize).max().unwrap() + 1),
        TargetKind::OneHot => Some(y.cols()),
    };
    Ok(Dataset {
        x,
        y,
        kind,
        num_classes,
        provenance: Provenance::File {
            path: path.to_path_buf(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expressivity::check_distinguishability;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn synthetic_inputs_meet_margin() {
        let d = synth_gen(64, 8, 2, 0.05, TargetKind::Regression, 3).unwrap();
        // Independent pair loop.
        let mut c = f64::INFINITY;
        for i in 0..64 {
            for j in 0..64 {
                if i != j {
                    let xi = d.x.row(i);
                    let xj = d.x.row(j);
                    c = c.min(xi.iter().map(|a| a * a).sum::<f64>() - xi.iter().zip(xj).map(|(a, b)| a * b).sum::<f64>());
                }
            }
        }
        assert!(c >= 0.05 - 1e-12);
        assert!(check_distinguishability(&d.x).passed);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_gen(10, 3, 3, 0.1, TargetKind::OneHot, 9).unwrap();
        let b = synth_gen(10, 3, 3, 0.1, TargetKind::OneHot, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_gen(10, 3, 3, 0.1, TargetKind::OneHot, 10).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn infeasible_margin_reports_hint() {
        // Only two points fit on the 0-sphere.
        let err = synth_gen(3, 1, 1, 0.5, TargetKind::Regression, 0).unwrap_err();
        assert!(err.to_string().contains("lower the margin"));
        assert!(synth_gen(3, 2, 1, 1.5, TargetKind::Regression, 0).is_err());
    }

    #[test]
    fn class_index_targets_expand_to_one_hot() {
        let d = synth_gen(12, 3, 4, 0.1, TargetKind::ClassIndex, 1).unwrap();
        let t = d.targets();
        assert_eq!(t.shape(), (12, 4));
        let labels = d.labels().unwrap();
        for i in 0..12 {
            assert_eq!(t.get(i, labels[i]), 1.0);
            assert_eq!(t.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn normalize_examples() {
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let u = normalize_inputs(&x).unwrap();
        assert!((u.get(0, 0) - 0.6).abs() < 1e-15 && (u.get(0, 1) - 0.8).abs() < 1e-15);
        let again = normalize_inputs(&u).unwrap();
        for (a, b) in again.as_slice().iter().zip(u.as_slice()) {
            assert!((a - b).abs() <= 1e-15);
        }
        let zero = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(normalize_inputs(&zero).unwrap_err().to_string().contains("row 1"));
    }

    #[test]
    fn normalized_rows_have_unit_norm_and_keep_angular_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::new(10, 5, (0..50).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let u = normalize_inputs(&x).unwrap();
        for i in 0..10 {
            assert!((linalg::norm2(u.row(i)) - 1.0).abs() < 1e-12);
        }
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    let cos_j = linalg::dot(x.row(i), x.row(j)) / linalg::norm2(x.row(j));
                    let cos_k = linalg::dot(x.row(i), x.row(k)) / linalg::norm2(x.row(k));
                    let a = linalg::dot(u.row(i), u.row(j)) - linalg::dot(u.row(i), u.row(k));
                    if (cos_j - cos_k).abs() > 1e-9 {
                        assert_eq!(a > 0.0, cos_j > cos_k);
                    }
                }
            }
        }
    }

    #[test]
    fn csv_parse_and_errors() {
        let f = write_tmp("1,0,1\n0,1,0\n");
        let d = load_csv(f.path(), 2, TargetKind::ClassIndex).unwrap();
        assert_eq!(d.x, Matrix::identity(2));
        assert_eq!(d.labels().unwrap(), vec![1, 0]);
        assert_eq!(d.num_classes, Some(2));

        let empty = write_tmp("");
        assert!(load_csv(empty.path(), 2, TargetKind::Regression).is_err());

        let bad = write_tmp("1,0,1\n0,x,0\n");
        let err = load_csv(bad.path(), 2, TargetKind::Regression).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        let nan = write_tmp("1,0,1\n0,NaN,0\n");
        assert!(load_csv(nan.path(), 2, TargetKind::Regression).is_err());

        let ragged = write_tmp("1,0,1\n0,1\n");
        assert!(load_csv(ragged.path(), 2, TargetKind::Regression).is_err());

        let frac = write_tmp("1,0,0.5\n");
        assert!(load_csv(frac.path(), 2, TargetKind::ClassIndex).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (kind, seed) in [(TargetKind::Regression, 1), (TargetKind::ClassIndex, 2), (TargetKind::OneHot, 3)] {
            let d = synth_gen(9, 4, 3, 0.05, kind, seed).unwrap();
            let path = dir.path().join(format!("d{seed}.csv"));
            d.save_csv(&path).unwrap();
            let back = load_csv(&path, 4, kind).unwrap();
            for (a, b) in back.x.as_slice().iter().zip(d.x.as_slice()) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert_eq!(back.targets().shape().0, 9);
            for (a, b) in back.y.as_slice().iter().zip(d.y.as_slice()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]
            #[test]
            fn synthetic_always_distinguishable(
                n in 2usize..24,
                m_x in 4usize..8,
                c_min in prop_oneof![Just(0.01), Just(0.05), Just(0.1)],
                seed in any::<u64>(),
            ) {
                let d = synth_gen(n, m_x, 1, c_min, TargetKind::Regression, seed).unwrap();
                let r = check_distinguishability(&d.x);
                prop_assert!(r.passed);
                prop_assert!(r.margin >= c_min - 1e-12);
            }
        }
    }
}
