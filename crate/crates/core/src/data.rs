//! Labelled datasets, synthetic generators and file persistence.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::features::csv_err;
use crate::numerics::{DenseMatrix, Prng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Unspecified,
    Train,
    Validation,
    Test,
}

/// Binary classification data with labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    x: DenseMatrix,
    y: Vec<f64>,
    #[serde(default)]
    split: Split,
}

impl LabeledDataset {
    pub fn new(x: DenseMatrix, y: Vec<f64>, split: Split) -> Result<Self> {
        ensure_dim("labels per example", x.rows(), y.len())?;
        if let Some(i) = y.iter().position(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::Invalid(format!("label {} at row {i} is not ±1", y[i])));
        }
        Ok(Self { x, y, split })
    }

    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            split: self.split,
        }
    }

    /// Fraction of `+1` labels.
    pub fn positive_fraction(&self) -> f64 {
        if self.y.is_empty() {
            return 0.0;
        }
        self.y.iter().filter(|&&v| v > 0.0).count() as f64 / self.y.len() as f64
    }

    pub fn is_single_class(&self) -> bool {
        self.y.windows(2).all(|w| w[0] == w[1])
    }

    /// Writes label-first CSV rows without a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for (row, &label) in self.x.iter_rows().zip(&self.y) {
            let mut rec = Vec::with_capacity(row.len() + 1);
            rec.push(label.to_string());
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(BufWriter::new(File::create(path)?))
    }

    /// Parses label-first CSV. When `header` is set the first line is skipped.
    pub fn read_csv<R: Read>(input: R, header: bool) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(header)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut width: Option<usize> = None;
        for rec in reader.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() == 1 && rec[0].is_empty() {
                continue;
            }
            if rec.len() < 2 {
                return Err(Error::Parse {
                    line,
                    message: "expected a label and at least one feature".into(),
                });
            }
            let w = *width.get_or_insert(rec.len() - 1);
            if rec.len() - 1 != w {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} features, found {}", w, rec.len() - 1),
                });
            }
            let mut values = rec.iter().map(|field| {
                field.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("{field:?}: {e}"),
                })
            });
            let label = values.next().expect("record has a label")?;
            if label != 1.0 && label != -1.0 {
                return Err(Error::Invalid(format!("label {label} on line {line} is not ±1")));
            }
            labels.push(label);
            for v in values {
                let v = v?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: "non-finite feature".into(),
                    });
                }
                data.push(v);
            }
        }
        let Some(w) = width else {
            return Err(Error::EmptyDataset);
        };
        Self::new(
            DenseMatrix::from_vec(labels.len(), w, data)?,
            labels,
            Split::Unspecified,
        )
    }
}

pub fn load_csv(path: &Path, header: bool) -> Result<LabeledDataset> {
    LabeledDataset::read_csv(BufReader::new(File::open(path)?), header)
}

/// `x ~ N(0, I_d)` labelled by whether it lies outside the sphere of radius `√d`.
pub fn gen_norm_sphere(n: usize, d: usize, prng: &mut Prng) -> LabeledDataset {
    let x = prng.normal_matrix(n, d);
    let y = x.iter_rows().map(sphere_label).collect();
    LabeledDataset {
        x,
        y,
        split: Split::Unspecified,
    }
}

/// `sign(‖x‖ − √d)` with `sign(0) = +1`.
pub fn sphere_label(x: &[f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm - (x.len() as f64).sqrt() >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Centres of `modes` points evenly spaced on a circle, the first at `(radius, 0)`.
pub fn ring_centers(modes: usize, radius: f64) -> DenseMatrix {
    let mut c = DenseMatrix::zeros(modes, 2);
    for k in 0..modes {
        let t = 2.0 * PI * k as f64 / modes as f64;
        c[(k, 0)] = radius * t.cos();
        c[(k, 1)] = radius * t.sin();
    }
    c
}

/// Equal-weight isotropic Gaussians centred on a circle.
pub fn gen_ring_mixture(n: usize, modes: usize, radius: f64, sigma: f64, prng: &mut Prng) -> Result<DenseMatrix> {
    if modes == 0 {
        return Err(Error::Invalid("ring mixture needs at least one mode".into()));
    }
    if !(sigma >= 0.0) || !radius.is_finite() {
        return Err(Error::Invalid("ring mixture needs finite radius and σ ≥ 0".into()));
    }
    let centers = ring_centers(modes, radius);
    let mut out = DenseMatrix::zeros(n, 2);
    for i in 0..n {
        let k = prng.index(modes);
        for j in 0..2 {
            out[(i, j)] = centers[(k, j)] + sigma * prng.normal();
        }
    }
    Ok(out)
}

/// Writes a value as pretty JSON with round-trippable floats.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Writes points as `x,y,...` rows with a header naming the columns.
pub fn write_points_csv<W: Write>(out: W, points: &DenseMatrix, header: &[&str]) -> Result<()> {
    ensure_dim("point columns", header.len(), points.cols())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for row in points.iter_rows() {
        w.write_record(row.iter().map(f64::to_string)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{KernelSpec, SpectralSampler};

    #[test]
    fn sphere_labels() {
        assert_eq!(sphere_label(&[0.0, 0.0, 0.0]), -1.0);
        assert_eq!(sphere_label(&[1.0, 1.0]), 1.0);
        let a = gen_norm_sphere(50, 3, &mut Prng::new(1));
        let b = gen_norm_sphere(50, 3, &mut Prng::new(1));
        assert_eq!(a, b);
    }

    /// `P(χ²_d > d)` for even `d`: `e^{-d/2} Σ_{k<d/2} (d/2)^k / k!`.
    fn chi2_tail_at_dim(d: usize) -> f64 {
        let h = d as f64 / 2.0;
        let mut term = 1.0;
        let mut sum = 0.0;
        for k in 0..d / 2 {
            if k > 0 {
                term *= h / k as f64;
            }
            sum += term;
        }
        (-h).exp() * sum
    }

    #[test]
    fn sphere_class_balance_matches_chi_square_tail() {
        for d in [2, 8, 20] {
            let ds = gen_norm_sphere(20_000, d, &mut Prng::new(2));
            assert!((ds.positive_fraction() - chi2_tail_at_dim(d)).abs() < 0.015, "d={d}");
        }
        let wide = gen_norm_sphere(20_000, 20, &mut Prng::new(3));
        assert!((wide.positive_fraction() - 0.5).abs() < 0.05);
    }

    #[test]
    fn ring_degenerate_cases() {
        let x = gen_ring_mixture(40, 8, 2.0, 0.0, &mut Prng::new(3)).unwrap();
        let c = ring_centers(8, 2.0);
        for r in x.iter_rows() {
            assert!(c.iter_rows().any(|cr| cr == r));
        }
        let one = gen_ring_mixture(5, 1, 2.0, 0.0, &mut Prng::new(3)).unwrap();
        assert!(one.iter_rows().all(|r| r == [2.0, 0.0]));
        assert!(gen_ring_mixture(5, 0, 2.0, 0.1, &mut Prng::new(3)).is_err());
    }

    #[test]
    fn ring_mode_counts_near_uniform() {
        let n = 16_000;
        let x = gen_ring_mixture(n, 8, 2.0, 0.05, &mut Prng::new(4)).unwrap();
        let c = ring_centers(8, 2.0);
        let mut counts = [0usize; 8];
        for r in x.iter_rows() {
            let k = (0..8)
                .min_by(|&a, &b| {
                    crate::numerics::sq_dist(r, c.row(a)).total_cmp(&crate::numerics::sq_dist(r, c.row(b)))
                })
                .unwrap();
            counts[k] += 1;
        }
        let p = 1.0 / 8.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for k in counts {
            assert!((k as f64 - n as f64 * p).abs() <= 3.0 * sd);
        }
    }

    #[test]
    fn csv_parsing() {
        let ds = LabeledDataset::read_csv("1,0.5,2\n-1,-3,4.25\n".as_bytes(), false).unwrap();
        assert_eq!(ds.y(), &[1.0, -1.0]);
        assert_eq!(ds.x().as_slice(), &[0.5, 2.0, -3.0, 4.25]);
        let hdr = LabeledDataset::read_csv("y,a\n1,2\n".as_bytes(), true).unwrap();
        assert_eq!(hdr.len(), 1);
        assert!(matches!(
            LabeledDataset::read_csv("".as_bytes(), false),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            LabeledDataset::read_csv("1,2\n1,x\n".as_bytes(), false),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            LabeledDataset::read_csv("1,2\n1,2,3\n".as_bytes(), false),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            LabeledDataset::read_csv("0,2\n".as_bytes(), false),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let ds = gen_norm_sphere(30, 4, &mut Prng::new(5));
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = LabeledDataset::read_csv(buf.as_slice(), false).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn json_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Prng::new(6);
        let s = SpectralSampler::new(3, &[7, 5], &mut rng).unwrap();
        let path = dir.path().join("s.json");
        save_json(&path, &s).unwrap();
        let back: SpectralSampler = load_json(&path).unwrap();
        assert_eq!(back, s);
        let probe = rng.normal_matrix(10, 3);
        let (a, b) = (s.map(&probe).unwrap(), back.map(&probe).unwrap());
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        let spec = KernelSpec::gaussian(&[0.3, 1.7]).unwrap();
        save_json(&path, &spec).unwrap();
        assert_eq!(load_json::<KernelSpec>(&path).unwrap(), spec);

        let ds = gen_norm_sphere(5, 2, &mut rng).with_split(Split::Test);
        save_json(&path, &ds).unwrap();
        assert_eq!(load_json::<LabeledDataset>(&path).unwrap(), ds);
    }
}
