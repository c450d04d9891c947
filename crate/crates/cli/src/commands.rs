//! Subcommand implementations. Each takes a validated config and an output
//! directory, writes its artifacts there and returns the computed results.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use ikl_core::align::{alignment_consistency, train_alignment, AlignLog, ConsistencyRow};
use ikl_core::data::{gen_norm_sphere, gen_ring_mixture, load_csv, save_json, write_points_csv, LabeledDataset, Split};
use ikl_core::features::kernel_estimate;
use ikl_core::gantoy::{train_gan, GanConfig, GanRun, RingTarget};
use ikl_core::numerics::{DenseMatrix, Prng};
use ikl_core::rks::{run_pipeline, Method, ReportEntry};
use ikl_core::spectral::{kernel_closed_form, KernelSpec, SpectralSampler, SpectralSource};

use crate::config::{
    AlignTrainCmdConfig, CheckKernel, ConsistencyConfig, DataKind, GenDataConfig, KernelCheckConfig, RksEvalConfig,
    SamplerChoice, SynthBenchmarkConfig,
};
use crate::CliError;

/// Output directory of one run plus the files written so far.
#[derive(Debug)]
pub struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        save_json(&self.path(name), value)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn with_writer<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush()
            .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io("writing csv".into(), e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelCheckRow {
    pub delta_norm: f64,
    pub k_exact: f64,
    pub k_hat: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelCheckReport {
    pub kernel: CheckKernel,
    pub m: usize,
    pub dim: usize,
    pub max_abs_err: f64,
    #[serde(skip)]
    pub rows: Vec<KernelCheckRow>,
}

/// Monte-Carlo kernel values against the closed form on random pairs.
pub fn kernel_check(cfg: &KernelCheckConfig, out: &mut RunDir) -> Result<KernelCheckReport, CliError> {
    let root = Prng::new(cfg.seed);
    let mut fr = root.split("frequencies");
    let (exact, omegas, widest) = match cfg.kernel {
        CheckKernel::Gaussian => {
            let spec = KernelSpec::gaussian(&cfg.bandwidths)?;
            let batch = spec.sample_frequencies(&mut fr, cfg.m, cfg.dim)?;
            let widest = cfg.bandwidths.iter().copied().fold(0.0, f64::max);
            (spec, batch.omegas().clone(), widest)
        }
        CheckKernel::IdentitySampler => {
            let sampler = SpectralSampler::identity(cfg.dim);
            let omegas = sampler.draw(&mut fr, cfg.m)?.omegas;
            (KernelSpec::gaussian(&[1.0])?, omegas, 1.0)
        }
    };
    let mut pr = root.split("pairs");
    let mut rows = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let x: Vec<f64> = (0..cfg.dim).map(|_| pr.normal()).collect();
        let mut delta = vec![0.0; cfg.dim];
        if i > 0 {
            let dir: Vec<f64> = (0..cfg.dim).map(|_| pr.normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = pr.uniform_range(0.0, cfg.max_offset * widest);
            delta = dir.iter().map(|v| r * v / norm).collect();
        }
        let y: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let k_exact = kernel_closed_form(&exact, &delta)?;
        let k_hat = kernel_estimate(&omegas, &x, &y);
        rows.push(KernelCheckRow {
            delta_norm: delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
            k_exact,
            k_hat,
            abs_err: (k_hat - k_exact).abs(),
        });
    }
    let report = KernelCheckReport {
        kernel: cfg.kernel,
        m: cfg.m,
        dim: cfg.dim,
        max_abs_err: rows.iter().map(|r| r.abs_err).fold(0.0, f64::max),
        rows,
    };
    out.with_writer("kernel_check.csv", |w| write_rows(w, &report.rows))?;
    out.json("summary.json", &report)?;
    Ok(report)
}

/// Train/validation/test splits of the norm-sphere task for one seed.
pub fn sphere_splits(
    d: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> (LabeledDataset, LabeledDataset, LabeledDataset) {
    let root = Prng::new(seed);
    (
        gen_norm_sphere(n_train, d, &mut root.split("train")).with_split(Split::Train),
        gen_norm_sphere(n_val, d, &mut root.split("val")).with_split(Split::Validation),
        gen_norm_sphere(n_test, d, &mut root.split("test")).with_split(Split::Test),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkSummaryRow {
    pub method: Method,
    pub d: usize,
    #[serde(rename = "M")]
    pub m_features: usize,
    pub seeds: usize,
    pub mean_test_error: f64,
    pub std_test_error: f64,
}

/// Mean and standard deviation of the test error per (method, d, M).
pub fn summarize(entries: &[ReportEntry]) -> Vec<BenchmarkSummaryRow> {
    let mut groups: BTreeMap<(usize, usize, usize), (Method, Vec<f64>)> = BTreeMap::new();
    for e in entries {
        let key = (e.method as usize, e.d, e.m_features);
        groups
            .entry(key)
            .or_insert_with(|| (e.method, Vec::new()))
            .1
            .push(e.test_error);
    }
    groups
        .into_iter()
        .map(|((_, d, m), (method, errs))| {
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0).max(1.0);
            BenchmarkSummaryRow {
                method,
                d,
                m_features: m,
                seeds: errs.len(),
                mean_test_error: mean,
                std_test_error: var.sqrt(),
            }
        })
        .collect()
}

/// Classification error of every method across dimensions and seeds.
pub fn synth_benchmark(cfg: &SynthBenchmarkConfig, out: &mut RunDir) -> Result<Vec<ReportEntry>, CliError> {
    let mut entries = Vec::new();
    for &d in &cfg.d_list {
        for s in 0..cfg.n_seeds as u64 {
            let seed = cfg.seed + s;
            let (train, val, test) = sphere_splits(d, cfg.n_train, cfg.n_val, cfg.n_test, seed);
            for &method in &cfg.methods {
                entries.extend(run_pipeline(&train, &val, &test, &cfg.pipeline.pipeline(method, seed))?);
            }
        }
    }
    out.json("report.json", &entries)?;
    let summary = summarize(&entries);
    out.with_writer("summary.csv", |w| write_rows(w, &summary))?;
    Ok(entries)
}

/// Trains the toy GAN. Artifacts are written even when training diverges, in
/// which case the divergence is returned as the error.
pub fn gan_toy(cfg: &GanConfig, out: &mut RunDir) -> Result<GanRun, CliError> {
    let target = RingTarget::from_config(cfg);
    let root = Prng::new(cfg.seed);
    let mut run = train_gan(cfg, &target, &root)?;
    out.with_writer("log.csv", |w| Ok(run.state.write_log_csv(w)?))?;
    let z = root.split("samples").normal_matrix(cfg.eval_size, cfg.latent_dim);
    let samples = run.state.generate(&z)?;
    out.with_writer("samples.csv", |w| Ok(write_points_csv(w, &samples, &["x", "y"])?))?;
    out.json("checkpoint.json", &run.state)?;
    match run.divergence.take() {
        Some(e) => Err(e.into()),
        None => Ok(run),
    }
}

/// Alignment gap between `m` and a large reference number of frequencies.
pub fn consistency(cfg: &ConsistencyConfig, out: &mut RunDir) -> Result<Vec<ConsistencyRow>, CliError> {
    let root = Prng::new(cfg.seed);
    let data = gen_norm_sphere(cfg.n, cfg.d, &mut root.split("data"));
    let sampler = match cfg.sampler {
        SamplerChoice::Identity => SpectralSampler::identity(cfg.d),
        SamplerChoice::Random => SpectralSampler::new(cfg.d, &cfg.hidden, &mut root.split("sampler"))?,
    };
    let rows = alignment_consistency(
        data.x(),
        data.y(),
        &sampler,
        &cfg.m_list,
        cfg.repeats,
        cfg.m_ref,
        cfg.delta,
        &root.split("draws"),
    )?;
    out.with_writer("consistency.csv", |w| write_rows(w, &rows))?;
    Ok(rows)
}

fn holdout(
    data: &LabeledDataset,
    fraction: f64,
    prng: &mut Prng,
) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    prng.shuffle(&mut idx);
    let n_val = ((data.len() as f64 * fraction).round() as usize).clamp(1, data.len().saturating_sub(2));
    if data.len() < 4 {
        return Err(CliError::Config(
            "need at least 4 rows to hold out a validation split".into(),
        ));
    }
    let (va, tr) = idx.split_at(n_val);
    Ok((
        data.select(tr).with_split(Split::Train),
        data.select(va).with_split(Split::Validation),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignSummary {
    pub iters_run: usize,
    pub stopped_early: bool,
    pub best_iter: usize,
    pub best_probe_alignment: f64,
}

/// Trains an implicit sampler by alignment and saves it.
pub fn align_train(cfg: &AlignTrainCmdConfig, timing: bool, out: &mut RunDir) -> Result<AlignLog, CliError> {
    let root = Prng::new(cfg.seed);
    let (train, val) = match &cfg.data_csv {
        Some(path) => holdout(
            &load_csv(Path::new(path), cfg.header)?,
            cfg.val_fraction,
            &mut root.split("holdout"),
        )?,
        None => {
            let (tr, va, _) = sphere_splits(cfg.d, cfg.n_train, cfg.n_val, 1, cfg.seed);
            (tr, va)
        }
    };
    let mut sampler = SpectralSampler::new(train.dim(), &cfg.hidden, &mut root.split("sampler"))?;
    let log = train_alignment(&train, Some(&val), &mut sampler, &cfg.align(root.split("align").seed()))?;
    let log = if timing { log } else { log.without_timing() };
    out.with_writer("align_log.csv", |w| Ok(log.write_csv(w)?))?;
    out.json("sampler.json", &sampler)?;
    let best = log
        .rows
        .iter()
        .find(|r| r.iter == log.best_iter)
        .map_or(f64::NAN, |r| r.probe_alignment);
    out.json(
        "summary.json",
        &AlignSummary {
            iters_run: log.iters_run,
            stopped_early: log.stopped_early,
            best_iter: log.best_iter,
            best_probe_alignment: best,
        },
    )?;
    Ok(log)
}

/// Two-stage classification on CSV data or the synthetic task.
pub fn rks_eval(cfg: &RksEvalConfig, out: &mut RunDir) -> Result<Vec<ReportEntry>, CliError> {
    let (train, val, test) = match (&cfg.train_csv, &cfg.val_csv, &cfg.test_csv) {
        (Some(tr), Some(va), Some(te)) => (
            load_csv(Path::new(tr), cfg.header)?.with_split(Split::Train),
            load_csv(Path::new(va), cfg.header)?.with_split(Split::Validation),
            load_csv(Path::new(te), cfg.header)?.with_split(Split::Test),
        ),
        _ => sphere_splits(cfg.d, cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed),
    };
    let entries = run_pipeline(&train, &val, &test, &cfg.pipeline.pipeline(cfg.method, cfg.seed))?;
    out.json("report.json", &entries)?;
    Ok(entries)
}

/// Writes a synthetic dataset.
pub fn gen_data(cfg: &GenDataConfig, out: &mut RunDir) -> Result<(), CliError> {
    let mut prng = Prng::new(cfg.seed).split("data");
    match cfg.kind {
        DataKind::NormSphere => {
            let ds = gen_norm_sphere(cfg.n, cfg.d, &mut prng);
            out.with_writer("data.csv", |w| Ok(ds.write_csv(w)?))?;
        }
        DataKind::Ring => {
            let pts: DenseMatrix = gen_ring_mixture(cfg.n, cfg.modes, cfg.radius, cfg.sigma, &mut prng)?;
            out.with_writer("data.csv", |w| Ok(write_points_csv(w, &pts, &["x", "y"])?))?;
        }
    }
    Ok(())
}
