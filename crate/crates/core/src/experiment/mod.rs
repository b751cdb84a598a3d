//! Config-driven experiment driver: fits every run of one inference method, writes
//! per-run checkpoints, predictive dumps and metrics, and aggregates across runs.
//!
//! Output layout under the output directory:
//!
//! ```text
//! run_00/checkpoint.bin  run_00/history.csv  run_00/predictive.csv
//! run_00/metrics.csv     run_00/calibration.csv
//! aggregate.csv
//! energy.csv  energy_histogram.csv  energy_summary.csv     (energy analysis)
//! rhat.csv    rhat_summary.csv      trace.csv              (HMC diagnostics)
//! ```
//!
//! Every CSV starts with a provenance line carrying the tool version, config hash and
//! seed.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::ConfigFile;

use crate::checkpoint::{self, Checkpoint};
use crate::data::{
    load_dataset, split, synthesize_frlike_with, synthesize_uniform_noise, FrStyle, ImageDataset,
    Manifest, Normalization, Provenance,
};
use crate::error::{BnnError, Result};
use crate::hmc::{gelman_rubin_params, init_from_prior, run_hmc, Chain, HmcConfig};
use crate::laplace::{fit_laplace, fit_laplace_tuned, log_grid};
use crate::map_trainer::{evaluate_params, train_ensemble, train_map, TrainConfig, TrainHistory};
use crate::metrics::{avg_energy, energy_histogram, median, uce, write_calibration_csv, write_energy_csv, write_histogram_csv, EnergyRecord};
use crate::par;
use crate::posterior::{PosteriorTarget, Prior, Temperature};
use crate::predictive::{
    credible_filtered_uncertainty, ensemble_predictive, last_layer_predictive, mc_dropout_predictive, mean_prediction,
    predictive_from_samples, write_predictive_csv, Method, PosteriorPredictive,
};
use crate::report::{fmt_g, ProvenanceLine};
use crate::tensor_grad::{build_desk_cnn, build_lenet_expanded_with_dropout, NetworkSpec, Tensor};
use crate::vi::{train_vi, ViConfig, ViEpoch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// The 232,444-parameter expanded LeNet on 150×150 inputs.
    Lenet,
    /// Two conv blocks and three dense layers, any image size divisible by 4.
    Desk,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        n_per_class: usize,
        image_size: usize,
        /// Range of the per-image background noise standard deviation.
        noise_std: (f64, f64),
        seed: u64,
    },
    Container {
        path: PathBuf,
        manifest: PathBuf,
        /// Predefined test partition; without one a stratified share is held out.
        test: Option<(PathBuf, PathBuf)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub test_fraction: f64,
    /// Training share of the non-test pool.
    pub train_ratio: f64,
    pub split_seed: u64,
    /// Draw a fresh train/validation split for every run.
    pub reshuffle: bool,
}

/// A dataset compared against the in-distribution test set in the energy analysis.
#[derive(Debug, Clone, PartialEq)]
pub enum ShiftSet {
    /// Uniform pixels with the training pool's mean and variance, `width` times as wide.
    Noise { n: usize, width: f64, seed: u64 },
    /// Synthetic sources drawn from the shifted generator style.
    SyntheticShifted { n_per_class: usize, seed: u64 },
    Container { path: PathBuf, manifest: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyConfig {
    pub bin_width: f64,
    pub sets: Vec<(String, ShiftSet)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelection {
    LastLayer,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseConfig {
    pub rhat_threshold: f64,
    pub parameters: ParamSelection,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HmcInit {
    Map(TrainConfig),
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MethodConfig {
    Map {
        train: TrainConfig,
    },
    Dropout {
        train: TrainConfig,
        samples: usize,
    },
    Ensemble {
        train: TrainConfig,
        members: usize,
    },
    Lla {
        train: TrainConfig,
        /// Fixed prior std; `None` tunes it on `grid` by evidence maximisation.
        prior_std: Option<f64>,
        grid: Vec<f64>,
        samples: usize,
    },
    Vi {
        vi: ViConfig,
    },
    Hmc {
        hmc: HmcConfig,
        prior: Prior,
        temperature: Temperature,
        augment: bool,
        init: HmcInit,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub method_config: MethodConfig,
    pub data: DataConfig,
    pub architecture: Architecture,
    pub dropout_rate: f64,
    pub n_runs: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub credible_level: f64,
    pub uce_bins: usize,
    pub energy: EnergyConfig,
    pub diagnose: DiagnoseConfig,
    pub config_hash: String,
}

fn train_config(cfg: &ConfigFile, prefix: &str, defaults: TrainConfig) -> Result<TrainConfig> {
    let key = |k: &str| format!("{prefix}.{k}");
    let c = TrainConfig {
        epochs: cfg.get_or(&key("epochs"), defaults.epochs)?,
        learning_rate: cfg.get_or(&key("learning_rate"), defaults.learning_rate)?,
        weight_decay: cfg.get_or(&key("weight_decay"), defaults.weight_decay)?,
        batch_size: cfg.get_or(&key("batch_size"), defaults.batch_size)?,
        lr_factor: cfg.get_or(&key("lr_factor"), defaults.lr_factor)?,
        lr_patience: cfg.get_or(&key("lr_patience"), defaults.lr_patience)?,
        early_stopping_patience: cfg.get_or(&key("early_stopping_patience"), defaults.early_stopping_patience)?,
        augment: cfg.get_or(&key("augment"), defaults.augment)?,
        ..defaults
    };
    c.validate().map_err(|e| BnnError::Config(format!("{prefix}: {e}")))?;
    Ok(c)
}

fn prior_from(cfg: &ConfigFile, prefix: &str, default_std: f64) -> Result<Prior> {
    let kind: String = cfg.get_or(&format!("{prefix}.prior"), "gaussian".to_string())?;
    let width: f64 = cfg.get_or(&format!("{prefix}.prior_std"), default_std)?;
    let prior = match kind.as_str() {
        "gaussian" => Prior::gaussian(width),
        "laplace" => Prior::laplace(width),
        other => return Err(BnnError::Config(format!("{prefix}.prior: unknown prior {other:?}"))),
    };
    prior.map_err(|e| BnnError::Config(format!("{prefix}: {e}")))
}

fn temperature_from(cfg: &ConfigFile, key: &str) -> Result<Temperature> {
    Temperature::new(cfg.get_or(key, 1.0)?).map_err(|e| BnnError::Config(format!("{key}: {e}")))
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_config(&ConfigFile::read(path)?)
    }

    /// Builds and validates the experiment; any key not understood is a config error.
    pub fn from_config(cfg: &ConfigFile) -> Result<Self> {
        let method: Method = cfg.require::<String>("method")?.parse()?;
        let m = format!("method.{method}");

        let source = match cfg.get_or("data.source", "synthetic".to_string())?.as_str() {
            "synthetic" => DataSource::Synthetic {
                n_per_class: cfg.get_or("data.synthetic.n_per_class", 500)?,
                image_size: cfg.get_or("data.synthetic.image_size", 16)?,
                noise_std: (
                    cfg.get_or("data.synthetic.noise_min", FrStyle::default().noise_std.0)?,
                    cfg.get_or("data.synthetic.noise_max", FrStyle::default().noise_std.1)?,
                ),
                seed: cfg.get_or("data.synthetic.seed", 0)?,
            },
            "container" => {
                let test = match cfg.get::<PathBuf>("data.test_path")? {
                    Some(p) => Some((p, cfg.require("data.test_manifest")?)),
                    None => None,
                };
                DataSource::Container {
                    path: cfg.require("data.path")?,
                    manifest: cfg.require("data.manifest")?,
                    test,
                }
            }
            other => return Err(BnnError::Config(format!("data.source: unknown source {other:?}"))),
        };
        if let DataSource::Synthetic { noise_std: (lo, hi), .. } = source {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(BnnError::Config(format!("data.synthetic noise range [{lo}, {hi}] must be finite, non-negative and ordered")));
            }
        }
        let data = DataConfig {
            source,
            test_fraction: cfg.get_or("data.test_fraction", 0.2)?,
            train_ratio: cfg.get_or("data.train_ratio", 0.8)?,
            split_seed: cfg.get_or("data.split_seed", 0)?,
            reshuffle: cfg.get_or("data.reshuffle", method != Method::Hmc)?,
        };
        if !(data.test_fraction > 0.0 && data.test_fraction < 1.0) || !(data.train_ratio > 0.0 && data.train_ratio < 1.0) {
            return Err(BnnError::Config("data.test_fraction and data.train_ratio must lie in (0, 1)".into()));
        }

        let architecture = match cfg.get_or("network.architecture", "desk".to_string())?.as_str() {
            "lenet" => Architecture::Lenet,
            "desk" => Architecture::Desk,
            other => return Err(BnnError::Config(format!("network.architecture: unknown {other:?}"))),
        };
        let dropout_rate: f64 = cfg.get_or("network.dropout", 0.5)?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(BnnError::Config("network.dropout must lie in [0, 1)".into()));
        }

        let method_config = match method {
            Method::Map => MethodConfig::Map {
                train: train_config(cfg, &m, TrainConfig::default())?,
            },
            Method::Dropout => MethodConfig::Dropout {
                train: TrainConfig {
                    dropout_active: true,
                    ..train_config(cfg, &m, TrainConfig::default())?
                },
                samples: cfg.get_or(&format!("{m}.samples"), 200)?,
            },
            Method::Ensemble => {
                let members = cfg.get_or(&format!("{m}.members"), 10)?;
                if members < 2 {
                    return Err(BnnError::Config(format!("{m}.members must be at least 2")));
                }
                MethodConfig::Ensemble {
                    train: train_config(cfg, &m, TrainConfig::default())?,
                    members,
                }
            }
            Method::Lla => {
                let prior_std = match cfg.get_or(&format!("{m}.prior_std"), "auto".to_string())?.as_str() {
                    "auto" => None,
                    v => Some(v.parse().map_err(|_| BnnError::Config(format!("{m}.prior_std: {v:?} is not a number or auto")))?),
                };
                let grid = log_grid(
                    cfg.get_or(&format!("{m}.grid_min"), 1e-3)?,
                    cfg.get_or(&format!("{m}.grid_max"), 1e2)?,
                    cfg.get_or(&format!("{m}.grid_points"), 26)?,
                );
                if grid.is_empty() || grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
                    return Err(BnnError::Config(format!("{m}: prior grid must be positive and non-empty")));
                }
                MethodConfig::Lla {
                    train: train_config(cfg, &m, TrainConfig::default())?,
                    prior_std,
                    grid,
                    samples: cfg.get_or(&format!("{m}.samples"), 200)?,
                }
            }
            Method::Vi => {
                let d = ViConfig::default();
                let vi = ViConfig {
                    prior: prior_from(cfg, &m, 0.01)?,
                    temperature: Temperature::new(cfg.get_or(&format!("{m}.temperature"), d.temperature.value())?)
                        .map_err(|e| BnnError::Config(format!("{m}.temperature: {e}")))?,
                    tempering: cfg.get_or::<String>(&format!("{m}.tempering"), d.tempering.to_string())?.parse()?,
                    mc_samples: cfg.get_or(&format!("{m}.mc_samples"), d.mc_samples)?,
                    eval_samples: cfg.get_or(&format!("{m}.samples"), d.eval_samples)?,
                    epochs: cfg.get_or(&format!("{m}.epochs"), d.epochs)?,
                    learning_rate: cfg.get_or(&format!("{m}.learning_rate"), d.learning_rate)?,
                    batch_size: cfg.get_or(&format!("{m}.batch_size"), d.batch_size)?,
                    init_sigma_scale: cfg.get_or(&format!("{m}.init_sigma_scale"), d.init_sigma_scale)?,
                    augment: cfg.get_or(&format!("{m}.augment"), false)?,
                    seed: 0,
                };
                vi.validate().map_err(|e| BnnError::Config(format!("{m}: {e}")))?;
                MethodConfig::Vi { vi }
            }
            Method::Hmc => {
                let d = HmcConfig::default();
                let hmc = HmcConfig {
                    step_size: cfg.get_or(&format!("{m}.step_size"), d.step_size)?,
                    leapfrog_steps: cfg.get_or(&format!("{m}.leapfrog_steps"), d.leapfrog_steps)?,
                    total_steps: cfg.get_or(&format!("{m}.total_steps"), d.total_steps)?,
                    burn_in: cfg.get_or(&format!("{m}.burn_in"), d.burn_in)?,
                    thin: cfg.get_or(&format!("{m}.thin"), d.thin)?,
                    divergence_threshold: cfg.get_or(&format!("{m}.divergence_threshold"), d.divergence_threshold)?,
                    monitor_every: cfg.get_or(&format!("{m}.monitor_every"), d.monitor_every)?,
                    seed: 0,
                };
                hmc.validate().map_err(|e| BnnError::Config(format!("{m}: {e}")))?;
                let init = match cfg.get_or(&format!("{m}.init"), "map".to_string())?.as_str() {
                    "map" => HmcInit::Map(train_config(cfg, &format!("{m}.init"), TrainConfig::default())?),
                    "prior" => HmcInit::Prior,
                    other => return Err(BnnError::Config(format!("{m}.init: expected map or prior, got {other:?}"))),
                };
                MethodConfig::Hmc {
                    hmc,
                    prior: prior_from(cfg, &m, 0.1)?,
                    temperature: temperature_from(cfg, &format!("{m}.temperature"))?,
                    augment: cfg.get_or(&format!("{m}.augment"), false)?,
                    init,
                }
            }
        };

        let tags: String = cfg.get_or("energy.sets", "noise".to_string())?;
        let mut sets = Vec::new();
        for tag in tags.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if tag == "id" || sets.iter().any(|(t, _)| t == tag) {
                return Err(BnnError::Config(format!("energy.sets: duplicate or reserved tag {tag:?}")));
            }
            let p = format!("energy.{tag}");
            let kind: String = cfg.get(&format!("{p}.kind"))?.unwrap_or_else(|| match tag {
                "noise" => "noise".into(),
                "shifted" => "synthetic_shifted".into(),
                _ => String::new(),
            });
            let set = match kind.as_str() {
                "noise" => ShiftSet::Noise {
                    n: cfg.get_or(&format!("{p}.n"), 200)?,
                    width: cfg.get_or(&format!("{p}.width"), 1.0)?,
                    seed: cfg.get_or(&format!("{p}.seed"), 1)?,
                },
                "synthetic_shifted" => ShiftSet::SyntheticShifted {
                    n_per_class: cfg.get_or(&format!("{p}.n_per_class"), 100)?,
                    seed: cfg.get_or(&format!("{p}.seed"), 2)?,
                },
                "container" => ShiftSet::Container {
                    path: cfg.require(&format!("{p}.path"))?,
                    manifest: cfg.require(&format!("{p}.manifest"))?,
                },
                "" => return Err(BnnError::Config(format!("energy set {tag:?} has no {p}.kind"))),
                other => return Err(BnnError::Config(format!("{p}.kind: unknown {other:?}"))),
            };
            sets.push((tag.to_string(), set));
        }
        let energy = EnergyConfig {
            bin_width: cfg.get_or("energy.bin_width", 0.1)?,
            sets,
        };
        let diagnose = DiagnoseConfig {
            rhat_threshold: cfg.get_or("diagnose.rhat_threshold", 1.1)?,
            parameters: match cfg.get_or("diagnose.parameters", "last_layer".to_string())?.as_str() {
                "last_layer" => ParamSelection::LastLayer,
                "all" => ParamSelection::All,
                other => return Err(BnnError::Config(format!("diagnose.parameters: unknown {other:?}"))),
            },
        };

        let exp = Self {
            method,
            method_config,
            data,
            architecture,
            dropout_rate,
            n_runs: cfg.get_or("n_runs", 10)?,
            seed: cfg.get_or("seed", 0)?,
            output_dir: cfg.get_or("output.dir", PathBuf::from("results"))?,
            credible_level: cfg.get_or("evaluation.credible_level", 0.64)?,
            uce_bins: cfg.get_or("evaluation.uce_bins", 10)?,
            energy,
            diagnose,
            config_hash: cfg.hash(),
        };
        cfg.reject_unused()?;
        if exp.n_runs == 0 {
            return Err(BnnError::Config("n_runs must be at least 1".into()));
        }
        if !(exp.credible_level > 0.0 && exp.credible_level <= 1.0) || exp.uce_bins == 0 {
            return Err(BnnError::Config("evaluation.credible_level must lie in (0, 1] and uce_bins be positive".into()));
        }
        if exp.energy.bin_width.is_nan() || exp.energy.bin_width <= 0.0 {
            return Err(BnnError::Config("energy.bin_width must be positive".into()));
        }
        exp.network()?;
        Ok(exp)
    }

    pub fn image_size(&self) -> Option<usize> {
        match &self.data.source {
            DataSource::Synthetic { image_size, .. } => Some(*image_size),
            DataSource::Container { .. } => None,
        }
    }

    /// Network for `image_size`, or for the configured synthetic size.
    pub fn network_for(&self, image_size: usize) -> Result<NetworkSpec> {
        match self.architecture {
            Architecture::Lenet if image_size != 150 => Err(BnnError::Config(format!(
                "the expanded LeNet needs 150x150 images, data has {image_size}x{image_size}"
            ))),
            Architecture::Lenet => Ok(build_lenet_expanded_with_dropout(self.dropout_rate)),
            Architecture::Desk if image_size < 4 || !image_size.is_multiple_of(4) => Err(BnnError::Config(format!(
                "the desk network needs an image size divisible by 4, got {image_size}"
            ))),
            Architecture::Desk => build_desk_cnn(image_size, self.dropout_rate),
        }
    }

    fn network(&self) -> Result<Option<NetworkSpec>> {
        self.image_size().map(|s| self.network_for(s)).transpose()
    }

    /// Every file the config refers to must exist.
    pub fn check_paths(&self) -> Result<()> {
        let mut paths: Vec<&PathBuf> = Vec::new();
        if let DataSource::Container { path, manifest, test } = &self.data.source {
            paths.extend([path, manifest]);
            if let Some((p, m)) = test {
                paths.extend([p, m]);
            }
        }
        for (_, set) in &self.energy.sets {
            if let ShiftSet::Container { path, manifest } = set {
                paths.extend([path, manifest]);
            }
        }
        match paths.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(BnnError::Config(format!("{} does not exist", p.display()))),
            None => Ok(()),
        }
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    pub fn run_dir(&self, run: usize) -> PathBuf {
        self.output_dir.join(format!("run_{run:02}"))
    }

    fn provenance(&self, seed: u64) -> ProvenanceLine {
        ProvenanceLine::new(self.config_hash.clone(), seed)
    }
}

/// Independent random stream `stream` of run seed `seed`.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_ENSEMBLE: u64 = 2;
const STREAM_PREDICT: u64 = 16;

/// Normalized data shared by all runs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Non-test items, split into train/validation per run.
    pub pool: ImageDataset,
    pub test: ImageDataset,
    /// Statistics of the raw pool, applied to every dataset.
    pub normalization: Normalization,
}

impl PreparedData {
    pub fn load(exp: &ExperimentConfig) -> Result<Self> {
        exp.check_paths()?;
        let (pool, test) = match &exp.data.source {
            DataSource::Synthetic {
                n_per_class,
                image_size,
                noise_std,
                seed,
            } => {
                let style = FrStyle {
                    noise_std: *noise_std,
                    ..FrStyle::default()
                };
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let all = synthesize_frlike_with(*n_per_class, *image_size, &style, &mut rng).0;
                hold_out(all, exp)?
            }
            DataSource::Container { path, manifest, test } => {
                let all = load_dataset(path, &Manifest::read(manifest)?)?;
                match test {
                    Some((p, m)) => (all, load_dataset(p, &Manifest::read(m)?)?),
                    None => hold_out(all, exp)?,
                }
            }
        };
        if pool.height != test.height || pool.width != test.width {
            return Err(BnnError::Config("training and test images differ in size".into()));
        }
        let normalization = pool.normalization();
        Ok(Self {
            pool: pool.normalized(&normalization),
            test: test.normalized(&normalization),
            normalization,
        })
    }

    pub fn image_size(&self) -> usize {
        self.pool.height
    }

    /// Train and validation sets of `run`.
    pub fn run_split(&self, exp: &ExperimentConfig, run: usize) -> Result<(ImageDataset, ImageDataset)> {
        let seed = if exp.data.reshuffle {
            exp.data.split_seed.wrapping_add(run as u64)
        } else {
            exp.data.split_seed
        };
        let s = split(&self.pool.labels, self.pool.n_classes(), exp.data.train_ratio, seed)?;
        Ok((self.pool.subset(&s.train), self.pool.subset(&s.val)))
    }

    /// A shifted or out-of-distribution set, normalized with the pool statistics.
    pub fn shift_set(&self, set: &ShiftSet) -> Result<ImageDataset> {
        let size = self.image_size();
        let raw = match set {
            ShiftSet::Noise { n, width, seed } => {
                let half = 3f64.sqrt() * self.normalization.std * width;
                let (lo, hi) = (self.normalization.mean - half, self.normalization.mean + half);
                synthesize_uniform_noise(*n, size, (lo, hi), &mut ChaCha8Rng::seed_from_u64(*seed))
            }
            ShiftSet::SyntheticShifted { n_per_class, seed } => {
                synthesize_frlike_with(*n_per_class, size, &FrStyle::shifted(), &mut ChaCha8Rng::seed_from_u64(*seed))
                    .0
                    .with_provenance(Provenance::Shifted, "synthetic_shifted")
            }
            ShiftSet::Container { path, manifest } => load_dataset(path, &Manifest::read(manifest)?)?,
        };
        if raw.height != size || raw.width != size {
            return Err(BnnError::InvalidArgument(format!(
                "{} has {}x{} images, expected {size}x{size}",
                raw.name, raw.height, raw.width
            )));
        }
        Ok(raw.normalized(&self.normalization))
    }
}

fn hold_out(all: ImageDataset, exp: &ExperimentConfig) -> Result<(ImageDataset, ImageDataset)> {
    let s = split(&all.labels, all.n_classes(), 1.0 - exp.data.test_fraction, exp.data.split_seed ^ 0x7e57)?;
    Ok((all.subset(&s.train), all.subset(&s.val)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_csv(path: &Path, provenance: &ProvenanceLine, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut out = create(path)?;
    provenance.write_to(&mut out)?;
    body(&mut out)?;
    out.flush()?;
    Ok(())
}

fn write_train_history(out: &mut impl Write, h: &TrainHistory) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,train_accuracy,val_loss,val_accuracy,learning_rate")?;
    for e in &h.epochs {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch,
            fmt_g(e.train_loss),
            fmt_g(e.train_accuracy),
            fmt_g(e.val_loss),
            fmt_g(e.val_accuracy),
            fmt_g(e.learning_rate)
        )?;
    }
    Ok(())
}

fn write_vi_history(out: &mut impl Write, h: &[ViEpoch]) -> std::io::Result<()> {
    writeln!(out, "epoch,nll,kl,loss,val_nll,val_accuracy")?;
    for e in h {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch,
            fmt_g(e.nll),
            fmt_g(e.kl),
            fmt_g(e.loss),
            fmt_g(e.val_nll),
            fmt_g(e.val_accuracy)
        )?;
    }
    Ok(())
}

fn warn_aborted(run: usize, aborted: &Option<String>) {
    if let Some(reason) = aborted {
        log::warn!("run {run}: training stopped early: {reason}");
    }
}

/// Fits run `run` and writes its checkpoint and training history.
pub fn fit_run(exp: &ExperimentConfig, data: &PreparedData, run: usize) -> Result<Checkpoint> {
    let spec = exp.network_for(data.image_size())?;
    let seed = exp.run_seed(run);
    let (train, val) = data.run_split(exp, run)?;
    let dir = exp.run_dir(run);
    fs::create_dir_all(&dir)?;
    let history = dir.join("history.csv");
    let prov = exp.provenance(seed);

    let ckpt = match &exp.method_config {
        MethodConfig::Map { train: tc } | MethodConfig::Dropout { train: tc, .. } => {
            let out = train_map(&spec, &train, &val, &TrainConfig { seed, ..tc.clone() })?;
            warn_aborted(run, &out.history.aborted);
            write_csv(&history, &prov, |w| write_train_history(w, &out.history))?;
            checkpoint::map_checkpoint(&spec, &out.params)
        }
        MethodConfig::Ensemble { train: tc, members } => {
            let mut rng = stream_rng(seed, STREAM_ENSEMBLE);
            let seeds: Vec<u64> = (0..*members).map(|_| rng.random()).collect();
            let trained = train_ensemble(&spec, &data.pool, tc, &seeds)?;
            write_csv(&history, &prov, |w| {
                writeln!(w, "member,seed,best_epoch,val_loss,val_accuracy")?;
                for (i, m) in trained.iter().enumerate() {
                    let best = m.outcome.history.best();
                    writeln!(
                        w,
                        "{i},{},{},{},{}",
                        m.seed,
                        m.outcome.history.best_epoch,
                        fmt_g(best.map_or(f64::NAN, |b| b.val_loss)),
                        fmt_g(best.map_or(f64::NAN, |b| b.val_accuracy))
                    )?;
                }
                Ok(())
            })?;
            let members: Vec<(u64, Vec<f64>)> = trained.into_iter().map(|m| (m.seed, m.outcome.params.values)).collect();
            checkpoint::ensemble_checkpoint(&spec, &members)
        }
        MethodConfig::Lla {
            train: tc,
            prior_std,
            grid,
            ..
        } => {
            let map = train_map(&spec, &train, &val, &TrainConfig { seed, ..tc.clone() })?;
            warn_aborted(run, &map.history.aborted);
            let llp = match prior_std {
                Some(g) => {
                    write_csv(&history, &prov, |w| write_train_history(w, &map.history))?;
                    fit_laplace(&spec, &map.params, &train, *g)?
                }
                None => {
                    let (llp, search) = fit_laplace_tuned(&spec, &map.params, &train, grid)?;
                    write_csv(&history, &prov, |w| write_train_history(w, &map.history))?;
                    write_csv(&dir.join("prior_search.csv"), &prov, |w| {
                        writeln!(w, "prior_std,log_evidence")?;
                        for (g, e) in search.grid.iter().zip(&search.log_evidence) {
                            writeln!(w, "{},{}", fmt_g(*g), fmt_g(*e))?;
                        }
                        Ok(())
                    })?;
                    llp
                }
            };
            checkpoint::laplace_checkpoint(&spec, &llp)
        }
        MethodConfig::Vi { vi } => {
            let out = train_vi(&spec, &train, &val, &ViConfig { seed, ..vi.clone() })?;
            warn_aborted(run, &out.aborted);
            write_csv(&history, &prov, |w| write_vi_history(w, &out.history))?;
            checkpoint::vi_checkpoint(&spec, &out.posterior)
        }
        MethodConfig::Hmc {
            hmc,
            prior,
            temperature,
            augment,
            init,
        } => {
            let init_theta = match init {
                HmcInit::Map(tc) => {
                    let map = train_map(&spec, &train, &val, &TrainConfig { seed, ..tc.clone() })?;
                    warn_aborted(run, &map.history.aborted);
                    write_csv(&history, &prov, |w| write_train_history(w, &map.history))?;
                    map.params.values
                }
                HmcInit::Prior => init_from_prior(prior, spec.param_count()?, &mut stream_rng(seed, STREAM_INIT)),
            };
            let target = PosteriorTarget::new(spec.clone(), *prior, Arc::new(train), *temperature)?.with_augmentation(*augment);
            let val_monitor = |theta: &[f64], _potential: f64| evaluate_params(&spec, theta, &val);
            let chain = run_hmc(target, &HmcConfig { seed, ..hmc.clone() }, init_theta, Some(&val_monitor))?;
            log::info!(
                "run {run}: acceptance {:.3}, {} divergent, {} samples",
                chain.acceptance_rate(),
                chain.divergent_count,
                chain.samples.len()
            );
            checkpoint::chain_checkpoint(&spec, &chain)
        }
    };
    let ckpt = ckpt
        .with_meta("method", exp.method)
        .with_meta("config_hash", &exp.config_hash)
        .with_meta("run", run)
        .with_meta("run_seed", seed);
    ckpt.save(dir.join("checkpoint.bin"))?;
    Ok(ckpt)
}

/// Loads the checkpoint of `run`, checking that it was produced by this method.
pub fn load_run_checkpoint(exp: &ExperimentConfig, run: usize) -> Result<Checkpoint> {
    let path = exp.run_dir(run).join("checkpoint.bin");
    if !path.exists() {
        return Err(BnnError::InvalidArgument(format!("{} not found; fit the run first", path.display())));
    }
    let ckpt = Checkpoint::load(&path)?;
    let method: String = ckpt.meta_value("method")?;
    if method != exp.method.to_string() {
        return Err(BnnError::InvalidArgument(format!(
            "{} holds a {method} model but the config method is {}",
            path.display(),
            exp.method
        )));
    }
    Ok(ckpt)
}

/// The run's checkpoint from this exact config if present, otherwise a fresh fit.
fn checkpoint_or_fit(exp: &ExperimentConfig, data: &PreparedData, run: usize) -> Result<Checkpoint> {
    if let Ok(ckpt) = load_run_checkpoint(exp, run) {
        if ckpt.meta.get("config_hash") == Some(&exp.config_hash) {
            return Ok(ckpt);
        }
    }
    fit_run(exp, data, run)
}

/// Posterior predictive of a fitted run on `inputs`; `stream` picks the sampling stream.
pub fn predictive_for(exp: &ExperimentConfig, ckpt: &Checkpoint, inputs: &Tensor, stream: u64) -> Result<PosteriorPredictive> {
    let spec = &ckpt.spec;
    let seed: u64 = ckpt.meta_value("run_seed")?;
    let mut rng = stream_rng(seed, STREAM_PREDICT + stream);
    match &exp.method_config {
        MethodConfig::Map { .. } => {
            let theta = checkpoint::map_params(ckpt)?.values;
            predictive_from_samples(spec, &[theta], inputs, Method::Map)
        }
        MethodConfig::Dropout { samples, .. } => {
            let theta = checkpoint::map_params(ckpt)?.values;
            mc_dropout_predictive(spec, &theta, exp.dropout_rate, *samples, inputs, &mut rng)
        }
        MethodConfig::Ensemble { .. } => ensemble_predictive(spec, &checkpoint::ensemble_from_checkpoint(ckpt)?, inputs),
        MethodConfig::Lla { samples, .. } => {
            let llp = checkpoint::laplace_from_checkpoint(ckpt)?;
            last_layer_predictive(spec, &llp, *samples, inputs, &mut rng)
        }
        MethodConfig::Vi { vi } => {
            let vp = checkpoint::vi_from_checkpoint(ckpt)?;
            predictive_from_samples(spec, &vp.sample_n(vi.eval_samples, &mut rng), inputs, Method::Vi)
        }
        MethodConfig::Hmc { .. } => {
            let chain = checkpoint::chain_from_checkpoint(ckpt)?;
            if chain.samples.is_empty() {
                return Err(BnnError::InvalidArgument("chain retained no samples".into()));
            }
            predictive_from_samples(spec, &chain.samples, inputs, Method::Hmc)
        }
    }
}

/// Per-run evaluation on the test set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub error_percent: f64,
    pub uce_percent: f64,
    pub val_error_percent: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Checkpoints and training histories only.
    Fit,
    /// Predictive dumps from existing checkpoints.
    Predict,
    /// Fit where needed, then predictive dumps, metrics and the aggregate.
    Evaluate,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub summaries: Vec<RunSummary>,
    pub failures: Vec<BnnError>,
    pub aggregate: Option<Aggregate>,
}

impl ExperimentReport {
    /// 0 success, 3 every run failed, 4 aggregated over a subset of runs.
    pub fn exit_code(&self) -> i32 {
        match (self.failures.is_empty(), self.completed()) {
            (true, _) => 0,
            (false, 0) => 3,
            (false, _) => 4,
        }
    }

    pub fn completed(&self) -> usize {
        self.summaries.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: Method,
    pub n_runs: usize,
    pub error_mean: f64,
    pub error_std: f64,
    pub uce_mean: f64,
    pub uce_std: f64,
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(method: Method, summaries: &[RunSummary]) -> Option<Aggregate> {
    if summaries.is_empty() {
        return None;
    }
    let errors: Vec<f64> = summaries.iter().map(|s| s.error_percent).collect();
    let uces: Vec<f64> = summaries.iter().map(|s| s.uce_percent).collect();
    let (error_mean, error_std) = mean_std(&errors);
    let (uce_mean, uce_std) = mean_std(&uces);
    Some(Aggregate {
        method,
        n_runs: summaries.len(),
        error_mean,
        error_std,
        uce_mean,
        uce_std,
    })
}

fn evaluate_run(exp: &ExperimentConfig, data: &PreparedData, run: usize, stage: Stage) -> Result<Option<RunSummary>> {
    let ckpt = match stage {
        Stage::Fit => {
            fit_run(exp, data, run)?;
            return Ok(None);
        }
        Stage::Predict => load_run_checkpoint(exp, run)?,
        Stage::Evaluate => checkpoint_or_fit(exp, data, run)?,
    };
    let seed = exp.run_seed(run);
    let prov = exp.provenance(seed);
    let dir = exp.run_dir(run);
    let pp = predictive_for(exp, &ckpt, &data.test.to_tensor()?, 0)?;
    let filtered = credible_filtered_uncertainty(&pp, exp.credible_level)?;
    write_csv(&dir.join("predictive.csv"), &prov, |w| write_predictive_csv(w, &pp, &data.test.labels, &filtered))?;
    if stage == Stage::Predict {
        return Ok(None);
    }

    let (_, pred) = mean_prediction(&pp);
    let correct: Vec<bool> = pred.iter().zip(&data.test.labels).map(|(p, y)| p == y).collect();
    let uncertainty: Vec<f64> = filtered.iter().map(|f| f.uncertainty).collect();
    let report = uce(&uncertainty, &correct, exp.uce_bins)?;
    let error_percent = 100.0 * correct.iter().filter(|c| !**c).count() as f64 / correct.len() as f64;
    let val_error_percent = validation_error(exp, data, &ckpt, run)?;
    let summary = RunSummary {
        run,
        seed,
        error_percent,
        uce_percent: report.uce_percent,
        val_error_percent,
        n_test: data.test.len(),
    };
    write_csv(&dir.join("calibration.csv"), &prov, |w| write_calibration_csv(w, &report))?;
    write_csv(&dir.join("metrics.csv"), &prov, |w| {
        writeln!(w, "run,seed,method,n_test,error_percent,uce_percent,val_error_percent")?;
        writeln!(
            w,
            "{run},{seed},{},{},{},{},{}",
            exp.method,
            summary.n_test,
            fmt_g(summary.error_percent),
            fmt_g(summary.uce_percent),
            fmt_g(summary.val_error_percent)
        )
    })?;
    Ok(Some(summary))
}

fn validation_error(exp: &ExperimentConfig, data: &PreparedData, ckpt: &Checkpoint, run: usize) -> Result<f64> {
    let (_, val) = data.run_split(exp, run)?;
    let pp = predictive_for(exp, ckpt, &val.to_tensor()?, 1)?;
    let (_, pred) = mean_prediction(&pp);
    let wrong = pred.iter().zip(&val.labels).filter(|(p, y)| p != y).count();
    Ok(100.0 * wrong as f64 / val.len() as f64)
}

/// Runs `stage` for every run, at most `workers` at a time. Failed runs are reported
/// and left out of the aggregate.
pub fn run_stage(exp: &ExperimentConfig, stage: Stage, workers: usize) -> Result<ExperimentReport> {
    let data = PreparedData::load(exp)?;
    exp.network_for(data.image_size())?;
    fs::create_dir_all(&exp.output_dir)?;
    let results = par::with_workers(workers, || {
        par::map_indices(exp.n_runs, |run| {
            evaluate_run(exp, &data, run, stage).map_err(|e| BnnError::Run {
                index: run,
                source: Box::new(e),
            })
        })
    });
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(Some(s)) => summaries.push(s),
            Ok(None) => {}
            Err(e) => {
                log::error!("{e}");
                failures.push(e);
            }
        }
    }
    let mut agg = None;
    if stage == Stage::Evaluate {
        if !failures.is_empty() && !summaries.is_empty() {
            log::warn!("aggregating over {} of {} runs", summaries.len(), exp.n_runs);
        }
        agg = aggregate(exp.method, &summaries);
        if let Some(a) = &agg {
            write_csv(&exp.output_dir.join("aggregate.csv"), &exp.provenance(exp.seed), |w| {
                writeln!(w, "method,error_mean,error_std,uce_mean,uce_std")?;
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    a.method,
                    fmt_g(a.error_mean),
                    fmt_g(a.error_std),
                    fmt_g(a.uce_mean),
                    fmt_g(a.uce_std)
                )
            })?;
        }
    }
    Ok(ExperimentReport {
        summaries,
        failures,
        aggregate: agg,
    })
}

pub fn run_experiment(exp: &ExperimentConfig, workers: usize) -> Result<ExperimentReport> {
    run_stage(exp, Stage::Evaluate, workers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyOutcome {
    /// Run whose model was used: the lowest validation error, ties to the lowest index.
    pub run: usize,
    pub records: Vec<EnergyRecord>,
    /// (tag, item count, median energy) per dataset, `id` first.
    pub medians: Vec<(String, usize, f64)>,
}

/// Energy scores of the in-distribution test set (tag `id`) and every configured shift
/// set under the best-validation model, with a shared-bin histogram.
pub fn run_energy_analysis(exp: &ExperimentConfig, workers: usize) -> Result<EnergyOutcome> {
    let data = PreparedData::load(exp)?;
    fs::create_dir_all(&exp.output_dir)?;
    let mut sets = vec![("id".to_string(), data.test.clone())];
    for (tag, set) in &exp.energy.sets {
        sets.push((tag.clone(), data.shift_set(set)?));
    }
    let val_errors = par::with_workers(workers, || {
        par::map_indices(exp.n_runs, |run| -> Result<(f64, Checkpoint)> {
            let ckpt = checkpoint_or_fit(exp, &data, run)?;
            Ok((validation_error(exp, &data, &ckpt, run)?, ckpt))
        })
    });
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    for (run, r) in val_errors.into_iter().enumerate() {
        let (err, ckpt) = r.map_err(|e| BnnError::Run {
            index: run,
            source: Box::new(e),
        })?;
        if best.as_ref().is_none_or(|(_, b, _)| err < *b) {
            best = Some((run, err, ckpt));
        }
    }
    let (run, _, ckpt) = best.expect("n_runs >= 1");
    let mut records = Vec::new();
    let mut medians = Vec::new();
    for (k, (tag, ds)) in sets.iter().enumerate() {
        let pp = predictive_for(exp, &ckpt, &ds.to_tensor()?, 2 + k as u64)?;
        let energies = avg_energy(&pp);
        medians.push((tag.clone(), energies.len(), median(&energies)));
        records.extend(energies.into_iter().enumerate().map(|(item_id, energy)| EnergyRecord {
            item_id,
            tag: tag.clone(),
            energy,
        }));
    }
    let hist = energy_histogram(&records, exp.energy.bin_width)?;
    let prov = exp.provenance(exp.run_seed(run));
    write_csv(&exp.output_dir.join("energy.csv"), &prov, |w| write_energy_csv(w, &records))?;
    write_csv(&exp.output_dir.join("energy_histogram.csv"), &prov, |w| write_histogram_csv(w, &hist))?;
    write_csv(&exp.output_dir.join("energy_summary.csv"), &prov, |w| {
        writeln!(w, "dataset,n,median_energy,run")?;
        for (tag, n, m) in &medians {
            writeln!(w, "{tag},{n},{},{run}", fmt_g(*m))?;
        }
        Ok(())
    })?;
    Ok(EnergyOutcome { run, records, medians })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub parameters: Vec<usize>,
    pub rhat: Vec<f64>,
    pub threshold: f64,
    pub fraction_above: f64,
}

/// R̂ of the selected parameters across chains sharing one network spec.
pub fn diagnose_chains(chains: &[(NetworkSpec, Chain)], selection: ParamSelection, threshold: f64) -> Result<Diagnostics> {
    let [(spec, _), rest @ ..] = chains else {
        return Err(BnnError::InvalidArgument("diagnostics need at least two chains".into()));
    };
    if rest.is_empty() {
        return Err(BnnError::InvalidArgument("diagnostics need at least two chains".into()));
    }
    if rest.iter().any(|(s, _)| s != spec) {
        return Err(BnnError::InvalidArgument("chains were run on different network specs".into()));
    }
    let parameters: Vec<usize> = match selection {
        ParamSelection::LastLayer => spec.layout()?.last_layer().range().collect(),
        ParamSelection::All => (0..spec.param_count()?).collect(),
    };
    let refs: Vec<&Chain> = chains.iter().map(|(_, c)| c).collect();
    let rhat = gelman_rubin_params(&refs, &parameters)?;
    let above = rhat.iter().filter(|r| **r >= threshold).count();
    Ok(Diagnostics {
        fraction_above: above as f64 / rhat.len().max(1) as f64,
        parameters,
        rhat,
        threshold,
    })
}

/// Loads every run's chain checkpoint and writes R̂ and trace CSVs.
pub fn run_diagnostics(exp: &ExperimentConfig) -> Result<Diagnostics> {
    if exp.method != Method::Hmc {
        return Err(BnnError::Config(format!("diagnostics need an hmc config, got method {}", exp.method)));
    }
    let chains = (0..exp.n_runs)
        .map(|run| {
            let ckpt = load_run_checkpoint(exp, run)?;
            Ok((ckpt.spec.clone(), checkpoint::chain_from_checkpoint(&ckpt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let d = diagnose_chains(&chains, exp.diagnose.parameters, exp.diagnose.rhat_threshold)?;
    let prov = exp.provenance(exp.seed);
    write_csv(&exp.output_dir.join("rhat.csv"), &prov, |w| {
        writeln!(w, "parameter,rhat")?;
        for (p, r) in d.parameters.iter().zip(&d.rhat) {
            writeln!(w, "{p},{}", fmt_g(*r))?;
        }
        Ok(())
    })?;
    write_csv(&exp.output_dir.join("rhat_summary.csv"), &prov, |w| {
        writeln!(w, "n_parameters,threshold,fraction_above")?;
        writeln!(w, "{},{},{}", d.parameters.len(), fmt_g(d.threshold), fmt_g(d.fraction_above))
    })?;
    write_csv(&exp.output_dir.join("trace.csv"), &prov, |w| {
        writeln!(w, "chain,step,potential,val_nll,val_accuracy")?;
        for (c, (_, chain)) in chains.iter().enumerate() {
            let t = &chain.trace;
            for i in 0..t.step.len() {
                let nll = t.nll.get(i).map_or("nan".into(), |v| fmt_g(*v));
                let acc = t.val_accuracy.get(i).map_or("nan".into(), |v| fmt_g(*v));
                writeln!(w, "{c},{},{},{nll},{acc}", t.step[i], fmt_g(t.potential[i]))?;
            }
        }
        Ok(())
    })?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmc::ChainTrace;
    use crate::tensor_grad::build_mlp;

    fn tiny(method: &str, extra: &str, out: &Path) -> ExperimentConfig {
        let text = format!(
            "method = {method}\nn_runs = 2\nseed = 5\noutput.dir = {}\n\
             data.synthetic.n_per_class = 30\ndata.synthetic.image_size = 8\n{extra}",
            out.display()
        );
        ExperimentConfig::from_config(&ConfigFile::parse(&text).unwrap()).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = |t: &str| ExperimentConfig::from_config(&ConfigFile::parse(t).unwrap()).unwrap_err();
        assert!(matches!(bad("method = vi\nmethod.vi.epochz = 3"), BnnError::Config(m) if m.contains("epochz")));
        assert!(matches!(bad("method = sgld"), BnnError::Config(_)));
        assert!(matches!(bad("method = map\nnetwork.architecture = lenet"), BnnError::Config(_)));
        assert!(matches!(bad("method = hmc\nmethod.hmc.thin = 0"), BnnError::Config(_)));
        assert!(matches!(bad("method = map\ndata.synthetic.noise_min = -0.1"), BnnError::Config(_)));
        assert!(matches!(bad("method = map\ndata.synthetic.noise_max = inf"), BnnError::Config(_)));
        assert!(matches!(bad("method = vi\nenergy.sets = noise,galaxies"), BnnError::Config(m) if m.contains("galaxies")));
        let missing = "method = map\ndata.source = container\ndata.path = /nonexistent.bin\ndata.manifest = /nonexistent.txt";
        let exp = ExperimentConfig::from_config(&ConfigFile::parse(missing).unwrap()).unwrap();
        assert!(matches!(exp.check_paths(), Err(BnnError::Config(_))));
    }

    #[test]
    fn aggregate_matches_per_run_rows() {
        let dir = tempfile::tempdir().unwrap();
        let exp = tiny("map", "method.map.epochs = 3\n", dir.path());
        let report = run_experiment(&exp, 2).unwrap();
        assert_eq!(report.exit_code(), 0);
        let mut errors = Vec::new();
        for run in 0..2 {
            let text = fs::read_to_string(exp.run_dir(run).join("metrics.csv")).unwrap();
            let mut lines = text.lines();
            assert!(ProvenanceLine::parse(lines.next().unwrap()).is_some());
            let row: Vec<&str> = lines.nth(1).unwrap().split(',').collect();
            errors.push(row[4].parse::<f64>().unwrap());
        }
        let agg = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        let row: Vec<&str> = agg.lines().nth(2).unwrap().split(',').collect();
        let mean = (errors[0] + errors[1]) / 2.0;
        let std = ((errors[0] - mean).powi(2) + (errors[1] - mean).powi(2)).sqrt();
        assert_eq!(row[0], "map");
        assert!((row[1].parse::<f64>().unwrap() - mean).abs() < 1e-4 * mean.max(1.0));
        assert!((row[2].parse::<f64>().unwrap() - std).abs() < 1e-4 * std.max(1.0));
    }

    #[test]
    fn energy_of_identical_sets_match() {
        let dir = tempfile::tempdir().unwrap();
        let exp = tiny("map", "method.map.epochs = 2\nenergy.sets = a,b\nenergy.a.kind = noise\nenergy.b.kind = noise\n", dir.path());
        let out = run_energy_analysis(&exp, 1).unwrap();
        let col = |t: &str| out.records.iter().filter(|r| r.tag == t).map(|r| r.energy).collect::<Vec<_>>();
        assert_eq!(col("a"), col("b"));
        assert_eq!(col("id").len(), 12);
    }

    fn toy_chain(offset: f64, seed: u64) -> Chain {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Chain {
            config: HmcConfig::default(),
            samples: (0..300)
                .map(|_| (0..14).map(|_| offset + rng.random::<f64>()).collect())
                .collect(),
            accept_count: 0,
            divergent_count: 0,
            trace: ChainTrace::default(),
        }
    }

    #[test]
    fn diagnostics_on_constructed_chains() {
        let spec = build_mlp(3, &[2], 2).unwrap();
        let a = toy_chain(0.0, 1);
        let same = diagnose_chains(&[(spec.clone(), a.clone()), (spec.clone(), a.clone())], ParamSelection::LastLayer, 1.1).unwrap();
        assert_eq!(same.rhat.len(), 6);
        assert!(same.rhat.iter().all(|r| (r - 1.0).abs() < 1e-2));
        let apart = diagnose_chains(&[(spec.clone(), a.clone()), (spec.clone(), toy_chain(5.0, 2))], ParamSelection::All, 1.1).unwrap();
        assert_eq!(apart.rhat.len(), 14);
        assert_eq!(apart.fraction_above, 1.0);
        let wider = build_mlp(4, &[2], 2).unwrap();
        assert!(diagnose_chains(&[(spec.clone(), a.clone()), (wider, a.clone())], ParamSelection::All, 1.1).is_err());
        assert!(diagnose_chains(&[(spec, a)], ParamSelection::All, 1.1).is_err());
    }
}
