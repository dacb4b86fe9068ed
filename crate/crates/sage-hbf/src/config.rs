//! Experiment configuration: JSON on disk, layered over a named preset, with
//! dotted-path overrides from the command line.
//!
//! Resolution order is preset, then the file, then every `--set` in order.
//! Relative paths inside the configuration are taken relative to the
//! directory of the configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use sage_hbf_core::adapt::FinetuneConfig;
use sage_hbf_core::baselines::{AltMinConfig, OracleConfig};
use sage_hbf_core::beamforming::LinkConfig;
use sage_hbf_core::channel::{AntennaLayout, Domain, TargetDomainParams};
use sage_hbf_core::metatrain::{MetaHyper, Method};
use sage_hbf_core::model::NetConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("bad override {0:?}: {1}")]
    Override(String, String),
    #[error("invalid value for {0}: {1}")]
    Invalid(&'static str, String),
    #[error("referenced file {0} does not exist")]
    MissingFile(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n_t: usize,
    pub n_rf: usize,
    pub n_u: usize,
    pub p_max: f64,
    /// `-log10(sigma^2)`.
    pub neg_log10_sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainsConfig {
    /// `[n_x, n_y, n_z]` of every source array; crossed with `gammas`.
    pub layouts: Vec<[usize; 3]>,
    pub gammas: Vec<f64>,
    pub bs_heights: Vec<f64>,
    pub d_over_lambda: f64,
    /// Samples used to estimate each domain's unit-power scale.
    pub calibration_samples: usize,
    /// Samples per domain written by `gen-data`.
    pub samples_per_domain: usize,
    /// Stored source datasets; when non-empty they replace the generators.
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub layout: [usize; 3],
    pub num_paths: usize,
    pub path_decay: f64,
    pub angle_spread: f64,
    pub bs_height: f64,
    pub gamma: f64,
    pub validation_samples: usize,
    /// Stored deployment samples used instead of the surrogate for fine-tuning.
    pub train_file: Option<PathBuf>,
    /// Stored validation set used instead of the surrogate.
    pub validation_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetBlock {
    pub conv_channels: usize,
    pub conv_layers: usize,
    pub fc_width: usize,
    pub fc_layers: usize,
    pub dropout_rate: f64,
    pub kernel_size: usize,
    pub use_batchnorm: bool,
    pub width_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: String,
    pub alpha: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gen_fraction: f64,
    pub updates_per_epoch: usize,
    pub pooled_lr: Option<f64>,
    /// Held-in validation samples per source domain.
    pub val_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneBlock {
    /// Backbone parameter file; `{seed}` and `{method}` are substituted.
    /// Trained in-process from the `train` block when unset.
    pub backbone: Option<String>,
    pub n_real_samples: usize,
    pub aug_m: usize,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: Option<usize>,
    pub distinct_users: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<String>,
    /// Deployment arrays of the surrogate target swept by `eval-zeroshot`.
    pub target_layouts: Vec<[usize; 3]>,
    pub neg_log10_sigma2_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XConfigBlock {
    pub layouts: Vec<[usize; 3]>,
    pub method: String,
    /// LOS evaluation samples per deployment layout and path-loss exponent.
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n_real_samples: Vec<usize>,
    pub augment: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub samples: usize,
    /// Evaluated instead of the surrogate validation set when set.
    pub dataset: Option<PathBuf>,
    pub altmin_max_iters: usize,
    pub altmin_tol: f64,
    pub altmin_restarts: usize,
    pub oracle_restarts: usize,
    pub oracle_iters: usize,
    pub oracle_initial_step: f64,
    pub oracle_backtrack: f64,
    pub oracle_warm_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Fraction of coordinates that must pass for a zero exit status.
    pub min_fraction: f64,
    /// Check the Train-mode graph (dropout and batch statistics).
    pub train_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub system: SystemConfig,
    pub domains: DomainsConfig,
    pub target: TargetConfig,
    pub net: NetBlock,
    pub train: TrainConfig,
    pub finetune: FinetuneBlock,
    pub eval: EvalConfig,
    pub xconfig: XConfigBlock,
    pub sweep: SweepConfig,
    pub baseline: BaselineConfig,
    pub gradcheck: GradcheckConfig,
    /// Seeds the source calibration and the surrogate validation set.
    pub data_seed: u64,
    /// Master seeds; every seed is an independent run.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Record wall-clock times in the training history (breaks byte
    /// reproducibility of that file).
    pub record_wall_time: bool,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Single-CPU scale: 16 antennas, 4 RF chains, 2 users, an eighth-width
    /// network and 8 source domains.
    pub fn desk() -> Self {
        let net = NetConfig::new(16, 4, 2);
        Self {
            preset: Preset::Desk,
            system: SystemConfig { n_t: 16, n_rf: 4, n_u: 2, p_max: 1.0, neg_log10_sigma2: 4.0 },
            domains: DomainsConfig {
                layouts: vec![[16, 1, 1], [1, 16, 1], [1, 1, 16], [4, 2, 2]],
                gammas: vec![1.5, 2.0],
                bs_heights: (6..=12).map(f64::from).collect(),
                d_over_lambda: 0.5,
                calibration_samples: 5000,
                samples_per_domain: 1000,
                files: Vec::new(),
            },
            target: TargetConfig {
                layout: [1, 4, 4],
                num_paths: 3,
                path_decay: 0.5,
                angle_spread: 0.2,
                bs_height: 6.0,
                gamma: 2.0,
                validation_samples: 2000,
                train_file: None,
                validation_file: None,
            },
            net: NetBlock {
                conv_channels: net.conv_channels,
                conv_layers: net.conv_layers,
                fc_width: net.fc_width,
                fc_layers: net.fc_layers,
                dropout_rate: net.dropout_rate,
                kernel_size: net.kernel_size,
                use_batchnorm: net.use_batchnorm,
                width_scale: 0.125,
            },
            train: TrainConfig {
                method: "mldg".into(),
                alpha: 0.1,
                epsilon: 0.02,
                beta: 1.0,
                batch_size: 128,
                epochs: 30,
                gen_fraction: 0.25,
                updates_per_epoch: 5,
                pooled_lr: None,
                val_size: 256,
            },
            finetune: FinetuneBlock {
                backbone: None,
                n_real_samples: 20,
                aug_m: 10_000,
                tau: 0.01,
                epochs: 20,
                batch_size: 128,
                steps_per_epoch: Some(10),
                distinct_users: false,
            },
            eval: EvalConfig {
                methods: vec!["mldg".into(), "deepall".into(), "randinit".into()],
                target_layouts: vec![[1, 4, 4], [4, 1, 4], [2, 2, 4]],
                neg_log10_sigma2_grid: vec![2.0, 3.0, 4.0, 5.0, 6.0],
            },
            xconfig: XConfigBlock {
                layouts: vec![[16, 1, 1], [1, 1, 16]],
                method: "deepall".into(),
                eval_samples: 1000,
            },
            sweep: SweepConfig { n_real_samples: vec![20, 100, 1000, 10_000], augment: vec![true, false] },
            baseline: BaselineConfig {
                samples: 200,
                dataset: None,
                altmin_max_iters: AltMinConfig::default().max_iters,
                altmin_tol: AltMinConfig::default().tol,
                altmin_restarts: AltMinConfig::default().restarts,
                oracle_restarts: OracleConfig::default().restarts,
                oracle_iters: OracleConfig::default().iters,
                oracle_initial_step: OracleConfig::default().initial_step,
                oracle_backtrack: OracleConfig::default().backtrack,
                oracle_warm_start: OracleConfig::default().warm_start,
            },
            gradcheck: GradcheckConfig { batch: 4, step: 1e-5, tolerance: 1e-4, min_fraction: 0.99, train_mode: true },
            data_seed: 7,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("out"),
            record_wall_time: false,
            base_dir: PathBuf::new(),
        }
    }

    /// Full-size network, 64 antennas, 8 RF chains, 4 users and 16 source
    /// domains.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = Preset::Paper;
        c.system = SystemConfig { n_t: 64, n_rf: 8, n_u: 4, p_max: 1.0, neg_log10_sigma2: 13.0 };
        c.domains.layouts = vec![[1, 1, 64], [1, 64, 1], [64, 1, 1], [4, 4, 4]];
        c.domains.gammas = vec![1.3, 1.5, 1.7, 2.0];
        c.target.layout = [1, 8, 8];
        c.net.width_scale = 1.0;
        let h = MetaHyper::default();
        c.train = TrainConfig {
            method: "mldg".into(),
            alpha: h.alpha,
            epsilon: h.epsilon,
            beta: h.beta,
            batch_size: h.batch_size,
            epochs: 100,
            gen_fraction: h.gen_fraction,
            updates_per_epoch: h.updates_per_epoch,
            pooled_lr: None,
            val_size: 1000,
        };
        c.finetune.tau = 1e-3;
        c.finetune.batch_size = 1000;
        c.finetune.steps_per_epoch = None;
        c.finetune.aug_m = 1_000_000;
        c.eval.target_layouts = vec![[1, 8, 8], [8, 1, 8], [8, 8, 1]];
        c.eval.neg_log10_sigma2_grid = vec![9.0, 10.0, 11.0, 12.0, 13.0];
        c.xconfig.layouts = vec![[64, 1, 1], [1, 1, 64]];
        c.sweep.n_real_samples = vec![20, 100, 1000, 10_000, 100_000];
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Loads `path` over its preset and applies `overrides` (`a.b=value`).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_value(file, overrides, base_dir)
    }

    pub fn from_value(file: Value, overrides: &[String], base_dir: PathBuf) -> Result<Self, ConfigError> {
        if !file.is_object() {
            return Err(ConfigError::Parse("configuration must be a JSON object".into()));
        }
        let parsed: Vec<(&str, Value)> = overrides.iter().map(|s| parse_override(s)).collect::<Result<_, _>>()?;
        let preset_value = parsed
            .iter()
            .rev()
            .find(|(k, _)| *k == "preset")
            .map(|(_, v)| v.clone())
            .or_else(|| file.get("preset").cloned())
            .unwrap_or(Value::String("desk".into()));
        let preset: Preset = serde_json::from_value(preset_value)
            .map_err(|e| ConfigError::Invalid("preset", format!("{e} (expected desk or paper)")))?;

        let mut merged = serde_json::to_value(Self::preset(preset)).expect("configuration serializes");
        merge(&mut merged, file);
        for (key, value) in parsed {
            set_path(&mut merged, key, value)?;
        }
        let mut cfg: Self = serde_json::from_value(merged).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `path` resolved against the configuration directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// SHA-256 of the canonical JSON form, excluding `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("configuration serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.system;
        if s.n_t == 0 || s.n_rf == 0 || s.n_u == 0 {
            return Err(ConfigError::Invalid("system", "n_t, n_rf and n_u must be positive".into()));
        }
        if s.n_rf < s.n_u || s.n_rf > s.n_t {
            return Err(ConfigError::Invalid("system", "need n_u <= n_rf <= n_t".into()));
        }
        self.link().map_err(|e| ConfigError::Invalid("system", e.to_string()))?;
        self.net_config().validate().map_err(|e| ConfigError::Invalid("net", e.to_string()))?;
        self.meta_hyper().validate().map_err(|e| ConfigError::Invalid("train", e.to_string()))?;
        self.finetune_config().validate().map_err(|e| ConfigError::Invalid("finetune", e.to_string()))?;
        parse_method(&self.train.method, "train.method")?;
        parse_method(&self.xconfig.method, "xconfig.method")?;
        for m in &self.eval.methods {
            parse_method(m, "eval.methods")?;
        }
        if self.train.val_size == 0 {
            return Err(ConfigError::Invalid("train.val_size", "must be positive".into()));
        }

        let d = &self.domains;
        if d.files.is_empty() {
            if d.layouts.is_empty() || d.gammas.is_empty() {
                return Err(ConfigError::Invalid("domains", "need at least one layout and one gamma".into()));
            }
            for l in &d.layouts {
                self.check_layout(*l, "domains.layouts")?;
            }
            for &g in &d.gammas {
                self.source_domain(d.layouts[0], g)
                    .validate()
                    .map_err(|e| ConfigError::Invalid("domains", e.to_string()))?;
            }
            if d.calibration_samples == 0 {
                return Err(ConfigError::Invalid("domains.calibration_samples", "must be positive".into()));
            }
        }
        if d.samples_per_domain == 0 {
            return Err(ConfigError::Invalid("domains.samples_per_domain", "must be positive".into()));
        }

        self.check_layout(self.target.layout, "target.layout")?;
        self.target_params(self.target.layout).validate().map_err(|e| ConfigError::Invalid("target", e.to_string()))?;
        if self.target.validation_samples == 0 {
            return Err(ConfigError::Invalid("target.validation_samples", "must be positive".into()));
        }
        for l in &self.eval.target_layouts {
            self.check_layout(*l, "eval.target_layouts")?;
        }
        if self.eval.neg_log10_sigma2_grid.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::Invalid("eval.neg_log10_sigma2_grid", "entries must be finite".into()));
        }
        for l in &self.xconfig.layouts {
            self.check_layout(*l, "xconfig.layouts")?;
        }
        if self.xconfig.eval_samples == 0 {
            return Err(ConfigError::Invalid("xconfig.eval_samples", "must be positive".into()));
        }
        if self.finetune.n_real_samples == 0 || self.sweep.n_real_samples.contains(&0) {
            return Err(ConfigError::Invalid("n_real_samples", "must be positive".into()));
        }

        let b = &self.baseline;
        if b.samples == 0 || b.altmin_max_iters == 0 || b.altmin_restarts == 0 {
            return Err(ConfigError::Invalid("baseline", "samples, iterations and restarts must be positive".into()));
        }
        if !(b.oracle_backtrack > 0.0 && b.oracle_backtrack < 1.0) || !(b.oracle_initial_step > 0.0) {
            return Err(ConfigError::Invalid("baseline", "need 0 < backtrack < 1 and a positive step".into()));
        }
        if b.oracle_restarts == 0 && !b.oracle_warm_start {
            return Err(ConfigError::Invalid("baseline", "oracle needs a restart or the warm start".into()));
        }
        let g = &self.gradcheck;
        if g.batch == 0 || !(g.step > 0.0) || !(g.tolerance > 0.0) || !(0.0..=1.0).contains(&g.min_fraction) {
            return Err(ConfigError::Invalid(
                "gradcheck",
                "batch, step, tolerance and min_fraction out of range".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds", "need at least one seed".into()));
        }
        Ok(())
    }

    /// Every dataset the configuration reads must exist.
    pub fn check_files(&self) -> Result<(), ConfigError> {
        let t = &self.target;
        let files = self
            .domains
            .files
            .iter()
            .chain(t.train_file.iter())
            .chain(t.validation_file.iter())
            .chain(self.baseline.dataset.iter());
        for f in files {
            let p = self.resolve(f);
            if !p.is_file() {
                return Err(ConfigError::MissingFile(p));
            }
        }
        Ok(())
    }

    fn check_layout(&self, l: [usize; 3], what: &'static str) -> Result<(), ConfigError> {
        let layout = self.layout(l);
        layout.validate().map_err(|e| ConfigError::Invalid(what, e.to_string()))?;
        if layout.n_t() != self.system.n_t {
            return Err(ConfigError::Invalid(
                what,
                format!("{l:?} has {} antennas, system.n_t is {}", layout.n_t(), self.system.n_t),
            ));
        }
        Ok(())
    }

    pub fn layout(&self, l: [usize; 3]) -> AntennaLayout {
        AntennaLayout { n_x: l[0], n_y: l[1], n_z: l[2], d_over_lambda: self.domains.d_over_lambda }
    }

    pub fn link(&self) -> sage_hbf_core::error::Result<LinkConfig> {
        LinkConfig::from_neg_log10(self.system.neg_log10_sigma2, self.system.p_max)
    }

    pub fn net_config(&self) -> NetConfig {
        let n = &self.net;
        NetConfig {
            n_t: self.system.n_t,
            n_rf: self.system.n_rf,
            n_u: self.system.n_u,
            conv_channels: n.conv_channels,
            conv_layers: n.conv_layers,
            fc_width: n.fc_width,
            fc_layers: n.fc_layers,
            dropout_rate: n.dropout_rate,
            kernel_size: n.kernel_size,
            use_batchnorm: n.use_batchnorm,
            width_scale: n.width_scale,
        }
    }

    pub fn meta_hyper(&self) -> MetaHyper {
        let t = &self.train;
        MetaHyper {
            alpha: t.alpha,
            epsilon: t.epsilon,
            beta: t.beta,
            batch_size: t.batch_size,
            epochs: t.epochs,
            gen_fraction: t.gen_fraction,
            updates_per_epoch: t.updates_per_epoch,
            pooled_lr: t.pooled_lr,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            aug_m: f.aug_m,
            tau: f.tau,
            epochs: f.epochs,
            batch_size: f.batch_size,
            steps_per_epoch: f.steps_per_epoch,
            distinct_users: f.distinct_users,
        }
    }

    pub fn altmin_config(&self) -> AltMinConfig {
        let b = &self.baseline;
        AltMinConfig { max_iters: b.altmin_max_iters, tol: b.altmin_tol, restarts: b.altmin_restarts }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        let b = &self.baseline;
        OracleConfig {
            restarts: b.oracle_restarts,
            iters: b.oracle_iters,
            initial_step: b.oracle_initial_step,
            backtrack: b.oracle_backtrack,
            warm_start: b.oracle_warm_start,
        }
    }

    pub fn source_domain(&self, layout: [usize; 3], gamma: f64) -> Domain {
        let mut d = Domain::new(self.layout(layout), gamma);
        d.bs_heights = self.domains.bs_heights.clone();
        d
    }

    pub fn target_params(&self, layout: [usize; 3]) -> TargetDomainParams {
        let t = &self.target;
        TargetDomainParams {
            num_paths: t.num_paths,
            path_decay: t.path_decay,
            angle_spread: t.angle_spread,
            bs_height: t.bs_height,
            gamma: t.gamma,
            ..TargetDomainParams::new(self.layout(layout))
        }
    }

    pub fn train_method(&self) -> Method {
        Method::parse(&self.train.method).expect("validated")
    }
}

pub fn parse_method(s: &str, what: &'static str) -> Result<Method, ConfigError> {
    Method::parse(s)
        .ok_or_else(|| ConfigError::Invalid(what, format!("unknown method {s:?} (mldg, deepall, fomaml, randinit)")))
}

/// `key=value`; the value is JSON when it parses as such, a string otherwise.
fn parse_override(s: &str) -> Result<(&str, Value), ConfigError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.into(), "expected key=value".into()))?;
    if key.is_empty() {
        return Err(ConfigError::Override(s.into(), "empty key".into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    Ok((key, value))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Replaces the value at a dotted path; every segment must already exist.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    for seg in key.split('.') {
        node = match node {
            Value::Object(m) => m.get_mut(seg),
            Value::Array(a) => seg.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| ConfigError::Override(key.into(), format!("no field {seg:?}")))?;
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn load(file: Value, sets: &[&str]) -> Result<ExperimentConfig, ConfigError> {
        let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::from_value(file, &sets, PathBuf::new())
    }

    #[test]
    fn presets_validate() {
        ExperimentConfig::desk().validate().unwrap();
        ExperimentConfig::paper().validate().unwrap();
    }

    #[test]
    fn desk_preset_sizes() {
        let c = ExperimentConfig::desk();
        let net = c.net_config();
        assert_eq!((net.n_t, net.n_rf, net.n_u), (16, 4, 2));
        assert_eq!((net.effective_conv_channels(), net.effective_fc_width()), (16, 128));
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.domains.layouts.len() * c.domains.gammas.len(), 8);
    }

    #[test]
    fn paper_preset_has_sixteen_domains() {
        let c = ExperimentConfig::paper();
        assert_eq!(c.domains.layouts.len() * c.domains.gammas.len(), 16);
        assert_eq!((c.train.alpha, c.train.epsilon, c.train.batch_size), (1e-4, 1e-5, 1000));
        assert_eq!(c.finetune.tau, 1e-3);
    }

    #[test]
    fn empty_file_is_the_desk_preset() {
        assert_eq!(load(json!({}), &[]).unwrap(), ExperimentConfig::desk());
        assert_eq!(load(json!({"preset": "paper"}), &[]).unwrap(), ExperimentConfig::paper());
    }

    #[test]
    fn file_then_overrides() {
        let c =
            load(json!({"train": {"epochs": 3}, "seeds": [9]}), &["train.epochs=4", "train.method=deepall"]).unwrap();
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.train.method, "deepall");
        assert_eq!(c.seeds, vec![9]);
        assert_eq!(c.train.alpha, ExperimentConfig::desk().train.alpha);
        let c = load(json!({}), &["domains.gammas.1=1.7", "finetune.steps_per_epoch=null"]).unwrap();
        assert_eq!(c.domains.gammas, vec![1.5, 1.7]);
        assert_eq!(c.finetune.steps_per_epoch, None);
    }

    #[test]
    fn preset_override_switches_base() {
        let c = load(json!({"preset": "desk"}), &["preset=paper"]).unwrap();
        assert_eq!(c.system.n_t, 64);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(load(json!({"trian": {}}), &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(load(json!({"train": {"epoch": 2}}), &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(load(json!({}), &["train.epoch=2"]), Err(ConfigError::Override(..))));
        assert!(matches!(load(json!({}), &["train.epochs"]), Err(ConfigError::Override(..))));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for bad in [
            "train.gen_fraction=1.0",
            "train.method=sgd",
            "net.dropout_rate=1.0",
            "system.n_rf=1",
            "target.layout=[4,4,2]",
            "seeds=[]",
            "finetune.tau=-1",
            "baseline.oracle_backtrack=1.5",
        ] {
            assert!(matches!(load(json!({}), &[bad]), Err(ConfigError::Invalid(..))), "{bad}");
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![1];
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn missing_files_are_reported() {
        let c = load(json!({"target": {"train_file": "no/such/file.bin"}}), &[]).unwrap();
        assert!(matches!(c.check_files(), Err(ConfigError::MissingFile(_))));
    }
}
