//! Run configuration: defaults, then a TOML file, then `--set key=value`
//! pairs, then the dedicated flags, applied in that order.

use std::path::{Path, PathBuf};

use cmil::eval::EvalConfig;
use cmil::experiment::Benchmark;
use cmil::{Error, Result, ScheduleKind, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Bin,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Jsonl => "jsonl",
            DataFormat::Bin => "bin",
        }
    }
}

/// Settings of the `gradcheck` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub bags: usize,
    pub coords_per_bag: usize,
    pub lambdas: Vec<f64>,
    /// Standard deviation of the random parameters the gradient is taken at.
    pub param_scale: f64,
    pub max_rel_error: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            bags: 20,
            coords_per_bag: 20,
            lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            param_scale: 0.5,
            max_rel_error: 1e-4,
        }
    }
}

/// Thresholds applied by `sweep --check` and `ablate --check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Seeds on which the log schedule must beat plain MIL on CorLoc.
    pub min_wins: usize,
    /// Required median CorLoc gain over plain MIL, as a fraction.
    pub min_corloc_gain: f64,
    /// Epochs allowed to increase the median selected-subset size.
    pub max_shrink_violations: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            min_wins: 8,
            min_corloc_gain: 0.10,
            max_shrink_violations: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Training dataset; `train` generates one from `synth` when unset.
    pub data: Option<PathBuf>,
    /// Seeds of the multi-seed commands.
    pub seeds: Vec<u64>,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub format: DataFormat,
    pub train_bags: usize,
    pub test_bags: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    pub check: CheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = Benchmark::default();
        RunConfig {
            out_dir: PathBuf::from("runs"),
            data: None,
            seeds: (0..10).collect(),
            checkpoint_every: 0,
            format: DataFormat::Jsonl,
            train_bags: bench.train_bags,
            test_bags: bench.test_bags,
            synth: bench.synth,
            train: bench.train,
            eval: bench.eval,
            gradcheck: GradcheckConfig::default(),
            check: CheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn benchmark(&self) -> Benchmark {
        Benchmark {
            synth: self.synth.clone(),
            train_bags: self.train_bags,
            test_bags: self.test_bags,
            train: self.train.clone(),
            eval: self.eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if !(self.eval.nms_threshold >= 0.0 && self.eval.nms_threshold <= 1.0) {
            return Err(Error::Config("eval.nms_threshold must lie in [0, 1]".into()));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(Error::Config("eval.iou_threshold must lie in (0, 1]".into()));
        }
        if self.train_bags == 0 || self.test_bags == 0 {
            return Err(Error::Config("train_bags and test_bags must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let Some(l) = self.gradcheck.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Config(format!("gradcheck.lambdas: {l} is outside [0, 1]")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Writes the resolved config to `config.toml` in the output directory.
    pub fn echo(&self) -> Result<PathBuf> {
        let path = self.out_dir.join("config.toml");
        cmil::io::write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }
}

/// One override, `path` in dotted form (`train.epochs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: String,
    pub value: Value,
}

impl Override {
    pub fn new(path: &str, value: impl Into<Value>) -> Self {
        Override {
            path: path.to_string(),
            value: value.into(),
        }
    }

    /// Parses `key=value`; the value is read as TOML and falls back to a
    /// bare string.
    pub fn parse(text: &str) -> Result<Self> {
        let (path, raw) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{text}`")))?;
        let path = path.trim();
        if path.is_empty() {
            return Err(Error::Config(format!("--set has an empty key in `{text}`")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        Ok(Override::new(path, value))
    }

    fn apply(&self, root: &mut Table) -> Result<()> {
        let parts: Vec<&str> = self.path.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields at least one part");
        let mut table = root;
        for (depth, part) in parents.iter().enumerate() {
            let entry = table
                .entry(part.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            table = entry.as_table_mut().ok_or_else(|| {
                Error::Config(format!(
                    "`{}` is not a table, cannot set `{}`",
                    parts[..=depth].join("."),
                    self.path
                ))
            })?;
        }
        table.insert(last.to_string(), self.value.clone());
        Ok(())
    }
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Resolves defaults, an optional config file and overrides into a validated config.
pub fn resolve(file: Option<&Path>, overrides: &[Override]) -> Result<RunConfig> {
    let defaults = RunConfig::default().to_toml()?;
    let mut table: Table = defaults
        .parse()
        .map_err(|e| Error::Config(format!("default config does not parse: {e}")))?;
    if let Some(path) = file {
        merge(&mut table, read_table(path)?);
    }
    for o in overrides {
        o.apply(&mut table)?;
    }
    // re-parse from text so that errors quote the offending line
    let merged = toml::to_string(&table)
        .map_err(|e| Error::Config(format!("cannot serialise merged config: {e}")))?;
    let what = file.map_or("resolved configuration".to_string(), |p| p.display().to_string());
    let config: RunConfig = toml::from_str(&merged)
        .map_err(|e| Error::Config(format!("{what}: {}", e.to_string().trim_end())))?;
    config.validate()?;
    Ok(config)
}

/// Overrides for `--schedule` and `--schedule-k`. A new schedule without an
/// explicit shape parameter gets that schedule's default.
pub fn schedule_overrides(kind: Option<ScheduleKind>, k: Option<f64>) -> Vec<Override> {
    let mut out = Vec::new();
    if let Some(kind) = kind {
        out.push(Override::new("train.schedule.kind", kind.name()));
        out.push(Override::new("train.schedule.k", k.unwrap_or(kind.default_k())));
    } else if let Some(k) = k {
        out.push(Override::new("train.schedule.k", k));
    }
    out
}

/// Parses `a..b` (exclusive), `a..=b` or a comma-separated list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seeds `{text}`"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = text.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        text.split(',').map(num).collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = RunConfig::default().to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = resolve(
            None,
            &[
                Override::parse("train.epochs=3").unwrap(),
                Override::parse("train.epochs = 4").unwrap(),
                Override::parse("format=bin").unwrap(),
                Override::parse("synth.object_size=[0.3, 0.5]").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.format, DataFormat::Bin);
        assert_eq!(cfg.synth.object_size, (0.3, 0.5));
    }

    #[test]
    fn unknown_field_is_named() {
        let err = resolve(None, &[Override::parse("train.epochz=3").unwrap()]).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = resolve(None, &[Override::parse("train.epochs=-1").unwrap()]).unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
    }

    #[test]
    fn schedule_flag_resets_shape() {
        let o = schedule_overrides(Some(ScheduleKind::Exp), None);
        let cfg = resolve(None, &o).unwrap();
        assert_eq!(cfg.train.schedule.kind, ScheduleKind::Exp);
        assert_eq!(cfg.train.schedule.k, 3.0);
        let o = schedule_overrides(Some(ScheduleKind::Sigmoid), Some(4.0));
        assert_eq!(resolve(None, &o).unwrap().train.schedule.k, 4.0);
    }

    #[test]
    fn file_merges_under_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "train_bags = 7\n[train]\nepochs = 2\nlr = 0.1\n").unwrap();
        let cfg = resolve(Some(&path), &[Override::new("train.lr", 0.2)]).unwrap();
        assert_eq!((cfg.train_bags, cfg.train.epochs, cfg.train.lr), (7, 2, 0.2));
        assert_eq!(cfg.train.momentum, TrainConfig::default().momentum);
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_seeds("5, 9").unwrap(), vec![5, 9]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
