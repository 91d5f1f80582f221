//! Run configuration: defaults, then a `key = value` file, then flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fincflow::bench::{Strategy, Target};
use fincflow::DType;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "FINCFLOW_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Sample,
    Reconstruct,
    Check,
    Bench,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Reconstruct => "reconstruct",
            Command::Check => "check",
            Command::Bench => "bench",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: DType,
    pub workers: usize,
    pub out: PathBuf,

    pub data: String,
    pub samples: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_per_step: bool,
    pub grad_clip: Option<f64>,
    pub levels: usize,
    pub steps: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub identity_init: bool,
    pub resume: Option<PathBuf>,

    pub checkpoint: Option<PathBuf>,
    pub count: usize,
    pub temperature: f64,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,

    pub sizes: Vec<usize>,
    pub seeds: usize,
    pub fault: Option<f64>,
    pub strategies: Vec<Strategy>,
    pub target: Target,
    pub gnuplot: bool,
}

/// Every key accepted in a config file or as `--key value`.
#[cfg(test)]
pub const KEYS: &[&str] = &[
    "seed",
    "dtype",
    "workers",
    "out",
    "data",
    "samples",
    "epochs",
    "batch",
    "lr",
    "decay",
    "decay_per_step",
    "grad_clip",
    "levels",
    "steps",
    "kernel",
    "hidden",
    "channels",
    "height",
    "width",
    "init",
    "resume",
    "checkpoint",
    "count",
    "temperature",
    "input",
    "output",
    "sizes",
    "seeds",
    "fault",
    "strategies",
    "target",
    "gnuplot",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value {value:?} for {key}: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value {value:?} for {key}: expected true or false")),
    }
}

fn parse_optional_f64(key: &str, value: &str) -> Result<Option<f64>, String> {
    match value {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl RunConfig {
    /// Defaults for `cmd`; the worker count comes from `workers_env` when
    /// set.
    pub fn defaults(cmd: Command, workers_env: Option<&str>) -> Result<Self, String> {
        let workers = match workers_env {
            Some(v) => parse(WORKERS_ENV, v)?,
            None => 1,
        };
        let bench = cmd == Command::Bench;
        Ok(RunConfig {
            seed: 0,
            dtype: DType::F32,
            workers,
            out: PathBuf::from("out"),
            data: "synthetic".into(),
            samples: 256,
            epochs: 1,
            batch: if bench { 1 } else { 64 },
            lr: 1e-3,
            decay: 0.99997,
            decay_per_step: false,
            grad_clip: None,
            levels: 2,
            steps: 2,
            kernel: 3,
            hidden: 64,
            channels: if bench { 2 } else { 4 },
            height: 8,
            width: 8,
            identity_init: false,
            resume: None,
            checkpoint: None,
            count: 4,
            temperature: 1.0,
            input: None,
            output: None,
            sizes: if bench { vec![16, 32, 64, 128] } else { vec![4, 8, 16] },
            seeds: 3,
            fault: None,
            strategies: Strategy::ALL.to_vec(),
            target: Target::Block,
            gnuplot: true,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dtype" => self.dtype = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data" => self.data = v.to_string(),
            "samples" => self.samples = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "decay" => self.decay = parse(key, v)?,
            "decay_per_step" => self.decay_per_step = parse_bool(key, v)?,
            "grad_clip" => self.grad_clip = parse_optional_f64(key, v)?,
            "levels" => self.levels = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "kernel" => self.kernel = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "init" => {
                self.identity_init = match v {
                    "identity" => true,
                    "random" => false,
                    _ => return Err(format!("invalid value {v:?} for init: expected identity or random")),
                }
            }
            "resume" => self.resume = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "count" => self.count = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "input" => self.input = Some(PathBuf::from(v)),
            "output" => self.output = Some(PathBuf::from(v)),
            "sizes" => self.sizes = parse_list(key, v)?,
            "seeds" => self.seeds = parse(key, v)?,
            "fault" => self.fault = parse_optional_f64(key, v)?,
            "strategies" => self.strategies = parse_list(key, v)?,
            "target" => self.target = parse(key, v)?,
            "gnuplot" => self.gnuplot = parse_bool(key, v)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(key.trim(), value)
                .map_err(|e| format!("{origin}:{}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        self.apply_file_text(&text, &path.display().to_string())
    }

    pub fn validate(&self, cmd: Command) -> Result<(), String> {
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        match cmd {
            Command::Train => {
                if self.epochs == 0 || self.batch == 0 || self.samples == 0 {
                    return Err("epochs, batch and samples must be positive".into());
                }
            }
            Command::Sample => {
                if !(self.temperature >= 0.0) {
                    return Err(format!("temperature must be >= 0, got {}", self.temperature));
                }
            }
            Command::Reconstruct => {
                if self.input.is_none() {
                    return Err("reconstruct needs --input".into());
                }
            }
            Command::Check => {
                if self.sizes.is_empty() || self.seeds == 0 {
                    return Err("check needs at least one size and one seed".into());
                }
            }
            Command::Bench => {
                if self.sizes.is_empty() || self.strategies.is_empty() {
                    return Err("bench needs at least one size and one strategy".into());
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::defaults(Command::Train, None).unwrap();
        c.apply_file_text("# comment\nseed = 7\nlr=0.01 # trailing\n\nsizes = 8, 16\n", "t")
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.sizes, vec![8, 16]);
        c.set("seed", "9").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_and_malformed_lines_rejected() {
        let mut c = RunConfig::defaults(Command::Train, None).unwrap();
        let e = c.apply_file_text("colour = red\n", "f").unwrap_err();
        assert!(e.contains("unknown config key"), "{e}");
        assert!(c.apply_file_text("seed 3\n", "f").is_err());
        assert!(c.apply_file_text("seed = x\n", "f").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = RunConfig::defaults(Command::Bench, None).unwrap();
        let samples = [
            ("seed", "1"),
            ("dtype", "f64"),
            ("workers", "2"),
            ("out", "o"),
            ("data", "d"),
            ("samples", "3"),
            ("epochs", "2"),
            ("batch", "4"),
            ("lr", "0.1"),
            ("decay", "0.5"),
            ("decay_per_step", "true"),
            ("grad_clip", "1"),
            ("levels", "1"),
            ("steps", "1"),
            ("kernel", "2"),
            ("hidden", "8"),
            ("channels", "8"),
            ("height", "4"),
            ("width", "4"),
            ("init", "identity"),
            ("resume", "r"),
            ("checkpoint", "c"),
            ("count", "2"),
            ("temperature", "0"),
            ("input", "i"),
            ("output", "o2"),
            ("sizes", "8"),
            ("seeds", "1"),
            ("fault", "1.1"),
            ("strategies", "wavefront,dense"),
            ("target", "unit"),
            ("gnuplot", "false"),
        ];
        assert_eq!(samples.len(), KEYS.len());
        for (k, v) in samples {
            assert!(KEYS.contains(&k));
            c.set(k, v).unwrap();
        }
        assert_eq!(c.strategies, vec![Strategy::Wavefront, Strategy::Dense]);
        assert_eq!(c.fault, Some(1.1));
    }

    #[test]
    fn workers_from_environment() {
        assert_eq!(RunConfig::defaults(Command::Check, Some("3")).unwrap().workers, 3);
        assert!(RunConfig::defaults(Command::Check, Some("many")).is_err());
    }
}
