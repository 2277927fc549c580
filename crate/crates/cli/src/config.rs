//! Run configuration: line-oriented `key = value` text with one section per
//! module. Every key has a default; unknown sections or keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ctfwp::control::{Interpolation, ObservationChannels};
use ctfwp::fwp::{CdeInput, DeltaVariant, Rule, RuleKind};
use ctfwp::solver::SolveConfig;
use ctfwp::train::{Mode, ValidMetric};

/// `(section, key, default, doc)` for every accepted key.
pub const KEYS: &[(&str, &str, &str, &str)] = &[
    ("model", "mode", "ncde", "direct_node | ncde | nrde | discrete | ode_rfwp | vanilla_ncde"),
    ("model", "rule", "delta", "hebb | oja | delta (discrete and ode_rfwp: hebb | delta)"),
    ("model", "delta_variant", "auto", "pre | post | auto (post beyond 1000 steps)"),
    ("model", "cde_input", "x_and_dx", "x_and_dx | dx_only (ncde only)"),
    ("model", "hebb_kv_swap", "false", "x-values, x'-keys for the ncde hebb rule"),
    ("model", "d_model", "16", "fast weight width (vanilla_ncde: hidden size)"),
    ("model", "heads", "2", "heads; must divide d_model"),
    ("model", "d_ff", "32", "feed-forward width (ode_rfwp: ODE hidden width, vanilla_ncde: MLP width)"),
    ("model", "layers", "1", "stacked coupled layers (direct_node, ncde, nrde)"),
    ("solver", "method", "rk4", "euler | rk4 | dopri5"),
    ("solver", "steps", "1", "fixed steps per knot interval (euler, rk4)"),
    ("solver", "rtol", "1e-7", "relative tolerance (dopri5)"),
    ("solver", "atol", "1e-9", "absolute tolerance (dopri5)"),
    ("solver", "max_steps", "1000000", "adaptive step budget per solve"),
    ("control", "interpolation", "cubic", "cubic | linear"),
    ("control", "oi", "none", "observation channels: none | mask | count"),
    ("logsig", "depth", "1", "log-signature depth 1 | 2 (nrde)"),
    ("logsig", "step", "4", "observations per log-signature window (nrde)"),
    ("train", "lr", "1e-3", "Adam learning rate"),
    ("train", "batch_size", "32", "sequences per update"),
    ("train", "epochs", "20", "fixed epoch budget; the best validation epoch is kept"),
    ("train", "seed", "0", "parameter init and shuffling seed"),
    ("train", "metric", "accuracy", "validation metric: accuracy | auc (binary tasks)"),
    ("train", "wall_clock", "true", "record epoch seconds in metrics.csv (false writes 0)"),
    ("data", "dir", "", "directory of per-sequence csv files with labels.csv"),
    ("data", "ts", "", "UEA .ts file(s), comma separated; used instead of dir"),
    ("data", "manifest", "", "split manifest; without it a seeded 70/15/15 split is drawn"),
    ("data", "split_seed", "0", "seed of the drawn split"),
];

/// Text for `--help`.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (section / key = default: meaning):\n");
    let mut last = "";
    for (sec, key, default, doc) in KEYS {
        if *sec != last {
            let _ = writeln!(s, "  [{sec}]");
            last = sec;
        }
        let shown = if default.is_empty() { "\"\"" } else { default };
        let _ = writeln!(s, "    {key} = {shown}: {doc}");
    }
    s
}

struct Lookup<'a>(Vec<(&'a str, &'a str, String)>);

impl Lookup<'_> {
    fn get(&self, sec: &str, key: &str) -> &str {
        self.0.iter().find(|(s, k, _)| *s == sec && *k == key).map(|(_, _, v)| v.as_str()).expect("known key")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaChoice {
    Pre,
    Post,
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Dir(PathBuf),
    Ts(Vec<PathBuf>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub rule: Rule,
    pub delta: DeltaChoice,
    pub cde_input: CdeInput,
    pub hebb_kv_swap: bool,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub solver: SolveConfig,
    pub interpolation: Interpolation,
    pub oi: ObservationChannels,
    pub logsig_depth: usize,
    pub logsig_step: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub metric: ValidMetric,
    pub wall_clock: bool,
    pub data: Option<DataSource>,
    pub manifest: Option<PathBuf>,
    pub split_seed: u64,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("config {}", path.display()))
    }

    /// Parses `text`; relative data paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut values: Vec<(&str, &str, String)> = KEYS.iter().map(|(s, k, d, _)| (*s, *k, d.to_string())).collect();
        let mut seen = HashSet::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = i + 1;
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, ..)| *s == name) {
                    bail!("line {n}: unknown section [{name}]");
                }
                section = Some(name.to_string());
                continue;
            }
            let Some(sec) = section.as_deref() else { bail!("line {n}: `{line}` appears before any section") };
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {n}: expected `key = value`, got `{line}`"))?;
            let (k, v) = (k.trim(), v.trim());
            let Some(slot) = values.iter_mut().find(|(s, key, _)| *s == sec && *key == k) else {
                bail!("line {n}: unknown key `{k}` in [{sec}]");
            };
            if !seen.insert((sec.to_string(), k.to_string())) {
                bail!("line {n}: `{k}` set twice in [{sec}]");
            }
            slot.2 = v.to_string();
        }
        let cfg = Self::from_values(&Lookup(values), base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_values(values: &Lookup, base: &Path) -> Result<Self> {
        let get = |sec: &str, key: &str| values.get(sec, key);
        fn p<T: std::str::FromStr>(values: &Lookup, sec: &str, key: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            let v = values.get(sec, key);
            v.parse::<T>().map_err(|e| anyhow!("[{sec}] {key} = `{v}`: {e}"))
        }
        let delta = match get("model", "delta_variant") {
            "pre" => DeltaChoice::Pre,
            "post" => DeltaChoice::Post,
            "auto" => DeltaChoice::Auto,
            other => bail!("[model] delta_variant = `{other}`: expected pre | post | auto"),
        };
        let cde_input = match get("model", "cde_input") {
            "x_and_dx" => CdeInput::XAndDx,
            "dx_only" => CdeInput::DxOnly,
            other => bail!("[model] cde_input = `{other}`: expected x_and_dx | dx_only"),
        };
        let resolve = |s: &str| {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let dir = get("data", "dir");
        let ts = get("data", "ts");
        let data = match (dir.is_empty(), ts.is_empty()) {
            (true, true) => None,
            (false, true) => Some(DataSource::Dir(resolve(dir))),
            (true, false) => Some(DataSource::Ts(ts.split(',').map(|s| resolve(s.trim())).collect())),
            (false, false) => bail!("[data] set either dir or ts, not both"),
        };
        let manifest = get("data", "manifest");
        let solver = SolveConfig {
            method: p(values, "solver", "method")?,
            rtol: p(values, "solver", "rtol")?,
            atol: p(values, "solver", "atol")?,
            fixed_steps_per_knot: p(values, "solver", "steps")?,
            max_steps: p(values, "solver", "max_steps")?,
        };
        Ok(Self {
            mode: p(values, "model", "mode")?,
            rule: p(values, "model", "rule")?,
            delta,
            cde_input,
            hebb_kv_swap: p(values, "model", "hebb_kv_swap")?,
            d_model: p(values, "model", "d_model")?,
            heads: p(values, "model", "heads")?,
            d_ff: p(values, "model", "d_ff")?,
            layers: p(values, "model", "layers")?,
            solver,
            interpolation: p(values, "control", "interpolation")?,
            oi: p(values, "control", "oi")?,
            logsig_depth: p(values, "logsig", "depth")?,
            logsig_step: p(values, "logsig", "step")?,
            lr: p(values, "train", "lr")?,
            batch_size: p(values, "train", "batch_size")?,
            epochs: p(values, "train", "epochs")?,
            seed: p(values, "train", "seed")?,
            metric: p(values, "train", "metric")?,
            wall_clock: p(values, "train", "wall_clock")?,
            data,
            manifest: (!manifest.is_empty()).then(|| resolve(manifest)),
            split_seed: p(values, "data", "split_seed")?,
        })
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.mode != Mode::VanillaNcde && (self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0) {
            bail!("[model] d_model = {} must be a positive multiple of heads = {}", self.d_model, self.heads);
        }
        if self.d_model == 0 || self.d_ff == 0 {
            bail!("[model] d_model and d_ff must be positive");
        }
        if self.layers == 0 {
            bail!("[model] layers must be at least 1");
        }
        if self.layers > 1 && matches!(self.mode, Mode::Discrete | Mode::OdeRfwp | Mode::VanillaNcde) {
            bail!("[model] layers > 1 is only available for direct_node, ncde and nrde");
        }
        if self.rule == Rule::Oja && matches!(self.mode, Mode::Discrete | Mode::OdeRfwp) {
            bail!("[model] the discrete cells support hebb and delta only");
        }
        if !(1..=2).contains(&self.logsig_depth) {
            bail!("[logsig] depth must be 1 or 2");
        }
        if self.logsig_step == 0 {
            bail!("[logsig] step must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            bail!("[train] lr must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            bail!("[train] batch_size and epochs must be positive");
        }
        Ok(())
    }

    /// Rule with variants; `auto` is resolved from the longest prepared input.
    pub fn rule_kind(&self, max_effective_steps: usize) -> RuleKind {
        let variant = match self.delta {
            DeltaChoice::Pre => DeltaVariant::Pre,
            DeltaChoice::Post => DeltaVariant::Post,
            DeltaChoice::Auto => ctfwp::train::auto_delta_variant(max_effective_steps),
        };
        let mut r = RuleKind::new(self.rule).with_cde_input(self.cde_input).with_swap(self.hebb_kv_swap);
        if self.rule == Rule::Delta {
            r = r.with_delta(variant);
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("[model]\nrule = hebb # comment\n[train]\nlr = 0.01\n", Path::new("/base")).unwrap();
        assert_eq!(c.rule, Rule::Hebb);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.mode, Mode::Ncde);
        assert_eq!(c.solver, SolveConfig::default());
        assert!(c.data.is_none());
        let c = RunConfig::parse("[data]\ndir = d\nmanifest = /m.txt\n", Path::new("/base")).unwrap();
        assert_eq!(c.data, Some(DataSource::Dir(PathBuf::from("/base/d"))));
        assert_eq!(c.manifest, Some(PathBuf::from("/m.txt")));
    }

    #[test]
    fn typos_are_errors() {
        for bad in [
            "[model]\nd_modle = 8\n",
            "[modle]\n",
            "d_model = 8\n",
            "[model]\nd_model = 8\nd_model = 8\n",
            "[model]\nd_model = 9\nheads = 2\n",
            "[model]\nmode = ncdee\n",
            "[train]\nlr = -1\n",
            "[solver]\nrtol = 0\n",
            "[data]\ndir = a\nts = b\n",
            "[model]\nmode = discrete\nrule = oja\n",
        ] {
            assert!(RunConfig::parse(bad, Path::new(".")).is_err(), "{bad}");
        }
    }

    #[test]
    fn auto_delta_follows_length() {
        let c = RunConfig::parse("", Path::new(".")).unwrap();
        assert_eq!(c.rule_kind(10).delta_variant, DeltaVariant::Pre);
        assert_eq!(c.rule_kind(5000).delta_variant, DeltaVariant::Post);
        assert!(keys_help().contains("[logsig]"));
    }
}
