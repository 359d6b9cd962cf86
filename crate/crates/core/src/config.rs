//! Experiment configuration: a flat, sectioned key-value text format.
//!
//! ```text
//! # comment
//! [federation]
//! clients = 4
//! flags = hfl+sl+dlr+eccr
//!
//! [noise]
//! kind = symflip
//! mu = 0.2
//! ```
//!
//! Every key has a default; an empty file is a complete configuration.
//! Unknown sections or keys are errors, named in the message.

use std::path::{Path, PathBuf};

use crate::data::NoiseKind;
use crate::error::{Error, Result};
use crate::federation::{
    AblationFlags, DeltaScope, FederationConfig, PartitionScheme,
};

/// Sweep axes; each optional list multiplies the run grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub mu: Option<Vec<f64>>,
    pub kind: Option<Vec<NoiseKind>>,
    pub beta: Option<Vec<f64>>,
    pub zeta: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub tau: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub flags: Option<Vec<AblationFlags>>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.mu.is_none()
            && self.kind.is_none()
            && self.beta.is_none()
            && self.zeta.is_none()
            && self.lambda.is_none()
            && self.gamma.is_none()
            && self.tau.is_none()
            && self.eta.is_none()
            && self.flags.is_none()
    }
}

/// A fully resolved experiment: base federation config, repeat seeds, sweep
/// grid, and output knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub federation: FederationConfig,
    pub seeds: Vec<u64>,
    pub sweep: SweepGrid,
    pub output_dir: PathBuf,
    pub save_checkpoints: bool,
    pub save_datasets: bool,
    pub emit_plots: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            federation: FederationConfig::reference(1),
            seeds: vec![1],
            sweep: SweepGrid::default(),
            output_dir: PathBuf::from("runs"),
            save_checkpoints: false,
            save_datasets: false,
            emit_plots: false,
        }
    }
}

impl ExperimentSpec {
    /// Validate the base config and every expanded grid point.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must be non-empty".into()));
        }
        if self.sweep.beta.is_some()
            && !matches!(self.federation.data.partition, PartitionScheme::Dirichlet { .. })
        {
            return Err(Error::Config(
                "sweep key 'beta' requires data.partition = dirichlet".into(),
            ));
        }
        for point in crate::experiment::expand_grid(self) {
            point.apply(&self.federation)?.validate()?;
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let line = match line.find('#') {
            Some(pos) => line[..pos].trim_end(),
            None => line,
        };
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("malformed section header '{line}'"),
                });
            }
            section = line[1..line.len() - 1].trim().to_string();
            match section.as_str() {
                "federation" | "data" | "noise" | "loss" | "dlr" | "eccr" | "optim" | "sweep"
                | "output" => {}
                other => {
                    return Err(Error::Config(format!("unknown section '{other}'")));
                }
            }
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected 'key = value', got '{line}'"),
                });
            }
        };
        apply_key(&mut spec, &section, key, value).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
            other => other,
        })?;
    }
    spec.validate()?;
    Ok(spec)
}

fn apply_key(spec: &mut ExperimentSpec, section: &str, key: &str, value: &str) -> Result<()> {
    let fed = &mut spec.federation;
    match (section, key) {
        ("federation", "clients") => fed.clients = parse_num(key, value)?,
        ("federation", "rounds") => fed.rounds = parse_num(key, value)?,
        ("federation", "local_epochs") => fed.local_epochs = parse_num(key, value)?,
        ("federation", "pretrain_epochs") => fed.pretrain_epochs = parse_num(key, value)?,
        ("federation", "batch_size") => fed.batch_size = parse_num(key, value)?,
        ("federation", "collab_steps") => fed.collab_steps = parse_num(key, value)?,
        ("federation", "flags") => fed.flags = AblationFlags::parse(value)?,
        ("federation", "seeds") => spec.seeds = parse_list(key, value)?,

        ("data", "classes") => fed.data.classes = parse_num(key, value)?,
        ("data", "feature_dim") => fed.data.feature_dim = parse_num(key, value)?,
        ("data", "public_dim") => {
            let d: usize = parse_num(key, value)?;
            if d != fed.data.feature_dim {
                return Err(Error::Config(format!(
                    "public_dim {d} does not match feature_dim {}",
                    fed.data.feature_dim
                )));
            }
        }
        ("data", "train_per_client") => fed.data.train_per_client = parse_num(key, value)?,
        ("data", "test_per_class") => fed.data.test_per_class = parse_num(key, value)?,
        ("data", "public_size") => fed.data.public_size = parse_num(key, value)?,
        ("data", "public_classes") => fed.data.public_classes = parse_num(key, value)?,
        ("data", "spread") => fed.data.spread = parse_num(key, value)?,
        ("data", "partition") => {
            fed.data.partition = match value {
                "iid" => PartitionScheme::Iid,
                "dirichlet" => {
                    let beta = match fed.data.partition {
                        PartitionScheme::Dirichlet { beta } => beta,
                        PartitionScheme::Iid => 0.5,
                    };
                    PartitionScheme::Dirichlet { beta }
                }
                other => return Err(Error::Config(format!("unknown partition '{other}'"))),
            }
        }
        ("data", "dirichlet_beta") => {
            let beta: f64 = parse_num(key, value)?;
            if let PartitionScheme::Dirichlet { .. } = fed.data.partition {
                fed.data.partition = PartitionScheme::Dirichlet { beta };
            } else {
                // Remember the value; takes effect if partition switches.
                fed.data.partition = PartitionScheme::Dirichlet { beta };
            }
        }
        ("data", "min_per_client") => fed.data.min_per_client = parse_num(key, value)?,
        ("data", "save_datasets") => spec.save_datasets = parse_bool(key, value)?,

        ("noise", "kind") => fed.noise.kind = NoiseKind::parse(value)?,
        ("noise", "mu") => fed.noise.mu = parse_num(key, value)?,
        ("noise", "mu_per_client") => {
            fed.noise.mu_per_client = if value == "none" {
                None
            } else {
                Some(parse_list(key, value)?)
            }
        }

        ("loss", "lambda") => fed.loss.lambda = parse_num(key, value)?,
        ("loss", "gamma") => fed.loss.gamma = parse_num(key, value)?,
        ("loss", "tau") => fed.loss.tau = parse_num(key, value)?,
        ("loss", "rce_clamp") => fed.loss.rce_log_clamp = parse_num(key, value)?,

        ("dlr", "zeta") => fed.zeta = parse_num(key, value)?,
        ("dlr", "temperature") => fed.dlr_temperature = parse_num(key, value)?,

        ("eccr", "eta") => fed.eta = parse_num(key, value)?,
        ("eccr", "weight_sources") => fed.weight_sources = parse_bool(key, value)?,
        ("eccr", "delta_scope") => {
            fed.delta_scope = match value {
                "full_round" => DeltaScope::FullRound,
                "local_phase" => DeltaScope::LocalPhase,
                other => return Err(Error::Config(format!("unknown delta_scope '{other}'"))),
            }
        }

        ("optim", "learning_rate") => fed.optim.learning_rate = parse_num(key, value)?,
        ("optim", "beta1") => fed.optim.beta1 = parse_num(key, value)?,
        ("optim", "beta2") => fed.optim.beta2 = parse_num(key, value)?,
        ("optim", "epsilon") => fed.optim.epsilon = parse_num(key, value)?,

        ("sweep", "mu") => spec.sweep.mu = Some(parse_list(key, value)?),
        ("sweep", "kind") => {
            let kinds: Result<Vec<NoiseKind>> =
                value.split(',').map(|s| NoiseKind::parse(s.trim())).collect();
            spec.sweep.kind = Some(kinds?);
        }
        ("sweep", "beta") => spec.sweep.beta = Some(parse_list(key, value)?),
        ("sweep", "zeta") => spec.sweep.zeta = Some(parse_list(key, value)?),
        ("sweep", "lambda") => spec.sweep.lambda = Some(parse_list(key, value)?),
        ("sweep", "gamma") => spec.sweep.gamma = Some(parse_list(key, value)?),
        ("sweep", "tau") => spec.sweep.tau = Some(parse_list(key, value)?),
        ("sweep", "eta") => spec.sweep.eta = Some(parse_list(key, value)?),
        ("sweep", "flags") => {
            let flags: Result<Vec<AblationFlags>> = value
                .split(',')
                .map(|s| AblationFlags::parse(s.trim()))
                .collect();
            spec.sweep.flags = Some(flags?);
        }

        ("output", "dir") => spec.output_dir = PathBuf::from(value),
        ("output", "checkpoints") => spec.save_checkpoints = parse_bool(key, value)?,
        ("output", "plots") => spec.emit_plots = parse_bool(key, value)?,

        ("", k) => {
            return Err(Error::Config(format!(
                "key '{k}' appears before any section header"
            )));
        }
        (s, k) => {
            return Err(Error::Config(format!("unknown key '{k}' in section [{s}]")));
        }
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "key '{key}' expects true/false, got '{other}'"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: std::result::Result<Vec<T>, _> =
        value.split(',').map(|s| s.trim().parse()).collect();
    items.map_err(|_| Error::Config(format!("cannot parse list '{value}' for key '{key}'")))
}

/// Serialize a spec back to the text format. `parse_config(dump_config(s))`
/// reproduces `s` exactly.
pub fn dump_config(spec: &ExperimentSpec) -> String {
    let fed = &spec.federation;
    let mut out = String::new();
    let kv = |s: &mut String, k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };

    out.push_str("[federation]\n");
    kv(&mut out, "clients", fed.clients.to_string());
    kv(&mut out, "rounds", fed.rounds.to_string());
    kv(&mut out, "local_epochs", fed.local_epochs.to_string());
    kv(&mut out, "pretrain_epochs", fed.pretrain_epochs.to_string());
    kv(&mut out, "batch_size", fed.batch_size.to_string());
    kv(&mut out, "collab_steps", fed.collab_steps.to_string());
    kv(&mut out, "flags", fed.flags.label());
    kv(
        &mut out,
        "seeds",
        spec.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    );

    out.push_str("\n[data]\n");
    kv(&mut out, "classes", fed.data.classes.to_string());
    kv(&mut out, "feature_dim", fed.data.feature_dim.to_string());
    kv(&mut out, "train_per_client", fed.data.train_per_client.to_string());
    kv(&mut out, "test_per_class", fed.data.test_per_class.to_string());
    kv(&mut out, "public_size", fed.data.public_size.to_string());
    kv(&mut out, "public_classes", fed.data.public_classes.to_string());
    kv(&mut out, "spread", fed.data.spread.to_string());
    match fed.data.partition {
        PartitionScheme::Iid => kv(&mut out, "partition", "iid".to_string()),
        PartitionScheme::Dirichlet { beta } => {
            kv(&mut out, "partition", "dirichlet".to_string());
            kv(&mut out, "dirichlet_beta", beta.to_string());
        }
    }
    kv(&mut out, "min_per_client", fed.data.min_per_client.to_string());
    kv(&mut out, "save_datasets", spec.save_datasets.to_string());

    out.push_str("\n[noise]\n");
    kv(&mut out, "kind", fed.noise.kind.as_str().to_string());
    kv(&mut out, "mu", fed.noise.mu.to_string());
    kv(
        &mut out,
        "mu_per_client",
        match &fed.noise.mu_per_client {
            None => "none".to_string(),
            Some(v) => v.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        },
    );

    out.push_str("\n[loss]\n");
    kv(&mut out, "lambda", fed.loss.lambda.to_string());
    kv(&mut out, "gamma", fed.loss.gamma.to_string());
    kv(&mut out, "tau", fed.loss.tau.to_string());
    kv(&mut out, "rce_clamp", fed.loss.rce_log_clamp.to_string());

    out.push_str("\n[dlr]\n");
    kv(&mut out, "zeta", fed.zeta.to_string());
    kv(&mut out, "temperature", fed.dlr_temperature.to_string());

    out.push_str("\n[eccr]\n");
    kv(&mut out, "eta", fed.eta.to_string());
    kv(&mut out, "weight_sources", fed.weight_sources.to_string());
    kv(
        &mut out,
        "delta_scope",
        match fed.delta_scope {
            DeltaScope::FullRound => "full_round".to_string(),
            DeltaScope::LocalPhase => "local_phase".to_string(),
        },
    );

    out.push_str("\n[optim]\n");
    kv(&mut out, "learning_rate", fed.optim.learning_rate.to_string());
    kv(&mut out, "beta1", fed.optim.beta1.to_string());
    kv(&mut out, "beta2", fed.optim.beta2.to_string());
    kv(&mut out, "epsilon", fed.optim.epsilon.to_string());

    if !spec.sweep.is_empty() {
        out.push_str("\n[sweep]\n");
        if let Some(v) = &spec.sweep.mu {
            kv(&mut out, "mu", join_f64(v));
        }
        if let Some(v) = &spec.sweep.kind {
            kv(
                &mut out,
                "kind",
                v.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(","),
            );
        }
        if let Some(v) = &spec.sweep.beta {
            kv(&mut out, "beta", join_f64(v));
        }
        if let Some(v) = &spec.sweep.zeta {
            kv(&mut out, "zeta", join_f64(v));
        }
        if let Some(v) = &spec.sweep.lambda {
            kv(&mut out, "lambda", join_f64(v));
        }
        if let Some(v) = &spec.sweep.gamma {
            kv(&mut out, "gamma", join_f64(v));
        }
        if let Some(v) = &spec.sweep.tau {
            kv(&mut out, "tau", join_f64(v));
        }
        if let Some(v) = &spec.sweep.eta {
            kv(&mut out, "eta", join_f64(v));
        }
        if let Some(v) = &spec.sweep.flags {
            kv(
                &mut out,
                "flags",
                v.iter().map(AblationFlags::label).collect::<Vec<_>>().join(","),
            );
        }
    }

    out.push_str("\n[output]\n");
    kv(&mut out, "dir", spec.output_dir.display().to_string());
    kv(&mut out, "checkpoints", spec.save_checkpoints.to_string());
    kv(&mut out, "plots", spec.emit_plots.to_string());
    out
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let spec = parse_config("").unwrap();
        assert_eq!(spec, ExperimentSpec::default());
        let fed = &spec.federation;
        assert_eq!(fed.zeta, 10.0);
        assert_eq!(fed.loss.lambda, 0.4);
        assert_eq!(fed.loss.gamma, 0.9);
        assert_eq!(fed.loss.tau, 4.0);
        assert_eq!(fed.eta, 1.4);
        assert_eq!(fed.optim.learning_rate, 0.001);
    }

    #[test]
    fn unknown_key_named_in_error() {
        let err = parse_config("[loss]\nlambada = 0.4\n").unwrap_err();
        assert!(err.to_string().contains("lambada"), "{err}");
    }

    #[test]
    fn unknown_section_rejected() {
        let err = parse_config("[losses]\nlambda = 0.4\n").unwrap_err();
        assert!(err.to_string().contains("losses"), "{err}");
    }

    #[test]
    fn pairflip_beyond_half_rejected_at_load() {
        let err = parse_config("[noise]\nkind = pairflip\nmu = 0.7\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn swept_pairflip_beyond_half_rejected_at_load() {
        let err = parse_config("[noise]\nkind = pairflip\n\n[sweep]\nmu = 0.1,0.7\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn dump_then_parse_is_identity() {
        let text = "\
[federation]
clients = 3
rounds = 5
seeds = 7,8

[data]
partition = dirichlet
dirichlet_beta = 0.5
train_per_client = 100
test_per_class = 30
classes = 5
feature_dim = 10
public_classes = 10
public_size = 50

[noise]
kind = pairflip
mu = 0.3
mu_per_client = 0.3,0,0.1

[sweep]
beta = 0.5,1

[output]
dir = out/somewhere
";
        let spec = parse_config(text).unwrap();
        let dumped = dump_config(&spec);
        let reparsed = parse_config(&dumped).unwrap();
        assert_eq!(spec, reparsed);
        assert_eq!(dumped, dump_config(&reparsed));
    }

    #[test]
    fn public_dim_mismatch_rejected() {
        let err = parse_config("[data]\nfeature_dim = 20\npublic_dim = 16\n").unwrap_err();
        assert!(err.to_string().contains("public_dim"), "{err}");
    }

    #[test]
    fn beta_sweep_requires_dirichlet() {
        let err = parse_config("[sweep]\nbeta = 0.5,1.0\n").unwrap_err();
        assert!(err.to_string().contains("dirichlet"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_config("[loss]\nlambda 0.4\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let spec = parse_config("# top\n\n[loss]\nlambda = 0.5 # trailing\n").unwrap();
        assert_eq!(spec.federation.loss.lambda, 0.5);
    }
}
