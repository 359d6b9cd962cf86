//! Seeded experiment execution: grid expansion, per-run metrics and summary
//! files, the ablation sweep, and learning-curve extraction.
//!
//! Every run writes into its own directory (resolved config dump, metrics
//! CSV, summary JSON), so re-running any grid point is a pure function of
//! the dump. Grid points may execute in parallel; `RHFL_THREADS` caps the
//! worker count.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::config::{dump_config, ExperimentSpec, SweepGrid};
use crate::data::{empirical_flip_rate, read_dataset, write_dataset, Dataset, NoiseKind};
use crate::error::{Error, Result};
use crate::federation::{
    run_rhfl_plus, AblationFlags, FederationConfig, PartitionScheme, Phase, RunOutput,
};
use crate::model::write_checkpoint;
use crate::tensor::Tensor;

/// Fixed metrics schema; the golden-header test pins this string.
pub const METRICS_HEADER: &str = "mu,noise_kind,beta,zeta,lambda,gamma,tau,eta,flags,seed,phase,round,client,accuracy,mean_sl_loss,confidence,weight,realized_noise_rate";

/// One point of the sweep grid: overrides applied on top of the base config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridPoint {
    pub mu: Option<f64>,
    pub kind: Option<NoiseKind>,
    pub beta: Option<f64>,
    pub zeta: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub eta: Option<f64>,
    pub flags: Option<AblationFlags>,
}

impl GridPoint {
    /// Base config with this point's overrides applied.
    pub fn apply(&self, base: &FederationConfig) -> Result<FederationConfig> {
        let mut cfg = base.clone();
        if let Some(mu) = self.mu {
            cfg.noise.mu = mu;
            // A swept global rate replaces any per-client override.
            cfg.noise.mu_per_client = None;
        }
        if let Some(kind) = self.kind {
            cfg.noise.kind = kind;
        }
        if let Some(beta) = self.beta {
            match cfg.data.partition {
                PartitionScheme::Dirichlet { .. } => {
                    cfg.data.partition = PartitionScheme::Dirichlet { beta };
                }
                PartitionScheme::Iid => {
                    return Err(Error::Config(
                        "beta sweep requires dirichlet partitioning".into(),
                    ));
                }
            }
        }
        if let Some(zeta) = self.zeta {
            cfg.zeta = zeta;
        }
        if let Some(lambda) = self.lambda {
            cfg.loss.lambda = lambda;
        }
        if let Some(gamma) = self.gamma {
            cfg.loss.gamma = gamma;
        }
        if let Some(tau) = self.tau {
            cfg.loss.tau = tau;
        }
        if let Some(eta) = self.eta {
            cfg.eta = eta;
        }
        if let Some(flags) = self.flags {
            cfg.flags = flags;
        }
        Ok(cfg)
    }
}

/// Cartesian product over the sweep axes, in a fixed axis order (flags vary
/// fastest). An empty sweep yields the single default point.
pub fn expand_grid(spec: &ExperimentSpec) -> Vec<GridPoint> {
    fn axis<T: Copy>(v: &Option<Vec<T>>) -> Vec<Option<T>> {
        match v {
            None => vec![None],
            Some(list) => list.iter().map(|x| Some(*x)).collect(),
        }
    }
    let s: &SweepGrid = &spec.sweep;
    let mut points = Vec::new();
    for &mu in &axis(&s.mu) {
        for &kind in &axis(&s.kind) {
            for &beta in &axis(&s.beta) {
                for &zeta in &axis(&s.zeta) {
                    for &lambda in &axis(&s.lambda) {
                        for &gamma in &axis(&s.gamma) {
                            for &tau in &axis(&s.tau) {
                                for &eta in &axis(&s.eta) {
                                    for &flags in &axis(&s.flags) {
                                        points.push(GridPoint {
                                            mu,
                                            kind,
                                            beta,
                                            zeta,
                                            lambda,
                                            gamma,
                                            tau,
                                            eta,
                                            flags,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    points
}

/// Render the metrics CSV for one run: header plus one row per (record,
/// client). Formatting is locale-free and shortest-round-trip, so identical
/// runs produce identical bytes.
pub fn metrics_csv(cfg: &FederationConfig, seed: u64, out: &RunOutput) -> String {
    let beta_col = match cfg.data.partition {
        PartitionScheme::Iid => "iid".to_string(),
        PartitionScheme::Dirichlet { beta } => beta.to_string(),
    };
    let rates: Vec<f64> = out.clients.iter().map(|c| c.realized_noise_rate).collect();
    let mut s = String::with_capacity(64 * out.records.len() * cfg.clients + 128);
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for record in &out.records {
        for k in 0..record.accuracy.len() {
            let row = [
                cfg.noise.mu.to_string(),
                cfg.noise.kind.as_str().to_string(),
                beta_col.clone(),
                cfg.zeta.to_string(),
                cfg.loss.lambda.to_string(),
                cfg.loss.gamma.to_string(),
                cfg.loss.tau.to_string(),
                cfg.eta.to_string(),
                cfg.flags.label(),
                seed.to_string(),
                record.phase.as_str().to_string(),
                record.round.to_string(),
                k.to_string(),
                record.accuracy[k].to_string(),
                record.mean_sl_loss[k].to_string(),
                record.confidence[k].to_string(),
                record.weight[k].to_string(),
                rates[k].to_string(),
            ];
            s.push_str(&row.join(","));
            s.push('\n');
        }
    }
    s
}

/// Summary of one completed (or failed) run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub flags: String,
    pub mu: f64,
    pub noise_kind: String,
    pub status: String,
    pub pretrain_avg_accuracy: f64,
    pub final_accuracy: Vec<f64>,
    pub final_avg_accuracy: f64,
    pub realized_noise_rates: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct ExperimentSummary {
    pub runs: Vec<RunSummary>,
    pub failed: usize,
}

impl ExperimentSummary {
    pub fn all_succeeded(&self) -> bool {
        self.failed == 0
    }
}

fn run_label(index: usize, seed: u64) -> String {
    format!("g{index:03}_s{seed}")
}

/// Execute one grid point for one seed and write its run directory.
fn execute_run(
    spec: &ExperimentSpec,
    point: &GridPoint,
    index: usize,
    seed: u64,
) -> Result<RunSummary> {
    let mut cfg = point.apply(&spec.federation)?;
    cfg.seed = seed;
    let label = run_label(index, seed);
    let dir = spec.output_dir.join(&label);
    std::fs::create_dir_all(&dir)?;

    // Resolved single-run dump first, so failed runs are re-derivable too.
    let mut single = spec.clone();
    single.federation = cfg.clone();
    single.seeds = vec![seed];
    single.sweep = SweepGrid::default();
    single.output_dir = dir.clone();
    std::fs::write(dir.join("config.txt"), dump_config(&single))?;

    cfg.capture_round_params = spec.save_checkpoints;
    let out = run_rhfl_plus(&cfg)?;

    std::fs::write(dir.join("metrics.csv"), metrics_csv(&cfg, seed, &out))?;

    if spec.save_checkpoints {
        let ckdir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckdir)?;
        for (r, per_client) in out.round_params.iter().enumerate() {
            for (k, params) in per_client.iter().enumerate() {
                write_checkpoint(&ckdir.join(format!("client{k}_round{}.ck", r + 1)), params)?;
            }
        }
        for client in &out.clients {
            write_checkpoint(
                &ckdir.join(format!("client{}_final.ck", client.id)),
                &client.params,
            )?;
        }
    }
    if spec.save_datasets {
        let dsdir = dir.join("datasets");
        std::fs::create_dir_all(&dsdir)?;
        for client in &out.clients {
            let noisy = &client.private_data;
            write_dataset(&dsdir.join(format!("client{}_noisy.ds", client.id)), noisy)?;
            let clean = noisy.with_labels(client.clean_labels.clone())?;
            write_dataset(&dsdir.join(format!("client{}_clean.ds", client.id)), &clean)?;
        }
    }

    let pretrain_avg = out
        .records
        .iter().rfind(|r| r.phase == Phase::Pretrain)
        .map(|r| r.accuracy.iter().sum::<f64>() / r.accuracy.len() as f64)
        .unwrap_or(0.0);
    let summary = RunSummary {
        label,
        seed,
        flags: cfg.flags.label(),
        mu: cfg.noise.mu,
        noise_kind: cfg.noise.kind.as_str().to_string(),
        status: "ok".to_string(),
        pretrain_avg_accuracy: pretrain_avg,
        final_accuracy: out.final_accuracies(),
        final_avg_accuracy: out.final_average_accuracy(),
        realized_noise_rates: out.clients.iter().map(|c| c.realized_noise_rate).collect(),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Io(format!("summary serialization failed: {e}")))?;
    std::fs::write(dir.join("summary.json"), json)?;

    if spec.emit_plots {
        emit_plot_data(&dir.join("metrics.csv"))?;
    }
    Ok(summary)
}

fn worker_count(jobs: usize) -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var("RHFL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(available);
    cap.min(jobs).max(1)
}

/// Run every grid point for every seed. Failures are recorded and do not
/// stop the sweep; the summary says which runs failed.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentSummary> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.output_dir)?;
    let points = expand_grid(spec);
    let jobs: Vec<(usize, GridPoint, u64)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| spec.seeds.iter().map(move |&s| (i, p.clone(), s)))
        .collect();

    let results: Mutex<Vec<Option<RunSummary>>> = Mutex::new(vec![None; jobs.len()]);
    let cursor = AtomicUsize::new(0);
    let workers = worker_count(jobs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = cursor.fetch_add(1, Ordering::SeqCst);
                if j >= jobs.len() {
                    break;
                }
                let (index, point, seed) = &jobs[j];
                let summary = match execute_run(spec, point, *index, *seed) {
                    Ok(s) => s,
                    Err(e) => RunSummary {
                        label: run_label(*index, *seed),
                        seed: *seed,
                        flags: point
                            .flags
                            .unwrap_or(spec.federation.flags)
                            .label(),
                        mu: point.mu.unwrap_or(spec.federation.noise.mu),
                        noise_kind: point
                            .kind
                            .unwrap_or(spec.federation.noise.kind)
                            .as_str()
                            .to_string(),
                        status: format!("failed: {e}"),
                        pretrain_avg_accuracy: 0.0,
                        final_accuracy: Vec::new(),
                        final_avg_accuracy: 0.0,
                        realized_noise_rates: Vec::new(),
                    },
                };
                results.lock().unwrap()[j] = Some(summary);
            });
        }
    });

    let runs: Vec<RunSummary> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect();
    let failed = runs.iter().filter(|r| r.status != "ok").count();
    let summary = ExperimentSummary { runs, failed };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Io(format!("summary serialization failed: {e}")))?;
    std::fs::write(spec.output_dir.join("summary.json"), json)?;
    Ok(summary)
}

/// The six component rows of the ablation matrix, in table order.
pub fn ablation_rows() -> Vec<AblationFlags> {
    vec![
        AblationFlags::NONE,
        AblationFlags { hfl: true, sl: false, dlr: false, eccr: false },
        AblationFlags { hfl: false, sl: true, dlr: false, eccr: false },
        AblationFlags { hfl: true, sl: true, dlr: false, eccr: false },
        AblationFlags { hfl: true, sl: true, dlr: true, eccr: false },
        AblationFlags { hfl: true, sl: true, dlr: true, eccr: true },
    ]
}

/// Run the six-row component sweep (crossed with any mu/kind axes already in
/// the spec) and emit `ablation.csv`: seed-averaged final accuracy per row.
pub fn ablation_sweep(spec: &ExperimentSpec) -> Result<ExperimentSummary> {
    let mut sweep_spec = spec.clone();
    sweep_spec.sweep.flags = Some(ablation_rows());
    let summary = run_experiment(&sweep_spec)?;

    // Seed-averaged table, keyed like the component matrix.
    let mus: Vec<f64> = sweep_spec
        .sweep
        .mu
        .clone()
        .unwrap_or_else(|| vec![sweep_spec.federation.noise.mu]);
    let kinds: Vec<NoiseKind> = sweep_spec
        .sweep
        .kind
        .clone()
        .unwrap_or_else(|| vec![sweep_spec.federation.noise.kind]);
    let mut table = String::from("mu,noise_kind,flags,avg_accuracy\n");
    for &mu in &mus {
        for &kind in &kinds {
            for flags in ablation_rows() {
                let label = flags.label();
                let cell: Vec<&RunSummary> = summary
                    .runs
                    .iter()
                    .filter(|r| {
                        r.status == "ok"
                            && r.flags == label
                            && r.mu == mu
                            && r.noise_kind == kind.as_str()
                    })
                    .collect();
                let avg = if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.iter().map(|r| r.final_avg_accuracy).sum::<f64>() / cell.len() as f64
                };
                table.push_str(&format!("{},{},{},{}\n", mu, kind.as_str(), label, avg));
            }
        }
    }
    std::fs::write(sweep_spec.output_dir.join("ablation.csv"), table)?;
    Ok(summary)
}

/// Column indices in [`METRICS_HEADER`].
const COL_PHASE: usize = 10;
const COL_CLIENT: usize = 12;
const COL_ACCURACY: usize = 13;
const COL_LOSS: usize = 14;

/// Extract per-client learning curves from a metrics file: for each client,
/// `clientK_loss.csv` and `clientK_accuracy.csv` under `curves/`. Values are
/// copied verbatim from the metrics columns.
pub fn emit_plot_data(metrics_path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(metrics_path)
        .map_err(|e| Error::Io(format!("cannot read {}: {e}", metrics_path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected metrics header '{header}'"),
            });
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "metrics file is empty".into(),
            });
        }
    }
    let expected_cols = METRICS_HEADER.split(',').count();
    // client id -> (loss rows, accuracy rows)
    let mut curves: Vec<(usize, Vec<String>, Vec<String>)> = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != expected_cols {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected {expected_cols} columns, got {}", cols.len()),
            });
        }
        let client: usize = cols[COL_CLIENT].parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            message: format!("bad client id '{}'", cols[COL_CLIENT]),
        })?;
        let _phase = cols[COL_PHASE];
        let entry = match curves.iter_mut().find(|(c, _, _)| *c == client) {
            Some(e) => e,
            None => {
                curves.push((client, Vec::new(), Vec::new()));
                curves.last_mut().unwrap()
            }
        };
        let epoch = entry.1.len() + 1;
        entry.1.push(format!("{epoch},{}", cols[COL_LOSS]));
        entry.2.push(format!("{epoch},{}", cols[COL_ACCURACY]));
    }
    let dir = metrics_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("curves");
    let mut written = Vec::new();
    if curves.is_empty() {
        return Ok(written);
    }
    std::fs::create_dir_all(&dir)?;
    curves.sort_by_key(|(c, _, _)| *c);
    for (client, loss_rows, acc_rows) in curves {
        let loss_path = dir.join(format!("client{client}_loss.csv"));
        let mut loss_file = String::from("epoch,loss\n");
        loss_file.push_str(&loss_rows.join("\n"));
        loss_file.push('\n');
        std::fs::write(&loss_path, loss_file)?;
        written.push(loss_path);

        let acc_path = dir.join(format!("client{client}_accuracy.csv"));
        let mut acc_file = String::from("epoch,accuracy\n");
        acc_file.push_str(&acc_rows.join("\n"));
        acc_file.push('\n');
        std::fs::write(&acc_path, acc_file)?;
        written.push(acc_path);
    }
    Ok(written)
}

/// Recompute realized noise rates from a run's saved datasets and compare
/// them with the metrics column. Returns (client, metrics value, recomputed).
pub fn audit_run_dir(dir: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let metrics = std::fs::read_to_string(dir.join("metrics.csv"))
        .map_err(|e| Error::Io(format!("cannot read metrics.csv: {e}")))?;
    let rate_col = METRICS_HEADER.split(',').count() - 1;
    let mut reported: Vec<(usize, f64)> = Vec::new();
    for line in metrics.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != rate_col + 1 {
            continue;
        }
        let client: usize = cols[COL_CLIENT].parse().unwrap_or(usize::MAX);
        let rate: f64 = cols[rate_col].parse().unwrap_or(f64::NAN);
        if !reported.iter().any(|(c, _)| *c == client) {
            reported.push((client, rate));
        }
    }
    reported.sort_by_key(|(c, _)| *c);

    let mut out = Vec::new();
    for (client, rate) in reported {
        let clean: Dataset = read_dataset(&dir.join(format!("datasets/client{client}_clean.ds")))?;
        let noisy: Dataset = read_dataset(&dir.join(format!("datasets/client{client}_noisy.ds")))?;
        let recomputed = empirical_flip_rate(clean.labels(), noisy.labels())?;
        // Features must be byte-identical between the two files.
        if !bytes_equal(clean.features(), noisy.features()) {
            return Err(Error::Usage(format!(
                "client {client}: clean and noisy feature tensors differ"
            )));
        }
        out.push((client, rate, recomputed));
    }
    Ok(out)
}

fn bytes_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}
