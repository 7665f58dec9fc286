use cutmixsl::accountant::{budget_record, conversion_term, optimal_group_size, rdp_components, AccountantParams};
use cutmixsl::attacks::{
    label_leak_experiment, run_membership, run_reconstruction, AttackReport, LabelLeakSetup, MembershipSetup,
    ReconstructionSetup,
};
use cutmixsl::data::Sample;
use cutmixsl::mechanisms::{Mechanism, MechanismConfig};
use cutmixsl::protocol::{
    evaluate_accuracy, run_round, write_trace, ProtocolConfig, ProtocolState, RoundMessage, RoundMetrics,
    METRICS_HEADER,
};
use cutmixsl::rng::{RngStream, Role};
use cutmixsl::splitmodel::SplitModel;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Cell, ExperimentConfig, ModelConfig};
use crate::output::Context;
use crate::{AttackName, CliError, Format};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountRow {
    pub mechanism: Mechanism,
    pub alpha: f64,
    pub delta: f64,
    pub n: usize,
    pub k: usize,
    pub lambda_max: f64,
    pub sigma_s_sq: f64,
    pub sigma_y_sq: f64,
    pub epsilon_smashed: f64,
    pub epsilon_label: f64,
    pub epsilon_rdp: f64,
    pub epsilon_cdp: f64,
    pub epsilon_subsampled: f64,
}

pub fn account_rows(p: &AccountantParams) -> Result<Vec<AccountRow>, CliError> {
    Mechanism::ALL
        .iter()
        .map(|&m| {
            let r = budget_record(p, m)?;
            Ok(AccountRow {
                mechanism: m,
                alpha: p.alpha,
                delta: p.delta,
                n: p.n,
                k: p.k,
                lambda_max: p.lambda_max,
                sigma_s_sq: p.sigma_s_sq,
                sigma_y_sq: p.sigma_y_sq,
                epsilon_smashed: r.components.smashed,
                epsilon_label: r.components.label,
                epsilon_rdp: r.epsilon_rdp,
                epsilon_cdp: r.epsilon_cdp,
                epsilon_subsampled: r.epsilon_subsampled,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct AccountSummary<'a> {
    rows: &'a [AccountRow],
    ordering_holds: bool,
    optimal_k_mixsl: f64,
    optimal_k_cutmixsl: f64,
}

pub fn account(cfg: &ExperimentConfig, ctx: &Context) -> Result<(), CliError> {
    cfg.seed()?;
    let p = cfg.budget_params(cfg.k, cfg.noise.sigma_s_sq, cfg.noise.sigma_y_sq)?;
    let rows = account_rows(&p)?;
    let (e1, e2, e3) = (rows[0].epsilon_rdp, rows[1].epsilon_rdp, rows[2].epsilon_rdp);
    let ordering_holds = e2 <= e3 && e3 <= e1;
    let (a, b) = rdp_components(&p)?;
    let eps_o = conversion_term(p.alpha, p.delta)?;
    let text = match ctx.format {
        Format::Csv => crate::output::csv_string(&rows)?,
        Format::Json => ctx.envelope(AccountSummary {
            rows: &rows,
            ordering_holds,
            optimal_k_mixsl: optimal_group_size(a, b, eps_o, Mechanism::DpMixSl)?,
            optimal_k_cutmixsl: optimal_group_size(a, b, eps_o, Mechanism::DpCutMixSl)?,
        })?,
    };
    print!("{text}");
    eprintln!(
        "ordering dp_mixsl <= dp_cutmixsl <= dp_sl: {} ({e2:.6} <= {e3:.6} <= {e1:.6})",
        if ordering_holds { "holds" } else { "VIOLATED" }
    );
    ctx.write_bytes(&format!("account.{}", ctx.extension()), text.as_bytes())?;
    ctx.finish()
}

/// Result of training one protocol configuration.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub metrics: Vec<RoundMetrics>,
    pub trace: Vec<RoundMessage>,
    /// Mean group loss in the last round.
    pub final_loss: f64,
    /// Mean over clients of accuracy on the training set.
    pub train_acc: f64,
}

/// Train from a seeded initial model on a fixed seeded training set that
/// the clients cycle through in order.
pub fn run_simulation(
    protocol: ProtocolConfig,
    model: &ModelConfig,
    rounds: usize,
    seed: u64,
    keep_trace: bool,
) -> cutmixsl::Result<Simulation> {
    let t = &model.task;
    let mut init = RngStream::keyed(seed, 0, Role::Scheduler, 1);
    let initial = SplitModel::random(t.n_patches, t.raw_dim, model.features, model.hidden, 2, model.pixel_bound, &mut init)?;
    let train = training_set(model, seed)?;
    let mut state = ProtocolState::new(protocol, &initial, seed)?;
    let mut metrics = Vec::with_capacity(rounds);
    let mut trace = Vec::new();
    for r in 0..rounds {
        let batch: Vec<Sample> = (0..protocol.n)
            .map(|i| train[(r * protocol.n + i) % train.len()].clone())
            .collect();
        let out = run_round(&mut state, &batch)?;
        if keep_trace {
            trace.extend(out.trace);
        }
        metrics.push(out.metrics);
    }
    let final_loss = metrics.last().map_or(f64::NAN, RoundMetrics::mean_loss);
    let mut acc = 0.0;
    for c in 0..protocol.n {
        acc += evaluate_accuracy(&state, c, &train)?;
    }
    Ok(Simulation {
        metrics,
        trace,
        final_loss,
        train_acc: acc / protocol.n as f64,
    })
}

pub fn training_set(model: &ModelConfig, seed: u64) -> cutmixsl::Result<Vec<Sample>> {
    let mut data = RngStream::keyed(seed, 0, Role::Data, 0);
    model.task.generate_shuffled(model.train_size, &mut data)
}

#[derive(Serialize)]
struct MetricRow {
    round: u64,
    group: usize,
    loss: f64,
    acc: f64,
    grad_norm_mean: f64,
}

#[derive(Serialize)]
struct SimulationSummary {
    mechanism: Mechanism,
    rounds: usize,
    final_loss: f64,
    train_acc: f64,
    messages: usize,
}

pub fn simulate(cfg: &ExperimentConfig, ctx: &Context, payloads: bool) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let protocol = cfg.protocol(cfg.mechanism, cfg.k, cfg.alpha_m, cfg.noise);
    let sim = run_simulation(protocol, &cfg.model, cfg.rounds, seed, true)?;
    match ctx.format {
        Format::Csv => {
            let mut text = String::from(METRICS_HEADER);
            text.push('\n');
            for m in &sim.metrics {
                for row in m.csv_rows() {
                    text.push_str(&row);
                    text.push('\n');
                }
            }
            ctx.write_bytes("metrics.csv", text.as_bytes())?;
        }
        Format::Json => {
            let rows: Vec<MetricRow> = sim
                .metrics
                .iter()
                .flat_map(|m| {
                    m.groups.iter().map(|g| MetricRow {
                        round: m.round,
                        group: g.group,
                        loss: g.loss,
                        acc: g.acc,
                        grad_norm_mean: g.grad_norm_mean(),
                    })
                })
                .collect();
            ctx.write_json("metrics.json", rows)?;
        }
    }
    let mut trace = Vec::new();
    write_trace(&sim.trace, payloads, &mut trace)?;
    ctx.write_bytes("trace.ndjson", &trace)?;
    let summary = SimulationSummary {
        mechanism: cfg.mechanism,
        rounds: cfg.rounds,
        final_loss: sim.final_loss,
        train_acc: sim.train_acc,
        messages: sim.trace.len(),
    };
    ctx.write_json("summary.json", &summary)?;
    println!(
        "{} rounds of {}: final loss {:.6}, train accuracy {:.4}, {} messages",
        cfg.rounds,
        cfg.mechanism,
        sim.final_loss,
        sim.train_acc,
        sim.trace.len()
    );
    ctx.finish()
}

fn cell_noise(cfg: &ExperimentConfig, cell: &Cell) -> MechanismConfig {
    MechanismConfig {
        sigma_s_sq: cell.sigma_s_sq,
        sigma_y_sq: cell.sigma_y_sq,
        ..cfg.noise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRow {
    pub cell: usize,
    pub attack: String,
    pub mechanism: Mechanism,
    pub k: usize,
    pub alpha_m: f64,
    pub sigma_s_sq: f64,
    pub sigma_y_sq: f64,
    pub metric: String,
    pub value: f64,
    pub ci95: f64,
    pub n_trials: usize,
}

/// Run `name` on one cell. DP-SL releases a single record, so its
/// membership cells use a group of one.
pub fn attack_cell(cfg: &ExperimentConfig, cell: &Cell, name: AttackName, seed: u64) -> cutmixsl::Result<AttackReport> {
    let noise = cell_noise(cfg, cell);
    let a = &cfg.attack;
    match name {
        AttackName::Membership => {
            let setup = MembershipSetup {
                n_patches: a.n_patches,
                features: a.features,
                pixel_bound: cfg.accountant_params(cell.k, cell.sigma_s_sq, cell.sigma_y_sq).pixel_bound,
                k: if cell.mechanism == Mechanism::DpSl { 1 } else { cell.k },
                alpha_m: None,
            };
            run_membership(&setup, cell.mechanism, &noise, a.trials, seed)
        }
        AttackName::Reconstruction => {
            let setup = ReconstructionSetup {
                task: cfg.model.task,
                features: cfg.model.features,
                pixel_bound: cfg.model.pixel_bound,
                k: cell.k,
                train_size: a.train_size,
                test_size: a.test_size,
                ridge: a.ridge,
            };
            run_reconstruction(&setup, cell.mechanism, &noise, seed)
        }
        AttackName::LabelLeak => {
            let protocol = ProtocolConfig {
                n: cell.k,
                ..cfg.protocol(cell.mechanism, cell.k, cell.alpha_m, noise)
            };
            let setup = LabelLeakSetup {
                task: cfg.model.task,
                features: cfg.model.features,
                hidden: cfg.model.hidden,
                pixel_bound: cfg.model.pixel_bound,
                protocol,
                epochs: a.epochs,
                rounds_per_epoch: a.rounds_per_epoch,
                reference_rounds: a.reference_rounds,
                victim: 0,
                attacker: 1,
                stratify_by_own_label: a.stratify_by_own_label,
            };
            let epochs = label_leak_experiment(&setup, seed)?;
            let best = epochs.iter().map(|e| e.norm_auc).fold(f64::NEG_INFINITY, f64::max);
            Ok(AttackReport {
                attack: "label_leak".into(),
                mechanism: cell.mechanism,
                params: serde_json::json!({ "setup": setup, "epochs": epochs }),
                metric: "max_norm_auc".into(),
                value: best,
                n_trials: a.epochs * (a.rounds_per_epoch - a.reference_rounds.min(a.rounds_per_epoch)),
                seed,
                ci95: 0.0,
            })
        }
    }
}

#[derive(Serialize)]
struct CellReport<'a> {
    cell: &'a Cell,
    report: &'a AttackReport,
}

pub fn attack(cfg: &ExperimentConfig, ctx: &Context, name: AttackName) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let cells = cfg.cells();
    let reports = cells
        .par_iter()
        .map(|c| attack_cell(cfg, c, name, seed))
        .collect::<cutmixsl::Result<Vec<_>>>()?;
    let rows: Vec<AttackRow> = cells
        .iter()
        .zip(&reports)
        .map(|(c, r)| AttackRow {
            cell: c.index,
            attack: r.attack.clone(),
            mechanism: c.mechanism,
            k: c.k,
            alpha_m: c.alpha_m,
            sigma_s_sq: c.sigma_s_sq,
            sigma_y_sq: c.sigma_y_sq,
            metric: r.metric.clone(),
            value: r.value,
            ci95: r.ci95,
            n_trials: r.n_trials,
        })
        .collect();
    let file = format!("attack_{}", name.as_str());
    match ctx.format {
        Format::Csv => {
            ctx.write_bytes(&format!("{file}.csv"), crate::output::csv_string(&rows)?.as_bytes())?;
        }
        Format::Json => {
            let full: Vec<CellReport> = cells
                .iter()
                .zip(&reports)
                .map(|(cell, report)| CellReport { cell, report })
                .collect();
            ctx.write_json(&format!("{file}.json"), full)?;
        }
    }
    for r in &rows {
        println!(
            "cell {} {} k={} sigma_sq=({}, {}): {} = {:.4} ± {:.4}",
            r.cell, r.mechanism, r.k, r.sigma_s_sq, r.sigma_y_sq, r.metric, r.value, r.ci95
        );
    }
    ctx.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub mechanism: Mechanism,
    pub k: usize,
    pub alpha_m: f64,
    pub sigma_s_sq: f64,
    pub sigma_y_sq: f64,
    pub lambda_max: f64,
    pub epsilon_rdp: Option<f64>,
    pub epsilon_cdp: Option<f64>,
    pub epsilon_subsampled: Option<f64>,
    pub final_loss: Option<f64>,
    pub train_acc: Option<f64>,
}

/// Budgets are left empty for noiseless cells, which have none.
pub fn sweep_cell(cfg: &ExperimentConfig, cell: &Cell, seed: u64) -> cutmixsl::Result<SweepRow> {
    let p = cfg.accountant_params(cell.k, cell.sigma_s_sq, cell.sigma_y_sq);
    let budget = if p.sigma_s_sq > 0.0 && p.sigma_y_sq > 0.0 {
        Some(budget_record(&p, cell.mechanism)?)
    } else {
        None
    };
    let (final_loss, train_acc) = if cfg.sweep.simulate {
        let protocol = cfg.protocol(cell.mechanism, cell.k, cell.alpha_m, cell_noise(cfg, cell));
        let sim = run_simulation(protocol, &cfg.model, cfg.rounds, seed, false)?;
        (Some(sim.final_loss), Some(sim.train_acc))
    } else {
        (None, None)
    };
    Ok(SweepRow {
        cell: cell.index,
        mechanism: cell.mechanism,
        k: cell.k,
        alpha_m: cell.alpha_m,
        sigma_s_sq: cell.sigma_s_sq,
        sigma_y_sq: cell.sigma_y_sq,
        lambda_max: p.lambda_max,
        epsilon_rdp: budget.as_ref().map(|b| b.epsilon_rdp),
        epsilon_cdp: budget.as_ref().map(|b| b.epsilon_cdp),
        epsilon_subsampled: budget.as_ref().map(|b| b.epsilon_subsampled),
        final_loss,
        train_acc,
    })
}

/// Cells run on the worker pool; rows come back in cell order.
pub fn sweep_rows(cfg: &ExperimentConfig, seed: u64) -> cutmixsl::Result<Vec<SweepRow>> {
    cfg.cells().par_iter().map(|c| sweep_cell(cfg, c, seed)).collect()
}

pub fn sweep(cfg: &ExperimentConfig, ctx: &Context) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let rows = sweep_rows(cfg, seed)?;
    let text = ctx.render_rows(&rows)?;
    ctx.write_bytes(&format!("sweep.{}", ctx.extension()), text.as_bytes())?;
    print!("{text}");
    ctx.finish()
}
