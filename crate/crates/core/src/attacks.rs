//! Membership inference on released batches, label inference from cut-layer
//! gradients, and a linear reconstruction decoder.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RawInput, Sample, SyntheticTask};
use crate::error::{Error, Result};
use crate::mechanisms::{dp_cutmix, dp_mix, dp_sl, Mechanism, MechanismConfig, MixedBatch, Share};
use crate::mixing::{allocate_masks, sample_mix_ratios};
use crate::protocol::{run_round, MessageKind, Party, ProtocolConfig, ProtocolState};
use crate::rng::{Role, RngStream};
use crate::splitmodel::{client_forward, ClientSegment, SplitModel};
use crate::tensor::{MixRatios, OneHotLabel, SmashedData};

/// Summary emitted by every attack runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub mechanism: Mechanism,
    pub params: serde_json::Value,
    pub metric: String,
    pub value: f64,
    pub n_trials: usize,
    pub seed: u64,
    pub ci95: f64,
}

/// One membership question. The adversary knows every other group
/// member's smashed data and the shares used by the mixer, and must decide
/// whether `candidate` or `alternative` sat in slot `slot`.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipTrial {
    pub candidate: SmashedData,
    pub alternative: SmashedData,
    pub others: Vec<SmashedData>,
    pub slot: usize,
    pub released: MixedBatch,
    pub truth: bool,
}

/// Noise-free mean of the released smashed tensor when `record` fills
/// `slot`, reconstructed from the provenance shares.
fn release_mean(trial: &MembershipTrial, record: &SmashedData) -> Result<Vec<f64>> {
    let k = trial.others.len() + 1;
    if trial.released.provenance.len() != k {
        return Err(Error::Dimension(format!(
            "release has {} contributors, trial has {k}",
            trial.released.provenance.len()
        )));
    }
    let f = record.features();
    let mut mean = vec![0.0; record.len()];
    let mut others = trial.others.iter();
    for (slot, prov) in trial.released.provenance.iter().enumerate() {
        let s = if slot == trial.slot {
            record
        } else {
            others.next().expect("k - 1 others")
        };
        if !s.same_shape(record) {
            return Err(Error::Dimension("trial tensors differ in shape".into()));
        }
        match &prov.share {
            Share::Mask(m) => {
                for (acc, v) in mean.iter_mut().zip(m.apply(s.values(), f)) {
                    *acc += v;
                }
            }
            Share::Ratio(l) => {
                for (acc, v) in mean.iter_mut().zip(s.values()) {
                    *acc += l * v;
                }
            }
        }
    }
    Ok(mean)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Likelihood-ratio decision for one trial. Every supported release has
/// isotropic Gaussian noise with the same variance under both hypotheses,
/// so the test reduces to picking the nearer mean; ties decide "not used",
/// which also makes a noise-free exact match decisive.
pub fn membership_decision(trial: &MembershipTrial) -> Result<bool> {
    let r = trial.released.smashed.values();
    let with = release_mean(trial, &trial.candidate)?;
    let without = release_mean(trial, &trial.alternative)?;
    Ok(dist_sq(r, &with) < dist_sq(r, &without))
}

/// Fraction of trials decided correctly.
pub fn membership_attack(trials: &[MembershipTrial]) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::param("trials", "must be nonempty"));
    }
    let positives = trials.iter().filter(|t| t.truth).count();
    if 2 * positives != trials.len() {
        return Err(Error::param("trials", "must be balanced (half included)"));
    }
    let mut correct = 0usize;
    for t in trials {
        if membership_decision(t)? == t.truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / trials.len() as f64)
}

/// Geometry of a membership experiment. Records are uniform in
/// `[0, Δ]^{N×F}`; ratios are `1/k` unless `alpha_m` is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembershipSetup {
    pub n_patches: usize,
    pub features: usize,
    pub pixel_bound: f64,
    pub k: usize,
    #[serde(default)]
    pub alpha_m: Option<f64>,
}

fn uniform_record<R: Rng + ?Sized>(setup: &MembershipSetup, rng: &mut R) -> Result<SmashedData> {
    let values = (0..setup.n_patches * setup.features)
        .map(|_| setup.pixel_bound * rng.random::<f64>())
        .collect();
    SmashedData::new(values, setup.n_patches, setup.features, setup.pixel_bound)
}

/// Build `count` balanced trials. Trial `t` draws everything from streams
/// keyed by `(seed, t)`, so runs with the same seed but different
/// mechanisms see the same records and the same noise stream.
pub fn membership_trials(
    setup: &MembershipSetup,
    mech: Mechanism,
    cfg: &MechanismConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<MembershipTrial>> {
    if setup.k == 0 {
        return Err(Error::param("k", "must be >= 1"));
    }
    if count % 2 != 0 {
        return Err(Error::param("count", "must be even for balanced trials"));
    }
    let label = OneHotLabel::new(0, 2)?;
    (0..count)
        .map(|t| {
            let mut data = RngStream::keyed(seed, t as u64, Role::Attack, 0);
            let mut mixer = RngStream::keyed(seed, t as u64, Role::Mixer, 0);
            let mut noise = RngStream::keyed(seed, t as u64, Role::Client, 0);
            let candidate = uniform_record(setup, &mut data)?;
            let alternative = uniform_record(setup, &mut data)?;
            let others = (1..setup.k)
                .map(|_| uniform_record(setup, &mut data))
                .collect::<Result<Vec<_>>>()?;
            let truth = t % 2 == 0;
            let member = if truth { &candidate } else { &alternative };
            let mut group = vec![member.clone()];
            group.extend(others.iter().cloned());
            let labels = vec![label.clone(); setup.k];
            let ratios = match setup.alpha_m {
                Some(a) => sample_mix_ratios(setup.k, a, &mut mixer)?,
                None => MixRatios::uniform(setup.k)?,
            };
            let released = match mech {
                Mechanism::DpSl => {
                    if setup.k != 1 {
                        return Err(Error::Unsupported("dp_sl releases one client per batch; use k = 1".into()));
                    }
                    dp_sl(member, &label, cfg, &mut noise)?
                }
                Mechanism::DpMixSl => dp_mix(&group, &labels, &ratios, cfg, &mut noise)?,
                Mechanism::DpCutMixSl => {
                    let masks = allocate_masks(&ratios, setup.n_patches, &mut mixer)?;
                    dp_cutmix(&group, &labels, &masks, cfg, &mut noise)?
                }
            };
            Ok(MembershipTrial {
                candidate,
                alternative,
                others,
                slot: 0,
                released,
                truth,
            })
        })
        .collect()
}

/// Run a membership experiment end to end. `ci95` is the normal-approximation
/// binomial half-width.
pub fn run_membership(
    setup: &MembershipSetup,
    mech: Mechanism,
    cfg: &MechanismConfig,
    count: usize,
    seed: u64,
) -> Result<AttackReport> {
    let trials = membership_trials(setup, mech, cfg, count, seed)?;
    let rate = membership_attack(&trials)?;
    Ok(AttackReport {
        attack: "membership".into(),
        mechanism: mech,
        params: serde_json::json!({ "setup": setup, "mechanism_config": cfg }),
        metric: "success_rate".into(),
        value: rate,
        n_trials: count,
        seed,
        ci95: 1.96 * (rate * (1.0 - rate) / count as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakKind {
    Norm,
    Cosine,
}

/// Scores split by true class: class 1 is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakScores {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
    pub kind: LeakKind,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Score each `(gradient, class)` observation by its norm, or by its cosine
/// similarity to `reference`.
pub fn label_leak_scores(observations: &[(Vec<f64>, usize)], reference: Option<&[f64]>, kind: LeakKind) -> Result<LeakScores> {
    let reference = match kind {
        LeakKind::Norm => None,
        LeakKind::Cosine => {
            let r = reference.ok_or_else(|| Error::param("reference", "cosine scores need a reference gradient"))?;
            let rn = norm(r);
            if rn == 0.0 || !rn.is_finite() {
                return Err(Error::Numeric("reference gradient has zero norm; cosine undefined".into()));
            }
            Some((r, rn))
        }
    };
    let mut out = LeakScores {
        positives: Vec::new(),
        negatives: Vec::new(),
        kind,
    };
    for (g, class) in observations {
        let score = match reference {
            None => norm(g),
            Some((r, rn)) => {
                if g.len() != r.len() {
                    return Err(Error::Dimension("gradient and reference differ in length".into()));
                }
                let gn = norm(g);
                if gn == 0.0 {
                    0.0
                } else {
                    g.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (gn * rn)
                }
            }
        };
        match class {
            0 => out.negatives.push(score),
            1 => out.positives.push(score),
            c => return Err(Error::param("class", format!("binary task, got class {c}"))),
        }
    }
    Ok(out)
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(pos > neg) + ½ P(pos = neg)`, computed from mid-ranks.
pub fn roc_auc(scores: &LeakScores) -> Result<f64> {
    let (p, n) = (scores.positives.len(), scores.negatives.len());
    if p == 0 || n == 0 {
        return Err(Error::param("scores", "both classes need at least one score"));
    }
    let mut all: Vec<(f64, bool)> = scores
        .positives
        .iter()
        .map(|&s| (s, true))
        .chain(scores.negatives.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// A label-inference experiment: two clients train together; the attacker
/// scores the cut-layer gradient it receives each round against the
/// victim's label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelLeakSetup {
    pub task: SyntheticTask,
    pub features: usize,
    pub hidden: usize,
    pub pixel_bound: f64,
    pub protocol: ProtocolConfig,
    pub epochs: usize,
    pub rounds_per_epoch: usize,
    /// Leading rounds of each epoch used only to build the cosine reference.
    pub reference_rounds: usize,
    pub victim: usize,
    pub attacker: usize,
    /// Calibrate the norm score separately for each value of the
    /// attacker's own label.
    #[serde(default)]
    pub stratify_by_own_label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochAuc {
    pub epoch: usize,
    pub norm_auc: f64,
    pub cosine_auc: f64,
}

fn mean_sd(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    Some((m, var.sqrt()))
}

/// Per-stratum calibration of a scalar score learned from labelled
/// reference rounds: centre on the midpoint of the two class means, scale
/// by the pooled spread and orient so that class 1 scores high.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Calibration {
    centre: f64,
    scale: f64,
}

impl Calibration {
    const IDENTITY: Calibration = Calibration { centre: 0.0, scale: 1.0 };

    fn fit(positives: &[f64], negatives: &[f64]) -> Option<Self> {
        let (mp, sp) = mean_sd(positives)?;
        let (mn, sn) = mean_sd(negatives)?;
        let spread = (0.5 * (sp * sp + sn * sn)).sqrt();
        let spread = if spread > 0.0 { spread } else { 1.0 };
        let sign = if mp < mn { -1.0 } else { 1.0 };
        Some(Self {
            centre: 0.5 * (mp + mn),
            scale: sign / spread,
        })
    }

    fn apply(&self, x: f64) -> f64 {
        (x - self.centre) * self.scale
    }
}

/// One received gradient with the victim's class and the attacker's own.
type Observation = (Vec<f64>, usize, usize);

/// Calibrated norm scores. With `stratify` the attacker fits one
/// calibration per value of its own label.
fn calibrated_norm_scores(observations: &[Observation], reference: &[Observation], stratify: bool) -> Result<LeakScores> {
    let strata = if stratify { 2 } else { 1 };
    let stratum = |o: &Observation| if stratify { o.2 } else { 0 };
    let pooled = {
        let (p, n): (Vec<f64>, Vec<f64>) = (
            reference.iter().filter(|o| o.1 == 1).map(|o| norm(&o.0)).collect(),
            reference.iter().filter(|o| o.1 == 0).map(|o| norm(&o.0)).collect(),
        );
        Calibration::fit(&p, &n).unwrap_or(Calibration::IDENTITY)
    };
    let calibrations: Vec<Calibration> = (0..strata)
        .map(|a| {
            let in_stratum = |o: &&Observation| stratum(o) == a;
            let p: Vec<f64> = reference.iter().filter(in_stratum).filter(|o| o.1 == 1).map(|o| norm(&o.0)).collect();
            let n: Vec<f64> = reference.iter().filter(in_stratum).filter(|o| o.1 == 0).map(|o| norm(&o.0)).collect();
            Calibration::fit(&p, &n).unwrap_or(pooled)
        })
        .collect();
    let mut out = LeakScores {
        positives: Vec::new(),
        negatives: Vec::new(),
        kind: LeakKind::Norm,
    };
    for o in observations {
        let score = calibrations[stratum(o)].apply(norm(&o.0));
        match o.1 {
            0 => out.negatives.push(score),
            1 => out.positives.push(score),
            c => return Err(Error::param("class", format!("binary task, got class {c}"))),
        }
    }
    Ok(out)
}

/// Run the experiment and report both AUCs per epoch.
///
/// The attacker labels the gradients it receives in each epoch's leading
/// `reference_rounds`; these fix the orientation of the norm score and
/// provide the cosine reference (the mean class-1 gradient). Only the
/// remaining rounds are scored.
pub fn label_leak_experiment(setup: &LabelLeakSetup, seed: u64) -> Result<Vec<EpochAuc>> {
    let cfg = setup.protocol;
    if cfg.n != cfg.k {
        return Err(Error::Unsupported("the label experiment runs a single group (k = n)".into()));
    }
    if setup.victim == setup.attacker || setup.victim >= cfg.n || setup.attacker >= cfg.n {
        return Err(Error::param("attacker", "victim and attacker must be distinct clients"));
    }
    if setup.reference_rounds >= setup.rounds_per_epoch {
        return Err(Error::param("reference_rounds", "must leave rounds to score"));
    }
    let mut init = RngStream::keyed(seed, 0, Role::Scheduler, 1);
    let model = SplitModel::random(
        setup.task.n_patches,
        setup.task.raw_dim,
        setup.features,
        setup.hidden,
        2,
        setup.pixel_bound,
        &mut init,
    )?;
    let mut state = ProtocolState::new(cfg, &model, seed)?;
    let mut out = Vec::with_capacity(setup.epochs);
    for epoch in 0..setup.epochs {
        let mut reference: Vec<Observation> = Vec::new();
        let mut observations = Vec::with_capacity(setup.rounds_per_epoch);
        for r in 0..setup.rounds_per_epoch {
            let round = state.round;
            let batch: Vec<Sample> = (0..cfg.n)
                .map(|c| {
                    let mut rng = RngStream::keyed(seed, round, Role::Data, c as u64);
                    let class = rng.random_range(0..2);
                    setup.task.sample(class, &mut rng)
                })
                .collect::<Result<_>>()?;
            let output = run_round(&mut state, &batch)?;
            let received = output
                .trace
                .iter()
                .find(|m| {
                    m.kind == MessageKind::SplitGradient
                        && m.receiver.role == Party::Client
                        && m.receiver.index == setup.attacker
                })
                .and_then(|m| m.gradient())
                .ok_or_else(|| Error::Invariant("attacker received no gradient".into()))?
                .to_vec();
            let obs = (
                received,
                batch[setup.victim].label.class(),
                batch[setup.attacker].label.class(),
            );
            if r < setup.reference_rounds {
                reference.push(obs);
            } else {
                observations.push(obs);
            }
        }
        let norm_auc = roc_auc(&calibrated_norm_scores(&observations, &reference, setup.stratify_by_own_label)?)?;
        let positives: Vec<&Vec<f64>> = reference.iter().filter(|o| o.1 == 1).map(|o| &o.0).collect();
        let cosine_auc = if positives.is_empty() {
            0.5
        } else {
            let mut mean = vec![0.0; positives[0].len()];
            for g in &positives {
                for (m, v) in mean.iter_mut().zip(g.iter()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= positives.len() as f64);
            {
                let labelled: Vec<(Vec<f64>, usize)> = observations.iter().map(|o| (o.0.clone(), o.1)).collect();
                roc_auc(&label_leak_scores(&labelled, Some(&mean), LeakKind::Cosine)?)?
            }
        };
        out.push(EpochAuc {
            epoch,
            norm_auc,
            cosine_auc,
        });
    }
    Ok(out)
}

/// A fitted linear decoder from released smashed tensors to raw inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    /// `(d_s + 1) × d_raw`; the last row is the intercept.
    pub decoder: DMatrix<f64>,
    pub mse: f64,
    /// Normal-approximation 95% half-width over test examples.
    pub ci95: f64,
}

/// Fit `x ≈ [r, 1]·W` on `train` by ridge regression with coefficient
/// `ridge` on the non-intercept weights, and report the per-pixel MSE on
/// `test`.
pub fn reconstruction_attack(train: &[(Vec<f64>, RawInput)], test: &[(Vec<f64>, RawInput)], ridge: f64) -> Result<ReconstructionReport> {
    let (first, _) = train
        .first()
        .ok_or_else(|| Error::param("train", "must be nonempty"))?;
    if test.is_empty() {
        return Err(Error::param("test", "must be nonempty"));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::param("ridge", format!("must be finite and >= 0, got {ridge}")));
    }
    let ds = first.len();
    let dr = train[0].1.values().len();
    let shape_ok = |(r, x): &(Vec<f64>, RawInput)| r.len() == ds && x.values().len() == dr;
    if !train.iter().all(shape_ok) || !test.iter().all(shape_ok) {
        return Err(Error::Dimension("reconstruction pairs differ in shape".into()));
    }

    let design = |pairs: &[(Vec<f64>, RawInput)]| {
        DMatrix::from_fn(pairs.len(), ds + 1, |i, j| if j < ds { pairs[i].0[j] } else { 1.0 })
    };
    let targets = |pairs: &[(Vec<f64>, RawInput)]| DMatrix::from_fn(pairs.len(), dr, |i, j| pairs[i].1.values()[j]);
    let a = design(train);
    let mut gram = a.transpose() * &a;
    for j in 0..ds {
        gram[(j, j)] += ridge;
    }
    let rhs = a.transpose() * targets(train);
    let decoder = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric("decoder normal equations are singular; use a positive ridge".into()))?
        .solve(&rhs);
    let pred = design(test) * &decoder;
    let diff = pred - targets(test);
    let per_example: Vec<f64> = diff
        .row_iter()
        .map(|row| row.iter().map(|v| v * v).sum::<f64>() / dr as f64)
        .collect();
    let mse = per_example.iter().sum::<f64>() / per_example.len() as f64;
    let ci95 = match mean_sd(&per_example) {
        Some((_, sd)) => 1.96 * sd / (per_example.len() as f64).sqrt(),
        None => 0.0,
    };
    Ok(ReconstructionReport { decoder, mse, ci95 })
}

/// Geometry of a reconstruction experiment. The victim is slot 0 of a
/// group of `k`; its partners' inputs come from the same task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionSetup {
    pub task: SyntheticTask,
    pub features: usize,
    pub pixel_bound: f64,
    pub k: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub ridge: f64,
}

/// Release one batch per example and pair it with the victim's raw input.
fn reconstruction_pairs(
    setup: &ReconstructionSetup,
    client: &ClientSegment,
    mech: Mechanism,
    cfg: &MechanismConfig,
    count: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<(Vec<f64>, RawInput)>> {
    let k = if mech == Mechanism::DpSl { 1 } else { setup.k };
    (0..count)
        .map(|i| {
            let mut data = RngStream::keyed(seed, i as u64, Role::Data, stream);
            let mut mixer = RngStream::keyed(seed, i as u64, Role::Mixer, stream);
            let mut noise = RngStream::keyed(seed, i as u64, Role::Client, stream);
            let samples = setup.task.generate_shuffled(setup.k.max(1), &mut data)?;
            let smashed = samples[..k]
                .iter()
                .map(|s| client_forward(&s.input, client).map(|(s, _)| s))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<OneHotLabel> = samples[..k].iter().map(|s| s.label.clone()).collect();
            let ratios = MixRatios::uniform(k)?;
            let released = match mech {
                Mechanism::DpSl => dp_sl(&smashed[0], &labels[0], cfg, &mut noise)?,
                Mechanism::DpMixSl => dp_mix(&smashed, &labels, &ratios, cfg, &mut noise)?,
                Mechanism::DpCutMixSl => {
                    let masks = allocate_masks(&ratios, setup.task.n_patches, &mut mixer)?;
                    dp_cutmix(&smashed, &labels, &masks, cfg, &mut noise)?
                }
            };
            Ok((released.smashed.into_values(), samples[0].input.clone()))
        })
        .collect()
}

/// Fit a decoder on `train_size` releases and score it on `test_size`
/// fresh ones. The client segment is drawn once from the seed and shared
/// across mechanisms, so runs with equal seeds are paired.
pub fn run_reconstruction(setup: &ReconstructionSetup, mech: Mechanism, cfg: &MechanismConfig, seed: u64) -> Result<AttackReport> {
    let mut init = RngStream::keyed(seed, 0, Role::Scheduler, 2);
    let client = ClientSegment::random(setup.task.raw_dim, setup.features, setup.pixel_bound, &mut init)?;
    let train = reconstruction_pairs(setup, &client, mech, cfg, setup.train_size, seed, 0)?;
    let test = reconstruction_pairs(setup, &client, mech, cfg, setup.test_size, seed, 1)?;
    let report = reconstruction_attack(&train, &test, setup.ridge)?;
    Ok(AttackReport {
        attack: "reconstruction".into(),
        mechanism: mech,
        params: serde_json::json!({ "setup": setup, "mechanism_config": cfg }),
        metric: "mse".into(),
        value: report.mse,
        n_trials: setup.test_size,
        seed,
        ci95: report.ci95,
    })
}
