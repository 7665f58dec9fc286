//! Client, mixer and server message schedule for one training round.
//!
//! Per group the schedule is strictly
//! `mask_assignment → masked_upload → mixed_batch → cut_gradient → split_gradient`,
//! and groups are emitted in index order. Every random draw comes from a
//! stream keyed by `(seed, round, role, index)`, so a round is a pure
//! function of the state, the batch and the seed.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mechanisms::{aggregate, cutmix_upload, mixup_upload, Mechanism, MechanismConfig, MixedBatch, Provenance, Share, Upload};
use crate::mixing::{allocate_masks, realized_ratios, sample_mix_ratios};
use crate::rng::{Role, RngStream};
use crate::splitmodel::{
    argmax, client_backward, client_forward, server_backward, server_forward, server_forward_values, ClientCache,
    ClientGrads, ClientSegment, ServerGrads, ServerSegment, SplitModel,
};
use crate::tensor::{check_partition, PatchMask, SmashedData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n: usize,
    pub k: usize,
    pub alpha_m: f64,
    pub mechanism: Mechanism,
    pub mech: MechanismConfig,
    pub lr: f64,
    /// Every group member receives the group mean of the split gradients.
    #[serde(default)]
    pub avg_cut_grad: bool,
    /// Client segments are replaced by their mean after every round.
    #[serde(default)]
    pub weight_avg: bool,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("n", "must be >= 1"));
        }
        if self.k == 0 || self.k > self.n {
            return Err(Error::param("k", format!("must satisfy 1 <= k <= n = {}, got {}", self.n, self.k)));
        }
        if !(self.alpha_m > 0.0) || !self.alpha_m.is_finite() {
            return Err(Error::param("alpha_m", format!("must be a positive finite real, got {}", self.alpha_m)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::param("lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        self.mech.validate()
    }
}

/// Disjoint client groups of exactly `k` members; `n mod k` clients idle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: Vec<Vec<usize>>,
    pub k: usize,
}

impl Grouping {
    pub fn idle(&self, n: usize) -> Vec<usize> {
        let mut active = vec![false; n];
        for &c in self.groups.iter().flatten() {
            active[c] = true;
        }
        (0..n).filter(|&c| !active[c]).collect()
    }
}

/// Chunk a uniformly random permutation of the clients into `⌊n/k⌋` groups.
pub fn cluster_clients<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Grouping> {
    if k == 0 || k > n {
        return Err(Error::param("k", format!("must satisfy 1 <= k <= n = {n}, got {k}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let groups = perm.chunks_exact(k).map(<[usize]>::to_vec).collect();
    Ok(Grouping { groups, k })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolState {
    pub round: u64,
    pub clients: Vec<ClientSegment>,
    pub server: ServerSegment,
    pub seed: u64,
    pub config: ProtocolConfig,
}

impl ProtocolState {
    /// Every client starts from `model.client`.
    pub fn new(config: ProtocolConfig, model: &SplitModel, seed: u64) -> Result<Self> {
        config.validate()?;
        if model.server.input_dim() % model.client.features() != 0 {
            return Err(Error::Dimension("server input is not a whole number of patches".into()));
        }
        Ok(Self {
            round: 0,
            clients: vec![model.client.clone(); config.n],
            server: model.server.clone(),
            seed,
            config,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.server.input_dim() / self.clients[0].features()
    }

    pub fn model(&self, client: usize) -> SplitModel {
        SplitModel {
            client: self.clients[client].clone(),
            server: self.server.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    MaskAssignment,
    MaskedUpload,
    MixedBatch,
    CutGradient,
    SplitGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Client,
    Mixer,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub role: Party,
    pub index: usize,
}

impl Endpoint {
    pub fn client(i: usize) -> Self {
        Self {
            role: Party::Client,
            index: i,
        }
    }

    pub fn mixer(group: usize) -> Self {
        Self {
            role: Party::Mixer,
            index: group,
        }
    }

    pub fn server() -> Self {
        Self {
            role: Party::Server,
            index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Payload {
    /// `mask` is `None` for Mixup, where only the ratio applies.
    Assignment { mask: Option<PatchMask>, ratio: f64 },
    Upload {
        upload: Upload,
        mask: Option<PatchMask>,
        ratio: f64,
        noised: bool,
    },
    Mixed { batch: MixedBatch },
    Gradient { values: Vec<f64> },
}

impl Payload {
    fn kind(&self) -> MessageKind {
        match self {
            Payload::Assignment { .. } => MessageKind::MaskAssignment,
            Payload::Upload { .. } => MessageKind::MaskedUpload,
            Payload::Mixed { .. } => MessageKind::MixedBatch,
            Payload::Gradient { .. } => MessageKind::CutGradient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub kind: MessageKind,
    pub round: u64,
    pub group: usize,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub payload: Payload,
}

impl RoundMessage {
    /// Hex sha256 of the payload's JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.payload).expect("payloads serialise");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn gradient(&self) -> Option<&[f64]> {
        match &self.payload {
            Payload::Gradient { values } => Some(values),
            _ => None,
        }
    }
}

/// One NDJSON trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub kind: MessageKind,
    pub round: u64,
    pub group: usize,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload>,
}

pub fn write_trace<W: Write>(trace: &[RoundMessage], include_payload: bool, mut out: W) -> Result<()> {
    for m in trace {
        let rec = TraceRecord {
            kind: m.kind,
            round: m.round,
            group: m.group,
            sender: m.sender,
            receiver: m.receiver,
            digest: m.digest(),
            payload: include_payload.then(|| m.payload.clone()),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub loss: f64,
    /// Fraction of the group's released batches whose logits pick the
    /// dominant class of the released label.
    pub acc: f64,
    /// `(client, ‖split gradient‖₂)` in group order.
    pub client_grad_norms: Vec<(usize, f64)>,
}

impl GroupMetrics {
    pub fn grad_norm_mean(&self) -> f64 {
        let n = self.client_grad_norms.len().max(1) as f64;
        self.client_grad_norms.iter().map(|(_, g)| g).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub groups: Vec<GroupMetrics>,
}

pub const METRICS_HEADER: &str = "round,group,loss,acc,grad_norm_mean";

impl RoundMetrics {
    pub fn mean_loss(&self) -> f64 {
        self.groups.iter().map(|g| g.loss).sum::<f64>() / self.groups.len().max(1) as f64
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.groups
            .iter()
            .map(|g| format!("{},{},{},{},{}", self.round, g.group, g.loss, g.acc, g.grad_norm_mean()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub metrics: RoundMetrics,
    pub trace: Vec<RoundMessage>,
}

/// `grad` restricted to each mask in turn. Masking is selection, so the
/// pieces sum back to `grad` exactly.
pub fn split_cut_gradient(grad: &[f64], masks: &[PatchMask]) -> Result<Vec<Vec<f64>>> {
    let n = check_partition(masks)?;
    if grad.len() % n != 0 {
        return Err(Error::Dimension(format!(
            "gradient of length {} is not a whole number of {n} patches",
            grad.len()
        )));
    }
    let f = grad.len() / n;
    Ok(masks.iter().map(|m| m.apply(grad, f)).collect())
}

struct ForwardPass {
    /// Members contributing to this release, with their share and cache.
    members: Vec<(usize, ClientCache)>,
    batch: MixedBatch,
    split: Split,
}

enum Split {
    Masks(Vec<PatchMask>),
    Ratios(Vec<f64>),
}

struct GroupResult {
    metrics: GroupMetrics,
    trace: Vec<RoundMessage>,
    client_grads: Vec<(usize, ClientGrads)>,
    server_grads: Vec<ServerGrads>,
}

fn protocol_err(round: u64, e: Error) -> Error {
    match e {
        Error::Protocol { .. } => e,
        Error::Numeric(reason) => Error::Numeric(format!("round {round}: {reason}")),
        other => Error::Protocol {
            round,
            reason: other.to_string(),
        },
    }
}

fn run_group(state: &ProtocolState, gi: usize, members: &[usize], batch: &[Sample]) -> Result<GroupResult> {
    let cfg = &state.config;
    let round = state.round;
    let n_patches = state.n_patches();
    let mixer = Endpoint::mixer(gi);
    let mut mixer_rng = RngStream::keyed(state.seed, round, Role::Mixer, gi as u64);
    let mut trace = Vec::new();
    let msg = |kind, sender, receiver, payload| RoundMessage {
        kind,
        round,
        group: gi,
        sender,
        receiver,
        payload,
    };

    // Mixer: assignment. A dp_sl group is k singleton releases.
    let (assign_masks, ratios): (Vec<Option<PatchMask>>, Vec<f64>) = match cfg.mechanism {
        Mechanism::DpSl => (vec![Some(PatchMask::full(n_patches)); members.len()], vec![1.0; members.len()]),
        Mechanism::DpMixSl => {
            let r = sample_mix_ratios(members.len(), cfg.alpha_m, &mut mixer_rng)?;
            (vec![None; members.len()], r.lambdas().to_vec())
        }
        Mechanism::DpCutMixSl => {
            let r = sample_mix_ratios(members.len(), cfg.alpha_m, &mut mixer_rng)?;
            let masks = allocate_masks(&r, n_patches, &mut mixer_rng)?;
            let realized = realized_ratios(&masks)?;
            (masks.into_iter().map(Some).collect(), realized.lambdas().to_vec())
        }
    };
    for (slot, &c) in members.iter().enumerate() {
        trace.push(msg(
            MessageKind::MaskAssignment,
            mixer,
            Endpoint::client(c),
            Payload::Assignment {
                mask: assign_masks[slot].clone(),
                ratio: ratios[slot],
            },
        ));
    }

    // Clients: forward and upload.
    let mut uploads = Vec::with_capacity(members.len());
    let mut caches = Vec::with_capacity(members.len());
    let mut template: Option<SmashedData> = None;
    let classes = state.server.classes();
    for (slot, &c) in members.iter().enumerate() {
        let sample = &batch[c];
        if sample.label.classes() != classes {
            return Err(Error::Dimension(format!(
                "client {c} label has {} classes, server has {classes}",
                sample.label.classes()
            )));
        }
        let mut rng = RngStream::keyed(state.seed, round, Role::Client, c as u64);
        let (s, cache) = client_forward(&sample.input, &state.clients[c])?;
        if s.n_patches() != n_patches {
            return Err(Error::Dimension(format!("client {c} produced {} patches", s.n_patches())));
        }
        let upload = match &assign_masks[slot] {
            Some(mask) => cutmix_upload(&s, sample.label.values(), mask, ratios[slot], &cfg.mech, &mut rng)?,
            None => mixup_upload(&s, sample.label.values(), ratios[slot], &cfg.mech, &mut rng)?,
        };
        trace.push(msg(
            MessageKind::MaskedUpload,
            Endpoint::client(c),
            mixer,
            Payload::Upload {
                upload: upload.clone(),
                mask: assign_masks[slot].clone(),
                ratio: ratios[slot],
                noised: cfg.mech.sigma_s_sq > 0.0,
            },
        ));
        template.get_or_insert(s);
        uploads.push(upload);
        caches.push(cache);
    }
    let template = template.expect("groups are nonempty");

    // Mixer: aggregate.
    let passes: Vec<ForwardPass> = match cfg.mechanism {
        Mechanism::DpSl => members
            .iter()
            .zip(uploads)
            .zip(caches)
            .map(|((&c, u), cache)| {
                let prov = vec![Provenance {
                    client: c,
                    share: Share::Ratio(1.0),
                }];
                Ok(ForwardPass {
                    members: vec![(c, cache)],
                    batch: aggregate(std::slice::from_ref(&u), &template, &cfg.mech, prov)?,
                    split: Split::Ratios(vec![1.0]),
                })
            })
            .collect::<Result<_>>()?,
        Mechanism::DpMixSl | Mechanism::DpCutMixSl => {
            let prov = members
                .iter()
                .enumerate()
                .map(|(slot, &c)| Provenance {
                    client: c,
                    share: match &assign_masks[slot] {
                        Some(m) => Share::Mask(m.clone()),
                        None => Share::Ratio(ratios[slot]),
                    },
                })
                .collect();
            let split = if cfg.mechanism == Mechanism::DpCutMixSl {
                Split::Masks(assign_masks.iter().map(|m| m.clone().expect("cutmix has masks")).collect())
            } else {
                Split::Ratios(ratios.clone())
            };
            vec![ForwardPass {
                members: members.iter().copied().zip(caches).collect(),
                batch: aggregate(&uploads, &template, &cfg.mech, prov)?,
                split,
            }]
        }
    };
    for p in &passes {
        trace.push(msg(
            MessageKind::MixedBatch,
            mixer,
            Endpoint::server(),
            Payload::Mixed { batch: p.batch.clone() },
        ));
    }

    // Server: loss and cut gradient per release.
    let mut server_grads = Vec::with_capacity(passes.len());
    let mut cut_grads = Vec::with_capacity(passes.len());
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for p in &passes {
        let fwd = server_forward(&p.batch, &state.server)?;
        loss_sum += fwd.loss.value;
        if argmax(&fwd.logits) == argmax(&p.batch.label) {
            correct += 1;
        }
        let (cut, sg) = server_backward(&fwd.cache, &fwd.logit_grad, &state.server)?;
        trace.push(msg(
            MessageKind::CutGradient,
            Endpoint::server(),
            mixer,
            Payload::Gradient { values: cut.clone() },
        ));
        server_grads.push(sg);
        cut_grads.push(cut);
    }

    // Mixer: split, optionally average, route to clients.
    let mut routed: Vec<(usize, Vec<f64>, &ClientCache)> = Vec::with_capacity(members.len());
    for (p, cut) in passes.iter().zip(&cut_grads) {
        let pieces = match &p.split {
            Split::Masks(masks) => split_cut_gradient(cut, masks)?,
            Split::Ratios(r) => r.iter().map(|l| cut.iter().map(|g| l * g).collect()).collect(),
        };
        for ((c, cache), piece) in p.members.iter().zip(pieces) {
            routed.push((*c, piece, cache));
        }
    }
    if cfg.avg_cut_grad && routed.len() > 1 {
        let len = routed[0].1.len();
        let mut mean = vec![0.0; len];
        for (_, g, _) in &routed {
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v;
            }
        }
        let inv = 1.0 / routed.len() as f64;
        for m in &mut mean {
            *m *= inv;
        }
        for r in &mut routed {
            r.1 = mean.clone();
        }
    }

    let mut client_grads = Vec::with_capacity(routed.len());
    let mut norms = Vec::with_capacity(routed.len());
    for (c, g, cache) in routed {
        norms.push((c, g.iter().map(|v| v * v).sum::<f64>().sqrt()));
        client_grads.push((c, client_backward(&g, cache, &state.clients[c])?));
        trace.push(msg(
            MessageKind::SplitGradient,
            mixer,
            Endpoint::client(c),
            Payload::Gradient { values: g },
        ));
    }

    let releases = passes.len() as f64;
    Ok(GroupResult {
        metrics: GroupMetrics {
            group: gi,
            loss: loss_sum / releases,
            acc: correct as f64 / releases,
            client_grad_norms: norms,
        },
        trace,
        client_grads,
        server_grads,
    })
}

/// One forward and backward pass per group, then the weight updates.
///
/// `batch[c]` is client `c`'s sample for this round. Idle clients are not
/// updated. On error the state is left untouched.
pub fn run_round(state: &mut ProtocolState, batch: &[Sample]) -> Result<RoundOutput> {
    let round = state.round;
    let cfg = state.config;
    cfg.validate().map_err(|e| protocol_err(round, e))?;
    if batch.len() != cfg.n || state.clients.len() != cfg.n {
        return Err(Error::Protocol {
            round,
            reason: format!("expected {} client samples, got {}", cfg.n, batch.len()),
        });
    }
    let mut sched = RngStream::keyed(state.seed, round, Role::Scheduler, 0);
    let grouping = cluster_clients(cfg.n, cfg.k, &mut sched).map_err(|e| protocol_err(round, e))?;

    let mut results = Vec::with_capacity(grouping.groups.len());
    for (gi, members) in grouping.groups.iter().enumerate() {
        results.push(run_group(state, gi, members, batch).map_err(|e| protocol_err(round, e))?);
    }

    // Server update: mean over every release in the round.
    let mut server_total = ServerGrads::zeros_like(&state.server);
    let mut releases = 0usize;
    for r in &results {
        for g in &r.server_grads {
            server_total.accumulate(g);
            releases += 1;
        }
    }
    server_total.scale(1.0 / releases as f64);
    let mut next_server = state.server.clone();
    next_server.sgd_step(&server_total, cfg.lr)?;

    let mut next_clients = state.clients.clone();
    for r in &results {
        for (c, g) in &r.client_grads {
            next_clients[*c].sgd_step(g, cfg.lr)?;
        }
    }
    if cfg.weight_avg {
        average_clients(&mut next_clients)?;
    }

    let mut trace = Vec::new();
    let mut groups = Vec::with_capacity(results.len());
    for r in results {
        trace.extend(r.trace);
        groups.push(r.metrics);
    }
    state.server = next_server;
    state.clients = next_clients;
    state.round += 1;
    Ok(RoundOutput {
        metrics: RoundMetrics { round, groups },
        trace,
    })
}

fn average_clients(clients: &mut [ClientSegment]) -> Result<()> {
    let first = &clients[0];
    let mut w = vec![0.0; first.embed_weights.len()];
    let mut b = vec![0.0; first.embed_bias.len()];
    for c in clients.iter() {
        for (a, v) in w.iter_mut().zip(&c.embed_weights) {
            *a += v;
        }
        for (a, v) in b.iter_mut().zip(&c.embed_bias) {
            *a += v;
        }
    }
    let inv = 1.0 / clients.len() as f64;
    w.iter_mut().chain(&mut b).for_each(|v| *v *= inv);
    let avg = ClientSegment::from_parts(w, b, first.pixel_bound, first.raw_dim(), first.features())?;
    clients.iter_mut().for_each(|c| *c = avg.clone());
    Ok(())
}

/// One step of ordinary split learning on a single sample, without a mixer.
/// Returns the loss before the update.
pub fn plain_split_step(model: &mut SplitModel, sample: &Sample, lr: f64) -> Result<f64> {
    let (s, cache) = client_forward(&sample.input, &model.client)?;
    let fwd = server_forward_values(s.values(), sample.label.values(), &model.server)?;
    let (cut, sg) = server_backward(&fwd.cache, &fwd.logit_grad, &model.server)?;
    let cg = client_backward(&cut, &cache, &model.client)?;
    model.server.sgd_step(&sg, lr)?;
    model.client.sgd_step(&cg, lr)?;
    Ok(fwd.loss.value)
}

/// Fraction of `samples` classified correctly by client `c`'s model.
pub fn evaluate_accuracy(state: &ProtocolState, client: usize, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::param("samples", "must be nonempty"));
    }
    let model = state.model(client);
    let mut correct = 0usize;
    for s in samples {
        if model.predict(&s.input)? == s.label.class() {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Check that every round in `trace` follows the schedule: groups in
/// nondecreasing order and, within a group, message kinds in schedule order.
pub fn check_message_order(trace: &[RoundMessage]) -> Result<()> {
    for w in trace.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let ok = if a.round != b.round {
            a.round < b.round
        } else if a.group != b.group {
            a.group < b.group
        } else {
            a.kind <= b.kind
        };
        if !ok {
            return Err(Error::Invariant(format!(
                "{:?} (round {}, group {}) after {:?} (round {}, group {})",
                b.kind, b.round, b.group, a.kind, a.round, a.group
            )));
        }
    }
    for m in trace {
        let shape_ok = match m.kind {
            MessageKind::SplitGradient => matches!(m.payload, Payload::Gradient { .. }),
            k => m.payload.kind() == k,
        };
        if !shape_ok {
            return Err(Error::Invariant(format!("{:?} message carries the wrong payload", m.kind)));
        }
    }
    Ok(())
}

/// Structural privacy check on a trace: no client talks to the server
/// directly, uploads are noised whenever noise is configured, and an
/// un-noised partial upload is zero outside its mask.
pub fn check_privacy_boundary(trace: &[RoundMessage], mech: &MechanismConfig) -> Result<()> {
    for m in trace {
        if m.sender.role == Party::Client && m.receiver.role == Party::Server {
            return Err(Error::Invariant(format!("client {} sent directly to the server", m.sender.index)));
        }
        if let Payload::Upload {
            upload,
            mask,
            ratio,
            noised,
        } = &m.payload
        {
            if mech.sigma_s_sq > 0.0 && !noised {
                return Err(Error::Invariant(format!("client {} uploaded without noise", m.sender.index)));
            }
            if !noised && *ratio < 1.0 {
                if let Some(mask) = mask {
                    let f = upload.smashed.len() / mask.len();
                    let leaked = mask
                        .complement()
                        .indices()
                        .any(|p| upload.smashed[p * f..(p + 1) * f].iter().any(|&v| v != 0.0));
                    if leaked {
                        return Err(Error::Invariant(format!(
                            "client {} uploaded patches outside its mask",
                            m.sender.index
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}
