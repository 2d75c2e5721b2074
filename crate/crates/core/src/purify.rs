//! Network purification and unused path removal.
//!
//! A filter whose lowered row is zero produces a blank feature map, so every
//! channel consuming only blank maps can be zeroed without changing the
//! network function; dually, a filter whose every consuming channel is zero
//! is unused. Purification adds threshold rules on top of that liveness
//! propagation:
//!
//! * channel `j` of a layer is pruned when its emptiness ratio `eta < th2`
//!   and its importance score `sigma < th3`, where `eta` counts columns with
//!   squared norm at least `th1` (exactly-zero columns never count) and
//!   `sigma` is the mean squared column norm over all `delta` columns;
//! * a filter is pruned when its squared norm is below `th4`.
//!
//! Sweeps run layers first-to-last, channels before filters, and repeat until
//! nothing fires. Filters feeding the network output are never pruned.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ChannelColumnMap, Endpoint, LayerGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Thresholds {
    /// Column squared-norm floor below which a column counts as empty.
    pub th1: f64,
    /// Emptiness-ratio threshold.
    pub th2: f64,
    /// Importance-score threshold.
    pub th3: f64,
    /// Filter squared-norm floor.
    pub th4: f64,
}

impl Thresholds {
    pub const ZERO: Thresholds = Thresholds {
        th1: 0.0,
        th2: 0.0,
        th3: 0.0,
        th4: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.th1, self.th2, self.th3, self.th4];
        if all.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || self.th2 > 1.0 {
            return Err(Error::Config(format!(
                "thresholds must be finite and >= 0 with th2 <= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Global thresholds with optional per-layer overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub global: Thresholds,
    pub per_layer: BTreeMap<String, Thresholds>,
}

impl ThresholdSet {
    pub fn uniform(t: Thresholds) -> Self {
        ThresholdSet {
            global: t,
            per_layer: BTreeMap::new(),
        }
    }

    pub fn for_layer(&self, name: &str) -> Thresholds {
        self.per_layer.get(name).copied().unwrap_or(self.global)
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate()?;
        self.per_layer.values().try_for_each(Thresholds::validate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub layer: String,
    pub channel: usize,
    pub eta: f64,
    pub sigma: f64,
    pub effective_nonzero_columns: usize,
}

/// Fraction of a channel's columns (given by their squared norms) that are
/// effectively nonzero: squared norm `>= th1` and not exactly zero.
pub fn emptiness_ratio(column_sq_norms: &[f64], th1: f64) -> Result<f64> {
    if column_sq_norms.is_empty() {
        return Err(Error::usage("emptiness ratio of a channel with no columns"));
    }
    Ok(effective_columns(column_sq_norms, th1) as f64 / column_sq_norms.len() as f64)
}

fn effective_columns(column_sq_norms: &[f64], th1: f64) -> usize {
    column_sq_norms.iter().filter(|&&n| n > 0.0 && n >= th1).count()
}

/// Mean squared column norm of a channel.
pub fn importance_score(column_sq_norms: &[f64]) -> Result<f64> {
    if column_sq_norms.is_empty() {
        return Err(Error::usage("importance score of a channel with no columns"));
    }
    Ok(column_sq_norms.iter().sum::<f64>() / column_sq_norms.len() as f64)
}

/// `eta` and `sigma` for every channel of a weighted layer.
pub fn channel_stats(model: &LayerGraph, id: usize, th1: f64) -> Result<Vec<ChannelStats>> {
    let map = model.channel_column_map(id)?;
    let w = model.node(id).weights();
    let (rows, cols) = w.lowered_shape();
    let norms = crate::admm::col_sq_norms(w.data(), rows, cols);
    map.groups()
        .enumerate()
        .map(|(j, g)| {
            let cn = &norms[g];
            Ok(ChannelStats {
                layer: map.layer.clone(),
                channel: j,
                eta: emptiness_ratio(cn, th1)?,
                sigma: importance_score(cn)?,
                effective_nonzero_columns: effective_columns(cn, th1),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    /// Fired by a threshold test.
    Th,
    /// Forced by the wiring: blank inputs or unused outputs.
    Propagated,
    /// The structure was already exactly zero.
    Empty,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Th => "th",
            Rule::Propagated => "propagated",
            Rule::Empty => "empty",
        })
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "th" => Ok(Rule::Th),
            "propagated" => Ok(Rule::Propagated),
            "empty" => Ok(Rule::Empty),
            _ => Err(Error::Data(format!("unknown purify rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    PruneChannel {
        layer: String,
        j: usize,
        eta: f64,
        sigma: f64,
        rule: Rule,
    },
    PruneFilter {
        layer: String,
        m: usize,
        norm2: f64,
        /// Bias value discarded with the filter.
        bias: f64,
        rule: Rule,
    },
}

impl Action {
    pub fn rule(&self) -> Rule {
        match self {
            Action::PruneChannel { rule, .. } | Action::PruneFilter { rule, .. } => *rule,
        }
    }

    pub fn layer(&self) -> &str {
        match self {
            Action::PruneChannel { layer, .. } | Action::PruneFilter { layer, .. } => layer,
        }
    }

    /// Identity of the pruned structure, ignoring statistics and rule.
    pub fn key(&self) -> (String, bool, usize) {
        match self {
            Action::PruneChannel { layer, j, .. } => (layer.clone(), true, *j),
            Action::PruneFilter { layer, m, .. } => (layer.clone(), false, *m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub pass: usize,
    pub action: Action,
    /// Nonzero weights of the affected layer before and after the action.
    pub nnz_before: usize,
    pub nnz_after: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PurifyLog {
    pub entries: Vec<LogEntry>,
    pub passes: usize,
}

impl PurifyLog {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn channels_pruned(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.action, Action::PruneChannel { .. }))
            .count()
    }

    pub fn filters_pruned(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.action, Action::PruneFilter { .. }))
            .count()
    }

    pub fn discarded_bias(&self) -> Vec<(&str, usize, f64)> {
        self.entries
            .iter()
            .filter_map(|e| match &e.action {
                Action::PruneFilter { layer, m, bias, .. } if *bias != 0.0 => Some((layer.as_str(), *m, *bias)),
                _ => None,
            })
            .collect()
    }

    /// One action per line, e.g.
    /// `PRUNE_CHANNEL layer=conv2 j=3 eta=4e-2 sigma=1e-4 rule=th nnz_before=.. nnz_after=..`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut pass = 0;
        for e in &self.entries {
            if e.pass != pass {
                pass = e.pass;
                out.push_str(&format!("PASS {pass}\n"));
            }
            match &e.action {
                Action::PruneChannel {
                    layer,
                    j,
                    eta,
                    sigma,
                    rule,
                } => out.push_str(&format!(
                    "PRUNE_CHANNEL layer={layer} j={j} eta={eta:e} sigma={sigma:e} rule={rule}"
                )),
                Action::PruneFilter {
                    layer,
                    m,
                    norm2,
                    bias,
                    rule,
                } => out.push_str(&format!(
                    "PRUNE_FILTER layer={layer} m={m} norm2={norm2:e} bias={bias:e} rule={rule}"
                )),
            }
            out.push_str(&format!(" nnz_before={} nnz_after={}\n", e.nnz_before, e.nnz_after));
        }
        out.push_str(&format!("END passes={}\n", self.passes));
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut log = PurifyLog::default();
        let mut pass = 0;
        for (lineno, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Data(format!("purify log line {}: {msg}", lineno + 1));
            let mut parts = line.split_whitespace();
            let Some(tag) = parts.next() else { continue };
            let fields: BTreeMap<&str, &str> = parts.filter_map(|p| p.split_once('=')).collect();
            let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing `{k}`")));
            let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(&format!("bad number in `{k}`"))) };
            let idx = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(&format!("bad index in `{k}`"))) };
            match tag {
                "PASS" => {
                    pass = line[4..].trim().parse().map_err(|_| bad("bad pass number"))?;
                }
                "END" => log.passes = idx("passes")?,
                "PRUNE_CHANNEL" => log.entries.push(LogEntry {
                    pass,
                    action: Action::PruneChannel {
                        layer: get("layer")?.to_string(),
                        j: idx("j")?,
                        eta: num("eta")?,
                        sigma: num("sigma")?,
                        rule: get("rule")?.parse()?,
                    },
                    nnz_before: idx("nnz_before")?,
                    nnz_after: idx("nnz_after")?,
                }),
                "PRUNE_FILTER" => log.entries.push(LogEntry {
                    pass,
                    action: Action::PruneFilter {
                        layer: get("layer")?.to_string(),
                        m: idx("m")?,
                        norm2: num("norm2")?,
                        bias: num("bias")?,
                        rule: get("rule")?.parse()?,
                    },
                    nnz_before: idx("nnz_before")?,
                    nnz_after: idx("nnz_after")?,
                }),
                other => return Err(bad(&format!("unknown record `{other}`"))),
            }
        }
        Ok(log)
    }
}

/// Wiring facts precomputed once per run.
struct Wiring {
    ids: Vec<usize>,
    maps: BTreeMap<usize, ChannelColumnMap>,
    producers: BTreeMap<usize, Vec<Endpoint>>,
    consumers: BTreeMap<usize, Vec<Endpoint>>,
}

impl Wiring {
    fn new(model: &LayerGraph) -> Result<Self> {
        let ids = model.weighted_ids();
        let mut maps = BTreeMap::new();
        let mut producers = BTreeMap::new();
        let mut consumers = BTreeMap::new();
        for &id in &ids {
            maps.insert(id, model.channel_column_map(id)?);
            producers.insert(id, model.producers(id));
            consumers.insert(id, model.consumers(id));
        }
        Ok(Wiring {
            ids,
            maps,
            producers,
            consumers,
        })
    }

    fn feeds_output(&self, id: usize) -> bool {
        self.consumers[&id].contains(&Endpoint::Output)
    }
}

fn zero_channel(w: &mut Tensor, map: &ChannelColumnMap, j: usize) {
    let (rows, cols) = w.lowered_shape();
    let g = map.group(j);
    let data = w.data_mut();
    for r in 0..rows {
        data[r * cols + g.start..r * cols + g.end].fill(0.0);
    }
}

fn zero_filter(model: &mut LayerGraph, id: usize, m: usize) -> f64 {
    let (w, b) = model.params_mut(id);
    w.lowered_row_mut(m).fill(0.0);
    std::mem::replace(&mut b.data_mut()[m], 0.0)
}

fn row_sq_norm(w: &Tensor, m: usize) -> f64 {
    w.lowered_row(m).iter().map(|v| v * v).sum()
}

struct Purifier<'a> {
    model: LayerGraph,
    wiring: Wiring,
    thresholds: &'a ThresholdSet,
    use_thresholds: bool,
    dead_channels: BTreeSet<(usize, usize)>,
    dead_filters: BTreeSet<(usize, usize)>,
    log: PurifyLog,
    pass: usize,
}

impl Purifier<'_> {
    fn channel_is_blank(&self, id: usize, j: usize) -> bool {
        self.wiring.producers[&id].iter().all(|p| match p {
            Endpoint::Layer(pid) => self.dead_filters.contains(&(*pid, j)),
            _ => false,
        })
    }

    fn filter_is_unused(&self, id: usize, m: usize) -> bool {
        self.wiring.consumers[&id].iter().all(|c| match c {
            Endpoint::Layer(cid) => self.dead_channels.contains(&(*cid, m)),
            _ => false,
        })
    }

    fn prune_channel(&mut self, id: usize, j: usize, eta: f64, sigma: f64, rule: Rule) {
        let map = &self.wiring.maps[&id];
        let before = self.model.node(id).weights().count_nonzero();
        zero_channel(self.model.weights_mut(id), map, j);
        let after = self.model.node(id).weights().count_nonzero();
        self.dead_channels.insert((id, j));
        self.log.entries.push(LogEntry {
            pass: self.pass,
            action: Action::PruneChannel {
                layer: self.model.node(id).name.clone(),
                j,
                eta,
                sigma,
                rule,
            },
            nnz_before: before,
            nnz_after: after,
        });
        // upstream filters whose every consumer is now dead
        let producers = self.wiring.producers[&id].clone();
        for p in producers {
            if let Endpoint::Layer(pid) = p {
                if !self.dead_filters.contains(&(pid, j))
                    && !self.wiring.feeds_output(pid)
                    && self.filter_is_unused(pid, j)
                {
                    let norm2 = row_sq_norm(self.model.node(pid).weights(), j);
                    self.prune_filter(pid, j, norm2, Rule::Propagated);
                }
            }
        }
    }

    fn prune_filter(&mut self, id: usize, m: usize, norm2: f64, rule: Rule) {
        let before = self.model.node(id).weights().count_nonzero();
        let bias = zero_filter(&mut self.model, id, m);
        if bias != 0.0 {
            warn!(
                "discarding bias {bias} of pruned filter {}[{m}]",
                self.model.node(id).name
            );
        }
        let after = self.model.node(id).weights().count_nonzero();
        self.dead_filters.insert((id, m));
        self.log.entries.push(LogEntry {
            pass: self.pass,
            action: Action::PruneFilter {
                layer: self.model.node(id).name.clone(),
                m,
                norm2,
                bias,
                rule,
            },
            nnz_before: before,
            nnz_after: after,
        });
        // downstream channels that now only see blank maps
        let consumers = self.wiring.consumers[&id].clone();
        for c in consumers {
            if let Endpoint::Layer(cid) = c {
                if !self.dead_channels.contains(&(cid, m)) && self.channel_is_blank(cid, m) {
                    let (eta, sigma) = self.stats(cid, m);
                    self.prune_channel(cid, m, eta, sigma, Rule::Propagated);
                }
            }
        }
    }

    fn stats(&self, id: usize, j: usize) -> (f64, f64) {
        let th1 = self.thresholds.for_layer(&self.model.node(id).name).th1;
        let w = self.model.node(id).weights();
        let (rows, cols) = w.lowered_shape();
        let g = self.wiring.maps[&id].group(j);
        let mut norms = vec![0.0; g.len()];
        for r in 0..rows {
            for (n, v) in norms.iter_mut().zip(&w.data()[r * cols + g.start..r * cols + g.end]) {
                *n += v * v;
            }
        }
        (
            effective_columns(&norms, th1) as f64 / norms.len() as f64,
            norms.iter().sum::<f64>() / norms.len() as f64,
        )
    }

    fn sweep(&mut self) -> bool {
        let start = self.log.entries.len();
        for id in self.wiring.ids.clone() {
            let name = self.model.node(id).name.clone();
            let th = self.thresholds.for_layer(&name);
            let channels = self.wiring.maps[&id].channels;
            for j in 0..channels {
                if self.dead_channels.contains(&(id, j)) {
                    continue;
                }
                let (eta, sigma) = self.stats(id, j);
                let rule = if self.channel_is_blank(id, j) {
                    Some(Rule::Propagated)
                } else if sigma == 0.0 {
                    Some(Rule::Empty)
                } else if self.use_thresholds && eta < th.th2 && sigma < th.th3 {
                    Some(Rule::Th)
                } else {
                    None
                };
                if let Some(rule) = rule {
                    self.prune_channel(id, j, eta, sigma, rule);
                }
            }
            if self.wiring.feeds_output(id) {
                continue;
            }
            let filters = self.model.node(id).filters();
            for m in 0..filters {
                if self.dead_filters.contains(&(id, m)) {
                    continue;
                }
                let norm2 = row_sq_norm(self.model.node(id).weights(), m);
                let rule = if self.filter_is_unused(id, m) {
                    Some(Rule::Propagated)
                } else if norm2 == 0.0 {
                    Some(Rule::Empty)
                } else if self.use_thresholds && norm2 < th.th4 {
                    Some(Rule::Th)
                } else {
                    None
                };
                if let Some(rule) = rule {
                    self.prune_filter(id, m, norm2, rule);
                }
            }
        }
        self.log.entries.len() > start
    }

    fn run(mut self) -> Result<(LayerGraph, PurifyLog)> {
        loop {
            self.pass += 1;
            let fired = self.sweep();
            debug!("purify pass {}: {} actions so far", self.pass, self.log.entries.len());
            if !fired {
                break;
            }
        }
        self.log.passes = self.pass;
        for &id in &self.wiring.ids {
            let node = self.model.node(id);
            let all_filters = (0..node.filters()).all(|m| self.dead_filters.contains(&(id, m)));
            let all_channels = (0..self.wiring.maps[&id].channels).all(|j| self.dead_channels.contains(&(id, j)));
            if all_filters || all_channels {
                return Err(Error::LayerDisconnected(node.name.clone()));
            }
        }
        Ok((self.model, self.log))
    }
}

/// Threshold purification plus unused path removal, iterated to a fixpoint.
pub fn purify(model: &LayerGraph, thresholds: &ThresholdSet) -> Result<(LayerGraph, PurifyLog)> {
    thresholds.validate()?;
    Purifier {
        model: model.clone(),
        wiring: Wiring::new(model)?,
        thresholds,
        use_thresholds: true,
        dead_channels: BTreeSet::new(),
        dead_filters: BTreeSet::new(),
        log: PurifyLog::default(),
        pass: 0,
    }
    .run()
}

/// Pure liveness propagation: prunes only exactly-empty structures and the
/// paths they make unused.
pub fn propagate_unused_paths(model: &LayerGraph) -> Result<(LayerGraph, PurifyLog)> {
    let zero = ThresholdSet::default();
    Purifier {
        model: model.clone(),
        wiring: Wiring::new(model)?,
        thresholds: &zero,
        use_thresholds: false,
        dead_channels: BTreeSet::new(),
        dead_filters: BTreeSet::new(),
        log: PurifyLog::default(),
        pass: 0,
    }
    .run()
}

/// Re-applies a log to a model.
pub fn replay(model: &LayerGraph, log: &PurifyLog) -> Result<LayerGraph> {
    let mut out = model.clone();
    for e in &log.entries {
        match &e.action {
            Action::PruneChannel { layer, j, .. } => {
                let id = out.find_weighted(layer)?;
                let map = out.channel_column_map(id)?;
                if *j >= map.channels {
                    return Err(Error::Data(format!(
                        "log prunes channel {j} of `{layer}` which has {}",
                        map.channels
                    )));
                }
                zero_channel(out.weights_mut(id), &map, *j);
            }
            Action::PruneFilter { layer, m, .. } => {
                let id = out.find_weighted(layer)?;
                if *m >= out.node(id).filters() {
                    return Err(Error::Data(format!(
                        "log prunes filter {m} of `{layer}` which has {}",
                        out.node(id).filters()
                    )));
                }
                zero_filter(&mut out, id, *m);
            }
        }
    }
    Ok(out)
}

/// Which indices of each junction survive compaction.
#[derive(Debug, Clone)]
pub struct KeepPlan {
    /// Per weighted layer: kept filter indices.
    pub filters: BTreeMap<usize, Vec<usize>>,
    /// Per weighted layer: kept input channel indices.
    pub channels: BTreeMap<usize, Vec<usize>>,
}

fn filter_dead(model: &LayerGraph, id: usize, m: usize) -> bool {
    let node = model.node(id);
    node.bias().data()[m] == 0.0 && node.weights().lowered_row(m).iter().all(|v| *v == 0.0)
}

fn channel_zero(model: &LayerGraph, id: usize, map: &ChannelColumnMap, j: usize) -> bool {
    let w = model.node(id).weights();
    let (rows, cols) = w.lowered_shape();
    let g = map.group(j);
    (0..rows).all(|r| w.data()[r * cols + g.start..r * cols + g.end].iter().all(|v| *v == 0.0))
}

/// Plans compaction. An index of a junction is removed when every producer's
/// filter at that index is dead (zero row and zero bias). With `strict`, a
/// consumer channel that is still nonzero at a removed index is an invariant
/// violation; otherwise the index is simply kept.
pub fn keep_plan(model: &LayerGraph, strict: bool) -> Result<KeepPlan> {
    let mut plan = KeepPlan {
        filters: BTreeMap::new(),
        channels: BTreeMap::new(),
    };
    let maps: BTreeMap<usize, ChannelColumnMap> = model
        .weighted_ids()
        .into_iter()
        .map(|id| Ok((id, model.channel_column_map(id)?)))
        .collect::<Result<_>>()?;
    for junction in model.junctions() {
        let fixed = junction.producers.contains(&Endpoint::Input) || junction.consumers.contains(&Endpoint::Output);
        let mut keep = Vec::with_capacity(junction.width);
        for j in 0..junction.width {
            let removable = !fixed
                && junction.producers.iter().all(|p| match p {
                    Endpoint::Layer(id) => filter_dead(model, *id, j),
                    _ => false,
                });
            if removable {
                let live_consumer = junction.consumers.iter().find_map(|c| match c {
                    Endpoint::Layer(cid) if !channel_zero(model, *cid, &maps[cid], j) => Some(*cid),
                    _ => None,
                });
                if let Some(cid) = live_consumer {
                    if strict {
                        return Err(Error::Invariant(format!(
                            "channel {j} of `{}` is live but every filter feeding it is removed",
                            model.node(cid).name
                        )));
                    }
                    keep.push(j);
                }
            } else {
                keep.push(j);
            }
        }
        if keep.is_empty() {
            let name = junction
                .producers
                .iter()
                .find_map(|p| match p {
                    Endpoint::Layer(id) => Some(model.node(*id).name.clone()),
                    _ => None,
                })
                .unwrap_or_default();
            return Err(Error::LayerDisconnected(name));
        }
        for p in &junction.producers {
            if let Endpoint::Layer(id) = p {
                plan.filters.insert(*id, keep.clone());
            }
        }
        for c in &junction.consumers {
            if let Endpoint::Layer(id) = c {
                plan.channels.insert(*id, keep.clone());
            }
        }
    }
    Ok(plan)
}

fn gather(model: &LayerGraph, id: usize, map: &ChannelColumnMap, rows: &[usize], chans: &[usize]) -> (Tensor, Tensor) {
    let node = model.node(id);
    let w = node.weights();
    let cols = map.total_columns();
    let mut data = Vec::with_capacity(rows.len() * chans.len() * map.delta);
    for &r in rows {
        let row = &w.data()[r * cols..(r + 1) * cols];
        for &j in chans {
            data.extend_from_slice(&row[map.group(j)]);
        }
    }
    let mut dims = w.dims().to_vec();
    dims[0] = rows.len();
    if dims.len() == 4 {
        dims[1] = chans.len();
    } else {
        dims[1] = chans.len() * map.delta;
    }
    let bias = rows.iter().map(|&r| node.bias().data()[r]).collect();
    (
        Tensor::new(dims, data).expect("gathered dims"),
        Tensor::new(vec![rows.len()], bias).expect("gathered bias"),
    )
}

/// Physically removes dead filters and the channels they fed, shrinking
/// every affected tensor.
pub fn compact(model: &LayerGraph) -> Result<LayerGraph> {
    let plan = keep_plan(model, true)?;
    let mut params = BTreeMap::new();
    for id in model.weighted_ids() {
        let map = model.channel_column_map(id)?;
        params.insert(id, gather(model, id, &map, &plan.filters[&id], &plan.channels[&id]));
    }
    model.with_resized_params(params)
}

/// Weights per layer that would survive compaction (no error on
/// inconsistent liveness; such indices are kept).
pub fn structural_weights(model: &LayerGraph) -> Result<BTreeMap<String, StructuralCount>> {
    let plan = keep_plan(model, false)?;
    let mut out = BTreeMap::new();
    for id in model.weighted_ids() {
        let map = model.channel_column_map(id)?;
        let f = plan.filters[&id].len();
        let c = plan.channels[&id].len();
        out.insert(
            model.node(id).name.clone(),
            StructuralCount {
                filters: f,
                channels: c,
                weights: f * c * map.delta,
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuralCount {
    pub filters: usize,
    pub channels: usize,
    pub weights: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_lenet5, GraphBuilder};

    #[test]
    fn eta_examples() {
        assert_eq!(emptiness_ratio(&[0.0; 4], 0.0).unwrap(), 0.0);
        let mut nine = [0.0; 9];
        nine[1] = 0.3;
        nine[4] = 1e-9;
        nine[8] = 2.0;
        assert!((emptiness_ratio(&nine, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((emptiness_ratio(&[0.005, 0.5, 0.02], 0.01).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(emptiness_ratio(&[], 0.0).is_err());
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(importance_score(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(importance_score(&[0.0; 5]).unwrap(), 0.0);
        assert!(importance_score(&[]).is_err());
    }

    /// conv(1->4) -> conv(4->3) -> flatten -> fc(->2)
    fn chain() -> LayerGraph {
        let mut b = GraphBuilder::new(&[1, 6, 6]);
        let c1 = b.conv("c1", 0, 4, 3, 3).unwrap();
        let c2 = b.conv("c2", c1, 3, 2, 2).unwrap();
        let fl = b.flatten("fl", c2).unwrap();
        let fc = b.fc("fc", fl, 2).unwrap();
        let mut g = b.finish_with_output(fc).unwrap();
        g.init_weights(7);
        g
    }

    #[test]
    fn untouched_model_is_fixpoint() {
        let g = chain();
        let (out, log) = propagate_unused_paths(&g).unwrap();
        assert_eq!(out, g);
        assert!(log.is_empty());
        assert_eq!(log.passes, 1);
    }

    #[test]
    fn dead_filter_propagates_downstream() {
        let mut g = chain();
        let c1 = g.find("c1").unwrap();
        g.weights_mut(c1).lowered_row_mut(3).fill(0.0);
        let (out, log) = propagate_unused_paths(&g).unwrap();
        let c2 = out.find("c2").unwrap();
        let map = out.channel_column_map(c2).unwrap();
        assert!(channel_zero(&out, c2, &map, 3));
        let kinds: Vec<_> = log.entries.iter().map(|e| (e.action.key(), e.action.rule())).collect();
        assert_eq!(
            kinds,
            vec![
                (("c1".to_string(), false, 3), Rule::Empty),
                (("c2".to_string(), true, 3), Rule::Propagated),
            ]
        );
    }

    #[test]
    fn dead_channel_kills_upstream_filter() {
        let mut g = chain();
        let c2 = g.find("c2").unwrap();
        let map = g.channel_column_map(c2).unwrap();
        zero_channel(g.weights_mut(c2), &map, 1);
        let (out, log) = propagate_unused_paths(&g).unwrap();
        let c1 = out.find("c1").unwrap();
        assert!(filter_dead(&out, c1, 1));
        assert_eq!(log.filters_pruned(), 1);
        // c2 filter 0 empty -> fc block 0 dead
        let mut g2 = chain();
        g2.weights_mut(c2).lowered_row_mut(0).fill(0.0);
        let (out2, _) = propagate_unused_paths(&g2).unwrap();
        let fc = out2.find("fc").unwrap();
        let map = out2.channel_column_map(fc).unwrap();
        assert_eq!(map.delta, 9);
        assert!(channel_zero(&out2, fc, &map, 0));
    }

    #[test]
    fn everything_dead_is_disconnection() {
        let mut g = chain();
        let c2 = g.find("c2").unwrap();
        g.weights_mut(c2).fill(0.0);
        assert!(matches!(propagate_unused_paths(&g), Err(Error::LayerDisconnected(_))));
    }

    #[test]
    fn log_text_round_trip() {
        let mut g = chain();
        let c1 = g.find("c1").unwrap();
        g.weights_mut(c1).lowered_row_mut(2).fill(0.0);
        g.bias_mut(c1).data_mut()[2] = 0.125;
        let (out, log) = propagate_unused_paths(&g).unwrap();
        assert_eq!(log.discarded_bias(), vec![("c1", 2, 0.125)]);
        let parsed = PurifyLog::parse(&log.to_text()).unwrap();
        assert_eq!(parsed, log);
        assert_eq!(replay(&g, &parsed).unwrap(), out);
        let text = log.to_text();
        let line = text
            .lines()
            .find(|l| l.starts_with("PRUNE_CHANNEL layer=c2 j=2 "))
            .unwrap();
        assert!(line.contains("rule=propagated"));
        assert!(text.contains("PRUNE_FILTER layer=c1 m=2 norm2=0e0 bias=1.25e-1 rule=empty"));
    }

    #[test]
    fn compact_lenet_counts() {
        let mut g = build_lenet5();
        g.init_weights(2);
        let conv1 = g.find("conv1").unwrap();
        let conv2 = g.find("conv2").unwrap();
        let fc1 = g.find("fc1").unwrap();
        for m in [0, 5, 6, 19] {
            g.weights_mut(conv1).lowered_row_mut(m).fill(0.0);
        }
        for m in 10..20 {
            g.weights_mut(conv2).lowered_row_mut(m).fill(0.0);
        }
        let (pruned, _) = propagate_unused_paths(&g).unwrap();
        let compacted = compact(&pruned).unwrap();
        assert_eq!(compacted.node(conv2).weights().dims(), &[40, 16, 5, 5]);
        assert_eq!(compacted.node(conv1).weights().dims(), &[16, 1, 5, 5]);
        assert_eq!(compacted.node(fc1).weights().dims(), &[500, 640]);
        let x = Tensor::new(
            vec![2, 1, 28, 28],
            (0..2 * 784).map(|i| (i % 17) as f64 / 17.0).collect(),
        )
        .unwrap();
        let a = pruned.forward(&x).unwrap();
        let b = compacted.forward(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }

    #[test]
    fn compact_refuses_inconsistent_liveness() {
        let mut g = chain();
        let c1 = g.find("c1").unwrap();
        g.weights_mut(c1).lowered_row_mut(0).fill(0.0);
        g.bias_mut(c1).data_mut()[0] = 0.0;
        // c2 channel 0 still nonzero
        assert!(matches!(compact(&g), Err(Error::Invariant(_))));
        let (clean, _) = propagate_unused_paths(&g).unwrap();
        assert_eq!(compact(&clean).unwrap().node(c1).weights().dims(), &[3, 1, 3, 3]);
    }

    #[test]
    fn nothing_prunable_keeps_dims() {
        let g = chain();
        assert_eq!(compact(&g).unwrap(), g);
    }
}
