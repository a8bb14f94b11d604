//! The searchable multimodal fusion network: per-module feature pools, cell
//! DAGs, the softmax relaxation used during search and argmax
//! discretization into a [`Genotype`].

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion_ops::{self, apply_op, FusionOpKind};
use crate::genotype::{Genotype, GenotypeMeta, MsmGenotype, MsmKind, NodeGene};
use crate::params::{uniform_tensor, Bound, ParamId, ParamStore};
use crate::tensor::{argmax, softmax, Tensor};
use rand::Rng;
use std::collections::BTreeSet;
use std::fmt;

/// Where a pool entry comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Encoder feature of one modality. `stage` indexes the middle stages and
    /// is 0 for early/late features.
    Encoder {
        modality: usize,
        level: MsmKind,
        stage: usize,
    },
    /// Output of an upstream module.
    Msm(MsmKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub name: String,
    pub source: FeatureSource,
    /// Native `C×H×W` shape before adaptation.
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePool {
    pub kind: MsmKind,
    pub entries: Vec<PoolEntry>,
    /// Common adapted shape `C×H×W`.
    pub shape: [usize; 3],
}

impl FeaturePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpec {
    pub k: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl CellSpec {
    pub fn node_count(&self) -> usize {
        2 + self.k + 1
    }
}

/// Which modules are instantiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MsmSet {
    pub early: bool,
    pub middle: bool,
    pub late: bool,
}

impl MsmSet {
    pub const FULL: MsmSet = MsmSet {
        early: true,
        middle: true,
        late: true,
    };

    pub fn contains(&self, kind: MsmKind) -> bool {
        match kind {
            MsmKind::Early => self.early,
            MsmKind::Middle => self.middle,
            MsmKind::Late => self.late,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.early || self.middle || self.late)
    }

    pub fn kinds(&self) -> impl Iterator<Item = MsmKind> + '_ {
        MsmKind::ALL.into_iter().filter(|k| self.contains(*k))
    }

    /// The seven non-empty subsets, singles first.
    pub fn all_nonempty() -> Vec<MsmSet> {
        let mk = |e, m, l| MsmSet {
            early: e,
            middle: m,
            late: l,
        };
        vec![
            mk(true, false, false),
            mk(false, true, false),
            mk(false, false, true),
            mk(true, true, false),
            mk(true, false, true),
            mk(false, true, true),
            mk(true, true, true),
        ]
    }
}

impl fmt::Display for MsmSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.kinds().map(MsmKind::as_str).collect();
        f.write_str(&names.join("+"))
    }
}

impl std::str::FromStr for MsmSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = MsmSet {
            early: false,
            middle: false,
            late: false,
        };
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "early" => set.early = true,
                "middle" => set.middle = true,
                "late" => set.late = true,
                other => return Err(Error::invalid(format!("unknown module {other:?}"))),
            }
        }
        if set.is_empty() {
            return Err(Error::invalid("module subset must not be empty"));
        }
        Ok(set)
    }
}

/// Native shapes of one modality's encoder ladder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureShapes {
    pub early: [usize; 3],
    pub middle: Vec<[usize; 3]>,
    pub late: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfnConfig {
    /// Modality names ("a", "b") and their encoder shapes.
    pub modalities: Vec<(String, FeatureShapes)>,
    /// Channel width of every cell node.
    pub channels: usize,
    /// Intermediate nodes per cell.
    pub k: usize,
    pub msms: MsmSet,
}

/// Architecture parameter handles for one module.
#[derive(Debug, Clone)]
pub struct MsmArchIds {
    pub alpha_ex: [ParamId; 2],
    pub alpha_in: Vec<[ParamId; 2]>,
    pub beta_op: Vec<ParamId>,
}

/// Value-level architecture parameters of one module.
#[derive(Debug, Clone, PartialEq)]
pub struct MsmArch {
    pub kind: MsmKind,
    pub alpha_ex: [Vec<f64>; 2],
    pub alpha_in: Vec<[Vec<f64>; 2]>,
    pub beta_op: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    pub msms: Vec<MsmArch>,
}

impl ArchParams {
    pub fn is_finite(&self) -> bool {
        self.msms.iter().all(|m| {
            m.alpha_ex.iter().flatten().all(|v| v.is_finite())
                && m.alpha_in.iter().flatten().flatten().all(|v| v.is_finite())
                && m.beta_op.iter().flatten().all(|v| v.is_finite())
        })
    }
}

#[derive(Debug, Clone)]
pub struct MsmLayout {
    pub kind: MsmKind,
    pub pool: FeaturePool,
    pub cell: CellSpec,
    /// Adapter `(weight, bias)` per pool entry.
    adapters: Vec<(ParamId, ParamId)>,
    /// Per node, the parameter ids of each op kind in [`FusionOpKind::ALL`] order.
    ops: Vec<Vec<Vec<ParamId>>>,
    pub arch: MsmArchIds,
}

/// Graph handles of one modality's encoder features.
#[derive(Debug, Clone)]
pub struct ModalityFeatures {
    pub early: Var,
    pub middle: Vec<Var>,
    pub late: Var,
}

/// The assembled fusion network: modules in data-flow order.
#[derive(Debug, Clone)]
pub struct Mfn {
    pub msms: Vec<MsmLayout>,
}

fn pool_resolution(cfg: &MfnConfig, kind: MsmKind) -> (usize, usize) {
    let pick = |f: &dyn Fn(&FeatureShapes) -> Vec<[usize; 3]>| {
        cfg.modalities
            .iter()
            .flat_map(|(_, s)| f(s))
            .map(|s| (s[1], s[2]))
            .max()
            .unwrap_or((1, 1))
    };
    match kind {
        MsmKind::Early => pick(&|s| vec![s.early]),
        // The late pool is lifted to the middle resolution so the detector
        // downstream keeps spatial detail.
        MsmKind::Middle | MsmKind::Late => pick(&|s| s.middle.clone()),
    }
}

/// Builds the pools for every instantiated module.
pub fn build_pools(cfg: &MfnConfig) -> Result<Vec<FeaturePool>> {
    if cfg.msms.is_empty() {
        return Err(Error::invalid("no fusion modules selected"));
    }
    if cfg.channels == 0 || cfg.k == 0 {
        return Err(Error::config("channels and k must be positive"));
    }
    let mut pools: Vec<FeaturePool> = Vec::new();
    for kind in cfg.msms.kinds() {
        let (mut h, mut w) = pool_resolution(cfg, kind);
        if kind == MsmKind::Late {
            // The late output feeds the detector; keep the finest detail any
            // of its upstream modules has.
            for up in &pools {
                (h, w) = (h, w).max((up.shape[1], up.shape[2]));
            }
        }
        let mut entries = Vec::new();
        for (m, (name, shapes)) in cfg.modalities.iter().enumerate() {
            let native: Vec<(String, usize, [usize; 3])> = match kind {
                MsmKind::Early => vec![(format!("{name}.early"), 0, shapes.early)],
                MsmKind::Middle => shapes
                    .middle
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (format!("{name}.middle{}", i + 1), i, *s))
                    .collect(),
                MsmKind::Late => vec![(format!("{name}.late"), 0, shapes.late)],
            };
            for (entry_name, stage, shape) in native {
                entries.push(PoolEntry {
                    name: entry_name,
                    source: FeatureSource::Encoder {
                        modality: m,
                        level: kind,
                        stage,
                    },
                    shape,
                });
            }
        }
        for up in pools.iter() {
            entries.push(PoolEntry {
                name: up.kind.output_name(),
                source: FeatureSource::Msm(up.kind),
                shape: up.shape,
            });
        }
        if entries.len() < 2 {
            return Err(Error::config(format!(
                "{kind} pool has {} entries; a cell needs two inputs",
                entries.len()
            )));
        }
        pools.push(FeaturePool {
            kind,
            entries,
            shape: [cfg.channels, h, w],
        });
    }
    Ok(pools)
}

impl Mfn {
    /// Registers adapters, op parameters and architecture parameters for
    /// every instantiated module.
    pub fn assemble(
        cfg: &MfnConfig,
        weights: &mut ParamStore,
        arch: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Mfn> {
        let pools = build_pools(cfg)?;
        let c = cfg.channels;
        let mut msms = Vec::new();
        for pool in pools {
            let kind = pool.kind;
            let cell = CellSpec {
                k: cfg.k,
                channels: c,
                h: pool.shape[1],
                w: pool.shape[2],
            };
            let mut adapters = Vec::new();
            for e in &pool.entries {
                // Same-width sources start as a pass-through so the cell sees
                // the features themselves rather than random mixtures.
                let init = if e.shape[0] == c {
                    Tensor::identity(c)
                } else {
                    uniform_tensor(rng, &[c, e.shape[0]], 1.0 / (e.shape[0] as f64).sqrt())
                };
                let w = weights.add(format!("mfn.{kind}.adapt.{}.w", e.name), init);
                let b = weights.add(format!("mfn.{kind}.adapt.{}.b", e.name), Tensor::zeros(&[c]));
                adapters.push((w, b));
            }
            let mut ops = Vec::new();
            for node in 0..cfg.k {
                let mut per_kind = Vec::new();
                for op in FusionOpKind::ALL {
                    let p = fusion_ops::init_params_with(op, c, rng)?;
                    per_kind.push(p.register(weights, &format!("mfn.{kind}.node{node}.{op}")));
                }
                ops.push(per_kind);
            }
            let mut small = |n: usize| uniform_tensor(rng, &[n], 1e-3);
            let alpha_ex = [
                arch.add(format!("{kind}.alpha_ex.1"), small(pool.len())),
                arch.add(format!("{kind}.alpha_ex.2"), small(pool.len())),
            ];
            let mut alpha_in = Vec::new();
            let mut beta_op = Vec::new();
            for node in 0..cfg.k {
                alpha_in.push([
                    arch.add(format!("{kind}.alpha_in.{node}.y"), small(2 + node)),
                    arch.add(format!("{kind}.alpha_in.{node}.z"), small(2 + node)),
                ]);
                beta_op.push(arch.add(format!("{kind}.beta_op.{node}"), small(FusionOpKind::ALL.len())));
            }
            msms.push(MsmLayout {
                kind,
                pool,
                cell,
                adapters,
                ops,
                arch: MsmArchIds {
                    alpha_ex,
                    alpha_in,
                    beta_op,
                },
            });
        }
        Ok(Mfn { msms })
    }

    pub fn output_kind(&self) -> MsmKind {
        self.msms.last().expect("at least one module").kind
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.msms.last().expect("at least one module").pool.shape
    }

    pub fn msm(&self, kind: MsmKind) -> Option<&MsmLayout> {
        self.msms.iter().find(|m| m.kind == kind)
    }

    /// Op parameter ids of `node` in module `kind` for operation `op`.
    pub fn op_param_ids(&self, kind: MsmKind, node: usize, op: FusionOpKind) -> &[ParamId] {
        &self.msm(kind).expect("module present").ops[node][op.index()]
    }

    pub fn adapter_ids(&self, kind: MsmKind, entry: usize) -> (ParamId, ParamId) {
        self.msm(kind).expect("module present").adapters[entry]
    }

    pub fn arch_params(&self, store: &ParamStore) -> ArchParams {
        let vals = |id: ParamId| store.get(id).data().to_vec();
        ArchParams {
            msms: self
                .msms
                .iter()
                .map(|m| MsmArch {
                    kind: m.kind,
                    alpha_ex: [vals(m.arch.alpha_ex[0]), vals(m.arch.alpha_ex[1])],
                    alpha_in: m
                        .arch
                        .alpha_in
                        .iter()
                        .map(|p| [vals(p[0]), vals(p[1])])
                        .collect(),
                    beta_op: m.arch.beta_op.iter().map(|&p| vals(p)).collect(),
                })
                .collect(),
        }
    }

    pub fn set_arch_params(&self, store: &mut ParamStore, arch: &ArchParams) -> Result<()> {
        let mut put = |id: ParamId, v: &[f64]| -> Result<()> {
            let t = store.get_mut(id);
            if t.len() != v.len() {
                return Err(Error::config(format!(
                    "architecture vector length {} does not match {}",
                    v.len(),
                    t.len()
                )));
            }
            t.data_mut().copy_from_slice(v);
            Ok(())
        };
        if arch.msms.len() != self.msms.len() {
            return Err(Error::config("architecture parameters cover different modules"));
        }
        for (m, a) in self.msms.iter().zip(&arch.msms) {
            if m.kind != a.kind || m.arch.alpha_in.len() != a.alpha_in.len() {
                return Err(Error::config(format!("architecture layout mismatch at {}", m.kind)));
            }
            put(m.arch.alpha_ex[0], &a.alpha_ex[0])?;
            put(m.arch.alpha_ex[1], &a.alpha_ex[1])?;
            for (ids, vals) in m.arch.alpha_in.iter().zip(&a.alpha_in) {
                put(ids[0], &vals[0])?;
                put(ids[1], &vals[1])?;
            }
            for (&id, vals) in m.arch.beta_op.iter().zip(&a.beta_op) {
                put(id, vals)?;
            }
        }
        Ok(())
    }

    /// Argmax genotype of the current architecture parameters.
    pub fn discretize(&self, arch: &ParamStore, meta: GenotypeMeta) -> Genotype {
        discretize(&self.arch_params(arch), &self.pools(), meta)
    }

    pub fn pools(&self) -> Vec<FeaturePool> {
        self.msms.iter().map(|m| m.pool.clone()).collect()
    }

    /// Checks that `genotype` was produced for this network layout.
    pub fn check_genotype(&self, genotype: &Genotype) -> Result<()> {
        genotype.validate().map_err(|e| Error::config(e.to_string()))?;
        for kind in MsmKind::ALL {
            match (self.msm(kind), genotype.msm(kind)) {
                (None, None) => {}
                (Some(layout), Some(g)) => {
                    if g.pool != layout.pool.names() {
                        return Err(Error::config(format!(
                            "{kind}: genotype pool {:?} does not match network pool {:?}",
                            g.pool,
                            layout.pool.names()
                        )));
                    }
                    if g.nodes.len() != layout.cell.k {
                        return Err(Error::config(format!(
                            "{kind}: genotype has {} nodes, network has {}",
                            g.nodes.len(),
                            layout.cell.k
                        )));
                    }
                }
                _ => {
                    return Err(Error::config(format!(
                        "{kind}: module presence differs between genotype and network"
                    )))
                }
            }
        }
        Ok(())
    }

    fn entry_feature(
        entry: &PoolEntry,
        features: &[ModalityFeatures],
        outputs: &[(MsmKind, Var)],
    ) -> Result<Var> {
        match entry.source {
            FeatureSource::Encoder {
                modality,
                level,
                stage,
            } => {
                let f = features
                    .get(modality)
                    .ok_or_else(|| Error::config(format!("missing modality {modality}")))?;
                Ok(match level {
                    MsmKind::Early => f.early,
                    MsmKind::Late => f.late,
                    MsmKind::Middle => *f
                        .middle
                        .get(stage)
                        .ok_or_else(|| Error::config(format!("missing middle stage {stage}")))?,
                })
            }
            FeatureSource::Msm(kind) => outputs
                .iter()
                .find(|(k, _)| *k == kind)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::config(format!("{kind} output not computed"))),
        }
    }

    fn adapt(
        graph: &mut Graph,
        layout: &MsmLayout,
        weights: &Bound,
        entry: usize,
        feature: Var,
    ) -> Result<Var> {
        let (w, b) = layout.adapters[entry];
        let [_, h, wd] = layout.pool.shape;
        let (_, mut fh, mut fw) = graph.value(feature).chw()?;
        let mut x = feature;
        // Halve by averaging while the result still covers the pool, so small
        // structures are blurred rather than dropped.
        while fh % 2 == 0 && fw % 2 == 0 && fh / 2 >= h && fw / 2 >= wd {
            x = graph.avg_pool2(x)?;
            fh /= 2;
            fw /= 2;
        }
        if fh * fw > h * wd {
            // Nearest resize commutes with a per-pixel map; shrink first.
            let r = graph.resize(x, h, wd)?;
            graph.linear(r, weights[w], weights[b])
        } else {
            let l = graph.linear(x, weights[w], weights[b])?;
            graph.resize(l, h, wd)
        }
    }

    fn node_op_vars(layout: &MsmLayout, weights: &Bound, node: usize, op: FusionOpKind) -> Vec<Var> {
        layout.ops[node][op.index()].iter().map(|&id| weights[id]).collect()
    }

    /// Relaxed forward: every discrete choice is a softmax mixture.
    pub fn forward_relaxed(
        &self,
        graph: &mut Graph,
        weights: &Bound,
        arch: &Bound,
        features: &[ModalityFeatures],
    ) -> Result<Var> {
        let mut outputs: Vec<(MsmKind, Var)> = Vec::new();
        for layout in &self.msms {
            let mut adapted = Vec::with_capacity(layout.pool.len());
            for (i, e) in layout.pool.entries.iter().enumerate() {
                let f = Self::entry_feature(e, features, &outputs)?;
                adapted.push(Self::adapt(graph, layout, weights, i, f)?);
            }
            let ops: Vec<Vec<Vec<Var>>> = (0..layout.cell.k)
                .map(|n| {
                    FusionOpKind::ALL
                        .iter()
                        .map(|&op| Self::node_op_vars(layout, weights, n, op))
                        .collect()
                })
                .collect();
            let cell_arch = CellArchVars {
                alpha_ex: [arch[layout.arch.alpha_ex[0]], arch[layout.arch.alpha_ex[1]]],
                alpha_in: layout
                    .arch
                    .alpha_in
                    .iter()
                    .map(|p| [arch[p[0]], arch[p[1]]])
                    .collect(),
                beta_op: layout.arch.beta_op.iter().map(|&p| arch[p]).collect(),
            };
            let out = cell_forward(graph, &layout.cell, &adapted, &cell_arch, &ops)?;
            outputs.push((layout.kind, out));
        }
        Ok(outputs.last().expect("at least one module").1)
    }

    /// Discrete forward of `genotype` using this network's weights. Modules
    /// whose output nobody selects are skipped.
    pub fn forward_discrete(
        &self,
        graph: &mut Graph,
        weights: &Bound,
        genotype: &Genotype,
        features: &[ModalityFeatures],
    ) -> Result<Var> {
        let mut needed: BTreeSet<MsmKind> = BTreeSet::new();
        needed.insert(self.output_kind());
        for layout in self.msms.iter().rev() {
            if !needed.contains(&layout.kind) {
                continue;
            }
            let g = genotype
                .msm(layout.kind)
                .ok_or_else(|| Error::config(format!("genotype lacks {}", layout.kind)))?;
            for &i in &g.inputs {
                if let Some(FeatureSource::Msm(up)) = layout.pool.entries.get(i).map(|e| e.source) {
                    needed.insert(up);
                }
            }
        }
        let mut outputs: Vec<(MsmKind, Var)> = Vec::new();
        for layout in &self.msms {
            if !needed.contains(&layout.kind) {
                continue;
            }
            let g = genotype.msm(layout.kind).expect("checked above");
            if g.nodes.len() != layout.cell.k {
                return Err(Error::config(format!("{}: node count mismatch", layout.kind)));
            }
            let mut nodes: Vec<Var> = Vec::with_capacity(2 + layout.cell.k);
            for &i in &g.inputs {
                let e = layout
                    .pool
                    .entries
                    .get(i)
                    .ok_or_else(|| Error::config(format!("{}: input {i} out of range", layout.kind)))?;
                let f = Self::entry_feature(e, features, &outputs)?;
                nodes.push(Self::adapt(graph, layout, weights, i, f)?);
            }
            let mut out: Option<Var> = None;
            for (k, gene) in g.nodes.iter().enumerate() {
                let [a, b] = gene.preds;
                if a >= 2 + k || b >= 2 + k {
                    return Err(Error::config(format!("{}: bad predecessor", layout.kind)));
                }
                let params = Self::node_op_vars(layout, weights, k, gene.op);
                let v = apply_op(graph, gene.op, &params, nodes[a], nodes[b])?;
                nodes.push(v);
                out = Some(match out {
                    None => v,
                    Some(acc) => graph.add(acc, v)?,
                });
            }
            outputs.push((layout.kind, out.expect("k >= 1")));
        }
        outputs
            .iter()
            .find(|(k, _)| *k == self.output_kind())
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::config("output module not computed"))
    }
}

/// Architecture handles of one cell.
#[derive(Debug, Clone)]
pub struct CellArchVars {
    pub alpha_ex: [Var; 2],
    pub alpha_in: Vec<[Var; 2]>,
    pub beta_op: Vec<Var>,
}

/// Softmax mixture of candidates under one architecture vector.
fn mix(graph: &mut Graph, alpha: Var, candidates: &[Var]) -> Result<Var> {
    if graph.value(alpha).len() != candidates.len() {
        return Err(Error::config(format!(
            "architecture vector of length {} for {} candidates",
            graph.value(alpha).len(),
            candidates.len()
        )));
    }
    let w = graph.softmax(alpha)?;
    graph.weighted_sum(w, candidates)
}

/// Cell inputs as softmax-weighted sums over the adapted pool.
pub fn relax_inputs(graph: &mut Graph, adapted: &[Var], alpha_ex: [Var; 2]) -> Result<(Var, Var)> {
    Ok((mix(graph, alpha_ex[0], adapted)?, mix(graph, alpha_ex[1], adapted)?))
}

/// The two inputs of an intermediate node, each a mixture over candidates.
pub fn mixed_edge(graph: &mut Graph, alpha_in: [Var; 2], candidates: &[Var]) -> Result<(Var, Var)> {
    Ok((mix(graph, alpha_in[0], candidates)?, mix(graph, alpha_in[1], candidates)?))
}

/// Softmax(β)-weighted sum of every candidate operation.
/// `op_params[i]` holds the handles of [`FusionOpKind::ALL`]`[i]`.
pub fn mixed_op(
    graph: &mut Graph,
    beta: Var,
    op_params: &[Vec<Var>],
    ty: Var,
    tz: Var,
) -> Result<Var> {
    if op_params.len() != FusionOpKind::ALL.len() {
        return Err(Error::config("mixed op needs parameters for every operation kind"));
    }
    let outs = FusionOpKind::ALL
        .iter()
        .zip(op_params)
        .map(|(&kind, p)| apply_op(graph, kind, p, ty, tz))
        .collect::<Result<Vec<_>>>()?;
    mix(graph, beta, &outs)
}

/// Relaxed cell: inputs → K mixed nodes → channel-wise sum of the nodes.
pub fn cell_forward(
    graph: &mut Graph,
    spec: &CellSpec,
    adapted: &[Var],
    arch: &CellArchVars,
    op_params: &[Vec<Vec<Var>>],
) -> Result<Var> {
    if arch.alpha_in.len() != spec.k || arch.beta_op.len() != spec.k || op_params.len() != spec.k {
        return Err(Error::config(format!(
            "cell expects {} nodes of parameters",
            spec.k
        )));
    }
    let (x1, x2) = relax_inputs(graph, adapted, arch.alpha_ex)?;
    let mut nodes = vec![x1, x2];
    let mut out: Option<Var> = None;
    for ((&edge, &beta), ops) in arch.alpha_in.iter().zip(&arch.beta_op).zip(op_params) {
        let (ty, tz) = mixed_edge(graph, edge, &nodes)?;
        let v = mixed_op(graph, beta, ops, ty, tz)?;
        nodes.push(v);
        out = Some(match out {
            None => v,
            Some(acc) => graph.add(acc, v)?,
        });
    }
    out.ok_or_else(|| Error::config("cell has no intermediate nodes"))
}

/// Index of the largest entry other than `exclude` (lowest index on ties).
fn runner_up(v: &[f64], exclude: usize) -> usize {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if i == exclude {
            continue;
        }
        if best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(exclude)
}

/// Argmax discretization. When both input slots pick the same pool entry the
/// second slot takes its runner-up.
pub fn discretize(arch: &ArchParams, pools: &[FeaturePool], meta: GenotypeMeta) -> Genotype {
    let mut g = Genotype {
        msm_early: None,
        msm_middle: None,
        msm_late: None,
        wiring: Vec::new(),
        meta,
    };
    for (m, pool) in arch.msms.iter().zip(pools) {
        let j = argmax(&m.alpha_ex[0]);
        let mut h = argmax(&m.alpha_ex[1]);
        if h == j {
            h = runner_up(&m.alpha_ex[1], j);
        }
        let nodes = m
            .alpha_in
            .iter()
            .zip(&m.beta_op)
            .map(|(ain, beta)| NodeGene {
                op: FusionOpKind::from_index(argmax(beta)).expect("beta has one entry per op"),
                preds: [argmax(&ain[0]), argmax(&ain[1])],
            })
            .collect();
        *g.msm_mut(m.kind) = Some(MsmGenotype {
            pool: pool.names(),
            inputs: [j, h],
            nodes,
        });
    }
    g.wiring = g.derive_wiring();
    g
}

/// Softmax weights of every architecture group, for auditing normalization.
pub fn arch_weight_groups(arch: &ArchParams) -> Result<Vec<Vec<f64>>> {
    let mut groups = Vec::new();
    for m in &arch.msms {
        for v in m.alpha_ex.iter().chain(m.alpha_in.iter().flatten()).chain(&m.beta_op) {
            groups.push(softmax(v)?);
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shapes(c: usize, h: usize) -> FeatureShapes {
        FeatureShapes {
            early: [c, h, h],
            middle: vec![[c, h / 2, h / 2], [c, h / 4, h / 4], [c, h / 4, h / 4]],
            late: [c, h / 8, h / 8],
        }
    }

    fn config(msms: MsmSet) -> MfnConfig {
        MfnConfig {
            modalities: vec![("a".into(), shapes(4, 16)), ("b".into(), shapes(4, 16))],
            channels: 3,
            k: 2,
            msms,
        }
    }

    #[test]
    fn pool_sizes_follow_wiring_rule() {
        let pools = build_pools(&config(MsmSet::FULL)).unwrap();
        assert_eq!(pools[0].len(), 2);
        assert_eq!(pools[1].len(), 7);
        assert_eq!(pools[1].entries[6].name, "msm_early");
        assert_eq!(
            pools[2].names(),
            vec!["a.late", "b.late", "msm_early", "msm_middle"]
        );
        let only_late = build_pools(&config("late".parse().unwrap())).unwrap();
        assert_eq!(only_late.len(), 1);
        assert_eq!(only_late[0].len(), 2);
    }

    #[test]
    fn discretize_examples() {
        let pool = build_pools(&config("early".parse().unwrap())).unwrap();
        let mut arch = ArchParams {
            msms: vec![MsmArch {
                kind: MsmKind::Early,
                alpha_ex: [vec![0.9, 0.1], vec![2.0, 0.5]],
                alpha_in: vec![[vec![0.1, 2.0], vec![0.5, 0.0]]],
                beta_op: vec![vec![0.3, 0.3, 0.1, 0.2]],
            }],
        };
        let g = discretize(&arch, &pool, GenotypeMeta::default());
        let e = g.msm_early.as_ref().unwrap();
        // Both slots prefer entry 0: slot 2 falls back to its runner-up.
        assert_eq!(e.inputs, [0, 1]);
        assert_eq!(e.nodes[0].op, FusionOpKind::WeightedSum);
        assert_eq!(e.nodes[0].preds, [1, 0]);
        arch.msms[0].beta_op[0] = vec![0.1, 2.0, 0.5, 0.0];
        let g = discretize(&arch, &pool, GenotypeMeta::default());
        assert_eq!(g.msm_early.unwrap().nodes[0].op, FusionOpKind::ConcatProject);
    }

    #[test]
    fn runner_up_skips_excluded() {
        assert_eq!(runner_up(&[0.1, 2.0, 0.5], 1), 2);
        assert_eq!(runner_up(&[1.0, 1.0, 1.0], 0), 1);
    }

    #[test]
    fn wiring_lists_all_inter_module_candidates() {
        let cfg = config(MsmSet::FULL);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut w, mut a) = (ParamStore::new(), ParamStore::new());
        let mfn = Mfn::assemble(&cfg, &mut w, &mut a, &mut rng).unwrap();
        let g = mfn.discretize(&a, GenotypeMeta::default());
        let pairs: Vec<(MsmKind, MsmKind)> = g.wiring.iter().map(|e| (e.from, e.to)).collect();
        assert_eq!(
            pairs,
            vec![
                (MsmKind::Early, MsmKind::Middle),
                (MsmKind::Early, MsmKind::Late),
                (MsmKind::Middle, MsmKind::Late)
            ]
        );
        assert!(g.validate().is_ok());
        assert!(mfn.check_genotype(&g).is_ok());
    }

    #[test]
    fn length_mismatch_is_a_config_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 2, 2]));
        let alpha = g.parameter(Tensor::zeros(&[3]));
        assert!(matches!(
            relax_inputs(&mut g, &[a, b], [alpha, alpha]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_subset_rejected() {
        assert!("".parse::<MsmSet>().is_err());
        assert_eq!("early,late".parse::<MsmSet>().unwrap().to_string(), "early+late");
    }
}
