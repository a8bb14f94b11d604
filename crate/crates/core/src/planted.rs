//! Planted-structure benchmark for the search engine. A frozen teacher
//! fusion network with a known genotype labels random encoder features; the
//! search regresses those labels and should find the teacher's wiring and
//! operation.
//!
//! The teacher's middle module linearly mixes two modality-b middle
//! features, and its late module blends `a.late` with the middle module's
//! output through guided attention. Modality b therefore matters only through the middle
//! features, and no other entry of the late pool carries its signal.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion_ops::FusionOpKind;
use crate::genotype::{Genotype, GenotypeMeta, MsmGenotype, MsmKind, NodeGene};
use crate::params::{uniform_tensor, Bound, ParamStore};
use crate::pipeline::NetConfig;
use crate::rng;
use crate::search::{run_bilevel, BilevelSettings, SearchHistory, SearchTask, Split};
use crate::search_space::{FeaturePool, Mfn, ModalityFeatures, MsmSet};
use crate::tensor::Tensor;
use serde::Serialize;

/// The operation the teacher uses at node 0 of its late module.
pub const PLANTED_OP: FusionOpKind = FusionOpKind::GuidedAttention;

/// The teacher's middle module is linear, so a student can match its output
/// channel for channel and the late operation stays identifiable.
const MIDDLE_OP: FusionOpKind = FusionOpKind::WeightedSum;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Labelled samples; half train the weights, half the architecture.
    pub samples: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr_w: f64,
    pub lr_arch: f64,
    /// Scale of the teacher's attention gate weights. Larger values make the
    /// gate closer to a hard per-element switch.
    pub gate_gain: f64,
    /// Modules of teacher and student. Must include middle and late.
    pub msms: MsmSet,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            image_size: 16,
            channels: 4,
            samples: 96,
            epochs: 100,
            batch: 8,
            lr_w: 0.01,
            lr_arch: 0.03,
            gate_gain: 4.0,
            msms: MsmSet::FULL,
        }
    }
}

impl PlantedConfig {
    fn net(&self) -> NetConfig {
        NetConfig {
            image_size: self.image_size,
            channels: self.channels,
            k: 1,
            msms: self.msms,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlantedOutcome {
    pub seed: u64,
    pub genotype: Genotype,
    /// The late module reads the middle module's output.
    pub middle_in_late: bool,
    /// The late module's node 0 uses [`PLANTED_OP`].
    pub op_recovered: bool,
    pub final_val_loss: f64,
    #[serde(skip)]
    pub history: SearchHistory,
}

impl PlantedOutcome {
    pub fn recovered(&self) -> bool {
        self.middle_in_late && self.op_recovered
    }
}

fn entry(pool: &FeaturePool, name: &str) -> Result<usize> {
    pool.entries
        .iter()
        .position(|e| e.name == name)
        .ok_or_else(|| Error::config(format!("{} pool has no entry {name}", pool.kind)))
}

/// The teacher's genotype for the pools of `mfn`.
pub fn teacher_genotype(mfn: &Mfn) -> Result<Genotype> {
    let pools = mfn.pools();
    let pool = |kind: MsmKind| {
        pools
            .iter()
            .find(|p| p.kind == kind)
            .ok_or_else(|| Error::config(format!("no {kind} module")))
    };
    let gene = |pool: &FeaturePool, inputs: [usize; 2], op: FusionOpKind| MsmGenotype {
        pool: pool.names(),
        inputs,
        nodes: vec![NodeGene { op, preds: [0, 1] }],
    };
    let middle = pool(MsmKind::Middle)?;
    let late = pool(MsmKind::Late)?;
    let early = pools
        .iter()
        .find(|p| p.kind == MsmKind::Early)
        .map(|p| gene(p, [0, 1], FusionOpKind::WeightedSum));
    let mut g = Genotype {
        msm_early: early,
        msm_middle: Some(gene(
            middle,
            [entry(middle, "b.middle1")?, entry(middle, "b.middle3")?],
            MIDDLE_OP,
        )),
        msm_late: Some(gene(
            late,
            [entry(late, "a.late")?, entry(late, &MsmKind::Middle.output_name())?],
            PLANTED_OP,
        )),
        wiring: Vec::new(),
        meta: GenotypeMeta {
            seed: 0,
            config_hash: String::new(),
        },
    };
    g.wiring = g.derive_wiring();
    g.validate()?;
    Ok(g)
}

/// Random encoder features of one modality at the ladder's shapes.
fn random_features(rng: &mut impl rand::Rng, net: &NetConfig) -> [Tensor; 5] {
    let s = net.feature_shapes();
    let mut draw = |shape: [usize; 3]| uniform_tensor(rng, &shape, 1.0);
    [
        draw(s.early),
        draw(s.middle[0]),
        draw(s.middle[1]),
        draw(s.middle[2]),
        draw(s.late),
    ]
}

fn bind_features(graph: &mut Graph, f: &[Tensor; 5]) -> ModalityFeatures {
    ModalityFeatures {
        early: graph.constant(f[0].clone()),
        middle: f[1..4].iter().map(|t| graph.constant(t.clone())).collect(),
        late: graph.constant(f[4].clone()),
    }
}

struct PlantedTask<'a> {
    student: &'a Mfn,
    inputs: Vec<[[Tensor; 5]; 2]>,
    targets: Vec<Tensor>,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl SearchTask for PlantedTask<'_> {
    fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train.len(),
            Split::Val => self.val.len(),
        }
    }

    fn batch_loss(
        &self,
        graph: &mut Graph,
        weights: &Bound,
        arch: &Bound,
        split: Split,
        items: &[usize],
        _epoch: usize,
    ) -> Result<Var> {
        let ids = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        };
        let mut total: Option<Var> = None;
        for &i in items {
            let s = ids[i];
            let features = [bind_features(graph, &self.inputs[s][0]), bind_features(graph, &self.inputs[s][1])];
            let out = self.student.forward_relaxed(graph, weights, arch, &features)?;
            let l = graph.squared_error(out, self.targets[s].clone())?;
            total = Some(match total {
                None => l,
                Some(acc) => graph.add(acc, l)?,
            });
        }
        let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
        Ok(graph.affine(total, 1.0 / items.len() as f64, 0.0))
    }
}

/// Builds the teacher and its labels, then searches a fresh student.
pub fn run_planted(cfg: &PlantedConfig, seed: u64) -> Result<PlantedOutcome> {
    let net = cfg.net();
    net.validate()?;
    if cfg.samples < 2 {
        return Err(Error::invalid("planted benchmark needs at least two samples"));
    }
    let mut r = rng::keyed(seed, rng::DATA, &[9]);
    let mut teacher_w = ParamStore::new();
    let mut teacher_a = ParamStore::new();
    let teacher = Mfn::assemble(&net.mfn_config(), &mut teacher_w, &mut teacher_a, &mut r)?;
    let planted = teacher_genotype(&teacher)?;
    for &id in teacher.op_param_ids(MsmKind::Late, 0, PLANTED_OP) {
        let t = teacher_w.get_mut(id);
        *t = t.map(|v| v * cfg.gate_gain);
    }

    let mut inputs = Vec::with_capacity(cfg.samples);
    let mut targets = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let pair = [random_features(&mut r, &net), random_features(&mut r, &net)];
        let mut g = Graph::new();
        let wb = teacher_w.bind(&mut g, false);
        let features = [bind_features(&mut g, &pair[0]), bind_features(&mut g, &pair[1])];
        let y = teacher.forward_discrete(&mut g, &wb, &planted, &features)?;
        targets.push(g.value(y).clone());
        inputs.push(pair);
    }

    let mut weights = ParamStore::new();
    let mut arch = ParamStore::new();
    let student = Mfn::assemble(
        &net.mfn_config(),
        &mut weights,
        &mut arch,
        &mut rng::keyed(seed, rng::INIT, &[9]),
    )?;
    let half = cfg.samples / 2;
    let task = PlantedTask {
        student: &student,
        inputs,
        targets,
        train: (0..half).collect(),
        val: (half..cfg.samples).collect(),
    };
    let settings = BilevelSettings {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr_w: cfg.lr_w,
        lr_arch: cfg.lr_arch,
        seed,
    };
    let history = run_bilevel(&task, &mut weights, &mut arch, &settings)?;
    let genotype = student.discretize(
        &arch,
        GenotypeMeta {
            seed,
            config_hash: String::new(),
        },
    );
    let late = genotype.msm_late.as_ref().expect("late module present");
    let middle_name = MsmKind::Middle.output_name();
    let middle_in_late = late.inputs.iter().any(|&i| late.pool[i] == middle_name);
    let op_recovered = late.nodes[0].op == PLANTED_OP;
    Ok(PlantedOutcome {
        seed,
        genotype,
        middle_in_late,
        op_recovered,
        final_val_loss: history.epochs.last().map_or(f64::NAN, |e| e.val_loss),
        history,
    })
}
