//! Bilevel architecture search, fixed-architecture training, evaluation and
//! the ablation and few-shot drivers.

use crate::autodiff::{Graph, Var};
use crate::config::SearchConfig;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::genotype::{Genotype, GenotypeMeta};
use crate::metrics::{self, AnomalyMap, Mask, ScoredSet};
use crate::params::{Adam, Bound, ParamStore};
use crate::pipeline::{image_score, loss_total, ArchMode, LossWeights, Network};
use crate::rng::{self, INIT, SEARCH};
use crate::search_space::MsmSet;
use crate::tensor::argmax;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Which half of the search data a batch is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A differentiable objective over two index sets.
pub trait SearchTask {
    fn len(&self, split: Split) -> usize;

    /// Mean loss over `items` of `split`.
    fn batch_loss(
        &self,
        graph: &mut Graph,
        weights: &Bound,
        arch: &Bound,
        split: Split,
        items: &[usize],
        epoch: usize,
    ) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub val_loss: f64,
    /// Argmax index of every architecture vector, in store order.
    pub choices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHistory {
    /// Names of the architecture vectors that `choices` refer to.
    pub groups: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilevelSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr_w: f64,
    pub lr_arch: f64,
    pub seed: u64,
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

/// Weight half-step: architecture parameters enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn weight_step(
    task: &impl SearchTask,
    weights: &mut ParamStore,
    arch: &ParamStore,
    opt: &mut Adam,
    items: &[usize],
    epoch: usize,
    step: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let wb = weights.bind(&mut g, true);
    let ab = arch.bind(&mut g, false);
    let loss = task.batch_loss(&mut g, &wb, &ab, Split::Train, items, epoch)?;
    let value = g.value(loss).item();
    check_finite(value, step)?;
    let grads = g.backward(loss)?;
    let gw = weights.gradients(&g, &wb, &grads);
    opt.update(weights, &gw)?;
    Ok(value)
}

/// Architecture half-step on validation items: weights enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn arch_step(
    task: &impl SearchTask,
    weights: &ParamStore,
    arch: &mut ParamStore,
    opt: &mut Adam,
    items: &[usize],
    epoch: usize,
    step: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let wb = weights.bind(&mut g, false);
    let ab = arch.bind(&mut g, true);
    let loss = task.batch_loss(&mut g, &wb, &ab, Split::Val, items, epoch)?;
    let value = g.value(loss).item();
    check_finite(value, step)?;
    let grads = g.backward(loss)?;
    let ga = arch.gradients(&g, &ab, &grads);
    opt.update(arch, &ga)?;
    Ok(value)
}

fn shuffled(n: usize, seed: u64, keys: &[u64]) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng::keyed(seed, SEARCH, keys));
    v
}

/// First-order alternating optimization. Each step updates the weights on a
/// training batch, then the architecture on a validation batch.
pub fn run_bilevel(
    task: &impl SearchTask,
    weights: &mut ParamStore,
    arch: &mut ParamStore,
    s: &BilevelSettings,
) -> Result<SearchHistory> {
    let (n_train, n_val) = (task.len(Split::Train), task.len(Split::Val));
    if n_train == 0 || n_val == 0 || s.batch == 0 {
        return Err(Error::invalid("search needs non-empty train and validation splits"));
    }
    let mut opt_w = Adam::new(weights, s.lr_w);
    let mut opt_a = Adam::new(arch, s.lr_arch);
    let groups = arch.iter().map(|(n, _)| n.to_string()).collect();
    let mut epochs = Vec::with_capacity(s.epochs);
    let mut step = 0;
    for epoch in 0..s.epochs {
        let train = shuffled(n_train, s.seed, &[0, epoch as u64]);
        let val = shuffled(n_val, s.seed, &[1, epoch as u64]);
        let (mut tl, mut vl, mut count) = (0.0, 0.0, 0);
        for (b, chunk) in train.chunks(s.batch).enumerate() {
            let start = b * s.batch;
            let val_items: Vec<usize> = (0..chunk.len()).map(|i| val[(start + i) % n_val]).collect();
            tl += weight_step(task, weights, arch, &mut opt_w, chunk, epoch, step)?;
            vl += arch_step(task, weights, arch, &mut opt_a, &val_items, epoch, step)?;
            count += 1;
            step += 1;
        }
        epochs.push(EpochRecord {
            train_loss: tl / count as f64,
            val_loss: vl / count as f64,
            choices: arch.iter().map(|(_, t)| argmax(t.data())).collect(),
        });
    }
    Ok(SearchHistory { groups, epochs })
}

/// Reconstruction and segmentation objective over online-generated defects.
pub struct DetectionTask<'a> {
    pub network: &'a Network,
    pub data: &'a Dataset,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub loss: LossWeights,
}

impl DetectionTask<'_> {
    fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Mean of per-sample losses on the online-augmented training images `items`.
#[allow(clippy::too_many_arguments)]
fn detection_loss(
    graph: &mut Graph,
    network: &Network,
    data: &Dataset,
    weights: &Bound,
    mode: ArchMode<'_>,
    items: &[usize],
    epoch: usize,
    loss: LossWeights,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &i in items {
        let input = data.augment(i, epoch)?;
        let f = network.forward(graph, weights, mode, &input)?;
        let l = loss_total(graph, &f, &data.train[i], &input.mask, loss)?;
        total = Some(match total {
            None => l,
            Some(acc) => graph.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    Ok(graph.affine(total, 1.0 / items.len() as f64, 0.0))
}

impl SearchTask for DetectionTask<'_> {
    fn len(&self, split: Split) -> usize {
        self.split(split).len()
    }

    fn batch_loss(
        &self,
        graph: &mut Graph,
        weights: &Bound,
        arch: &Bound,
        split: Split,
        items: &[usize],
        epoch: usize,
    ) -> Result<Var> {
        let ids: Vec<usize> = items.iter().map(|&i| self.split(split)[i]).collect();
        detection_loss(
            graph,
            self.network,
            self.data,
            weights,
            ArchMode::Relaxed(arch),
            &ids,
            epoch,
            self.loss,
        )
    }
}

/// Everything a trained detector needs: the layout is rebuilt from
/// `config`, `msms` and `genotype`; the stores hold the values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: SearchConfig,
    pub seed: u64,
    pub msms: MsmSet,
    pub genotype: Genotype,
    pub weights: ParamStore,
    pub arch: ParamStore,
    pub opt_w: Adam,
    pub opt_arch: Adam,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

impl ModelState {
    pub fn network(&self) -> Result<Network> {
        let mut w = ParamStore::new();
        let mut a = ParamStore::new();
        let net = Network::build(
            &self.config.net_config(self.msms),
            &mut w,
            &mut a,
            &mut rng::keyed(0, INIT, &[]),
        )?;
        if w.len() != self.weights.len() || a.len() != self.arch.len() {
            return Err(Error::config("stored parameters do not match the network layout"));
        }
        Ok(net)
    }
}

/// Splits the normal training images into disjoint search halves.
pub fn search_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = shuffled(n, seed, &[2]);
    let half = n / 2;
    let mut train = order[..half].to_vec();
    let mut val = order[half..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub history: SearchHistory,
    pub weights: ParamStore,
    pub arch: ParamStore,
}

pub fn bilevel_search(cfg: &SearchConfig, data: &Dataset, msms: MsmSet, seed: u64) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut weights = ParamStore::new();
    let mut arch = ParamStore::new();
    let network = Network::build(
        &cfg.net_config(msms),
        &mut weights,
        &mut arch,
        &mut rng::keyed(seed, INIT, &[0]),
    )?;
    let (train, val) = search_split(data.train.len(), seed);
    let task = DetectionTask {
        network: &network,
        data,
        train,
        val,
        loss: cfg.loss_weights(),
    };
    let settings = BilevelSettings {
        epochs: cfg.epochs_search,
        batch: cfg.batch,
        lr_w: cfg.lr_w,
        lr_arch: cfg.lr_arch,
        seed,
    };
    let history = run_bilevel(&task, &mut weights, &mut arch, &settings)?;
    let genotype = network.mfn.discretize(
        &arch,
        GenotypeMeta {
            seed,
            config_hash: cfg.hash(),
        },
    );
    Ok(SearchOutcome {
        genotype,
        history,
        weights,
        arch,
    })
}

/// Trains freshly initialized weights of the discrete network described by
/// `genotype` for `cfg.epochs_train` epochs.
pub fn train_fixed(genotype: &Genotype, cfg: &SearchConfig, data: &Dataset, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let msms = MsmSet {
        early: genotype.msm_early.is_some(),
        middle: genotype.msm_middle.is_some(),
        late: genotype.msm_late.is_some(),
    };
    let mut weights = ParamStore::new();
    let mut arch = ParamStore::new();
    let network = Network::build(
        &cfg.net_config(msms),
        &mut weights,
        &mut arch,
        &mut rng::keyed(seed, INIT, &[1]),
    )?;
    network.mfn.check_genotype(genotype)?;
    let mut opt_w = Adam::new(&weights, cfg.lr_w);
    let opt_arch = Adam::new(&arch, 0.0);
    let n = data.train.len();
    if n == 0 {
        return Err(Error::invalid("no training images"));
    }
    let mut losses = Vec::with_capacity(cfg.epochs_train);
    let mut step = 0;
    for epoch in 0..cfg.epochs_train {
        let order = shuffled(n, seed, &[3, epoch as u64]);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in order.chunks(cfg.batch) {
            let mut g = Graph::new();
            let wb = weights.bind(&mut g, true);
            let loss = detection_loss(
                &mut g,
                &network,
                data,
                &wb,
                ArchMode::Discrete(genotype),
                chunk,
                epoch,
                cfg.loss_weights(),
            )?;
            let value = g.value(loss).item();
            check_finite(value, step)?;
            let grads = g.backward(loss)?;
            let gw = weights.gradients(&g, &wb, &grads);
            opt_w.update(&mut weights, &gw)?;
            sum += value;
            count += 1;
            step += 1;
        }
        losses.push(sum / count as f64);
    }
    Ok(ModelState {
        config: cfg.clone(),
        seed,
        msms,
        genotype: genotype.clone(),
        weights,
        arch,
        opt_w,
        opt_arch,
        losses,
    })
}

/// Anything that produces a per-pixel anomaly map for a sample.
pub trait AnomalyScorer {
    fn anomaly_map(&self, sample: &Sample) -> Result<AnomalyMap>;
}

/// A trained detector bound to its rebuilt layout.
pub struct Detector<'a> {
    pub state: &'a ModelState,
    pub network: Network,
}

impl<'a> Detector<'a> {
    pub fn new(state: &'a ModelState) -> Result<Self> {
        Ok(Detector {
            network: state.network()?,
            state,
        })
    }
}

impl AnomalyScorer for Detector<'_> {
    fn anomaly_map(&self, sample: &Sample) -> Result<AnomalyMap> {
        self.network
            .anomaly_map(&self.state.weights, &self.state.genotype, sample)
    }
}

/// Predicts the ground-truth mask exactly.
pub struct MaskOracle;

impl AnomalyScorer for MaskOracle {
    fn anomaly_map(&self, sample: &Sample) -> Result<AnomalyMap> {
        Ok(AnomalyMap::from_mask(&sample.mask))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub aupro: f64,
}

pub fn evaluate(scorer: &impl AnomalyScorer, test: &[Sample], fpr_cap: f64) -> Result<Metrics> {
    let maps = test
        .iter()
        .map(|s| scorer.anomaly_map(s))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<Mask> = test.iter().map(|s| s.mask.clone()).collect();
    let image = ScoredSet::new(
        maps.iter().map(image_score).collect(),
        test.iter().map(|s| s.label).collect(),
    )?;
    Ok(Metrics {
        i_auroc: metrics::auroc(&image)?,
        p_auroc: metrics::p_auroc(&maps, &masks)?,
        aupro: metrics::aupro(&maps, &masks, fpr_cap)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub aupro: f64,
    pub config_hash: String,
    pub seed: u64,
    pub wallclock_s: f64,
    pub config: SearchConfig,
}

impl MetricsReport {
    pub fn new(m: Metrics, cfg: &SearchConfig, seed: u64, started: Instant) -> Self {
        MetricsReport {
            i_auroc: m.i_auroc,
            p_auroc: m.p_auroc,
            aupro: m.aupro,
            config_hash: cfg.hash(),
            seed,
            wallclock_s: started.elapsed().as_secs_f64(),
            config: cfg.clone(),
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            i_auroc: self.i_auroc,
            p_auroc: self.p_auroc,
            aupro: self.aupro,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Search, retrain and evaluate with only the modules in `subset`.
pub fn ablate_msm(cfg: &SearchConfig, data: &Dataset, subset: MsmSet, seed: u64) -> Result<MetricsReport> {
    if subset.is_empty() {
        return Err(Error::invalid("ablation subset is empty"));
    }
    let started = Instant::now();
    let found = bilevel_search(cfg, data, subset, seed)?;
    let state = train_fixed(&found.genotype, cfg, data, seed)?;
    let m = evaluate(&Detector::new(&state)?, &data.test, cfg.fpr_cap)?;
    Ok(MetricsReport::new(m, cfg, seed, started))
}

/// `k` normal training images chosen with the run seed.
pub fn fewshot_subset(data: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 || k > data.train.len() {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={} available training images",
            data.train.len()
        )));
    }
    if k == data.train.len() {
        return Ok(data.clone());
    }
    let mut picked = shuffled(data.train.len(), seed, &[4, k as u64]);
    picked.truncate(k);
    picked.sort_unstable();
    let mut sub = data.clone();
    sub.train = picked.iter().map(|&i| data.train[i].clone()).collect();
    Ok(sub)
}

/// Epochs over `k` images that take as many optimizer steps as
/// `cfg.epochs_train` epochs over `n` images.
pub fn fewshot_epochs(cfg: &SearchConfig, n: usize, k: usize) -> usize {
    let steps = cfg.epochs_train * n.div_ceil(cfg.batch);
    steps.div_ceil(k.div_ceil(cfg.batch).max(1))
}

/// Retrains `genotype` on `k` normal images and evaluates on the full test
/// set. Training keeps the full-data step budget, so smaller `k` differs
/// only in how many distinct images the steps see.
pub fn fewshot(
    cfg: &SearchConfig,
    data: &Dataset,
    genotype: &Genotype,
    k: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let started = Instant::now();
    cfg.validate()?;
    let sub = fewshot_subset(data, k, seed)?;
    let cfg = SearchConfig {
        epochs_train: fewshot_epochs(cfg, data.train.len(), k),
        ..cfg.clone()
    };
    let state = train_fixed(genotype, &cfg, &sub, seed)?;
    let m = evaluate(&Detector::new(&state)?, &data.test, cfg.fpr_cap)?;
    Ok(MetricsReport::new(m, &cfg, seed, started))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SearchConfig {
        SearchConfig {
            epochs_search: 1,
            epochs_train: 1,
            batch: 2,
            channels: 2,
            image_size: 8,
            n_train: 4,
            n_test: 4,
            k_nodes: 1,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let (a, b) = search_split(11, 3);
        assert_eq!(a.len(), 5);
        assert_eq!(b.len(), 6);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn oracle_and_constant_scorers() {
        let data = Dataset::generate(&tiny().data_config(), 0).unwrap();
        let m = evaluate(&MaskOracle, &data.test, 0.3).unwrap();
        assert_eq!((m.i_auroc, m.p_auroc, m.aupro), (1.0, 1.0, 1.0));

        struct Flat;
        impl AnomalyScorer for Flat {
            fn anomaly_map(&self, s: &Sample) -> Result<AnomalyMap> {
                Ok(AnomalyMap::constant(s.mask.h, s.mask.w, 0.4))
            }
        }
        assert_eq!(evaluate(&Flat, &data.test, 0.3).unwrap().i_auroc, 0.5);
        let normals: Vec<Sample> = data.test.iter().filter(|s| !s.label).cloned().collect();
        assert!(matches!(
            evaluate(&MaskOracle, &normals, 0.3),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn zero_epoch_training_keeps_initialization() {
        let mut cfg = tiny();
        cfg.epochs_train = 0;
        let data = Dataset::generate(&cfg.data_config(), 1).unwrap();
        let found = bilevel_search(&cfg, &data, MsmSet::FULL, 1).unwrap();
        let a = train_fixed(&found.genotype, &cfg, &data, 1).unwrap();
        let mut w = ParamStore::new();
        let mut ar = ParamStore::new();
        Network::build(&cfg.net_config(MsmSet::FULL), &mut w, &mut ar, &mut rng::keyed(1, INIT, &[1]))
            .unwrap();
        assert_eq!(a.weights, w);
        assert!(a.losses.is_empty());
    }

    #[test]
    fn fewshot_subset_bounds() {
        let data = Dataset::generate(&tiny().data_config(), 2).unwrap();
        assert!(fewshot_subset(&data, 5, 0).is_err());
        assert!(fewshot_subset(&data, 0, 0).is_err());
        assert_eq!(fewshot_subset(&data, 4, 0).unwrap(), data);
        assert_eq!(fewshot_subset(&data, 2, 0).unwrap().train.len(), 2);
    }

    #[test]
    fn fewshot_keeps_the_step_budget() {
        let cfg = SearchConfig {
            epochs_train: 60,
            batch: 8,
            ..SearchConfig::default()
        };
        assert_eq!(fewshot_epochs(&cfg, 200, 200), 60);
        assert_eq!(fewshot_epochs(&cfg, 200, 5), 1500);
        assert_eq!(fewshot_epochs(&cfg, 200, 10), 750);
        assert_eq!(fewshot_epochs(&cfg, 200, 50), 215);
        let zero = SearchConfig { epochs_train: 0, ..cfg };
        assert_eq!(fewshot_epochs(&zero, 200, 5), 0);
    }

    #[test]
    fn empty_ablation_subset_rejected() {
        let cfg = tiny();
        let data = Dataset::generate(&cfg.data_config(), 0).unwrap();
        let none = MsmSet {
            early: false,
            middle: false,
            late: false,
        };
        assert!(matches!(ablate_msm(&cfg, &data, none, 0), Err(Error::InvalidArgument(_))));
    }
}
