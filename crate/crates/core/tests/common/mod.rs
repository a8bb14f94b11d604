//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use adnas::autodiff::Graph;
use adnas::config::SearchConfig;
use adnas::data::Dataset;
use adnas::params::ParamStore;
use adnas::pipeline::{loss_total, ArchMode, LossWeights, Network};
use adnas::rng;
use adnas::search_space::MsmSet;
use rand::seq::index::sample;

/// Gradients below this magnitude are compared absolutely: central
/// differences at h = 1e-5 carry roughly 1e-11 of rounding noise, so a
/// relative comparison of smaller values measures only that noise.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct FdEntry {
    pub name: String,
    pub offset: usize,
    pub numeric: f64,
    pub analytic: f64,
}

impl FdEntry {
    pub fn rel_error(&self) -> f64 {
        let scale = self.numeric.abs().max(self.analytic.abs()).max(FD_FLOOR);
        (self.numeric - self.analytic).abs() / scale
    }
}

fn batch_loss(net: &Network, w: &ParamStore, a: &ParamStore, data: &Dataset, items: &[usize]) -> f64 {
    let mut g = Graph::new();
    let wb = w.bind(&mut g, false);
    let ab = a.bind(&mut g, false);
    let mut total = 0.0;
    for &i in items {
        let s = data.augment(i, 0).unwrap();
        let f = net.forward(&mut g, &wb, ArchMode::Relaxed(&ab), &s).unwrap();
        let l = loss_total(&mut g, &f, &data.train[i], &s.mask, LossWeights::default()).unwrap();
        total += g.value(l).item();
    }
    total / items.len() as f64
}

fn central(
    store: &mut ParamStore,
    flat: usize,
    h: f64,
    mut eval: impl FnMut(&ParamStore) -> f64,
) -> (String, usize, f64) {
    let (id, off) = store.locate(flat);
    let orig = store.get(id).data()[off];
    store.get_mut(id).data_mut()[off] = orig + h;
    let up = eval(store);
    store.get_mut(id).data_mut()[off] = orig - h;
    let down = eval(store);
    store.get_mut(id).data_mut()[off] = orig;
    (store.name(id).to_string(), off, (up - down) / (2.0 * h))
}

/// Compares reverse-mode gradients of the relaxed detector loss on a
/// two-sample batch with central differences, for every architecture entry
/// and a `weight_fraction` sample of weights. Anomalies are forced so the
/// segmentation term sees defect pixels.
pub fn gradient_check(cfg: &SearchConfig, seed: u64, weight_fraction: f64, h: f64) -> (Vec<FdEntry>, Vec<FdEntry>) {
    let cfg = SearchConfig {
        keep_normal: 0.0,
        ..cfg.clone()
    };
    let data = Dataset::generate(&cfg.data_config(), seed).unwrap();
    let mut w = ParamStore::new();
    let mut a = ParamStore::new();
    let net = Network::build(&cfg.net_config(MsmSet::FULL), &mut w, &mut a, &mut rng::keyed(seed, rng::INIT, &[0])).unwrap();
    // Move the architecture off its near-symmetric start so every mixture
    // weight is exercised.
    let mut r = rng::keyed(seed, "fd", &[0]);
    for id in a.ids().collect::<Vec<_>>() {
        let t = adnas::params::uniform_tensor(&mut r, a.get(id).shape(), 1.0);
        *a.get_mut(id) = t;
    }
    let items = [0, 1];

    let mut g = Graph::new();
    let wb = w.bind(&mut g, true);
    let ab = a.bind(&mut g, true);
    let mut total = None;
    for &i in &items {
        let s = data.augment(i, 0).unwrap();
        let f = net.forward(&mut g, &wb, ArchMode::Relaxed(&ab), &s).unwrap();
        let l = loss_total(&mut g, &f, &data.train[i], &s.mask, LossWeights::default()).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l).unwrap(),
        });
    }
    let loss = g.affine(total.unwrap(), 0.5, 0.0);
    let grads = g.backward(loss).unwrap();
    let gw = w.gradients(&g, &wb, &grads);
    let ga = a.gradients(&g, &ab, &grads);

    let mut arch_entries = Vec::new();
    for flat in 0..a.numel() {
        let (id, off) = a.locate(flat);
        let analytic = ga[id.0].data()[off];
        let wc = w.clone();
        let (name, offset, numeric) = central(&mut a, flat, h, |a| batch_loss(&net, &wc, a, &data, &items));
        arch_entries.push(FdEntry { name, offset, numeric, analytic });
    }
    let n = ((w.numel() as f64) * weight_fraction).ceil() as usize;
    let mut picks = sample(&mut r, w.numel(), n).into_vec();
    picks.sort_unstable();
    let mut weight_entries = Vec::new();
    for flat in picks {
        let (id, off) = w.locate(flat);
        let analytic = gw[id.0].data()[off];
        let ac = a.clone();
        let (name, offset, numeric) = central(&mut w, flat, h, |w| batch_loss(&net, w, &ac, &data, &items));
        weight_entries.push(FdEntry { name, offset, numeric, analytic });
    }
    (arch_entries, weight_entries)
}

/// Builds a random detector, saturates every architecture vector on a random
/// entry (gap 50) and returns the largest difference between the relaxed and
/// the discretized forward pass, over the fused feature and the anomaly map.
pub fn relaxation_gap(seed: u64) -> f64 {
    use adnas::genotype::GenotypeMeta;
    use rand::Rng;
    let mut r = rng::keyed(seed, "relax", &[]);
    let sets = MsmSet::all_nonempty();
    let net_cfg = adnas::pipeline::NetConfig {
        image_size: [8, 16][r.random_range(0..2)],
        channels: r.random_range(1..=4),
        k: r.random_range(1..=3),
        msms: sets[r.random_range(0..sets.len())],
    };
    let mut w = ParamStore::new();
    let mut a = ParamStore::new();
    let net = Network::build(&net_cfg, &mut w, &mut a, &mut r).unwrap();
    let mut arch = net.mfn.arch_params(&a);
    let saturate = |v: &mut Vec<f64>, hot: usize| {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[hot] = 50.0;
    };
    for m in &mut arch.msms {
        let n = m.alpha_ex[0].len();
        let first = r.random_range(0..n);
        let second = (first + r.random_range(1..n)) % n;
        saturate(&mut m.alpha_ex[0], first);
        saturate(&mut m.alpha_ex[1], second);
        for pair in &mut m.alpha_in {
            for v in pair.iter_mut() {
                let hot = r.random_range(0..v.len());
                saturate(v, hot);
            }
        }
        for v in &mut m.beta_op {
            let hot = r.random_range(0..v.len());
            saturate(v, hot);
        }
    }
    net.mfn.set_arch_params(&mut a, &arch).unwrap();
    let genotype = net.mfn.discretize(&a, GenotypeMeta { seed, config_hash: String::new() });

    let sample = adnas::data::generate_normal(&mut r, net_cfg.image_size);
    let mut g = Graph::new();
    let wb = w.bind(&mut g, false);
    let ab = a.bind(&mut g, false);
    let relaxed = net.forward(&mut g, &wb, ArchMode::Relaxed(&ab), &sample).unwrap();
    let discrete = net.forward(&mut g, &wb, ArchMode::Discrete(&genotype), &sample).unwrap();
    let fused = g.value(relaxed.fused).max_abs_diff(g.value(discrete.fused));
    let map = g.value(relaxed.map).max_abs_diff(g.value(discrete.map));
    fused.max(map)
}

/// AUROC as the fraction of (positive, negative) pairs the positive wins,
/// ties counting one half.
pub fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                twice_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

/// Recursive 8-connected flood fill; returns the number of regions.
pub fn flood_fill_count(h: usize, w: usize, pixels: &[bool]) -> usize {
    fn fill(h: usize, w: usize, pixels: &[bool], seen: &mut [bool], y: usize, x: usize) {
        if seen[y * w + x] || !pixels[y * w + x] {
            return;
        }
        seen[y * w + x] = true;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    fill(h, w, pixels, seen, ny as usize, nx as usize);
                }
            }
        }
    }
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            if pixels[y * w + x] && !seen[y * w + x] {
                count += 1;
                fill(h, w, pixels, &mut seen, y, x);
            }
        }
    }
    count
}

/// Brute-force AUPRO: recount FPR and per-region overlap at every distinct
/// score, then integrate the piecewise-linear curve from (0, 0) up to `cap`.
pub fn aupro_oracle(maps: &[Vec<f64>], masks: &[Vec<bool>], h: usize, w: usize, cap: f64) -> f64 {
    let mut regions: Vec<Vec<(usize, usize)>> = Vec::new();
    for (img, m) in masks.iter().enumerate() {
        let mut label = vec![0usize; h * w];
        let mut next = 0;
        for start in 0..h * w {
            if !m[start] || label[start] != 0 {
                continue;
            }
            next += 1;
            let mut stack = vec![start];
            label[start] = next;
            let mut pix = Vec::new();
            while let Some(p) = stack.pop() {
                pix.push((img, p));
                let (y, x) = ((p / w) as i64, (p % w) as i64);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let q = ny as usize * w + nx as usize;
                        if m[q] && label[q] == 0 {
                            label[q] = next;
                            stack.push(q);
                        }
                    }
                }
            }
            regions.push(pix);
        }
    }
    let normals: Vec<f64> = maps
        .iter()
        .zip(masks)
        .flat_map(|(s, m)| s.iter().zip(m).filter(|(_, &a)| !a).map(|(&v, _)| v))
        .collect();
    let mut thresholds: Vec<f64> = maps.iter().flatten().copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let fpr = normals.iter().filter(|&&v| v >= t).count() as f64 / normals.len() as f64;
        let pro = regions
            .iter()
            .map(|r| r.iter().filter(|&&(i, p)| maps[i][p] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, pro));
    }
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= cap {
            break;
        }
        if x1 <= cap {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
            area += (cap - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    (area / cap).min(1.0)
}

/// Random scores drawn from a few levels so ties are common.
pub fn tied_scores(r: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    let levels = r.random_range(2..=8);
    (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect()
}

/// Independent Bernoulli pixels.
pub fn random_mask(r: &mut impl rand::Rng, h: usize, w: usize, density: f64) -> Vec<bool> {
    (0..h * w).map(|_| r.random_bool(density)).collect()
}

pub struct OracleTally {
    pub auroc_cases: usize,
    pub auroc_mismatches: usize,
    pub aupro_cases: usize,
    pub aupro_worst: f64,
    pub cc_cases: usize,
    pub cc_mismatches: usize,
}

/// Runs the three metric oracles on random instances.
pub fn metric_oracles(seed: u64, auroc_cases: usize, aupro_cases: usize, cc_cases: usize) -> OracleTally {
    use adnas::metrics::{self, AnomalyMap, Connectivity, Mask, ScoredSet};
    use rand::Rng;
    let mut r = rng::keyed(seed, "oracle", &[]);
    let mut t = OracleTally {
        auroc_cases,
        auroc_mismatches: 0,
        aupro_cases,
        aupro_worst: 0.0,
        cc_cases,
        cc_mismatches: 0,
    };
    for _ in 0..auroc_cases {
        let n = r.random_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores = tied_scores(&mut r, n);
        let got = metrics::auroc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        if got != auroc_oracle(&scores, &labels) {
            t.auroc_mismatches += 1;
        }
    }
    let (h, w) = (16, 16);
    for _ in 0..aupro_cases {
        let count = r.random_range(1..=3);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..count {
            let m = random_mask(&mut r, h, w, 0.08);
            let s: Vec<f64> = m
                .iter()
                .map(|&a| {
                    let base = if a { 0.3 } else { 0.0 };
                    ((base + r.random_range(0.0..0.7f64)) * 20.0).round() / 20.0
                })
                .collect();
            maps.push(s);
            masks.push(m);
        }
        masks[0][0] = true;
        masks[0][1] = false;
        let cap = [0.3, 1.0, r.random_range(0.05..1.0)][r.random_range(0..3)];
        let am: Vec<AnomalyMap> = maps.iter().map(|s| AnomalyMap::new(h, w, s.clone()).unwrap()).collect();
        let mk: Vec<Mask> = masks.iter().map(|m| Mask::from_pixels(h, w, m.clone()).unwrap()).collect();
        let got = metrics::aupro(&am, &mk, cap).unwrap();
        let want = aupro_oracle(&maps, &masks, h, w, cap);
        t.aupro_worst = t.aupro_worst.max((got - want).abs());
    }
    for _ in 0..cc_cases {
        let density = r.random_range(0.05..0.6);
        let m = random_mask(&mut r, h, w, density);
        let got = metrics::connected_components(&Mask::from_pixels(h, w, m.clone()).unwrap(), Connectivity::Eight);
        if got.regions.len() != flood_fill_count(h, w, &m) {
            t.cc_mismatches += 1;
        }
    }
    t
}
