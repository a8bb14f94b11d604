//! The detector: per-modality reconstruction encoder-decoders (MRN), the
//! searchable fusion network (MFN) and the pixel discriminator (ADN).

use crate::autodiff::{Graph, Var};
use crate::data::{Sample, CHANNELS_A, CHANNELS_B};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::metrics::{AnomalyMap, Mask};
use crate::params::{uniform_tensor, Bound, ParamId, ParamStore};
use crate::search_space::{FeatureShapes, MfnConfig, Mfn, ModalityFeatures, MsmSet};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub k: usize,
    pub msms: MsmSet,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.channels == 0 || self.k == 0 {
            return Err(Error::config("channels and k_nodes must be positive"));
        }
        if self.msms.is_empty() {
            return Err(Error::invalid("no fusion modules selected"));
        }
        Ok(())
    }

    /// Encoder feature shapes: early at H, middle at H/2, H/4, H/4, late at H/8.
    pub fn feature_shapes(&self) -> FeatureShapes {
        let (c, h) = (self.channels, self.image_size);
        FeatureShapes {
            early: [c, h, h],
            middle: vec![[c, h / 2, h / 2], [c, h / 4, h / 4], [c, h / 4, h / 4]],
            late: [c, h / 8, h / 8],
        }
    }

    pub fn mfn_config(&self) -> MfnConfig {
        MfnConfig {
            modalities: vec![
                ("a".to_string(), self.feature_shapes()),
                ("b".to_string(), self.feature_shapes()),
            ],
            channels: self.channels,
            k: self.k,
            msms: self.msms,
        }
    }
}

/// One modality's encoder ladder, decoder hidden feature and reconstruction.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub early: Var,
    pub middle: Vec<Var>,
    pub late: Var,
    /// Last decoder feature before the reconstruction head, at input size.
    pub hidden: Var,
    pub reconstruction: Var,
}

impl FeatureBundle {
    pub fn features(&self) -> ModalityFeatures {
        ModalityFeatures {
            early: self.early,
            middle: self.middle.clone(),
            late: self.late,
        }
    }
}

/// Weights of one reconstruction network. Every layer is a `(weight, bias)`
/// pair of a 1×1 projection.
#[derive(Debug, Clone)]
pub struct Mrn {
    encoder: [(ParamId, ParamId); 5],
    decoder: [(ParamId, ParamId); 3],
    head: (ParamId, ParamId),
}

fn layer(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
) -> (ParamId, ParamId) {
    let bound = 1.0 / (c_in as f64).sqrt();
    (
        store.add(format!("{name}.w"), uniform_tensor(rng, &[c_out, c_in], bound)),
        store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
    )
}

impl Mrn {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        c_in: usize,
        c: usize,
    ) -> Mrn {
        let encoder = [
            layer(store, rng, &format!("{prefix}.enc0"), c, c_in),
            layer(store, rng, &format!("{prefix}.enc1"), c, c),
            layer(store, rng, &format!("{prefix}.enc2"), c, c),
            layer(store, rng, &format!("{prefix}.enc3"), c, c),
            layer(store, rng, &format!("{prefix}.enc4"), c, c),
        ];
        let decoder = [
            layer(store, rng, &format!("{prefix}.dec0"), c, 2 * c),
            layer(store, rng, &format!("{prefix}.dec1"), c, 2 * c),
            layer(store, rng, &format!("{prefix}.dec2"), c, 2 * c),
        ];
        let head = layer(store, rng, &format!("{prefix}.head"), c_in, c);
        Mrn {
            encoder,
            decoder,
            head,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(std::iter::once(&self.head))
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    /// Encoder: project at H, then pool-project to H/2, H/4, H/4, H/8.
    /// Decoder: upsample, concatenate the encoder feature of the same size
    /// (m3, m1, early) and project, back to H; then a linear head. The skips
    /// keep per-pixel detail next to pooled context.
    pub fn forward(&self, graph: &mut Graph, weights: &Bound, input: Var) -> Result<FeatureBundle> {
        let (_, h, w) = graph.value(input).chw()?;
        let proj = |graph: &mut Graph, x: Var, (pw, pb): (ParamId, ParamId)| -> Result<Var> {
            let l = graph.linear(x, weights[pw], weights[pb])?;
            Ok(graph.tanh(l))
        };
        let e = self.encoder;
        let early = proj(graph, input, e[0])?;
        let p = graph.avg_pool2(early)?;
        let m1 = proj(graph, p, e[1])?;
        let p = graph.avg_pool2(m1)?;
        let m2 = proj(graph, p, e[2])?;
        let m3 = proj(graph, m2, e[3])?;
        let p = graph.avg_pool2(m3)?;
        let late = proj(graph, p, e[4])?;

        let mut x = late;
        for (i, (&l, skip)) in self.decoder.iter().zip([m3, m1, early]).enumerate() {
            let scale = 1 << (2 - i);
            let up = graph.resize(x, h / scale, w / scale)?;
            let z = graph.concat(up, skip)?;
            x = proj(graph, z, l)?;
        }
        let reconstruction = graph.linear(x, weights[self.head.0], weights[self.head.1])?;
        Ok(FeatureBundle {
            early,
            middle: vec![m1, m2, m3],
            late,
            hidden: x,
            reconstruction,
        })
    }
}

/// Initial output logit, about 2% defect pixels.
pub const PRIOR_LOGIT: f64 = -4.0;

/// Pixel discriminator: two 1×1 projections over the fused feature and the
/// image decoder's hidden feature.
#[derive(Debug, Clone)]
pub struct Adn {
    first: (ParamId, ParamId),
    second: (ParamId, ParamId),
}

impl Adn {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, c: usize, hidden_inputs: usize) -> Adn {
        let first = layer(store, rng, "adn.0", c, c * (1 + hidden_inputs));
        let second = layer(store, rng, "adn.1", 1, c);
        // Start at the prior odds of a defect pixel instead of 0.5.
        store.get_mut(second.1).data_mut()[0] = PRIOR_LOGIT;
        Adn { first, second }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.first.0, self.first.1, self.second.0, self.second.1]
    }

    /// Returns a `1×H×W` map of per-pixel anomaly probabilities.
    pub fn forward(
        &self,
        graph: &mut Graph,
        weights: &Bound,
        fused: Var,
        hidden: &[Var],
    ) -> Result<Var> {
        let first = *hidden
            .first()
            .ok_or_else(|| Error::invalid("discriminator needs a hidden feature"))?;
        let (_, h, w) = graph.value(first).chw()?;
        let mut z = graph.resize(fused, h, w)?;
        for &x in hidden {
            z = graph.concat(z, x)?;
        }
        let l = graph.linear(z, weights[self.first.0], weights[self.first.1])?;
        let a = graph.tanh(l);
        let o = graph.linear(a, weights[self.second.0], weights[self.second.1])?;
        Ok(graph.sigmoid(o))
    }
}

/// How the fusion network is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum ArchMode<'a> {
    /// Softmax mixtures driven by bound architecture parameters.
    Relaxed(&'a Bound),
    Discrete(&'a Genotype),
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub bundles: Vec<FeatureBundle>,
    pub fused: Var,
    pub map: Var,
}

/// The complete detector layout. Parameter values live in the caller's
/// stores; this only records where each tensor sits.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetConfig,
    pub mrn: [Mrn; 2],
    pub mfn: Mfn,
    pub adn: Adn,
}

impl Network {
    /// Registers all weights in `weights` and the architecture parameters in
    /// `arch`, drawing initial values from `rng`.
    pub fn build(
        cfg: &NetConfig,
        weights: &mut ParamStore,
        arch: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Network> {
        cfg.validate()?;
        let c = cfg.channels;
        let mrn = [
            Mrn::register(weights, rng, "mrn.a", CHANNELS_A, c),
            Mrn::register(weights, rng, "mrn.b", CHANNELS_B, c),
        ];
        let mfn = Mfn::assemble(&cfg.mfn_config(), weights, arch, rng)?;
        let adn = Adn::register(weights, rng, c, 1);
        Ok(Network {
            config: *cfg,
            mrn,
            mfn,
            adn,
        })
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        weights: &Bound,
        mode: ArchMode<'_>,
        sample: &Sample,
    ) -> Result<Forward> {
        let size = self.config.image_size;
        if sample.size() != (size, size) {
            return Err(Error::shape(&[sample.mask.h, sample.mask.w], &[size, size]));
        }
        // Pixels live in [0, 1]; centre them so tanh starts in its linear range.
        let xa = graph.constant(sample.modality_a.clone());
        let xa = graph.affine(xa, 1.0, -0.5);
        let xb = graph.constant(sample.modality_b.clone());
        let xb = graph.affine(xb, 1.0, -0.5);
        let bundles = vec![
            self.mrn[0].forward(graph, weights, xa)?,
            self.mrn[1].forward(graph, weights, xb)?,
        ];
        let features: Vec<ModalityFeatures> = bundles.iter().map(FeatureBundle::features).collect();
        let fused = match mode {
            ArchMode::Relaxed(arch) => self.mfn.forward_relaxed(graph, weights, arch, &features)?,
            ArchMode::Discrete(g) => self.mfn.forward_discrete(graph, weights, g, &features)?,
        };
        // Only the image (modality a) decoder feeds the discriminator directly;
        // depth reaches it through the fusion network.
        let map = self.adn.forward(graph, weights, fused, &[bundles[0].hidden])?;
        Ok(Forward {
            bundles,
            fused,
            map,
        })
    }

    /// Anomaly map of one sample with constant (gradient-free) weights.
    pub fn anomaly_map(
        &self,
        weights: &ParamStore,
        genotype: &Genotype,
        sample: &Sample,
    ) -> Result<AnomalyMap> {
        let mut g = Graph::new();
        let w = weights.bind(&mut g, false);
        let f = self.forward(&mut g, &w, ArchMode::Discrete(genotype), sample)?;
        let (_, h, wd) = g.value(f.map).chw()?;
        AnomalyMap::new(h, wd, g.value(f.map).data().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rec: 1.0, seg: 1.0 }
    }
}

pub fn mask_tensor(mask: &Mask) -> Tensor {
    Tensor::new(
        vec![1, mask.h, mask.w],
        mask.pixels.iter().map(|&p| f64::from(u8::from(p))).collect(),
    )
    .expect("mask sizes agree")
}

/// `λ_rec · Σ_modality MSE(reconstruction, clean) + λ_seg · BCE(map, mask)`.
/// `clean` is the defect-free source of the sample fed to the network.
pub fn loss_total(
    graph: &mut Graph,
    forward: &Forward,
    clean: &Sample,
    mask: &Mask,
    weights: LossWeights,
) -> Result<Var> {
    let targets = [&clean.modality_a, &clean.modality_b];
    if forward.bundles.len() != targets.len() {
        return Err(Error::config("one feature bundle per modality expected"));
    }
    let mut rec: Option<Var> = None;
    for (b, t) in forward.bundles.iter().zip(targets) {
        let e = graph.squared_error(b.reconstruction, t.clone())?;
        rec = Some(match rec {
            None => e,
            Some(acc) => graph.add(acc, e)?,
        });
    }
    let rec = graph.affine(rec.expect("two modalities"), weights.rec, 0.0);
    let seg = graph.bce(forward.map, mask_tensor(mask))?;
    let seg = graph.affine(seg, weights.seg, 0.0);
    graph.add(rec, seg)
}

/// Mean of the top 1% pixel scores (at least one pixel).
pub fn image_score(map: &AnomalyMap) -> f64 {
    let mut v = map.scores.clone();
    v.sort_by(|a, b| b.total_cmp(a));
    let n = v.len().div_ceil(100).max(1);
    v[..n].iter().sum::<f64>() / n as f64
}
