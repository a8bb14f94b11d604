//! Binary model checkpoints: magic, a JSON header describing layout and
//! metadata, then every parameter and optimizer moment as little-endian f64.

use crate::config::SearchConfig;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::params::{Adam, ParamStore};
use crate::search::ModelState;
use crate::search_space::MsmSet;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ADNM";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: SearchConfig,
    seed: u64,
    msms: String,
    genotype: Genotype,
    weights: Vec<(String, Vec<usize>)>,
    arch: Vec<(String, Vec<usize>)>,
    opt_w: (f64, u64),
    opt_arch: (f64, u64),
    epochs: usize,
}

fn layout(store: &ParamStore) -> Vec<(String, Vec<usize>)> {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect()
}

fn put(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let header = Header {
        config: state.config.clone(),
        seed: state.seed,
        msms: state.msms.to_string(),
        genotype: state.genotype.clone(),
        weights: layout(&state.weights),
        arch: layout(&state.arch),
        opt_w: (state.opt_w.lr, state.opt_w.step),
        opt_arch: (state.opt_arch.lr, state.opt_arch.step),
        epochs: state.losses.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for store in [&state.weights, &state.arch] {
        for (_, t) in store.iter() {
            put(&mut out, t.data());
        }
    }
    for opt in [&state.opt_w, &state.opt_arch] {
        let (m, v) = opt.moments();
        for block in m.iter().chain(v) {
            put(&mut out, block);
        }
    }
    put(&mut out, &state.losses);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn read_store(r: &mut Reader<'_>, layout: &[(String, Vec<usize>)]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, shape) in layout {
        let n = shape.iter().product();
        store.add(name.clone(), Tensor::new(shape.clone(), r.f64s(n)?)?);
    }
    Ok(store)
}

fn read_adam(r: &mut Reader<'_>, store: &ParamStore, (lr, step): (f64, u64)) -> Result<Adam> {
    let sizes: Vec<usize> = store.iter().map(|(_, t)| t.len()).collect();
    let m = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
    let v = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
    Ok(Adam::from_parts(lr, step, m, v))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse("not a model checkpoint".into()));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
    let weights = read_store(&mut r, &header.weights)?;
    let arch = read_store(&mut r, &header.arch)?;
    let opt_w = read_adam(&mut r, &weights, header.opt_w)?;
    let opt_arch = read_adam(&mut r, &arch, header.opt_arch)?;
    let losses = r.f64s(header.epochs)?;
    if !r.bytes.is_empty() {
        return Err(Error::Parse("trailing bytes in checkpoint".into()));
    }
    header.genotype.validate()?;
    let state = ModelState {
        config: header.config,
        seed: header.seed,
        msms: header.msms.parse::<MsmSet>()?,
        genotype: header.genotype,
        weights,
        arch,
        opt_w,
        opt_arch,
        losses,
    };
    state.network()?.mfn.check_genotype(&state.genotype)?;
    Ok(state)
}

pub fn save(path: &Path, state: &ModelState) -> Result<()> {
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}
