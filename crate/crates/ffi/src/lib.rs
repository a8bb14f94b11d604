//! C ABI over `adnas`.
//!
//! Every fallible function returns an [`AdnasStatus`]; on failure the message
//! is available from [`adnas_last_error`] on the same thread. Objects are
//! opaque handles released with their `_free` function, and strings returned
//! through `char **` are released with [`adnas_string_free`].
//!
//! No function unwinds across the boundary: panics are caught and reported
//! as [`AdnasStatus::Panic`].

use adnas::config::SearchConfig;
use adnas::data::Dataset;
use adnas::dst::{self, Opinion};
use adnas::error::Error;
use adnas::genotype::Genotype;
use adnas::metrics::{self, AnomalyMap, Connectivity, Mask, ScoredSet};
use adnas::search;
use adnas::search_space::MsmSet;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdnasStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    TotalConflict = 5,
    Precondition = 6,
    Sampling = 7,
    UndefinedMetric = 8,
    Divergence = 9,
    Parse = 10,
    Io = 11,
    Utf8 = 12,
    Panic = 13,
}

impl From<&Error> for AdnasStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => AdnasStatus::InvalidArgument,
            Error::Shape { .. } => AdnasStatus::Shape,
            Error::Config(_) => AdnasStatus::Config,
            Error::TotalConflict(_) => AdnasStatus::TotalConflict,
            Error::Precondition(_) => AdnasStatus::Precondition,
            Error::Sampling(_) => AdnasStatus::Sampling,
            Error::UndefinedMetric(_) => AdnasStatus::UndefinedMetric,
            Error::Divergence { .. } => AdnasStatus::Divergence,
            Error::Parse(_) => AdnasStatus::Parse,
            Error::Io(_) => AdnasStatus::Io,
        }
    }
}

/// A subjective opinion: per-class beliefs plus uncertainty.
pub struct AdnasOpinion(Opinion);

/// A discretized fusion architecture.
pub struct AdnasGenotype(Genotype);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    let c = CString::new(text).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(AdnasStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(AdnasStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AdnasStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AdnasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdnasStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            AdnasStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(AdnasStatus::Utf8, format!("{what}: {e}")))
}

fn c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(AdnasStatus::InvalidArgument, "string contains NUL".into()))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn adnas_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adnas_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn adnas_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an opinion over `n` classes from `belief[0..n]` and `uncertainty`.
///
/// # Safety
/// `belief` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adnas_opinion_new(
    belief: *const f64,
    n: usize,
    uncertainty: f64,
    out_opinion: *mut *mut AdnasOpinion,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_opinion, "out_opinion")?;
        let b = slice(belief, n, "belief")?.to_vec();
        let o = Opinion::new(b, uncertainty)?;
        *dst = Box::into_raw(Box::new(AdnasOpinion(o)));
        Ok(())
    })
}

/// Releases an opinion. NULL is ignored.
///
/// # Safety
/// `o` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn adnas_opinion_free(o: *mut AdnasOpinion) {
    if !o.is_null() {
        drop(Box::from_raw(o));
    }
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `o` must be NULL or a live opinion.
#[no_mangle]
pub unsafe extern "C" fn adnas_opinion_classes(o: *const AdnasOpinion) -> usize {
    o.as_ref().map_or(0, |o| o.0.classes())
}

/// Copies the beliefs into `belief[0..len]`; `len` must equal the class count.
///
/// # Safety
/// `o` must be a live opinion and `belief` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn adnas_opinion_belief(
    o: *const AdnasOpinion,
    belief: *mut f64,
    len: usize,
) -> AdnasStatus {
    guard(|| {
        let o = handle(o, "opinion")?;
        if len != o.0.classes() {
            return Err(Failure(
                AdnasStatus::Shape,
                format!("buffer of {len} for {} classes", o.0.classes()),
            ));
        }
        if belief.is_null() {
            return Err(null("belief"));
        }
        std::slice::from_raw_parts_mut(belief, len).copy_from_slice(o.0.belief());
        Ok(())
    })
}

/// Uncertainty mass, or NaN for NULL.
///
/// # Safety
/// `o` must be NULL or a live opinion.
#[no_mangle]
pub unsafe extern "C" fn adnas_opinion_uncertainty(o: *const AdnasOpinion) -> f64 {
    o.as_ref().map_or(f64::NAN, |o| o.0.uncertainty())
}

/// Conflict mass between two opinions.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adnas_conflict(
    l: *const AdnasOpinion,
    m: *const AdnasOpinion,
    out_z: *mut f64,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_z, "out_z")?;
        *dst = dst::conflict(&handle(l, "l")?.0, &handle(m, "m")?.0)?;
        Ok(())
    })
}

/// Combines two opinions into a new handle.
///
/// # Safety
/// Handles must be live; `out_opinion` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adnas_combine(
    l: *const AdnasOpinion,
    m: *const AdnasOpinion,
    out_opinion: *mut *mut AdnasOpinion,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_opinion, "out_opinion")?;
        let f = dst::combine(&handle(l, "l")?.0, &handle(m, "m")?.0)?;
        *dst = Box::into_raw(Box::new(AdnasOpinion(f)));
        Ok(())
    })
}

/// Upper bound on the loss of belief in class `g` when `m` is fused into `l`.
///
/// # Safety
/// Handles must be live; `out_bound` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adnas_degradation_bound(
    l: *const AdnasOpinion,
    m: *const AdnasOpinion,
    g: usize,
    out_bound: *mut f64,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_bound, "out_bound")?;
        *dst = dst::degradation_bound(&handle(l, "l")?.0, &handle(m, "m")?.0, g)?;
        Ok(())
    })
}

/// Area under the ROC curve of `scores` against 0/1 `labels`.
///
/// # Safety
/// Both arrays must hold `n` elements; `out_auroc` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adnas_auroc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out_auroc: *mut f64,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_auroc, "out_auroc")?;
        let s = slice(scores, n, "scores")?.to_vec();
        let l = slice(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        *dst = metrics::auroc(&ScoredSet::new(s, l)?)?;
        Ok(())
    })
}

unsafe fn maps_and_masks(
    maps: *const f64,
    masks: *const u8,
    count: usize,
    h: usize,
    w: usize,
) -> Result<(Vec<AnomalyMap>, Vec<Mask>), Failure> {
    let px = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(count))
        .ok_or_else(|| Failure(AdnasStatus::InvalidArgument, "size overflow".into()))?;
    let m = slice(maps, px, "maps")?;
    let k = slice(masks, px, "masks")?;
    let per = h * w;
    let mut out_maps = Vec::with_capacity(count);
    let mut out_masks = Vec::with_capacity(count);
    for i in 0..count {
        let r = i * per..(i + 1) * per;
        out_maps.push(AnomalyMap::new(h, w, m[r.clone()].to_vec())?);
        out_masks.push(Mask::from_pixels(h, w, k[r].iter().map(|&v| v != 0).collect())?);
    }
    Ok((out_maps, out_masks))
}

/// Pixel-level AUROC over `count` row-major `h×w` maps and 0/1 masks.
///
/// # Safety
/// `maps` and `masks` must hold `count*h*w` elements.
#[no_mangle]
pub unsafe extern "C" fn adnas_p_auroc(
    maps: *const f64,
    masks: *const u8,
    count: usize,
    h: usize,
    w: usize,
    out_auroc: *mut f64,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_auroc, "out_auroc")?;
        let (m, k) = maps_and_masks(maps, masks, count, h, w)?;
        *dst = metrics::p_auroc(&m, &k)?;
        Ok(())
    })
}

/// Normalized area under the per-region-overlap curve up to `fpr_cap`.
///
/// # Safety
/// `maps` and `masks` must hold `count*h*w` elements.
#[no_mangle]
pub unsafe extern "C" fn adnas_aupro(
    maps: *const f64,
    masks: *const u8,
    count: usize,
    h: usize,
    w: usize,
    fpr_cap: f64,
    out_aupro: *mut f64,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_aupro, "out_aupro")?;
        let (m, k) = maps_and_masks(maps, masks, count, h, w)?;
        *dst = metrics::aupro(&m, &k, fpr_cap)?;
        Ok(())
    })
}

/// Number of 8-connected regions in a row-major 0/1 mask. When `labels` is
/// not NULL it receives, per pixel, 0 for background or the 1-based region
/// index in scanline order of first appearance.
///
/// # Safety
/// `mask` must hold `h*w` bytes; `labels` NULL or room for `h*w` values.
#[no_mangle]
pub unsafe extern "C" fn adnas_connected_components(
    mask: *const u8,
    h: usize,
    w: usize,
    labels: *mut u32,
    out_count: *mut usize,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_count, "out_count")?;
        let px = h
            .checked_mul(w)
            .ok_or_else(|| Failure(AdnasStatus::InvalidArgument, "size overflow".into()))?;
        let pixels = slice(mask, px, "mask")?.iter().map(|&v| v != 0).collect();
        let regions = metrics::connected_components(&Mask::from_pixels(h, w, pixels)?, Connectivity::Eight);
        if !labels.is_null() {
            let lab = std::slice::from_raw_parts_mut(labels, px);
            lab.fill(0);
            for (i, r) in regions.regions.iter().enumerate() {
                for &p in r {
                    lab[p] = (i + 1) as u32;
                }
            }
        }
        *dst = regions.regions.len();
        Ok(())
    })
}

/// Parses and validates a genotype from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_genotype` writable.
#[no_mangle]
pub unsafe extern "C" fn adnas_genotype_parse(
    json: *const c_char,
    out_genotype: *mut *mut AdnasGenotype,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_genotype, "out_genotype")?;
        let g = Genotype::parse(text(json, "json")?)?;
        *dst = Box::into_raw(Box::new(AdnasGenotype(g)));
        Ok(())
    })
}

/// Serializes a genotype to JSON. Free the result with [`adnas_string_free`].
///
/// # Safety
/// `g` must be live; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn adnas_genotype_to_json(
    g: *const AdnasGenotype,
    out_json: *mut *mut c_char,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_json, "out_json")?;
        *dst = c_string(handle(g, "genotype")?.0.to_json())?;
        Ok(())
    })
}

/// Releases a genotype. NULL is ignored.
///
/// # Safety
/// `g` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn adnas_genotype_free(g: *mut AdnasGenotype) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Validates `key = value` configuration text (NULL means defaults) and
/// returns its canonical form.
///
/// # Safety
/// `config` NULL or NUL-terminated; `out_canonical` writable.
#[no_mangle]
pub unsafe extern "C" fn adnas_config_canonical(
    config: *const c_char,
    out_canonical: *mut *mut c_char,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_canonical, "out_canonical")?;
        *dst = c_string(load_config(config)?.canonical())?;
        Ok(())
    })
}

unsafe fn load_config(config: *const c_char) -> Result<SearchConfig, Failure> {
    if config.is_null() {
        Ok(SearchConfig::default())
    } else {
        Ok(SearchConfig::parse(text(config, "config")?)?)
    }
}

/// Runs the bilevel search on the synthetic benchmark for `seed`.
/// `config` is `key = value` text or NULL for defaults; `msms` names the
/// modules (e.g. `"early,middle,late"`) or NULL for all three.
///
/// # Safety
/// String arguments NULL or NUL-terminated; `out_genotype` writable.
#[no_mangle]
pub unsafe extern "C" fn adnas_search(
    config: *const c_char,
    msms: *const c_char,
    seed: u64,
    out_genotype: *mut *mut AdnasGenotype,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_genotype, "out_genotype")?;
        let cfg = load_config(config)?;
        let set: MsmSet = if msms.is_null() {
            MsmSet::FULL
        } else {
            text(msms, "msms")?.parse()?
        };
        let data = Dataset::generate(&cfg.data_config(), seed)?;
        let found = search::bilevel_search(&cfg, &data, set, seed)?;
        *dst = Box::into_raw(Box::new(AdnasGenotype(found.genotype)));
        Ok(())
    })
}

/// Monte-Carlo check of the evidence-combination guarantees; writes the JSON
/// report. Free it with [`adnas_string_free`].
///
/// # Safety
/// `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adnas_dst_verify(
    trials: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> AdnasStatus {
    guard(|| {
        let dst = out(out_json, "out_json")?;
        let mut rng = adnas::rng::stream(seed, "dst");
        let report = dst::verify(&mut rng, trials)?;
        let json = serde_json::to_string(&report)
            .map_err(|e| Failure(AdnasStatus::Parse, e.to_string()))?;
        *dst = c_string(json)?;
        Ok(())
    })
}
