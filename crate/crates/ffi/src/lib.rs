//! C ABI over the steering core.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `*_new`/`*_load` call and released by the matching `*_free`. Functions
//! return a [`P2aStatus`]; on failure the message is kept per thread and can
//! be copied out with [`p2a_last_error`]. Panics never unwind into C.

use p2a_core::artifacts::read_predictions;
use p2a_core::dataset::{load_target, Audit};
use p2a_core::detection::evaluate_map;
use p2a_core::encoder::{
    embed_from_layer1, encode_image_layer1, encode_text, read_weights_file, write_weights_file, Embedding,
    EncoderWeights, PromptString, IMAGE_CHANNELS,
};
use p2a_core::steering::{cosine_loss, pin, steer, SteeringConfig, StyleSet, StyleStats};
use p2a_core::tensor::{channel_stats, Tensor};
use p2a_core::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Embedding width of the built-in encoder.
pub const P2A_EMBED_DIM: usize = 32;
/// Channel count of layer-1 feature maps from the built-in encoder.
pub const P2A_LAYER1_CHANNELS: usize = 8;

const _: () = assert!(P2A_EMBED_DIM == p2a_core::encoder::EMBED_DIM);
const _: () = assert!(P2A_LAYER1_CHANNELS == p2a_core::encoder::LAYER1_CHANNELS);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum P2aStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Degenerate = 5,
    NonFinite = 6,
    Data = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for P2aStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => P2aStatus::Config,
            Error::Shape(_) => P2aStatus::Shape,
            Error::Degenerate(_) | Error::EmptyInput(_) => P2aStatus::Degenerate,
            Error::NonFinite(_) => P2aStatus::NonFinite,
            Error::Io { .. } => P2aStatus::Io,
            _ => P2aStatus::Data,
        }
    }
}

pub struct P2aEncoder(EncoderWeights);
pub struct P2aFeatureMap(Tensor);
pub struct P2aEmbedding(Embedding);
pub struct P2aStyleSet(StyleSet);

/// Steering options. `steps = 0` returns the input statistics.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct P2aSteerConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(P2aStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(P2aStatus::from(&e), e.to_string())
    }
}

fn fail<T>(status: P2aStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> P2aStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (P2aStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(_) => (P2aStatus::Panic, "internal panic".to_string()),
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    match p.as_ref() {
        Some(r) => Ok(r),
        None => fail(P2aStatus::NullPointer, format!("{what} is null")),
    }
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    match p.as_mut() {
        Some(r) => Ok(r),
        None => fail(P2aStatus::NullPointer, format!("{what} is null")),
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(P2aStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(P2aStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(P2aStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), Failure> {
    if len < src.len() {
        return fail(
            P2aStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        );
    }
    if dst.is_null() {
        return fail(P2aStatus::NullPointer, "output buffer is null");
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

fn boxed<T>(out: &mut *mut T, v: T) {
    *out = Box::into_raw(Box::new(v));
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn p2a_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message (NUL-terminated, possibly
/// truncated) into `buf` and returns the buffer size the full message needs.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn p2a_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Deterministic encoder weights for `seed`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn p2a_encoder_new(seed: u64, out: *mut *mut P2aEncoder) -> P2aStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        boxed(out, P2aEncoder(EncoderWeights::from_seed(seed)));
        Ok(())
    })
}

/// Loads encoder weights from a P2AW file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn p2a_encoder_load(path: *const c_char, out: *mut *mut P2aEncoder) -> P2aStatus {
    guard(|| {
        let path = text(path, "path")?;
        let out = out_ptr(out, "out")?;
        boxed(out, P2aEncoder(read_weights_file(path)?));
        Ok(())
    })
}

/// # Safety
/// `enc` must be a live encoder handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn p2a_encoder_save(enc: *const P2aEncoder, path: *const c_char) -> P2aStatus {
    guard(|| {
        let enc = obj(enc, "encoder")?;
        write_weights_file(text(path, "path")?, &enc.0)?;
        Ok(())
    })
}

/// # Safety
/// `enc` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn p2a_encoder_free(enc: *mut P2aEncoder) {
    free(enc)
}

/// Copies a `c x h x w` row-major array into a new feature map.
///
/// # Safety
/// `data` must point to `c*h*w` readable doubles; `out` is a handle slot.
#[no_mangle]
pub unsafe extern "C" fn p2a_feature_map_new(
    data: *const f64,
    c: usize,
    h: usize,
    w: usize,
    out: *mut *mut P2aFeatureMap,
) -> P2aStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let n = c.checked_mul(h).and_then(|v| v.checked_mul(w));
        let Some(n) = n.filter(|n| *n > 0) else {
            return fail(P2aStatus::Shape, "feature map dimensions must be positive");
        };
        let t = Tensor::new(vec![c, h, w], slice(data, n, "data")?.to_vec())?;
        boxed(out, P2aFeatureMap(t));
        Ok(())
    })
}

/// Layer-1 feature map of a `3 x h x w` image.
///
/// # Safety
/// `enc` is a live encoder, `data` points to `3*h*w` doubles, `out` is a
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn p2a_feature_map_from_image(
    enc: *const P2aEncoder,
    data: *const f64,
    h: usize,
    w: usize,
    out: *mut *mut P2aFeatureMap,
) -> P2aStatus {
    guard(|| {
        let enc = obj(enc, "encoder")?;
        let out = out_ptr(out, "out")?;
        let n = IMAGE_CHANNELS * h * w;
        if n == 0 {
            return fail(P2aStatus::Shape, "image dimensions must be positive");
        }
        let img = Tensor::new(vec![IMAGE_CHANNELS, h, w], slice(data, n, "data")?.to_vec())?;
        boxed(out, P2aFeatureMap(encode_image_layer1(&img, &enc.0)?));
        Ok(())
    })
}

/// # Safety
/// `map` is a live handle; the out pointers are valid or null.
#[no_mangle]
pub unsafe extern "C" fn p2a_feature_map_shape(
    map: *const P2aFeatureMap,
    c: *mut usize,
    h: *mut usize,
    w: *mut usize,
) -> P2aStatus {
    guard(|| {
        let map = obj(map, "feature map")?;
        let (mc, mh, mw) = map.0.dims3()?;
        for (p, v) in [(c, mc), (h, mh), (w, mw)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the map's values (row-major) into `buf`.
///
/// # Safety
/// `map` is a live handle and `buf` has room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn p2a_feature_map_read(map: *const P2aFeatureMap, buf: *mut f64, len: usize) -> P2aStatus {
    guard(|| copy_out(obj(map, "feature map")?.0.data(), buf, len))
}

/// # Safety
/// `map` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn p2a_feature_map_free(map: *mut P2aFeatureMap) {
    free(map)
}

/// Per-channel mean and population standard deviation.
///
/// # Safety
/// `map` is a live handle; `mu` and `sigma` have room for `c` doubles.
#[no_mangle]
pub unsafe extern "C" fn p2a_channel_stats(
    map: *const P2aFeatureMap,
    mu: *mut f64,
    sigma: *mut f64,
    c: usize,
) -> P2aStatus {
    guard(|| {
        let st = channel_stats(&obj(map, "feature map")?.0)?;
        copy_out(&st.mu, mu, c)?;
        copy_out(&st.sigma, sigma, c)
    })
}

/// Re-normalises `map` toward the target statistics `(mu, sigma)`.
///
/// # Safety
/// `map` is a live handle; `mu` and `sigma` point to `c` doubles; `out` is a
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn p2a_pin(
    map: *const P2aFeatureMap,
    mu: *const f64,
    sigma: *const f64,
    c: usize,
    out: *mut *mut P2aFeatureMap,
) -> P2aStatus {
    guard(|| {
        let map = obj(map, "feature map")?;
        let out = out_ptr(out, "out")?;
        let s = StyleStats {
            mu: slice(mu, c, "mu")?.to_vec(),
            sigma: slice(sigma, c, "sigma")?.to_vec(),
        };
        boxed(out, P2aFeatureMap(pin(&map.0, &s)?));
        Ok(())
    })
}

/// Embedding of a text prompt.
///
/// # Safety
/// `enc` is a live encoder, `prompt` a NUL-terminated string, `out` a
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn p2a_encode_text(
    enc: *const P2aEncoder,
    prompt: *const c_char,
    out: *mut *mut P2aEmbedding,
) -> P2aStatus {
    guard(|| {
        let enc = obj(enc, "encoder")?;
        let out = out_ptr(out, "out")?;
        let p = PromptString::new(text(prompt, "prompt")?)?;
        boxed(out, P2aEmbedding(encode_text(&p, &enc.0)?));
        Ok(())
    })
}

/// Embedding of a layer-1 feature map.
///
/// # Safety
/// `enc` and `map` are live handles, `out` a handle slot.
#[no_mangle]
pub unsafe extern "C" fn p2a_embed_feature_map(
    enc: *const P2aEncoder,
    map: *const P2aFeatureMap,
    out: *mut *mut P2aEmbedding,
) -> P2aStatus {
    guard(|| {
        let enc = obj(enc, "encoder")?;
        let map = obj(map, "feature map")?;
        let out = out_ptr(out, "out")?;
        boxed(out, P2aEmbedding(embed_from_layer1(&map.0, &enc.0)?));
        Ok(())
    })
}

/// Copies the unit-norm embedding into `buf`.
///
/// # Safety
/// `emb` is a live handle and `buf` has room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn p2a_embedding_read(emb: *const P2aEmbedding, buf: *mut f64, len: usize) -> P2aStatus {
    guard(|| copy_out(obj(emb, "embedding")?.0.as_slice(), buf, len))
}

/// # Safety
/// `emb` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn p2a_embedding_free(emb: *mut P2aEmbedding) {
    free(emb)
}

/// `1 - cos(a, b)`, in `[0, 2]`.
///
/// # Safety
/// `a` and `b` are live handles and `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn p2a_cosine_loss(a: *const P2aEmbedding, b: *const P2aEmbedding, out: *mut f64) -> P2aStatus {
    guard(|| {
        let (a, b) = (obj(a, "a")?, obj(b, "b")?);
        *out_ptr(out, "out")? = cosine_loss(&a.0, &b.0)?;
        Ok(())
    })
}

/// Optimises one style per feature map toward `trg`.
///
/// # Safety
/// `maps` points to `n` live feature-map handles; `enc`, `trg` and `cfg` are
/// valid; `out` is a handle slot.
#[no_mangle]
pub unsafe extern "C" fn p2a_steer(
    enc: *const P2aEncoder,
    maps: *const *const P2aFeatureMap,
    n: usize,
    trg: *const P2aEmbedding,
    cfg: *const P2aSteerConfig,
    out: *mut *mut P2aStyleSet,
) -> P2aStatus {
    guard(|| {
        let enc = obj(enc, "encoder")?;
        let trg = obj(trg, "target")?;
        let cfg = obj(cfg, "config")?;
        let out = out_ptr(out, "out")?;
        if n > 0 && maps.is_null() {
            return fail(P2aStatus::NullPointer, "maps is null");
        }
        let handles = if n == 0 { &[][..] } else { std::slice::from_raw_parts(maps, n) };
        let features = handles
            .iter()
            .map(|&m| obj(m, "feature map").map(|m| m.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = SteeringConfig {
            steps: cfg.steps,
            lr: cfg.lr,
            momentum: cfg.momentum,
            ..SteeringConfig::default()
        };
        boxed(out, P2aStyleSet(steer(&features, &trg.0, &cfg, &enc.0)?));
        Ok(())
    })
}

/// Number of entries; 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn p2a_style_set_len(set: *const P2aStyleSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// Copies entry `i`: statistics into `mu`/`sigma` (room for `c` each) and the
/// initial and final steering loss into the optional loss pointers.
///
/// # Safety
/// `set` is a live handle; buffers are valid for `c` doubles; loss pointers
/// are valid or null.
#[no_mangle]
pub unsafe extern "C" fn p2a_style_set_entry(
    set: *const P2aStyleSet,
    i: usize,
    mu: *mut f64,
    sigma: *mut f64,
    c: usize,
    loss_init: *mut f64,
    loss_final: *mut f64,
) -> P2aStatus {
    guard(|| {
        let set = obj(set, "style set")?;
        let Some(e) = set.0.entries.get(i) else {
            return fail(P2aStatus::Shape, format!("entry {i} of {}", set.0.len()));
        };
        copy_out(&e.mu, mu, c)?;
        copy_out(&e.sigma, sigma, c)?;
        if let Some(p) = loss_init.as_mut() {
            *p = e.loss_init;
        }
        if let Some(p) = loss_final.as_mut() {
            *p = e.loss_final;
        }
        Ok(())
    })
}

/// # Safety
/// `set` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn p2a_style_set_free(set: *mut P2aStyleSet) {
    free(set)
}

/// mAP at IoU `iou` of a predictions JSONL file against a dataset JSONL file.
///
/// # Safety
/// Paths are NUL-terminated strings and `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn p2a_eval_map(
    dataset: *const c_char,
    preds: *const c_char,
    iou: f64,
    out: *mut f64,
) -> P2aStatus {
    guard(|| {
        let dataset = Path::new(text(dataset, "dataset")?);
        let preds = Path::new(text(preds, "preds")?);
        let out = out_ptr(out, "out")?;
        if !(0.0..=1.0).contains(&iou) {
            return fail(P2aStatus::Config, format!("iou must be in [0, 1], got {iou}"));
        }
        let (images, vault) = load_target(dataset, &Audit::new())?;
        let detections = read_predictions(preds)?;
        if detections.len() != images.len() {
            return fail(
                P2aStatus::Data,
                format!("{} prediction lines for {} images", detections.len(), images.len()),
            );
        }
        *out = evaluate_map(&detections, vault.reveal(), iou)?.map50;
        Ok(())
    })
}
