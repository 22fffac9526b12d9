//! C ABI over the `nmm` crate.
//!
//! Every fallible call returns an [`NmmStatus`]; results go through out
//! pointers. On failure `nmm_last_error()` describes what went wrong on the
//! calling thread. Objects are opaque handles released with their `_free`
//! function. Node ids and labels are `size_t`; α is row-major N×C and
//! attention is concatenated neighborhood rows in ascending neighbor order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use nmm::graph::{load_edge_list, make_grid_graph, Features};
use nmm::kernel::{exact_marginal_with_budget, log_joint, EnumBudget};
use nmm::model::ModelDocument;
use nmm::predict::{predict_exact_smallset, predict_with_error, ParticleSet, Weighting};
use nmm::target::{ising_log_partition, mean_field_fit, IsingModel};
use nmm::variational::elbo_estimate;
use nmm::{Graph, LabeledNodes, NeighborAssignment, NmmError, NodeSet};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    BudgetExceeded = 4,
    Io = 5,
    Format = 6,
    FingerprintMismatch = 7,
    Numeric = 8,
    Panic = 9,
}

/// Particle weighting for `nmm_predict_particles`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmmWeighting {
    Uniform = 0,
    Importance = 1,
}

pub struct NmmGraph {
    inner: Graph,
}

pub struct NmmParams {
    inner: nmm::NmmParams,
}

pub struct NmmIsing {
    inner: IsingModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &NmmError) -> NmmStatus {
    match e {
        NmmError::Io { .. } => NmmStatus::Io,
        NmmError::Parse { .. } | NmmError::Format(_) => NmmStatus::Format,
        NmmError::IdOutOfRange { .. } | NmmError::NodeOutOfRange { .. } => NmmStatus::OutOfRange,
        NmmError::BudgetExceeded { .. } => NmmStatus::BudgetExceeded,
        NmmError::FingerprintMismatch { .. } => NmmStatus::FingerprintMismatch,
        NmmError::NonFinite { .. } | NmmError::Diverged { .. } | NmmError::Domain(_) => NmmStatus::Numeric,
        _ => NmmStatus::InvalidArgument,
    }
}

struct Fail(NmmStatus, String);

impl From<NmmError> for Fail {
    fn from(e: NmmError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NmmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NmmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NmmStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn as_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

unsafe fn as_out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(NmmStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn labeled(g: &Graph, p: &nmm::NmmParams, nodes: &[usize], labels: &[usize]) -> Result<LabeledNodes, Fail> {
    Ok(LabeledNodes::new(nodes.to_vec(), labels.to_vec(), g.num_nodes(), p.num_classes())?)
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn nmm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- graphs ----

/// Undirected graph from `num_edges` pairs stored flat in `edges`
/// (u0, v0, u1, v1, ...).
///
/// # Safety
/// `edges` must hold `2 * num_edges` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_graph_new(num_nodes: usize, edges: *const usize, num_edges: usize, out: *mut *mut NmmGraph) -> NmmStatus {
    guard(|| {
        let out = unsafe { as_out(out, "out") }?;
        let flat = unsafe { as_slice(edges, 2 * num_edges, "edges") }?;
        let pairs: Vec<(usize, usize)> = flat.chunks_exact(2).map(|e| (e[0], e[1])).collect();
        let inner = Graph::from_edges(num_nodes, &pairs)?;
        *out = Box::into_raw(Box::new(NmmGraph { inner }));
        Ok(())
    })
}

/// height×width 4-neighbor grid, nodes in row-major order.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_graph_grid(height: usize, width: usize, out: *mut *mut NmmGraph) -> NmmStatus {
    guard(|| {
        let out = unsafe { as_out(out, "out") }?;
        *out = Box::into_raw(Box::new(NmmGraph {
            inner: make_grid_graph(height, width)?,
        }));
        Ok(())
    })
}

/// Reads a whitespace-separated edge list. `num_nodes` may exceed the
/// largest id to add isolated trailing nodes.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_graph_load(path: *const c_char, num_nodes: usize, out: *mut *mut NmmGraph) -> NmmStatus {
    guard(|| {
        let out = unsafe { as_out(out, "out") }?;
        let path = unsafe { path_arg(path) }?;
        *out = Box::into_raw(Box::new(NmmGraph {
            inner: load_edge_list(path, num_nodes)?,
        }));
        Ok(())
    })
}

/// Attaches row-major `num_nodes × dim` features, replacing any present.
///
/// # Safety
/// `g` must be a live graph handle; `data` must hold `num_nodes * dim` values.
#[no_mangle]
pub unsafe extern "C" fn nmm_graph_set_features(g: *mut NmmGraph, data: *const f64, dim: usize) -> NmmStatus {
    guard(|| {
        let g = unsafe { g.as_mut() }.ok_or_else(|| null("graph"))?;
        let n = g.inner.num_nodes();
        let x = unsafe { as_slice(data, n * dim, "data") }?;
        let features = Features::new(n, dim, x.to_vec())?;
        g.inner = g.inner.clone().with_features(features)?;
        Ok(())
    })
}

/// # Safety
/// `g` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nmm_graph_free(g: *mut NmmGraph) {
    if !g.is_null() {
        drop(unsafe { Box::from_raw(g) });
    }
}

/// # Safety
/// `g` must be a live graph handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_graph_num_nodes(g: *const NmmGraph, out: *mut usize) -> NmmStatus {
    guard(|| {
        *unsafe { as_out(out, "out") }? = unsafe { as_ref(g, "graph") }?.inner.num_nodes();
        Ok(())
    })
}

/// Size of n(i), which includes i itself.
///
/// # Safety
/// `g` must be a live graph handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_graph_neighborhood_size(g: *const NmmGraph, node: usize, out: *mut usize) -> NmmStatus {
    guard(|| {
        let g = unsafe { as_ref(g, "graph") }?;
        *unsafe { as_out(out, "out") }? = g.inner.neighborhood(node)?.len();
        Ok(())
    })
}

// ---- parameters ----

/// Explicit α (N×C) and attention rows.
///
/// # Safety
/// `alpha` and `attn` must hold `alpha_len` and `attn_len` values; `g` must
/// be a live graph handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_params_new(
    g: *const NmmGraph,
    num_classes: usize,
    alpha: *const f64,
    alpha_len: usize,
    attn: *const f64,
    attn_len: usize,
    out: *mut *mut NmmParams,
) -> NmmStatus {
    guard(|| {
        let g = unsafe { as_ref(g, "graph") }?;
        let out = unsafe { as_out(out, "out") }?;
        let alpha = unsafe { as_slice(alpha, alpha_len, "alpha") }?;
        let attn = unsafe { as_slice(attn, attn_len, "attn") }?;
        let inner = nmm::NmmParams::new(&g.inner, num_classes, alpha.to_vec(), attn.to_vec())?;
        *out = Box::into_raw(Box::new(NmmParams { inner }));
        Ok(())
    })
}

/// The same α (length C) at every node and uniform attention.
///
/// # Safety
/// `alpha` must hold `num_classes` values; `g` must be a live graph handle;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_params_uniform(
    g: *const NmmGraph,
    alpha: *const f64,
    num_classes: usize,
    out: *mut *mut NmmParams,
) -> NmmStatus {
    guard(|| {
        let g = unsafe { as_ref(g, "graph") }?;
        let out = unsafe { as_out(out, "out") }?;
        let alpha = unsafe { as_slice(alpha, num_classes, "alpha") }?;
        let inner = nmm::NmmParams::uniform(&g.inner, alpha)?;
        *out = Box::into_raw(Box::new(NmmParams { inner }));
        Ok(())
    })
}

/// α and attention from a saved model file. Refuses a graph whose
/// fingerprint differs from the one the model was saved with.
///
/// # Safety
/// `path` must be a NUL-terminated string; `g` must be a live graph handle;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_params_load_model(path: *const c_char, g: *const NmmGraph, out: *mut *mut NmmParams) -> NmmStatus {
    guard(|| {
        let g = unsafe { as_ref(g, "graph") }?;
        let out = unsafe { as_out(out, "out") }?;
        let path = unsafe { path_arg(path) }?;
        let inner = ModelDocument::load(path)?.params(&g.inner)?;
        *out = Box::into_raw(Box::new(NmmParams { inner }));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nmm_params_free(p: *mut NmmParams) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// # Safety
/// `p` must be a live params handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_params_num_classes(p: *const NmmParams, out: *mut usize) -> NmmStatus {
    guard(|| {
        *unsafe { as_out(out, "out") }? = unsafe { as_ref(p, "params") }?.inner.num_classes();
        Ok(())
    })
}

// ---- kernel ----

/// ln p(y_τ, c_τ) for nodes τ with labels and chosen neighbors.
///
/// # Safety
/// `nodes`, `labels` and `choices` must each hold `len` values; handles must
/// be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_log_joint(
    g: *const NmmGraph,
    p: *const NmmParams,
    nodes: *const usize,
    labels: *const usize,
    choices: *const usize,
    len: usize,
    out: *mut f64,
) -> NmmStatus {
    guard(|| {
        let (g, p) = unsafe { (as_ref(g, "graph")?, as_ref(p, "params")?) };
        let out = unsafe { as_out(out, "out") }?;
        let nodes = unsafe { as_slice(nodes, len, "nodes") }?;
        let labels = unsafe { as_slice(labels, len, "labels") }?;
        let choices = unsafe { as_slice(choices, len, "choices") }?;
        let y = labeled(&g.inner, &p.inner, nodes, labels)?;
        *out = log_joint(&g.inner, &p.inner, &y, &NeighborAssignment(choices.to_vec()))?;
        Ok(())
    })
}

/// ln p(y_τ) by enumeration under the default budget.
///
/// # Safety
/// `nodes` and `labels` must each hold `len` values; handles must be live;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_exact_marginal(
    g: *const NmmGraph,
    p: *const NmmParams,
    nodes: *const usize,
    labels: *const usize,
    len: usize,
    out: *mut f64,
) -> NmmStatus {
    guard(|| {
        let (g, p) = unsafe { (as_ref(g, "graph")?, as_ref(p, "params")?) };
        let out = unsafe { as_out(out, "out") }?;
        let nodes = unsafe { as_slice(nodes, len, "nodes") }?;
        let labels = unsafe { as_slice(labels, len, "labels") }?;
        let y = labeled(&g.inner, &p.inner, nodes, labels)?;
        *out = exact_marginal_with_budget(&g.inner, &p.inner, &y, EnumBudget::default())?;
        Ok(())
    })
}

/// Monte Carlo ELBO of ln p(y_τ) from `samples` draws.
///
/// # Safety
/// `nodes` and `labels` must each hold `len` values; handles must be live;
/// `elbo` must be writable and `std_error` null or writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_elbo(
    g: *const NmmGraph,
    p: *const NmmParams,
    nodes: *const usize,
    labels: *const usize,
    len: usize,
    samples: usize,
    seed: u64,
    elbo: *mut f64,
    std_error: *mut f64,
) -> NmmStatus {
    guard(|| {
        let (g, p) = unsafe { (as_ref(g, "graph")?, as_ref(p, "params")?) };
        let elbo = unsafe { as_out(elbo, "elbo") }?;
        let nodes = unsafe { as_slice(nodes, len, "nodes") }?;
        let labels = unsafe { as_slice(labels, len, "labels") }?;
        let y = labeled(&g.inner, &p.inner, nodes, labels)?;
        let est = elbo_estimate(&g.inner, &p.inner, &y, samples, seed)?;
        *elbo = est.elbo;
        if let Some(se) = unsafe { std_error.as_mut() } {
            *se = est.std_error();
        }
        Ok(())
    })
}

// ---- prediction ----

/// p(y_target | y_τ) by enumeration, written to `probs` (length C).
///
/// # Safety
/// `nodes` and `labels` must each hold `len` values; `probs` must hold
/// `num_classes` values; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn nmm_predict_exact(
    g: *const NmmGraph,
    p: *const NmmParams,
    nodes: *const usize,
    labels: *const usize,
    len: usize,
    target: usize,
    probs: *mut f64,
    num_classes: usize,
) -> NmmStatus {
    guard(|| {
        let (g, p) = unsafe { (as_ref(g, "graph")?, as_ref(p, "params")?) };
        let nodes = unsafe { as_slice(nodes, len, "nodes") }?;
        let labels = unsafe { as_slice(labels, len, "labels") }?;
        let out = unsafe { out_probs(probs, num_classes, p) }?;
        let y = labeled(&g.inner, &p.inner, nodes, labels)?;
        let kappa = NodeSet::new(vec![target], g.inner.num_nodes())?;
        let post = predict_exact_smallset(&g.inner, &p.inner, &y, &kappa, EnumBudget::default())?;
        out.copy_from_slice(&post.marginal(0));
        Ok(())
    })
}

/// Particle estimate of p(y_target | y_τ); `std_error` may be null.
///
/// # Safety
/// `nodes` and `labels` must each hold `len` values; `probs` and a non-null
/// `std_error` must hold `num_classes` values; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn nmm_predict_particles(
    g: *const NmmGraph,
    p: *const NmmParams,
    nodes: *const usize,
    labels: *const usize,
    len: usize,
    target: usize,
    particles: usize,
    seed: u64,
    weighting: NmmWeighting,
    probs: *mut f64,
    std_error: *mut f64,
    num_classes: usize,
) -> NmmStatus {
    guard(|| {
        let (g, p) = unsafe { (as_ref(g, "graph")?, as_ref(p, "params")?) };
        let nodes = unsafe { as_slice(nodes, len, "nodes") }?;
        let labels = unsafe { as_slice(labels, len, "labels") }?;
        let out = unsafe { out_probs(probs, num_classes, p) }?;
        let y = labeled(&g.inner, &p.inner, nodes, labels)?;
        let weighting = match weighting {
            NmmWeighting::Uniform => Weighting::Uniform,
            NmmWeighting::Importance => Weighting::Importance,
        };
        let ps = ParticleSet::sample(&g.inner, &p.inner, &y, particles, seed, weighting)?;
        let m = predict_with_error(&g.inner, &p.inner, &ps, target)?;
        out.copy_from_slice(&m.probs);
        if !std_error.is_null() {
            unsafe { slice::from_raw_parts_mut(std_error, num_classes) }.copy_from_slice(&m.std_error);
        }
        Ok(())
    })
}

unsafe fn out_probs<'a>(probs: *mut f64, num_classes: usize, p: &NmmParams) -> Result<&'a mut [f64], Fail> {
    if probs.is_null() {
        return Err(null("probs"));
    }
    if num_classes != p.inner.num_classes() {
        return Err(Fail(
            NmmStatus::InvalidArgument,
            format!("probs has room for {num_classes} classes, model has {}", p.inner.num_classes()),
        ));
    }
    Ok(unsafe { slice::from_raw_parts_mut(probs, num_classes) })
}

// ---- Ising targets ----

/// Ising grid with uniform coupling `j` and field `h`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_ising_grid(height: usize, width: usize, j: f64, h: f64, out: *mut *mut NmmIsing) -> NmmStatus {
    guard(|| {
        let out = unsafe { as_out(out, "out") }?;
        *out = Box::into_raw(Box::new(NmmIsing {
            inner: IsingModel::grid(height, width, j, h)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nmm_ising_free(m: *mut NmmIsing) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Converged mean-field free energy F = KL(q‖p) − ln Z.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_ising_mean_field(m: *const NmmIsing, out: *mut f64) -> NmmStatus {
    guard(|| {
        let m = unsafe { as_ref(m, "ising") }?;
        *unsafe { as_out(out, "out") }? = mean_field_fit(&m.inner, 10_000, 1e-8)?.free_energy;
        Ok(())
    })
}

/// ln Z by enumeration; small models only.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmm_ising_log_partition(m: *const NmmIsing, out: *mut f64) -> NmmStatus {
    guard(|| {
        let m = unsafe { as_ref(m, "ising") }?;
        *unsafe { as_out(out, "out") }? = ising_log_partition(&m.inner)?;
        Ok(())
    })
}
