//! C ABI over `drmech`.
//!
//! Every fallible call returns a [`DrmechStatus`]; on failure the message is
//! kept per thread and can be copied out with `drmech_last_error`. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use drmech::bounds::{self, PopulationStats};
use drmech::harness::{self, ExperimentConfig};
use drmech::srbm::{self, PodProbability, SelectionRule};
use drmech::{MarketParams, MechError, PodStructure, Report};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrmechStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidParam = 2,
    RecruitmentShortfall = 3,
    Structure = 4,
    Degenerate = 5,
    DrawOutOfRange = 6,
    UnknownAgent = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &MechError) -> DrmechStatus {
    match e {
        MechError::InvalidParam { .. } => DrmechStatus::InvalidParam,
        MechError::RecruitmentShortfall { .. } => DrmechStatus::RecruitmentShortfall,
        MechError::Structure(_) => DrmechStatus::Structure,
        MechError::Degenerate(_) => DrmechStatus::Degenerate,
        MechError::DrawOutOfRange(_) => DrmechStatus::DrawOutOfRange,
        MechError::UnknownAgent(_) => DrmechStatus::UnknownAgent,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DrmechStatus, String)>) -> DrmechStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DrmechStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DrmechStatus::Panic
        }
    }
}

fn mech(e: MechError) -> (DrmechStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DrmechStatus, String) {
    (DrmechStatus::NullPointer, format!("{what} is null"))
}

/// Market constants, units as in the field names.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DrmechParams {
    pub pi_e_usd_per_kwh: f64,
    pub pi_o_usd_per_agent: f64,
    pub pi_max_usd_per_kwh: f64,
    pub target_kwh: f64,
    pub events_per_contract: u32,
}

impl From<DrmechParams> for MarketParams {
    fn from(p: DrmechParams) -> Self {
        MarketParams {
            pi_e: p.pi_e_usd_per_kwh,
            pi_o: p.pi_o_usd_per_agent,
            pi_max: p.pi_max_usd_per_kwh,
            target: p.target_kwh,
            events: p.events_per_contract,
            pi_p: None,
        }
    }
}

/// Population moments: E[b], E[pi], E[1/pi].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DrmechStats {
    pub e_b: f64,
    pub e_pi: f64,
    pub e_inv_pi: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DrmechBounds {
    pub phi_min: f64,
    pub phi_bo_upper: f64,
    pub phi_srbm_upper: f64,
    pub e_m_upper: f64,
    pub e_n_upper: f64,
}

/// Replication-averaged results. `phi_upper` is NaN when the mechanism has
/// no closed-form bound.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DrmechSummary {
    pub mean_phi: f64,
    pub ci_halfwidth_phi: f64,
    pub mean_n: f64,
    pub mean_m: f64,
    pub competitive_ratio: f64,
    pub phi_min: f64,
    pub phi_upper: f64,
    pub min_delivered: f64,
    pub replications: usize,
}

/// An experiment configuration parsed from JSON.
pub struct DrmechExperiment {
    config: ExperimentConfig,
}

/// A pod structure built from truthful or strategic reports.
pub struct DrmechPods {
    pods: PodStructure,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn drmech_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn drmech_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Closed-form bounds for the given constants.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn drmech_bounds(
    params: *const DrmechParams,
    stats: *const DrmechStats,
    pi_max_usd_per_kwh: f64,
    out: *mut DrmechBounds,
) -> DrmechStatus {
    guard(|| {
        let p: MarketParams = (*params.as_ref().ok_or_else(|| null("params"))?).into();
        let s = stats.as_ref().ok_or_else(|| null("stats"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        p.validate().map_err(mech)?;
        let s = PopulationStats::new(s.e_b, s.e_pi, s.e_inv_pi, pi_max_usd_per_kwh).map_err(mech)?;
        let (e_n_upper, e_m_upper) = bounds::en_em_upper(&s, &p);
        *out = DrmechBounds {
            phi_min: bounds::phi_min(&s, &p),
            phi_bo_upper: bounds::phi_bo_upper(&s, &p),
            phi_srbm_upper: bounds::phi_srbm_upper(&s, &p),
            e_m_upper,
            e_n_upper,
        };
        Ok(())
    })
}

/// Parses and validates an experiment config.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn drmech_experiment_from_json(json: *const c_char, out: *mut *mut DrmechExperiment) -> DrmechStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| (DrmechStatus::InvalidParam, format!("config is not UTF-8: {e}")))?;
        let config = ExperimentConfig::from_json(text).map_err(mech)?;
        *out = Box::into_raw(Box::new(DrmechExperiment { config }));
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn drmech_experiment_set_seed(h: *mut DrmechExperiment, seed: u64) -> DrmechStatus {
    guard(|| {
        h.as_mut().ok_or_else(|| null("experiment"))?.config.population.seed = Some(seed);
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn drmech_experiment_set_replications(h: *mut DrmechExperiment, replications: usize) -> DrmechStatus {
    guard(|| {
        let h = h.as_mut().ok_or_else(|| null("experiment"))?;
        if replications == 0 {
            return Err((DrmechStatus::InvalidParam, "replications must be >= 1".into()));
        }
        h.config.replications = replications;
        Ok(())
    })
}

/// Runs the experiment, or its first sweep point if it has a sweep.
///
/// # Safety
/// `h` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn drmech_experiment_run(h: *const DrmechExperiment, out: *mut DrmechSummary) -> DrmechStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("experiment"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = match h.config.sweep.as_deref() {
            Some([first, ..]) => h.config.at_point(first),
            _ => h.config.clone(),
        };
        let s = harness::run_experiment(&cfg).map_err(mech)?;
        *out = DrmechSummary {
            mean_phi: s.mean_phi,
            ci_halfwidth_phi: s.ci_halfwidth_phi,
            mean_n: s.mean_n,
            mean_m: s.mean_m,
            competitive_ratio: s.competitive_ratio,
            phi_min: s.phi_min,
            phi_upper: s.phi_upper.unwrap_or(f64::NAN),
            min_delivered: s.min_delivered,
            replications: s.replication_count,
        };
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drmech_experiment_free(h: *mut DrmechExperiment) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Sorts `n` reports (agent ids `0..n`) into SRBM pods.
///
/// # Safety
/// `f` and `mu` must be valid for `n` reads; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn drmech_pods_sort(
    f: *const f64,
    mu: *const f64,
    n: usize,
    target_kwh: f64,
    pi_e_usd_per_kwh: f64,
    out: *mut *mut DrmechPods,
) -> DrmechStatus {
    guard(|| {
        if f.is_null() || mu.is_null() {
            return Err(null("reports"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (f, mu) = (std::slice::from_raw_parts(f, n), std::slice::from_raw_parts(mu, n));
        let reports: Vec<Report> = (0..n).map(|i| Report::new(i, f[i], mu[i])).collect();
        let pods = srbm::pod_sort(&reports, target_kwh, pi_e_usd_per_kwh, PodProbability::MinMember).map_err(mech)?;
        *out = Box::into_raw(Box::new(DrmechPods { pods }));
        Ok(())
    })
}

/// Number of selectable pods, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn drmech_pods_count(h: *const DrmechPods) -> usize {
    h.as_ref().map_or(0, |h| h.pods.pod_count())
}

/// Reward price and call probability of agent `id`; both zero when the
/// agent is never called.
///
/// # Safety
/// `h` must be a live handle; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn drmech_pods_member(
    h: *const DrmechPods,
    id: usize,
    reward_price: *mut f64,
    probability: *mut f64,
) -> DrmechStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("pods"))?;
        let (r, p) = (reward_price.as_mut().ok_or_else(|| null("reward_price"))?, probability.as_mut().ok_or_else(|| null("probability"))?);
        let pos = h.pods.position_of(id).ok_or_else(|| mech(MechError::UnknownAgent(id)))?;
        *r = h.pods.member_reward[pos].unwrap_or(0.0);
        *p = srbm::call_probability(&h.pods, pos, SelectionRule::PerAgent);
        Ok(())
    })
}

/// Ids called for draw `u`, ascending. Writes at most `cap` ids and the
/// full count to `n_out`; returns `BufferTooSmall` if `cap` is short.
///
/// # Safety
/// `ids` must be valid for `cap` writes; `h` and `n_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn drmech_pods_select(
    h: *const DrmechPods,
    u: f64,
    ids: *mut usize,
    cap: usize,
    n_out: *mut usize,
) -> DrmechStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("pods"))?;
        let n_out = n_out.as_mut().ok_or_else(|| null("n_out"))?;
        let called = srbm::select(&h.pods, u, SelectionRule::PerAgent).map_err(mech)?;
        *n_out = called.len();
        if called.len() > cap {
            return Err((DrmechStatus::BufferTooSmall, format!("{} ids do not fit in {cap}", called.len())));
        }
        if !called.is_empty() {
            if ids.is_null() {
                return Err(null("ids"));
            }
            ptr::copy_nonoverlapping(called.as_ptr(), ids, called.len());
        }
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drmech_pods_free(h: *mut DrmechPods) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
