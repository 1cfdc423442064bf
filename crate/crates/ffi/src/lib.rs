//! C ABI over the mesh, CRPS, spectrum and attention cost routines.
//!
//! Every fallible call returns an [`SbsaStatus`]. On failure the message is
//! kept per thread and can be read with [`sbsa_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sphere_bsa::bsa::{bsa_cost, AttentionConfig, Branches};
use sphere_bsa::diagnostics::sht::Sht;
use sphere_bsa::error::Error;
use sphere_bsa::grid::LatLonGrid;
use sphere_bsa::healpix::{ang2pix, HealpixMesh};
use sphere_bsa::training::crps::fair_crps;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SbsaStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad configuration, shape, index or ensemble size.
    InvalidArgument = 2,
    Numeric = 3,
    Io = 4,
    Panic = 5,
}

/// Opaque handle to a nested-order HEALPix mesh.
pub struct SbsaMesh {
    inner: HealpixMesh,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SbsaStatus {
    match err.exit_code() {
        2 => SbsaStatus::InvalidArgument,
        3 => SbsaStatus::Numeric,
        _ => SbsaStatus::Io,
    }
}

fn null(what: &str) -> SbsaStatus {
    set_error(format!("null pointer passed for {what}"));
    SbsaStatus::NullPointer
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> SbsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SbsaStatus::Ok,
        Ok(Err(e)) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".to_owned());
            SbsaStatus::Panic
        }
    }
}

/// Message of the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sbsa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a mesh with `12 * nside^2` pixels.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sbsa_mesh_new(nside: usize, out: *mut *mut SbsaMesh) -> SbsaStatus {
    if out.is_null() {
        return null("out");
    }
    guard(|| {
        let mesh = HealpixMesh::new(nside)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(SbsaMesh { inner: mesh })) };
        Ok(())
    })
}

/// Frees a mesh. NULL is ignored.
///
/// # Safety
/// `mesh` must come from [`sbsa_mesh_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sbsa_mesh_free(mesh: *mut SbsaMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Pixel count, or 0 for a NULL handle.
///
/// # Safety
/// `mesh` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbsa_mesh_npix(mesh: *const SbsaMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.inner.npix())
}

/// Nside, or 0 for a NULL handle.
///
/// # Safety
/// `mesh` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbsa_mesh_nside(mesh: *const SbsaMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.inner.nside())
}

/// Copies pixel-centre latitude and longitude in radians into two buffers of
/// length `len`, which must equal the pixel count.
///
/// # Safety
/// `mesh` must be a live handle; `lat` and `lon` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sbsa_mesh_lonlat(
    mesh: *const SbsaMesh,
    lat: *mut f64,
    lon: *mut f64,
    len: usize,
) -> SbsaStatus {
    let Some(mesh) = mesh.as_ref() else {
        return null("mesh");
    };
    if lat.is_null() || lon.is_null() {
        return null("lat/lon");
    }
    guard(|| {
        let m = &mesh.inner;
        if len != m.npix() {
            return Err(Error::dim("sbsa_mesh_lonlat", &[len], &[m.npix()]));
        }
        // SAFETY: caller guarantees `len` writable doubles in each buffer.
        unsafe {
            ptr::copy_nonoverlapping(m.lat().as_ptr(), lat, len);
            ptr::copy_nonoverlapping(m.lon().as_ptr(), lon, len);
        }
        Ok(())
    })
}

/// Nested pixel index containing a point given in radians.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sbsa_ang2pix(nside: usize, lat: f64, lon: f64, out: *mut usize) -> SbsaStatus {
    if out.is_null() {
        return null("out");
    }
    guard(|| {
        let p = ang2pix(nside, lat, lon)?;
        // SAFETY: checked non-null above.
        unsafe { *out = p };
        Ok(())
    })
}

/// Fair CRPS of `n >= 2` ensemble members against a scalar truth.
///
/// # Safety
/// `members` must hold `n` doubles and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sbsa_fair_crps(members: *const f64, n: usize, truth: f64, out: *mut f64) -> SbsaStatus {
    if members.is_null() || out.is_null() {
        return null("members/out");
    }
    guard(|| {
        // SAFETY: caller guarantees `n` readable doubles.
        let xs = unsafe { std::slice::from_raw_parts(members, n) };
        let v = fair_crps(xs, truth)?;
        // SAFETY: checked non-null above.
        unsafe { *out = v };
        Ok(())
    })
}

/// Degree power spectrum of a row-major `h x w` equiangular field.
///
/// Writes `n_max + 1` values into `out`, whose capacity is `out_len`.
///
/// # Safety
/// `field` must hold `h * w` doubles and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sbsa_power_spectrum(
    field: *const f64,
    h: usize,
    w: usize,
    n_max: usize,
    out: *mut f64,
    out_len: usize,
) -> SbsaStatus {
    if field.is_null() || out.is_null() {
        return null("field/out");
    }
    guard(|| {
        if out_len < n_max + 1 {
            return Err(Error::dim("sbsa_power_spectrum", &[out_len], &[n_max + 1]));
        }
        let grid = LatLonGrid::new(h, w)?;
        // SAFETY: caller guarantees `h * w` readable doubles.
        let f = unsafe { std::slice::from_raw_parts(field, grid.len()) };
        let power = Sht::new(grid, n_max)?.power_spectrum(f)?;
        // SAFETY: capacity checked above.
        unsafe { ptr::copy_nonoverlapping(power.as_ptr(), out, power.len()) };
        Ok(())
    })
}

/// Shape of one attention layer for [`sbsa_attention_macs`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SbsaAttentionShape {
    pub heads: usize,
    pub gqa_ratio: usize,
    pub head_dim: usize,
    pub block: usize,
    pub local_block: usize,
    pub top_n: usize,
}

/// Multiply-accumulate count of the three-branch sparse attention core for
/// `n` tokens.
///
/// # Safety
/// `shape` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sbsa_attention_macs(
    shape: *const SbsaAttentionShape,
    n: usize,
    out: *mut u64,
) -> SbsaStatus {
    let Some(s) = shape.as_ref() else {
        return null("shape");
    };
    if out.is_null() {
        return null("out");
    }
    guard(|| {
        let cfg = AttentionConfig {
            d_model: s.heads * s.head_dim,
            heads: s.heads,
            gqa_ratio: s.gqa_ratio,
            head_dim: s.head_dim,
            block: s.block,
            local_block: s.local_block,
            top_n: s.top_n,
            rope_theta: 10_000.0,
            branches: Branches::ALL,
            fixed_gates: None,
        };
        let macs = bsa_cost(&cfg, n)?;
        // SAFETY: checked non-null above.
        unsafe { *out = macs };
        Ok(())
    })
}
