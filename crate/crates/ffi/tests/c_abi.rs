use std::ffi::CStr;
use std::ptr;

use sphere_bsa_ffi::*;

fn last_error() -> String {
    let p = sbsa_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn mesh_roundtrip() {
    let mut mesh = ptr::null_mut();
    assert_eq!(unsafe { sbsa_mesh_new(4, &mut mesh) }, SbsaStatus::Ok);
    let n = unsafe { sbsa_mesh_npix(mesh) };
    assert_eq!(n, 192);
    assert_eq!(unsafe { sbsa_mesh_nside(mesh) }, 4);

    let (mut lat, mut lon) = (vec![0.0; n], vec![0.0; n]);
    let st = unsafe { sbsa_mesh_lonlat(mesh, lat.as_mut_ptr(), lon.as_mut_ptr(), n) };
    assert_eq!(st, SbsaStatus::Ok);
    for p in 0..n {
        let mut q = usize::MAX;
        assert_eq!(unsafe { sbsa_ang2pix(4, lat[p], lon[p], &mut q) }, SbsaStatus::Ok);
        assert_eq!(q, p);
    }
    unsafe { sbsa_mesh_free(mesh) };
}

#[test]
fn bad_nside_sets_error() {
    let mut mesh = ptr::null_mut();
    assert_eq!(unsafe { sbsa_mesh_new(3, &mut mesh) }, SbsaStatus::InvalidArgument);
    assert!(mesh.is_null());
    assert!(last_error().contains('3'));
}

#[test]
fn lonlat_length_mismatch() {
    let mut mesh = ptr::null_mut();
    assert_eq!(unsafe { sbsa_mesh_new(1, &mut mesh) }, SbsaStatus::Ok);
    let mut buf = vec![0.0; 4];
    let mut buf2 = vec![0.0; 4];
    let st = unsafe { sbsa_mesh_lonlat(mesh, buf.as_mut_ptr(), buf2.as_mut_ptr(), 4) };
    assert_eq!(st, SbsaStatus::InvalidArgument);
    unsafe { sbsa_mesh_free(mesh) };
}

#[test]
fn null_handles() {
    assert_eq!(unsafe { sbsa_mesh_npix(ptr::null()) }, 0);
    unsafe { sbsa_mesh_free(ptr::null_mut()) };
    assert_eq!(unsafe { sbsa_mesh_new(2, ptr::null_mut()) }, SbsaStatus::NullPointer);
    assert_eq!(unsafe { sbsa_fair_crps(ptr::null(), 2, 0.0, ptr::null_mut()) }, SbsaStatus::NullPointer);
    assert!(last_error().contains("null"));
}

#[test]
fn crps_two_members() {
    // (|1| + |3|)/2 - |1 - 3|/2 = 1
    let xs = [1.0, 3.0];
    let mut out = f64::NAN;
    assert_eq!(unsafe { sbsa_fair_crps(xs.as_ptr(), 2, 0.0, &mut out) }, SbsaStatus::Ok);
    assert!((out - 1.0).abs() < 1e-15);
}

#[test]
fn crps_single_member_rejected() {
    let xs = [1.0];
    let mut out = 0.0;
    assert_eq!(unsafe { sbsa_fair_crps(xs.as_ptr(), 1, 0.0, &mut out) }, SbsaStatus::InvalidArgument);
}

#[test]
fn constant_field_power_is_degree_zero() {
    let (h, w, n_max) = (16, 32, 7);
    let field = vec![2.0; h * w];
    let mut out = vec![f64::NAN; n_max + 1];
    let st = unsafe { sbsa_power_spectrum(field.as_ptr(), h, w, n_max, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, SbsaStatus::Ok);
    assert!((out[0] - 4.0).abs() < 1e-10, "{out:?}");
    assert!(out[1..].iter().all(|p| p.abs() < 1e-12));
}

#[test]
fn spectrum_buffer_too_small() {
    let field = vec![0.0; 16 * 32];
    let mut out = vec![0.0; 3];
    let st = unsafe { sbsa_power_spectrum(field.as_ptr(), 16, 32, 7, out.as_mut_ptr(), 3) };
    assert_eq!(st, SbsaStatus::InvalidArgument);
}

#[test]
fn attention_macs_linear_in_length() {
    let shape = SbsaAttentionShape {
        heads: 4,
        gqa_ratio: 2,
        head_dim: 8,
        block: 16,
        local_block: 64,
        top_n: 4,
    };
    let (mut a, mut b) = (0u64, 0u64);
    assert_eq!(unsafe { sbsa_attention_macs(&shape, 4096, &mut a) }, SbsaStatus::Ok);
    assert_eq!(unsafe { sbsa_attention_macs(&shape, 8192, &mut b) }, SbsaStatus::Ok);
    assert!(b > a);
    let bad = SbsaAttentionShape { gqa_ratio: 3, ..shape };
    assert_eq!(unsafe { sbsa_attention_macs(&bad, 4096, &mut a) }, SbsaStatus::InvalidArgument);
}

#[test]
fn header_declares_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sphere_bsa.h")).unwrap();
    for sym in [
        "sbsa_mesh_new",
        "sbsa_mesh_free",
        "sbsa_fair_crps",
        "sbsa_power_spectrum",
        "sbsa_attention_macs",
        "sbsa_last_error",
        "SBSA_STATUS_OK",
    ] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}
