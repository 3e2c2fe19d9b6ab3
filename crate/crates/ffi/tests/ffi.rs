use std::ffi::{c_char, CStr, CString};
use std::process::Command;
use std::ptr;

use bracketforge_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        bf_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(bf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn crf_round_trip_in_place() {
    let spec = c("gamma:2.2");
    let mut v = [0.0, 0.1, 0.5, 1.0];
    unsafe {
        assert_eq!(bf_crf_apply(spec.as_ptr(), v.as_mut_ptr(), v.len()), BfStatus::Ok);
        assert!((v[1] - 0.1f64.powf(1.0 / 2.2)).abs() < 1e-12);
        assert_eq!(bf_crf_invert(spec.as_ptr(), v.as_mut_ptr(), v.len()), BfStatus::Ok);
    }
    for (a, b) in v.iter().zip([0.0, 0.1, 0.5, 1.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn error_codes_and_messages() {
    let mut v = [0.5];
    unsafe {
        assert_eq!(bf_crf_apply(ptr::null(), v.as_mut_ptr(), 1), BfStatus::NullArgument);
        assert!(last_error().contains("spec"));
        let bad = c("gamma:-1");
        assert_eq!(bf_crf_apply(bad.as_ptr(), v.as_mut_ptr(), 1), BfStatus::Config);
        let mut m = ptr::null_mut();
        let spec = c("onnx:foo");
        assert_eq!(bf_model_open(spec.as_ptr(), &mut m), BfStatus::Capability);
        assert!(m.is_null());
        assert!(last_error().contains("onnx"));
        let mut out = 0.0;
        let a = [0.2, 1.5];
        assert_eq!(bf_psnr(a.as_ptr(), a.as_ptr(), 2, &mut out), BfStatus::Contract);
    }
}

#[test]
fn last_error_truncates_and_reports_length() {
    unsafe {
        bf_crf_apply(ptr::null(), ptr::null_mut(), 0);
        let full = bf_last_error(ptr::null_mut(), 0);
        let mut small = [1 as c_char; 5];
        assert_eq!(bf_last_error(small.as_mut_ptr(), small.len()), full);
        assert_eq!(small[4], 0);
        assert_eq!(CStr::from_ptr(small.as_ptr()).to_bytes().len(), 4);
    }
}

#[test]
fn psnr_identical_is_capped() {
    let a = [0.1, 0.2, 0.3];
    let mut out = 0.0;
    unsafe { assert_eq!(bf_psnr(a.as_ptr(), a.as_ptr(), 3, &mut out), BfStatus::Ok) };
    assert_eq!(out, 99.0);
}

#[test]
fn sample_merge_and_files() {
    let spec = c("analytic:gauss:mu=0.5,var=0.02,size=8,c=3,T=50");
    let crf = c("gamma:2.2");
    let dir = tempfile::tempdir().unwrap();
    let dir_c = c(dir.path().to_str().unwrap());
    let stem = c("s");
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(bf_model_open(spec.as_ptr(), &mut model), BfStatus::Ok);
        let (mut h, mut w, mut ch) = (0, 0, 0);
        assert_eq!(bf_model_shape(model, &mut h, &mut w, &mut ch), BfStatus::Ok);
        assert_eq!((h, w, ch), (8, 8, 3));

        let evs = [-2.0, 0.0, 2.0];
        let mut opts = bf_sample_options_default();
        opts.evs = evs.as_ptr();
        opts.n_evs = evs.len();
        opts.seed = 3;
        opts.serial = true;
        let mut stack = ptr::null_mut();
        assert_eq!(bf_sample(model, &opts, &mut stack), BfStatus::Ok, "{}", last_error());
        assert_eq!(bf_stack_len(stack), 3);

        let mut ev = 0.0;
        let mut px = vec![0.0; h * w * ch];
        assert_eq!(bf_stack_bracket(stack, 2, &mut ev, px.as_mut_ptr(), px.len()), BfStatus::Ok);
        assert_eq!(ev, 2.0);
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(bf_stack_bracket(stack, 3, &mut ev, ptr::null_mut(), 0), BfStatus::InvalidArgument);
        assert_eq!(bf_stack_bracket(stack, 0, &mut ev, px.as_mut_ptr(), 7), BfStatus::InvalidArgument);

        let mut db = 0.0;
        assert_eq!(bf_consistency_psnr(stack, crf.as_ptr(), &mut db), BfStatus::Ok);
        assert!(db.is_finite() && db > 0.0);

        let mut hdr = ptr::null_mut();
        assert_eq!(bf_merge(stack, crf.as_ptr(), &mut hdr), BfStatus::Ok);
        let mut radiance = vec![0.0; h * w * ch];
        assert_eq!(bf_hdr_pixels(hdr, radiance.as_mut_ptr(), radiance.len()), BfStatus::Ok);
        let mut dr = 0.0;
        assert_eq!(bf_hdr_dynamic_range(hdr, &mut dr), BfStatus::Ok);
        assert!(dr >= 1.0);

        let pfm = c(dir.path().join("m.pfm").to_str().unwrap());
        assert_eq!(bf_hdr_write_pfm(hdr, pfm.as_ptr()), BfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(bf_hdr_read_pfm(pfm.as_ptr(), &mut back), BfStatus::Ok);
        let mut again = vec![0.0; radiance.len()];
        assert_eq!(bf_hdr_pixels(back, again.as_mut_ptr(), again.len()), BfStatus::Ok);
        for (a, b) in radiance.iter().zip(&again) {
            assert_eq!(*a as f32, *b as f32);
        }

        assert_eq!(bf_stack_write(stack, dir_c.as_ptr(), stem.as_ptr()), BfStatus::Ok);
        let mut read = ptr::null_mut();
        assert_eq!(bf_stack_read(dir_c.as_ptr(), ptr::null(), &mut read), BfStatus::Ok, "{}", last_error());
        assert_eq!(bf_stack_len(read), 3);

        bf_stack_free(read);
        bf_hdr_free(back);
        bf_hdr_free(hdr);
        bf_stack_free(stack);
        bf_model_free(model);
        bf_stack_free(ptr::null_mut());
    }
}

#[test]
fn stack_from_pixels() {
    let evs = [0.0, 1.0];
    let mut px = [0.25; 2 * 2 * 2];
    px[4..].fill(0.5);
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(bf_stack_new(evs.as_ptr(), 2, 2, 2, 1, px.as_ptr(), &mut s), BfStatus::Ok);
        let (mut h, mut w, mut ch) = (0, 0, 0);
        assert_eq!(bf_stack_shape(s, &mut h, &mut w, &mut ch), BfStatus::Ok);
        assert_eq!((h, w, ch), (2, 2, 1));
        bf_stack_free(s);

        let unsorted = [1.0, 0.0];
        let mut s = ptr::null_mut();
        assert_ne!(bf_stack_new(unsorted.as_ptr(), 2, 2, 2, 1, px.as_ptr(), &mut s), BfStatus::Ok);
        assert!(s.is_null());
        px[0] = 2.0;
        assert_eq!(bf_stack_new(evs.as_ptr(), 2, 2, 2, 1, px.as_ptr(), &mut s), BfStatus::Contract);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/bracketforge.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ BfSampleOptions o = bf_sample_options_default(); BfStack *s = 0; return (int)bf_sample(0, &o, &s); }}\n"
        ),
    )
    .unwrap();
    let Ok(status) = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() else {
        eprintln!("no C compiler, skipping");
        return;
    };
    assert!(status.success());
}
