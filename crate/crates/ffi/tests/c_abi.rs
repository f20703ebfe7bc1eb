use std::ffi::CString;
use std::process::Command;
use std::ptr;

use dss_core::model::{Checkpoint, DssModel, ModelConfig, Variant};
use dss_core::scene::speech_signal;
use dss_ffi::*;

fn identity_checkpoint(dir: &std::path::Path) -> CString {
    let mut m = DssModel::<f32>::new(ModelConfig::tiny(Variant::ProposedLinear), 1).unwrap();
    m.make_identity().unwrap();
    let path = dir.join("identity.dssf");
    Checkpoint::from_model(&m, 0).save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn identity_model_round_trips_through_the_c_interface() {
    let dir = tempfile::tempdir().unwrap();
    let path = identity_checkpoint(dir.path());
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { dss_model_load(path.as_ptr(), &mut h) }, DssStatus::Ok);
    assert!(!h.is_null());
    assert!(unsafe { dss_model_num_params(h) } > 0);

    let x: Vec<f32> = speech_signal(8_000, 3).iter().map(|&v| v as f32).collect();
    let (mut near, mut far) = (vec![0f32; x.len()], vec![0f32; x.len()]);
    let st = unsafe { dss_separate(h, x.as_ptr(), x.len(), near.as_mut_ptr(), far.as_mut_ptr()) };
    assert_eq!(st, DssStatus::Ok);
    let worst = (0..x.len()).map(|i| (near[i] + far[i] - x[i]).abs()).fold(0f32, f32::max);
    assert!(worst < 1e-3, "{worst}");

    // Too short for one analysis frame.
    let st = unsafe { dss_separate(h, x.as_ptr(), 10, near.as_mut_ptr(), far.as_mut_ptr()) };
    assert_ne!(st, DssStatus::Ok);
    unsafe { dss_model_free(h) };
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/dss.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["dss_model_load", "dss_model_free", "dss_separate", "dss_last_error", "DSS_STATUS_OK", "DssHandle"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
