use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use nmode::cli::{run_command, Command as Stage};
use nmode::config::parse_config;
use nmode_ffi::*;

fn last_error() -> String {
    let p = nmode_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn basis_of_builtin_frame() {
    unsafe {
        let mut sys = ptr::null_mut();
        assert_eq!(nmode_system_frame_4dof(0.0, &mut sys), NmodeStatus::Ok);
        assert!(nmode_last_error().is_null());
        let mut basis = ptr::null_mut();
        assert_eq!(nmode_modal_basis(sys, 4, &mut basis), NmodeStatus::Ok);
        let (mut p, mut g) = (0usize, 0usize);
        assert_eq!(nmode_basis_shape(basis, &mut p, &mut g), NmodeStatus::Ok);
        assert_eq!((p, g), (4, 4));
        let mut omegas = [0.0; 4];
        let mut phi = [0.0; 16];
        let st = nmode_basis_get(basis, omegas.as_mut_ptr(), 4, ptr::null_mut(), 0, phi.as_mut_ptr(), 16);
        assert_eq!(st, NmodeStatus::Ok);
        let direct = nmode::modal::build_modal_basis(&nmode::modal::StructuralSystem::frame_4dof(0.0), 4).unwrap();
        assert_eq!(omegas.to_vec(), direct.omegas);
        assert_eq!(phi.to_vec(), direct.phi.data().to_vec());
        assert!(omegas.windows(2).all(|w| w[0] < w[1]));

        let mut short = [0.0; 3];
        let st = nmode_basis_get(basis, short.as_mut_ptr(), 3, ptr::null_mut(), 0, ptr::null_mut(), 0);
        assert_eq!(st, NmodeStatus::Dimension);
        assert!(last_error().contains("omegas"));

        nmode_basis_free(basis);
        nmode_system_free(sys);
    }
}

#[test]
fn errors_are_codes_not_crashes() {
    unsafe {
        assert_eq!(nmode_system_frame_4dof(0.0, ptr::null_mut()), NmodeStatus::NullPointer);
        assert!(last_error().contains("out"));
        let mut sys = ptr::null_mut();
        assert_eq!(nmode_modal_basis(ptr::null(), 2, &mut ptr::null_mut()), NmodeStatus::NullPointer);

        // Indefinite mass matrix.
        let m = [1.0, 0.0, 0.0, -1.0];
        let z = [0.0; 4];
        let k = [2.0, -1.0, -1.0, 2.0];
        let st = nmode_system_new(m.as_ptr(), z.as_ptr(), k.as_ptr(), 2, 0.0, 0, &mut sys);
        assert_eq!(st, NmodeStatus::Numerical);
        assert!(sys.is_null());
        assert!(last_error().contains("positive definite"), "{}", last_error());

        let st = nmode_system_new(k.as_ptr(), z.as_ptr(), k.as_ptr(), 2, 1.0, 5, &mut sys);
        assert_eq!(st, NmodeStatus::InvalidArgument);

        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/checkpoint.txt").unwrap();
        assert_eq!(nmode_model_load(ptr::null(), missing.as_ptr(), &mut model), NmodeStatus::MissingArtifact);
        assert!(last_error().contains("/nonexistent/checkpoint.txt"));

        nmode_system_free(ptr::null_mut());
        nmode_basis_free(ptr::null_mut());
        nmode_model_free(ptr::null_mut());
    }
}

#[test]
fn simulation_matches_library() {
    unsafe {
        let mut sys = ptr::null_mut();
        assert_eq!(nmode_system_frame_4dof(0.5, &mut sys), NmodeStatus::Ok);
        let x0 = [0.3, -0.1, 0.2, 0.0];
        let v0 = [0.0, 0.4, 0.0, -0.2];
        let steps = 20;
        let len = (steps + 1) * 4;
        let (mut d, mut v, mut a) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let st = nmode_simulate(sys, x0.as_ptr(), v0.as_ptr(), 0.05, steps, 4, d.as_mut_ptr(), v.as_mut_ptr(), a.as_mut_ptr(), len);
        assert_eq!(st, NmodeStatus::Ok);
        let s = nmode::modal::StructuralSystem::frame_4dof(0.5);
        let field = nmode::simulator::ReferenceField::new(&s).unwrap();
        let (_, r) = nmode::simulator::simulate(&field, &x0, &v0, 0.05, steps, 4).unwrap();
        assert_eq!(d, r.disp.data());
        assert_eq!(a, r.acc.data());
        let st = nmode_simulate(sys, x0.as_ptr(), v0.as_ptr(), 0.05, steps, 4, d.as_mut_ptr(), v.as_mut_ptr(), a.as_mut_ptr(), len - 1);
        assert_eq!(st, NmodeStatus::Dimension);
        nmode_system_free(sys);
    }
}

#[test]
fn trained_model_reconstructs_through_the_interface() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(
        None,
        &[
            "dataset.realizations=4".into(),
            "dataset.steps=30".into(),
            "model.mlp_width=8".into(),
            "model.rnn_width=4".into(),
            "model.residual_width=8".into(),
            "train.epochs=1".into(),
            format!("paths.output={}", dir.path().display()),
        ],
    )
    .unwrap();
    for s in [Stage::Generate, Stage::Train] {
        run_command(s, &cfg).unwrap();
    }
    let ds = nmode::simulator::read_dataset(&cfg.dataset_dir()).unwrap();
    let window = &ds.measured[3];
    let model_rs = nmode::cli::build_model(&cfg).unwrap();
    let params = nmode::params::load_checkpoint(&cfg.checkpoint_path()).unwrap();
    let times = ds.manifest.times();
    let expected = model_rs.predict_sequence(&params, window, &times, None).unwrap();

    let cfg_path = CString::new(dir.path().join("effective_config.json").to_str().unwrap()).unwrap();
    let ckpt = CString::new(cfg.checkpoint_path().to_str().unwrap()).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(nmode_model_load(cfg_path.as_ptr(), ckpt.as_ptr(), &mut model), NmodeStatus::Ok, "{}", last_error());
        let (mut m, mut w, mut g) = (0, 0, 0);
        assert_eq!(nmode_model_shape(model, &mut m, &mut w, &mut g), NmodeStatus::Ok);
        assert_eq!((m, w, g), (4, 11, 4));
        let len = 31 * 4;
        let (mut d, mut v, mut a) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let st = nmode_model_reconstruct(
            model,
            window.data().as_ptr(),
            window.rows(),
            4,
            30,
            d.as_mut_ptr(),
            v.as_mut_ptr(),
            a.as_mut_ptr(),
            len,
        );
        assert_eq!(st, NmodeStatus::Ok, "{}", last_error());
        assert_eq!(d, expected.response.disp.data());
        assert_eq!(v, expected.response.vel.data());
        assert_eq!(a, expected.response.acc.data());
        let st = nmode_model_reconstruct(model, window.data().as_ptr(), 5, 4, 30, d.as_mut_ptr(), v.as_mut_ptr(), a.as_mut_ptr(), len);
        assert_eq!(st, NmodeStatus::InvalidArgument);
        nmode_model_free(model);
    }
}

/// The static library built alongside this test. `cargo test` leaves the
/// fresh copy in `deps/`; `cargo build` also uplifts one a level higher.
fn static_lib() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let fresh = deps.join("libnmode_ffi.a");
    if fresh.exists() {
        fresh
    } else {
        deps.parent().unwrap().join("libnmode_ffi.a")
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("nmode.h").exists());
    let lib = static_lib();
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "nmode.h"
int main(void) {
    NmodeSystem *sys = NULL;
    NmodeBasis *basis = NULL;
    double omegas[4];
    if (nmode_system_frame_4dof(0.0, &sys) != NMODE_STATUS_OK) return 1;
    if (nmode_modal_basis(sys, 4, &basis) != NMODE_STATUS_OK) return 2;
    if (nmode_basis_get(basis, omegas, 4, NULL, 0, NULL, 0) != NMODE_STATUS_OK) return 3;
    if (nmode_modal_basis(NULL, 4, &basis) != NMODE_STATUS_NULL_POINTER) return 4;
    if (nmode_last_error() == NULL) return 5;
    printf("%.12f\n", omegas[0]);
    nmode_basis_free(basis);
    nmode_system_free(sys);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("probe");
    let out = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let printed: f64 = String::from_utf8(run.stdout).unwrap().trim().parse().unwrap();
    let direct = nmode::modal::build_modal_basis(&nmode::modal::StructuralSystem::frame_4dof(0.0), 4).unwrap();
    assert!((printed - direct.omegas[0]).abs() < 1e-11);
}
