//! Compile and run a C program against include/kadapter.h and the built
//! static library, proving the committed header matches the ABI.

use std::path::PathBuf;
use std::process::Command;

const C_SMOKE: &str = r#"
#include <stdio.h>
#include <stdlib.h>
#include "kadapter.h"

int main(void) {
    if (kad_version() == NULL) return 10;

    KadModel *model = NULL;
    if (kad_model_new_desk(42, 64, &model) != KAD_STATUS_OK) return 11;
    if (kad_model_feature_dim(model) != 64) return 12;
    if (kad_model_adapter_count(model) != 0) return 13;

    uint32_t ids[3] = {1, 2, 3};
    uintptr_t needed = 0;
    KadStatus status = kad_model_features(model, ids, 3, NULL, 0, &needed);
    if (status != KAD_STATUS_INVALID_ARGUMENT) return 14;
    if (needed != 3 * 64) return 15;

    double *buf = malloc(needed * sizeof(double));
    status = kad_model_features(model, ids, 3, buf, needed, &needed);
    if (status != KAD_STATUS_OK) return 16;
    double total = 0.0;
    for (uintptr_t i = 0; i < needed; i++) total += buf[i] * buf[i];
    if (!(total > 0.0)) return 17;
    free(buf);

    /* error channel */
    if (kad_model_new_desk(1, 64, NULL) != KAD_STATUS_NULL_POINTER) return 18;
    if (kad_last_error()[0] == '\0') return 19;

    kad_model_free(model);
    kad_model_free(NULL);
    printf("c smoke ok\n");
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<this test binary>
    let mut dir = std::env::current_exe().expect("test binary path");
    dir.pop(); // strip the binary name
    if dir.ends_with("deps") {
        dir.pop();
    }
    dir
}

#[test]
fn c_program_links_against_header_and_static_lib() {
    let cc = ["cc", "gcc", "clang"]
        .iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
        .copied();
    let Some(cc) = cc else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let staticlib = target_dir().join("libkadapter_ffi.a");
    assert!(
        staticlib.exists(),
        "{staticlib:?} missing; build the cdylib/staticlib first"
    );
    let include_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let work = tempfile::tempdir().unwrap();
    let c_path = work.path().join("smoke.c");
    std::fs::write(&c_path, C_SMOKE).unwrap();
    let bin_path = work.path().join("smoke");

    let compile = Command::new(cc)
        .arg(&c_path)
        .arg("-I")
        .arg(&include_dir)
        .arg(&staticlib)
        .arg("-lpthread")
        .arg("-ldl")
        .arg("-lm")
        .arg("-o")
        .arg(&bin_path)
        .output()
        .expect("compiler runs");
    assert!(
        compile.status.success(),
        "compile failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&bin_path).output().expect("smoke binary runs");
    assert!(
        run.status.success(),
        "smoke exited {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stdout)
    );
}
