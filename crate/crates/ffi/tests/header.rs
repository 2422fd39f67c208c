use std::path::PathBuf;
use std::process::Command;

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/aortaseg.h")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 20, "{exports:?}");
    for f in exports {
        assert!(h.contains(&format!(" {f}(")) || h.contains(&format!("*{f}(")), "{f} missing from header");
    }
    for c in ["AS_OK = 0", "AS_ERR_PANIC", "typedef struct AsVolume AsVolume", "AS_KIND_LABEL 1"] {
        assert!(h.contains(c), "{c}");
    }
}

#[test]
fn header_compiles_as_c99() {
    let Ok(cc) = std::env::var("CC").or_else(|_| which("cc")) else {
        eprintln!("no C compiler found; header compile check not run");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("use.c");
    std::fs::write(
        &c,
        r#"#include "aortaseg.h"
int use(void) {
    AsVolume *v = NULL;
    size_t shape[3] = {2, 2, 2};
    double spacing[3] = {1.0, 1.0, 1.0};
    float data[8] = {0};
    AsStatus st = as_volume_new(data, shape, spacing, NULL, AS_KIND_IMAGE, &v);
    AsMeshStats s;
    (void)s;
    as_volume_free(v);
    return st == AS_OK ? 0 : (int)st;
}
"#,
    )
    .unwrap();
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header().parent().unwrap())
        .arg(&c)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which(name: &str) -> Result<String, ()> {
    std::env::var_os("PATH")
        .into_iter()
        .flat_map(|p| std::env::split_paths(&p).collect::<Vec<_>>())
        .map(|d| d.join(name))
        .find(|p| p.is_file())
        .map(|p| p.to_string_lossy().into_owned())
        .ok_or(())
}
