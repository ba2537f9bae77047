use std::path::PathBuf;
use std::process::Command;

// Compiles the C smoke program against the generated header and the static library.
#[test]
fn c_program_links_and_runs() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libadaptnet_ffi.a");
    if !lib.exists() {
        eprintln!("static library not built at {}, skipping", lib.display());
        return;
    }
    let out = tempfile_path();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&out)
        .arg(dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("cc available");
    assert!(status.success());
    let run = Command::new(&out).output().unwrap();
    let _ = std::fs::remove_file(&out);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let text = String::from_utf8(run.stdout).unwrap();
    let n: usize = text.split_whitespace().next().unwrap().parse().unwrap();
    assert!(n > 6);
    assert!(text.contains("values is null"));
}

fn tempfile_path() -> PathBuf {
    std::env::temp_dir().join(format!("adaptnet_smoke_{}", std::process::id()))
}
