use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use promptfocus::embedding::{normalize, write_fixture, CategoryLibrary, EmbeddingTable, LibrarySource};
use promptfocus::harness::street::{street_image, street_table};
use promptfocus_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pf_last_error()) }.to_string_lossy().into_owned()
}

fn street() -> *mut PfFixture {
    let mut fx = ptr::null_mut();
    assert_eq!(unsafe { pf_fixture_street(&mut fx) }, PfStatus::Ok);
    fx
}

#[test]
fn street_selection_matches_the_library() {
    let fx = street();
    let image = street_image(&street_table());
    let mut sel = ptr::null_mut();
    let status = unsafe { pf_select(fx, image.as_ptr(), image.len(), ptr::null(), &mut sel) };
    assert_eq!(status, PfStatus::Ok, "{}", last_error());

    let lib = promptfocus::harness::Fixture::street();
    let expected = promptfocus::dcp::select_prompts(&image, &lib.library, &lib.table, &Default::default()).unwrap();
    let n = unsafe { pf_selection_len(sel) };
    assert_eq!(n, expected.len());
    for i in 0..n {
        let name = unsafe { CStr::from_ptr(pf_selection_class(sel, i)) }.to_str().unwrap();
        assert_eq!(name, expected.cls[i]);
        let mut p = 0.0;
        assert_eq!(unsafe { pf_selection_sim(sel, i, &mut p) }, PfStatus::Ok);
        assert_eq!(p.to_bits(), expected.sim[i].to_bits());
    }
    assert!(unsafe { pf_selection_class(sel, n) }.is_null());

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { pf_selection_json(sel, &mut json) }, PfStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    let parsed: promptfocus::dcp::PromptSelection = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, expected);
    unsafe {
        pf_string_free(json);
        pf_selection_free(sel);
        pf_fixture_free(fx);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let fx = street();
    let dim = unsafe { pf_fixture_dim(fx) };
    let mut sel = ptr::null_mut();
    let zeros = vec![0.0; dim];

    let short = unsafe { pf_select(fx, zeros.as_ptr(), dim - 1, ptr::null(), &mut sel) };
    assert_eq!(short, PfStatus::Contract);
    assert!(last_error().contains("dimension"));

    let non_unit = unsafe { pf_select(fx, zeros.as_ptr(), dim, ptr::null(), &mut sel) };
    assert_eq!(non_unit, PfStatus::Contract);

    let mut image = zeros.clone();
    image[0] = 1.0;
    let bad = CString::new(r#"{"tau_f_min": 2.0}"#).unwrap();
    assert_eq!(unsafe { pf_select(fx, image.as_ptr(), dim, bad.as_ptr(), &mut sel) }, PfStatus::Config);
    let unknown = CString::new(r#"{"max_clases": 3}"#).unwrap();
    assert_eq!(unsafe { pf_select(fx, image.as_ptr(), dim, unknown.as_ptr(), &mut sel) }, PfStatus::Config);
    assert!(last_error().contains("max_clases"));

    assert_eq!(unsafe { pf_select(ptr::null(), image.as_ptr(), dim, ptr::null(), &mut sel) }, PfStatus::NullArgument);
    assert_eq!(unsafe { pf_select(fx, image.as_ptr(), dim, ptr::null(), ptr::null_mut()) }, PfStatus::NullArgument);
    assert!(sel.is_null());

    let mut p = 0.0;
    assert_eq!(unsafe { pf_selection_sim(ptr::null(), 0, &mut p) }, PfStatus::NullArgument);
    assert_eq!(unsafe { pf_selection_len(ptr::null()) }, 0);
    assert_eq!(unsafe { pf_fixture_len(ptr::null()) }, 0);
    unsafe {
        pf_selection_free(ptr::null_mut());
        pf_fixture_free(fx);
    }
}

#[test]
fn empty_selection_has_its_own_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.embt");
    let names: Vec<String> = (0..1000).map(|i| format!("c{i}")).collect();
    let row = {
        let mut r = vec![1.0, 1.0];
        normalize(&mut r);
        r
    };
    let table = EmbeddingTable::new(names.clone(), 2, row.repeat(1000)).unwrap();
    let lib = CategoryLibrary::new(names, LibrarySource::Initial).unwrap();
    write_fixture(&path, &lib, &table).unwrap();

    let mut fx = ptr::null_mut();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pf_fixture_load(c_path.as_ptr(), &mut fx) }, PfStatus::Ok);
    assert_eq!(unsafe { pf_fixture_len(fx) }, 1000);
    let mut sel = ptr::null_mut();
    let status = unsafe { pf_select(fx, row.as_ptr(), 2, ptr::null(), &mut sel) };
    assert_eq!(status, PfStatus::EmptySelection);
    unsafe { pf_fixture_free(fx) };
}

#[test]
fn load_failures_are_io_or_format() {
    let dir = tempfile::tempdir().unwrap();
    let mut fx = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.embt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pf_fixture_load(missing.as_ptr(), &mut fx) }, PfStatus::Io);

    let garbage = dir.path().join("bad.embt");
    std::fs::write(&garbage, b"NOPE").unwrap();
    std::fs::write(garbage.with_extension("json"), r#"{"names":["a"],"dim":1,"count":1,"source":"initial"}"#).unwrap();
    let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pf_fixture_load(garbage.as_ptr(), &mut fx) }, PfStatus::Format);
    assert!(last_error().contains("offset 0"), "{}", last_error());
    assert!(fx.is_null());
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn committed_header_is_current() {
    let header = std::fs::read_to_string(manifest_dir().join("include/promptfocus.h")).unwrap();
    for symbol in [
        "pf_last_error",
        "pf_fixture_load",
        "pf_fixture_street",
        "pf_select",
        "pf_selection_json",
        "pf_string_free",
        "PF_STATUS_EMPTY_SELECTION = 5",
        "typedef struct PfFixture PfFixture;",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}

/// The static library sits next to the test executable's parent directory.
fn staticlib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libpromptfocus_ffi.a");
    lib.exists().then_some(lib)
}

fn have(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok()
}

#[test]
fn c_program_links_and_runs() {
    if !have("cc") {
        eprintln!("no C compiler; skipping");
        return;
    }
    let lib = staticlib().expect("cargo builds the staticlib alongside the tests");
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let include = manifest_dir().join("include");
    let source = manifest_dir().join("tests/c/smoke.c");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&include)
        .arg(&source)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(Path::new(&exe)).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    assert!(!out.stdout.is_empty());
}
