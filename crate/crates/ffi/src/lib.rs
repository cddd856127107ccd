//! C ABI for prompt selection.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`. Every fallible call returns a [`PfStatus`]; on failure the
//! message is available from [`pf_last_error`] on the same thread. Strings
//! returned through `char **` are owned by the caller and released with
//! [`pf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use promptfocus::config;
use promptfocus::dcp::{select_prompts, DcpConfig, DcpError, PromptSelection};
use promptfocus::embedding::{load_fixture, EmbeddingError};
use promptfocus::harness::Fixture;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    EmptySelection = 5,
    Config = 6,
    Contract = 7,
    OutOfRange = 8,
    Panic = 9,
}

/// A category library with its embedding table.
pub struct PfFixture {
    inner: Fixture,
}

/// One prompt selection; class names are kept as C strings for borrowing.
pub struct PfSelection {
    inner: PromptSelection,
    names: Vec<CString>,
}

type Failure = (PfStatus, String);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PfStatus {
    let (status, message) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return PfStatus::Ok,
        Ok(Err(failure)) => failure,
        Err(_) => (PfStatus::Panic, "internal panic".to_string()),
    };
    set_last_error(&message);
    status
}

fn embedding_failure(e: EmbeddingError) -> Failure {
    let status = match e {
        EmbeddingError::Io { .. } => PfStatus::Io,
        EmbeddingError::Format { .. } | EmbeddingError::Manifest(_) | EmbeddingError::Data(_) => PfStatus::Format,
        EmbeddingError::Contract(_) => PfStatus::Contract,
    };
    (status, e.to_string())
}

fn dcp_failure(e: DcpError) -> Failure {
    match e {
        DcpError::Config(_) => (PfStatus::Config, e.to_string()),
        DcpError::EmptySelection(_) => (PfStatus::EmptySelection, e.to_string()),
        DcpError::Embedding(e) => embedding_failure(e),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((PfStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err((PfStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn into_c_string(s: String) -> Result<CString, Failure> {
    CString::new(s).map_err(|_| (PfStatus::Contract, "string contains a NUL byte".to_string()))
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn pf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads an `.embt` fixture and its JSON manifest.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_fixture_load(path: *const c_char, out: *mut *mut PfFixture) -> PfStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        let (library, table) = load_fixture(Path::new(path)).map_err(embedding_failure)?;
        *out = Box::into_raw(Box::new(PfFixture {
            inner: Fixture { library, table },
        }));
        Ok(())
    })
}

/// The built-in 20-class street fixture.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_fixture_street(out: *mut *mut PfFixture) -> PfStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(PfFixture {
            inner: Fixture::street(),
        }));
        Ok(())
    })
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `fixture` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_fixture_len(fixture: *const PfFixture) -> usize {
    fixture.as_ref().map_or(0, |f| f.inner.library.len())
}

/// Embedding dimension, or 0 for a null handle.
///
/// # Safety
/// `fixture` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_fixture_dim(fixture: *const PfFixture) -> usize {
    fixture.as_ref().map_or(0, |f| f.inner.table.dim())
}

/// # Safety
/// `fixture` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_fixture_free(fixture: *mut PfFixture) {
    if !fixture.is_null() {
        drop(Box::from_raw(fixture));
    }
}

/// Selects class prompts for a unit-norm image embedding of length `dim`.
///
/// `config_json` is null for defaults or a flat JSON object whose keys are
/// selection settings, e.g. `{"max_classes": 10}`.
///
/// # Safety
/// `image` must point to `dim` doubles; `config_json` must be null or a
/// NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_select(
    fixture: *const PfFixture,
    image: *const f64,
    dim: usize,
    config_json: *const c_char,
    out: *mut *mut PfSelection,
) -> PfStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(image, "image")?;
        let fixture = fixture
            .as_ref()
            .ok_or((PfStatus::NullArgument, "fixture is null".to_string()))?;
        if dim != fixture.inner.table.dim() {
            return Err((
                PfStatus::Contract,
                format!("image has dimension {dim}, fixture has {}", fixture.inner.table.dim()),
            ));
        }
        let file = if config_json.is_null() {
            None
        } else {
            let text = str_arg(config_json, "config_json")?;
            Some(serde_json::from_str(text).map_err(|e| (PfStatus::Config, e.to_string()))?)
        };
        let cfg: DcpConfig =
            config::layer(&DcpConfig::default(), file.as_ref(), &[]).map_err(|e| (PfStatus::Config, e.to_string()))?;
        let image = std::slice::from_raw_parts(image, dim);
        let inner = select_prompts(image, &fixture.inner.library, &fixture.inner.table, &cfg).map_err(dcp_failure)?;
        let names = inner
            .cls
            .iter()
            .map(|n| into_c_string(n.clone()))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(PfSelection { inner, names }));
        Ok(())
    })
}

/// Number of selected classes, or 0 for a null handle.
///
/// # Safety
/// `selection` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_selection_len(selection: *const PfSelection) -> usize {
    selection.as_ref().map_or(0, |s| s.inner.len())
}

/// Borrowed name of class `index`, valid while the handle lives; null if
/// out of range.
///
/// # Safety
/// `selection` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_selection_class(selection: *const PfSelection, index: usize) -> *const c_char {
    selection
        .as_ref()
        .and_then(|s| s.names.get(index))
        .map_or(ptr::null(), |n| n.as_ptr())
}

/// Probability of class `index`.
///
/// # Safety
/// `selection` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_selection_sim(selection: *const PfSelection, index: usize, out: *mut f64) -> PfStatus {
    guard(|| {
        non_null(out, "out")?;
        let s = selection
            .as_ref()
            .ok_or((PfStatus::NullArgument, "selection is null".to_string()))?;
        *out = *s
            .inner
            .sim
            .get(index)
            .ok_or((PfStatus::OutOfRange, format!("index {index} >= {}", s.inner.len())))?;
        Ok(())
    })
}

/// The whole selection as JSON; free the string with [`pf_string_free`].
///
/// # Safety
/// `selection` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_selection_json(selection: *const PfSelection, out: *mut *mut c_char) -> PfStatus {
    guard(|| {
        non_null(out, "out")?;
        let s = selection
            .as_ref()
            .ok_or((PfStatus::NullArgument, "selection is null".to_string()))?;
        let json = serde_json::to_string(&s.inner).expect("selection serialises");
        *out = into_c_string(json)?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `selection` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_selection_free(selection: *mut PfSelection) {
    if !selection.is_null() {
        drop(Box::from_raw(selection));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
