//! C ABI over the kgcoder core.
//!
//! Every fallible call returns a `KgcStatus`; on failure the message is
//! available from `kgc_last_error_message` on the same thread. Strings handed
//! out by this library must be released with `kgc_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::ptr;

use kgcoder::codegen;
use kgcoder::kg::{self, KgError, KnowledgeGraph};
use kgcoder::protocol::{self, AgentAnswer, StreamParser};
use kgcoder::usage;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Integrity = 5,
    Protocol = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// Opaque knowledge graph handle.
pub struct KgcGraph(KnowledgeGraph);

/// Opaque streaming protocol parser handle.
pub struct KgcStream(StreamParser);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KgcGraphStats {
    pub entities: usize,
    pub triples: usize,
    pub packages: usize,
    pub functions: usize,
    pub attributes: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn fail(status: KgcStatus, msg: impl Into<String>) -> KgcStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting panics into `KgcStatus::Panic`.
fn guard(f: impl FnOnce() -> KgcStatus) -> KgcStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(KgcStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, KgcStatus> {
    if p.is_null() {
        return Err(fail(KgcStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KgcStatus::InvalidUtf8, "argument is not valid UTF-8"))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> KgcStatus {
    if out.is_null() {
        return fail(KgcStatus::NullArgument, "null output pointer");
    }
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            KgcStatus::Ok
        }
        Err(_) => fail(KgcStatus::InvalidArgument, "result contains a NUL byte"),
    }
}

fn kg_status(e: &KgError) -> KgcStatus {
    match e {
        KgError::Io(_) => KgcStatus::Io,
        KgError::Parse { .. } => KgcStatus::Parse,
        _ => KgcStatus::Integrity,
    }
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Library version; free with `kgc_string_free`.
#[no_mangle]
pub extern "C" fn kgc_version() -> *mut c_char {
    CString::new(env!("CARGO_PKG_VERSION")).unwrap().into_raw()
}

/// Message for the last failed call on this thread, or NULL. Owned by the
/// library and valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn kgc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn kgc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a JSON-Lines triple file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgc_graph_load(path: *const c_char, out: *mut *mut KgcGraph) -> KgcStatus {
    guard(|| {
        let path = try_ffi!(read_str(path));
        if out.is_null() {
            return fail(KgcStatus::NullArgument, "null output pointer");
        }
        match kg::load_kg(path) {
            Ok(g) => {
                *out = Box::into_raw(Box::new(KgcGraph(g)));
                KgcStatus::Ok
            }
            Err(e) => fail(kg_status(&e), e.to_string()),
        }
    })
}

/// Parses JSON-Lines triples held in memory.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgc_graph_parse(text: *const c_char, out: *mut *mut KgcGraph) -> KgcStatus {
    guard(|| {
        let text = try_ffi!(read_str(text));
        if out.is_null() {
            return fail(KgcStatus::NullArgument, "null output pointer");
        }
        match KnowledgeGraph::from_reader(text.as_bytes()) {
            Ok(g) => {
                *out = Box::into_raw(Box::new(KgcGraph(g)));
                KgcStatus::Ok
            }
            Err(e) => fail(kg_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `g` must be NULL or a handle from `kgc_graph_load`/`kgc_graph_parse`, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn kgc_graph_free(g: *mut KgcGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// # Safety
/// `g` must be a live graph handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgc_graph_stats(g: *const KgcGraph, out: *mut KgcGraphStats) -> KgcStatus {
    guard(|| {
        if g.is_null() || out.is_null() {
            return fail(KgcStatus::NullArgument, "null argument");
        }
        let s = (*g).0.stats();
        *out = KgcGraphStats {
            entities: s.entities,
            triples: s.triples,
            packages: s.packages,
            functions: s.functions,
            attributes: s.attributes,
        };
        KgcStatus::Ok
    })
}

/// Package ids with their member ids, as a JSON object.
///
/// # Safety
/// `g` must be a live graph handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgc_graph_anchors_json(g: *const KgcGraph, out: *mut *mut c_char) -> KgcStatus {
    guard(|| {
        if g.is_null() {
            return fail(KgcStatus::NullArgument, "null graph");
        }
        let graph = &(*g).0;
        let mut map = serde_json::Map::new();
        for a in graph.anchors() {
            let kids: Vec<String> = graph
                .children(&a.id)
                .unwrap_or_default()
                .iter()
                .map(|c| c.id.clone())
                .collect();
            map.insert(a.id.clone(), kids.into());
        }
        write_string(out, serde_json::Value::Object(map).to_string())
    })
}

/// Imported packages and called functions of Python source, as JSON.
///
/// # Safety
/// `code` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgc_extract_usage_json(code: *const c_char, out: *mut *mut c_char) -> KgcStatus {
    guard(|| {
        let code = try_ffi!(read_str(code));
        let u = usage::extract_usage(code);
        let v = serde_json::json!({"packages": u.packages, "functions": u.functions});
        write_string(out, v.to_string())
    })
}

/// Parses a complete transcript into JSON segments. On a protocol error the
/// byte offset is stored in `error_offset` when it is non-NULL.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` a valid pointer; `error_offset` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn kgc_parse_transcript_json(
    text: *const c_char,
    out: *mut *mut c_char,
    error_offset: *mut usize,
) -> KgcStatus {
    guard(|| {
        let text = try_ffi!(read_str(text));
        match protocol::parse_transcript(text) {
            Ok(t) => write_string(out, serde_json::to_string(&t).expect("transcript serializes")),
            Err(e) => {
                if !error_offset.is_null() {
                    *error_offset = e.offset;
                }
                fail(KgcStatus::Protocol, e.to_string())
            }
        }
    })
}

#[no_mangle]
pub extern "C" fn kgc_stream_new() -> *mut KgcStream {
    Box::into_raw(Box::new(KgcStream(StreamParser::new())))
}

/// Appends a chunk. After an error the stream stays failed.
///
/// # Safety
/// `s` must be a live stream handle; `chunk` a NUL-terminated string; `error_offset` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn kgc_stream_feed(
    s: *mut KgcStream,
    chunk: *const c_char,
    error_offset: *mut usize,
) -> KgcStatus {
    guard(|| {
        if s.is_null() {
            return fail(KgcStatus::NullArgument, "null stream");
        }
        let chunk = try_ffi!(read_str(chunk));
        match (*s).0.feed(chunk) {
            Ok(()) => KgcStatus::Ok,
            Err(e) => {
                if !error_offset.is_null() {
                    *error_offset = e.offset;
                }
                fail(KgcStatus::Protocol, e.to_string())
            }
        }
    })
}

/// The pending search as JSON `{"kind","query"}`, or NULL in `out` when none.
///
/// # Safety
/// `s` must be a live stream handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgc_stream_pending_json(s: *const KgcStream, out: *mut *mut c_char) -> KgcStatus {
    guard(|| {
        if s.is_null() || out.is_null() {
            return fail(KgcStatus::NullArgument, "null argument");
        }
        match (*s).0.pending() {
            Some(p) => write_string(out, serde_json::to_string(&p).expect("request serializes")),
            None => {
                *out = ptr::null_mut();
                KgcStatus::Ok
            }
        }
    })
}

/// # Safety
/// `s` must be a live stream handle.
#[no_mangle]
pub unsafe extern "C" fn kgc_stream_is_complete(s: *const KgcStream) -> bool {
    !s.is_null() && (*s).0.is_complete()
}

/// # Safety
/// `s` must be NULL or a handle from `kgc_stream_new`, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn kgc_stream_free(s: *mut KgcStream) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Renders the generation prompt from a task and an answer given as JSON
/// (`{"refined_knowledge": [...], "specialized_solution": "..."}`).
///
/// # Safety
/// `task` and `answer_json` must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgc_build_prompt(
    task: *const c_char,
    answer_json: *const c_char,
    out: *mut *mut c_char,
) -> KgcStatus {
    guard(|| {
        let task = try_ffi!(read_str(task));
        let json = try_ffi!(read_str(answer_json));
        let answer: AgentAnswer = match serde_json::from_str(json) {
            Ok(a) => a,
            Err(e) => return fail(KgcStatus::Parse, format!("answer JSON: {e}")),
        };
        write_string(out, codegen::build_prompt(task, &answer).rendered)
    })
}

/// First fenced code block of a reply, or the trimmed reply.
///
/// # Safety
/// `reply` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgc_extract_code(reply: *const c_char, out: *mut *mut c_char) -> KgcStatus {
    guard(|| {
        let reply = try_ffi!(read_str(reply));
        match codegen::extract_code(reply) {
            Ok(code) => write_string(out, code),
            Err(e) => fail(KgcStatus::InvalidArgument, e.to_string()),
        }
    })
}
