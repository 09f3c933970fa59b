//! Structured log lines: `ts=<us> level=<level> comp=<component> msg="<message>" k=v ...`
//! on stderr, greppable from scenario tests.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

static QUIET: AtomicBool = AtomicBool::new(false);

/// Silence log output (used by tests and `--quiet`).
pub fn set_quiet(quiet: bool) {
    QUIET.store(quiet, Ordering::Relaxed);
}

fn emit(level: &str, component: &str, message: &str, kvs: &[(&str, String)]) {
    if QUIET.load(Ordering::Relaxed) {
        return;
    }
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros())
        .unwrap_or(0);
    let mut line = format!("ts={ts} level={level} comp={component} msg=\"{message}\"");
    for (k, v) in kvs {
        line.push_str(&format!(" {k}={v}"));
    }
    eprintln!("{line}");
}

pub fn info(component: &str, message: &str, kvs: &[(&str, String)]) {
    emit("info", component, message, kvs);
}

pub fn warn(component: &str, message: &str, kvs: &[(&str, String)]) {
    emit("warn", component, message, kvs);
}

pub fn error(component: &str, message: &str, kvs: &[(&str, String)]) {
    emit("error", component, message, kvs);
}
