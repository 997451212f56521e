//! Lightweight diagnostics: warnings that should reach the user without
//! pulling in a logging framework.
//!
//! Warnings are printed to stderr *and* recorded in a per-process buffer so
//! that experiment drivers can persist them into run manifests.

use std::sync::Mutex;

static WARNINGS: Mutex<Vec<String>> = Mutex::new(Vec::new());

/// Emit a warning: printed to stderr and retained for manifest reporting.
pub fn warn(msg: impl Into<String>) {
    let msg = msg.into();
    eprintln!("warning: {msg}");
    WARNINGS.lock().expect("warning buffer poisoned").push(msg);
}

/// Drain all warnings recorded since the last call (process-wide).
pub fn take_warnings() -> Vec<String> {
    std::mem::take(&mut *WARNINGS.lock().expect("warning buffer poisoned"))
}
