#![allow(dead_code)]

pub mod oracle;

use std::io::Write;

/// Prints past the test harness's output capture.
pub fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}
