//! The property and oracle suite, once clean and once with a corrupted
//! output projection.

use coopadapt::verify::{run_suite, VerifyOptions};

fn main() {
    for corrupt_w_out in [false, true] {
        println!("corrupt_w_out = {corrupt_w_out}");
        for r in run_suite(&VerifyOptions { corrupt_w_out }) {
            println!("  {} {:<22} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        }
    }
}
