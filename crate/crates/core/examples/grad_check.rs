//! Prints the central-difference gradient check for every scope.

use retinexformer::diagnostics::{grad_check, Scope};

fn main() -> retinexformer::Result<()> {
    let mut all_passed = true;
    for scope in Scope::ALL {
        for row in grad_check(scope, 7)? {
            all_passed &= row.passed();
            println!(
                "{:8} {:40} max rel err {:.2e} over {:5} entries  {}",
                scope.name(),
                row.target,
                row.max_rel_error,
                row.checked,
                if row.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    println!("{}", if all_passed { "all checks passed" } else { "some checks failed" });
    Ok(())
}
