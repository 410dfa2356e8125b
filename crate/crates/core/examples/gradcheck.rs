//! Finite-difference check of every graph op and the composed losses.

use l2a_ot::diagnostics::gradient_suite;

fn main() -> l2a_ot::Result<()> {
    let results = gradient_suite(0)?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(())
}
