//! Finite-difference checks of every backward pass.

use volnorm::gradcheck::run_all;

fn main() -> volnorm::Result<()> {
    let include_network = !std::env::args().any(|a| a == "--skip-network");
    for r in run_all(include_network)? {
        println!(
            "{:<28} {:.2e} (tolerance {:.0e}) {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
