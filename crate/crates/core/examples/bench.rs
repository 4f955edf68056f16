//! Runs the smoke plan and prints the Markdown report.

use volnorm::bench::{emit_report, run_plan, ExperimentPlan, ReportFormat, RunOptions};

fn main() -> volnorm::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/plans/smoke.cfg").to_string());
    let plan = ExperimentPlan::load(&path)?;
    let reports = run_plan(&plan, &RunOptions::default())?;
    print!("{}", emit_report(&reports, ReportFormat::Markdown));
    Ok(())
}
