//! Runs the whole staged pipeline on a small blobs problem and prints the
//! report. Rerunning reuses every checkpoint under the output directory.
//!
//! cargo run --example pipeline -- [out_dir]

use std::path::PathBuf;

use ocd::harness::{Pipeline, PipelineConfig, Stage};

fn main() -> ocd::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ocd-example"));
    let cfg = PipelineConfig::default().with_overrides(&[
        "name=\"smoke\"",
        "seeds=[1, 2]",
        "dataset.n=400",
        "select.draws=1000",
        "diffusion.epochs=3",
        "diffusion.d_cond=16",
        "diffusion.lr=1e-3",
        "diffusion.denoiser.channels=8",
        "scale.epochs=10",
        "scale.lr=1e-3",
        "eval.ensemble_k=3",
    ])?;
    let pipeline = Pipeline::new(cfg, &out)?;
    let (report, files) = pipeline.run_until(Stage::Report)?.expect("report stage");
    print!("{}", report.to_markdown());
    println!("\nfiles: {}, {}, {}", files.json.display(), files.csv.display(), files.markdown.display());
    Ok(())
}
