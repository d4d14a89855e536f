//! Writes a synthetic clean corpus and matching tool schema for demos:
//!
//! ```sh
//! cargo run --example synth_corpus -- --out demo --count 50 --seed 7
//! reflex perturb --input demo/clean.jsonl --schema demo/tools.json --out demo
//! ```

use std::path::PathBuf;

use clap::Parser;
use reflex_core::jsonl;
use reflex_core::synth::{synth_corpus, SynthConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "demo")]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    std::fs::create_dir_all(&args.out)?;
    let cfg = SynthConfig {
        seed: args.seed,
        trajectories: args.count,
        ..Default::default()
    };
    let (registry, corpus) = synth_corpus(&cfg);
    jsonl::write_jsonl(args.out.join("clean.jsonl"), corpus.iter())?;
    std::fs::write(
        args.out.join("tools.json"),
        serde_json::to_string_pretty(&registry.to_schemas())? + "\n",
    )?;
    println!(
        "wrote {} trajectories and {} tool schemas to {}",
        corpus.len(),
        registry.len(),
        args.out.display()
    );
    Ok(())
}
