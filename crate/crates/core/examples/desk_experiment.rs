//! Pre-trains the toy backbone on synthetic identities, fine-tunes it with the
//! octuplet loss and prints cross-resolution accuracy before and after.
//!
//! Usage: desk_experiment [seed] [--ablation]

use std::time::Instant;

use octuplet::experiment::{grid_markdown, term_mask_cells, DeskConfig, DeskExperiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.iter().find_map(|a| a.parse::<u64>().ok()).unwrap_or(0);
    let ablation = args.iter().any(|a| a == "--ablation");

    let t = Instant::now();
    let exp = DeskExperiment::prepare(DeskConfig::new(seed))?;
    let acc = exp.pretrain_report.epoch_accuracy.last().copied().unwrap_or(0.0);
    eprintln!("prepared in {:.1}s, final pre-training accuracy {acc:.3}", t.elapsed().as_secs_f64());

    let cells = if ablation {
        term_mask_cells(&exp.config.finetune)
    } else {
        vec![("all".to_string(), exp.config.finetune.clone())]
    };
    let t = Instant::now();
    let out = exp.run(&cells)?;
    eprintln!("fine-tuning finished in {:.1}s", t.elapsed().as_secs_f64());
    for r in &out.baseline.results {
        println!("baseline {} px: {:.4}", r.resolution, r.accuracy);
    }
    print!("{}", grid_markdown(&out.rows));
    Ok(())
}
