/* Write a deterministic synthetic video dataset to disk.

   Each clip is a sinusoidal gradient background with a few filled squares,
   the whole scene translating at a constant integer pixel velocity with
   wraparound. Frames land as zero-padded PNGs next to a TOML manifest that
   the train and eval commands consume.

   cargo run --example generate_data -- data/synth 256 64 9 0
   (arguments: out_dir n_clips resolution frames seed, all optional)
*/

use cdt::data::{make_synthetic_dataset, synth_clip};
use cdt::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map(String::as_str).unwrap_or("data/synth");
    let n_clips: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(256);
    let res: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(64);
    let frames: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(9);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);

    let manifest = make_synthetic_dataset(seed, n_clips, res, frames, out)?;
    println!("manifest: {}", manifest.display());

    // peek at the first clip's motion so reruns are easy to sanity-check
    let clip = synth_clip(seed, 0, res, frames);
    println!(
        "clip 0 velocity: ({}, {}) px/frame over {} frames at {res}x{res}",
        clip.velocity.0,
        clip.velocity.1,
        clip.frames.len()
    );
    Ok(())
}
