//! Writes a random quadruped scene for trying the CLI.
//!
//! ```text
//! cargo run --example make_scene -- scene 7 12
//! posecraft make-targets --config scene/config.json --pose scene/pose.json --out scene
//! posecraft pose --config scene/config.json --out scene/fit
//! ```

use std::path::PathBuf;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "scene".into()));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let bones = args.next().map_or(12, |s| s.parse().expect("bone count must be an integer"));
    match posecraft::synth::write_scene(&dir, seed, bones) {
        Ok(files) => println!("{}", files.config.display()),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    }
}
