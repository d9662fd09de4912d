//! Generates a labeled synthetic dataset on disk and reads it back.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [root]
//! ```

use std::path::PathBuf;

use pignet::data::io::{list_categories, write_dataset};
use pignet::data::{synth_generate, DatasetSplit, SynthShape};

fn main() -> pignet::Result<()> {
    let root = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("pignet-synth"), PathBuf::from);

    for kind in SynthShape::ALL {
        let shapes = synth_generate(kind, 10, 512, 7)?;
        let (train, rest) = shapes.split_at(6);
        let (val, test) = rest.split_at(2);
        write_dataset(&root, kind.name(), train, val, test)?;
    }

    for category in list_categories(&root)? {
        let split = DatasetSplit::load(&root, &category)?;
        let train = DatasetSplit::load_clouds(&split.train, 0)?;
        let first = &train[0];
        let mut counts = vec![0usize; first.labels()?.iter().max().map_or(0, |m| m + 1)];
        for &l in first.labels()? {
            counts[l] += 1;
        }
        println!(
            "{category}: {} train / {} val / {} test; {} has {} points, per-part counts {counts:?}",
            split.train.len(),
            split.val.len(),
            split.test.len(),
            first.id,
            first.len()
        );
    }
    println!("dataset written to {}", root.display());
    Ok(())
}
