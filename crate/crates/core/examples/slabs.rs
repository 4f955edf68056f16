//! Cuts a volume into overlapping 16-slice slabs and shows which slab
//! supplies each output slice when predictions are recomposed.

use volnorm::data::{compose_prediction, slab_starts, slice_owners, slice_slabs, generate_synthetic, SynthSpec};

fn main() -> volnorm::Result<()> {
    for depth in [16, 20, 32, 44] {
        let starts = slab_starts(depth)?;
        let owners = slice_owners(&starts)?;
        let runs: Vec<String> = starts
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let mine: Vec<usize> = (0..depth).filter(|&z| owners[z].0 == j).collect();
                format!("slab@{s}->[{}..{}]", mine[0], mine[mine.len() - 1])
            })
            .collect();
        println!("S={depth:>3}: {}", runs.join(" "));
    }

    let vol = generate_synthetic(&SynthSpec {
        slices: 40,
        ..SynthSpec::default()
    })?;
    let slabs = slice_slabs(&vol)?;
    let parts: Vec<_> = slabs.iter().map(|s| (s, s.target.clone())).collect();
    let mask = compose_prediction(&parts)?;
    println!("identity predictions recompose the mask: {}", mask.data() == vol.mask());
    Ok(())
}
