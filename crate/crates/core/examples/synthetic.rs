//! Generates a synthetic volume, writes it as NRRD and dumps its slices
//! as PGM images.

use volnorm::data::{generate_synthetic, read_nrrd_pair, write_nrrd, write_pgm_slices, NrrdEncoding, SynthSpec};

fn main() -> volnorm::Result<()> {
    let out = std::env::temp_dir().join("volnorm-synthetic");
    let vol = generate_synthetic(&SynthSpec::default().with_seed(3))?;
    println!(
        "{}x{}x{} volume, foreground fraction {:.3}",
        vol.slices(),
        vol.height(),
        vol.width(),
        vol.foreground_fraction()
    );

    std::fs::create_dir_all(&out)?;
    write_nrrd(out.join("image.nrrd"), &vol.intensity_grid(), NrrdEncoding::Gzip)?;
    write_nrrd(out.join("mask.nrrd"), &vol.mask_grid(), NrrdEncoding::Raw)?;
    let back = read_nrrd_pair(out.join("image.nrrd"), out.join("mask.nrrd"))?;
    println!("mask survives the NRRD round trip: {}", back.mask() == vol.mask());

    let slices = write_pgm_slices(out.join("pgm"), "image", &vol.intensity_grid())?;
    write_pgm_slices(out.join("pgm"), "mask", &vol.mask_grid())?;
    println!("wrote {} slice pairs under {}", slices.len(), out.display());
    Ok(())
}
