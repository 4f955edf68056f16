//! Reads the 2x2x2 test fixture and shows a rejected header.

use volnorm::data::{parse_nrrd, read_nrrd, read_nrrd_grid};

fn main() -> volnorm::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");
    let raw = read_nrrd_grid(format!("{dir}/tiny_raw.nrrd"))?;
    println!("extents {:?} raw values {:?}", raw.extents(), raw.values);
    let vol = read_nrrd(format!("{dir}/tiny_raw.nrrd"))?;
    println!("rescaled {:?}", vol.intensities());
    let bytes = std::fs::read(format!("{dir}/four_dim.nrrd"))?;
    match parse_nrrd(&bytes) {
        Err(e) => println!("four_dim.nrrd: {e}"),
        Ok(_) => println!("four_dim.nrrd unexpectedly parsed"),
    }
    Ok(())
}
