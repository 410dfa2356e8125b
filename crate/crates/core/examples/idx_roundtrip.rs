//! Writes a small IDX image/label pair, reads it back and loads it as a
//! three-channel domain.

use l2a_ot::data::idx::{load_idx_domain, read_images, write_images, write_labels, IdxImages};

fn main() -> l2a_ot::Result<()> {
    let dir = std::env::temp_dir().join("l2a_idx_example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let img = IdxImages {
        count: 20,
        rows: 28,
        cols: 28,
        pixels: (0..20 * 28 * 28).map(|i| ((i * 37) % 256) as u8).collect(),
    };
    let labels: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
    let (xp, yp) = (dir.join("images-idx3-ubyte"), dir.join("labels-idx1-ubyte"));
    write_images(&xp, &img)?;
    write_labels(&yp, &labels)?;
    assert_eq!(read_images(&xp)?, img);
    let ds = load_idx_domain(&xp, &yp, 32, 0)?;
    println!(
        "{} images at {}x{} from {}",
        ds.len(),
        ds.image_size(),
        ds.image_size(),
        ds.provenance()
    );
    println!("class histogram {:?}", ds.class_histogram());
    Ok(())
}
