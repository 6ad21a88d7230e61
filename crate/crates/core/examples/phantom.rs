//! Generate one synthetic phantom and print its ground truth.
//!
//! `cargo run --release --example phantom -- [seed] [out_dir]`

use ventri::phantom::{generate_phantom, PhantomSpec};

fn main() -> ventri::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let p = generate_phantom(&PhantomSpec::with_seed(seed))?;
    let t = p.truth();
    println!("grid {:?} at {:?} mm", p.us.grid.dims, p.us.grid.spacing);
    println!("skull ellipsoid semi-axes {:.1?} mm", t.ellipsoid.semi_axes.as_slice());
    println!("brain volume      {:>10.0} mm³ (fraction {:.3})", t.brain_volume_mm3, t.brain_fraction);
    println!("ventricle volume  {:>10.0} mm³", t.ventricle_volume_mm3);
    println!("ratio             {:>10.4}", t.ratio);
    println!("ultrasound non-zero mean {:.1}", p.us.nonzero_mean()?);
    if let Some(dir) = args.next() {
        p.save(&dir)?;
        println!("written to {dir}");
    }
    Ok(())
}
