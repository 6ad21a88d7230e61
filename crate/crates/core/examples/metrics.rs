//! Overlap and surface-distance metrics on two offset spheres.

use ventri::metrics::{dice, hausdorff, mean_absolute_surface_distance, pearson_r, ventricle_brain_ratio};
use ventri::volume::{Grid, LabelMap};
use ventri::Vec3;

fn main() -> ventri::error::Result<()> {
    let g = Grid::new([40, 40, 40], [1.0; 3], [0.0; 3])?;
    let c = g.center();
    let a = LabelMap::from_fn(g, |p| (p - c).norm() <= 10.0);
    let b = LabelMap::from_fn(g, |p| (p - c - Vec3::new(2.0, 0.0, 0.0)).norm() <= 11.0);
    println!("dice       {:.4}", dice(&a, &b)?);
    println!("mad        {:.3} mm", mean_absolute_surface_distance(&a, &b)?);
    println!("hausdorff  {:.3} mm", hausdorff(&a, &b)?);
    println!("volumes    {:.0} / {:.0} mm³", a.volume_mm3(), b.volume_mm3());
    let est = [10.2, 12.9, 8.1, 15.5];
    let truth = [10.0, 13.0, 8.5, 15.0];
    println!("pearson r  {:.4}", pearson_r(&est, &truth)?);
    println!("ratio      {:.4}", ventricle_brain_ratio(a.volume_mm3(), 500_000.0)?);
    Ok(())
}
