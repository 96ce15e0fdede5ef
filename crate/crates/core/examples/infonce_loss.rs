//! The symmetric contrastive loss on hand-made embeddings: uninformative,
//! aligned and misaligned batches.

use sigmma::alignment::infonce_value;
use sigmma::numcore::{Rng, Tensor};

fn main() -> sigmma::Result<()> {
    let n = 8;
    let mut rng = Rng::new(4);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
    let z = Tensor::from_rows(&rows)?;
    let shifted = Tensor::from_rows(&rows.iter().cycle().skip(1).take(n).cloned().collect::<Vec<_>>())?;
    let same = Tensor::from_rows(&vec![vec![1.0; 16]; n])?;

    println!("ln N = {:.4}", (n as f64).ln());
    for tau in [1.0, 0.07] {
        println!("tau = {tau}");
        println!("  identical rows : {:.4}", infonce_value(&same, &same, tau)?);
        println!("  aligned pairs  : {:.4}", infonce_value(&z, &z, tau)?);
        println!("  shifted pairs  : {:.4}", infonce_value(&z, &shifted, tau)?);
    }
    Ok(())
}
