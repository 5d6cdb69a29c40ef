//! Differentiates a small sparse network and checks it against central
//! finite differences.

use sgnn::autograd::gradcheck::check_gradients;
use sgnn::autograd::{BnMode, CoordSet, SparseTensor};
use sgnn::grid::VoxelCoord;

fn main() -> sgnn::Result<()> {
    let coords = CoordSet::shared(
        (0..20)
            .map(|i| VoxelCoord::new(i % 4, (i / 4) % 3, i % 5))
            .collect(),
    );
    let n = coords.len();
    let wave = |k: usize, s: f64| (0..k).map(|i| ((i as f64 + 1.0) * s).sin()).collect::<Vec<_>>();
    let leaves = vec![wave(n * 2, 0.7), wave(27 * 2 * 4, 0.31), wave(4, 1.3), wave(4, 0.4), wave(8 * 4, 0.9)];
    let head = wave(coords.downsample().0.len(), 0.53);

    let check = check_gradients(&leaves, 1e-5, |g, v| {
        let x = SparseTensor { coords: coords.clone(), feats: v[0], channels: 2 };
        let h = g.subm_conv3(&x, v[1], None, 4)?;
        let (h, _) = g.batch_norm_sparse(&h, v[2], v[3], BnMode::Train)?;
        let h = SparseTensor { feats: g.sigmoid(h.feats), ..h };
        let y = g.down_conv2(&h, v[4], None, 1)?;
        g.dot(y.feats, head.clone())
    })?;
    for (name, e) in ["features", "conv", "gamma", "beta", "down"].iter().zip(&check.rel_errors) {
        println!("{name:<9} relative error {e:.2e}");
    }
    Ok(())
}
