//! The KTO objective on hand-picked log-ratios, and the effect of the
//! reference baseline.

use genicl::kto::{baseline_from_ratios, kto_objective};

fn main() {
    // Preferred item with log-ratio 2, non-preferred with -1, beta 0.1.
    let o = kto_objective(&[2.0], &[-1.0], 0.0, 0.1, 1.0, 1.0);
    println!("loss {:.6}, d/dr_w {:.6}, d/dr_l {:.6}", o.loss, o.d_rw[0], o.d_rl[0]);

    // Mismatched pairs give the baseline; it never goes below zero.
    for ratios in [vec![3.0, 1.0, 2.0], vec![-4.0, 0.5]] {
        let s = baseline_from_ratios(&ratios, 0.1);
        let o = kto_objective(&[2.0], &[-1.0], s, 0.1, 1.0, 1.0);
        println!("mismatched {ratios:?}: baseline {s:.3}, loss {:.6}", o.loss);
    }
}
