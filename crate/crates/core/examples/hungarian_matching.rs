//! Solves a rectangular assignment problem and shows that shifting every
//! cost leaves the matching unchanged.

use hoi_query::matcher::{hungarian_assign, CostMatrix};

fn main() -> hoi_query::Result<()> {
    // Four prediction slots, three ground truths.
    let cost = CostMatrix::new(4, 3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0, 0.5, 4.0, 6.0])?;
    let a = hungarian_assign(&cost);
    for &(slot, gt) in &a.pairs {
        println!("slot {slot} -> gt {gt} (cost {})", cost.get(slot, gt));
    }
    println!("total {}", cost.total(&a.pairs));
    let shifted = CostMatrix::new(4, 3, (0..12).map(|k| cost.get(k / 3, k % 3) + 100.0).collect())?;
    println!("same assignment after +100 shift: {}", hungarian_assign(&shifted) == a);
    Ok(())
}
