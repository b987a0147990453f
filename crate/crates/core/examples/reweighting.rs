//! Effective-number class weights for a long-tailed pool.

use std::collections::BTreeMap;

use tae::rebalance::effective_weights;

fn main() -> tae::Result<()> {
    let counts = BTreeMap::from([(0, 500), (1, 120), (2, 30), (3, 5), (4, 1)]);
    for beta in [0.0, 0.9, 0.95, 0.999] {
        let w = effective_weights(&counts, beta)?;
        let shown: Vec<String> = w.weights().iter().map(|(c, v)| format!("{c}:{v:.4}")).collect();
        println!("beta {beta:<5} {}", shown.join("  "));
    }
    Ok(())
}
