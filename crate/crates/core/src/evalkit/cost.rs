use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Extra per-token FLOPs of a single bottleneck adapter versus a tree of
/// `t` adapters on the root-to-leaf path (two paths at inference).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub layers: u64,
    pub d_model: u64,
    pub bottleneck: u64,
    pub t: u64,
    pub adapter_train: u64,
    pub adapter_inference: u64,
    pub hierarchy_train: u64,
    pub hierarchy_inference: u64,
    pub train_ratio: Ratio<u64>,
    pub inference_ratio: Ratio<u64>,
}

pub fn cost_estimate(layers: u64, d_model: u64, bottleneck: u64, t: u64) -> Result<CostEstimate> {
    if layers == 0 || d_model == 0 || bottleneck == 0 || t == 0 {
        return Err(config("cost model inputs must be positive"));
    }
    let overflow = || config("cost model overflows u64");
    let adapter = 4u64
        .checked_mul(layers)
        .and_then(|x| x.checked_mul(d_model))
        .and_then(|x| x.checked_mul(bottleneck))
        .ok_or_else(overflow)?;
    let hierarchy_train = adapter.checked_mul(t).ok_or_else(overflow)?;
    let hierarchy_inference = hierarchy_train.checked_mul(2).ok_or_else(overflow)?;
    Ok(CostEstimate {
        layers,
        d_model,
        bottleneck,
        t,
        adapter_train: adapter,
        adapter_inference: adapter,
        hierarchy_train,
        hierarchy_inference,
        train_ratio: Ratio::new(hierarchy_train, adapter),
        inference_ratio: Ratio::new(hierarchy_inference, adapter),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios() {
        let c = cost_estimate(12, 768, 64, 8).unwrap();
        assert_eq!(c.adapter_train, 2_359_296);
        assert_eq!(c.train_ratio, Ratio::from_integer(8));
        assert_eq!(c.inference_ratio, Ratio::from_integer(16));
        let c = cost_estimate(2, 32, 16, 1).unwrap();
        assert_eq!((c.train_ratio, c.inference_ratio), (Ratio::from_integer(1), Ratio::from_integer(2)));
        assert!(cost_estimate(0, 1, 1, 1).is_err());
        assert!(cost_estimate(1, 1, 1, 0).is_err());
    }
}
