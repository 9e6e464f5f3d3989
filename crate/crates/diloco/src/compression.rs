//! Structured pruning of outer gradients before aggregation.
//!
//! Pruning operates independently on each neuron group of the model layout
//! (a weight row plus its bias; embedding rows count as groups). Within a
//! group, a two-stage rule applies: first the dominant sign is elected by
//! magnitude-weighted vote (ties go to positive) and all minority-sign
//! elements are zeroed; then the smallest-magnitude survivors are zeroed
//! until at least fraction `p` of the group's elements are zero. Surviving
//! elements keep their exact values.

use crate::model::Layout;
use crate::numerics::ParamVector;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CompressionError {
    #[error("prune fraction must be in [0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("delta length {got} does not match model layout ({want})")]
    LengthMismatch { got: usize, want: usize },
}

/// Prune `delta` per neuron group so that at least fraction `frac` of each
/// group is zero. `frac == 0` returns the input unchanged.
pub fn prune_outer_gradient(
    delta: &ParamVector,
    frac: f64,
    layout: &Layout,
) -> Result<ParamVector, CompressionError> {
    if !(0.0..1.0).contains(&frac) {
        return Err(CompressionError::InvalidFraction(frac));
    }
    if delta.len() != layout.param_count {
        return Err(CompressionError::LengthMismatch { got: delta.len(), want: layout.param_count });
    }
    let mut out = delta.clone();
    if frac == 0.0 {
        return Ok(out);
    }
    for group in layout.neuron_groups() {
        let idx: Vec<usize> = group.indices().collect();
        prune_group(&mut out.0, &idx, frac);
    }
    Ok(out)
}

fn prune_group(values: &mut [f64], idx: &[usize], frac: f64) {
    // Stage 1: elect the dominant sign by magnitude-weighted vote.
    let mut pos = 0.0;
    let mut neg = 0.0;
    for &i in idx {
        let v = values[i];
        if v > 0.0 {
            pos += v;
        } else {
            neg += -v;
        }
    }
    let keep_positive = pos >= neg;
    let mut zeros = 0usize;
    for &i in idx {
        let v = values[i];
        if v == 0.0 {
            zeros += 1;
        } else if v.is_sign_positive() != keep_positive {
            values[i] = 0.0;
            zeros += 1;
        }
    }

    // Stage 2: zero the smallest-magnitude survivors until the group's zero
    // count reaches ceil(frac·n).
    let need = (frac * idx.len() as f64).ceil() as usize;
    if zeros >= need {
        return;
    }
    let mut survivors: Vec<usize> = idx.iter().copied().filter(|&i| values[i] != 0.0).collect();
    survivors.sort_by(|&a, &b| {
        values[a]
            .abs()
            .partial_cmp(&values[b].abs())
            .expect("finite magnitudes")
            .then(a.cmp(&b))
    });
    for &i in survivors.iter().take(need - zeros) {
        values[i] = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    /// Layout whose first group (embedding row 0) has exactly 4 elements.
    fn four_wide_layout() -> Layout {
        ModelConfig { vocab_size: 1, context_len: 1, embed_dim: 4, hidden_dim: 1 }.layout()
    }

    fn with_first_group(values: [f64; 4]) -> ParamVector {
        let layout = four_wide_layout();
        let mut v = ParamVector::zeros(layout.param_count);
        v.0[..4].copy_from_slice(&values);
        v
    }

    #[test]
    fn hand_traced_example() {
        let layout = four_wide_layout();
        let delta = with_first_group([3.0, -1.0, 2.0, -0.5]);
        let pruned = prune_outer_gradient(&delta, 0.5, &layout).unwrap();
        assert_eq!(&pruned.0[..4], &[3.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn zero_fraction_is_identity() {
        let layout = four_wide_layout();
        let delta = with_first_group([3.0, -1.0, 2.0, -0.5]);
        let pruned = prune_outer_gradient(&delta, 0.0, &layout).unwrap();
        assert_eq!(pruned, delta);
    }

    #[test]
    fn all_zero_delta_stays_zero() {
        let layout = four_wide_layout();
        let delta = ParamVector::zeros(layout.param_count);
        for frac in [0.0, 0.25, 0.5, 0.75] {
            assert_eq!(prune_outer_gradient(&delta, frac, &layout).unwrap(), delta);
        }
    }

    #[test]
    fn dominant_negative_sign_survives() {
        let layout = four_wide_layout();
        let delta = with_first_group([-3.0, -2.0, 1.0, 0.0]);
        let pruned = prune_outer_gradient(&delta, 0.5, &layout).unwrap();
        assert_eq!(&pruned.0[..4], &[-3.0, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn magnitude_cut_after_sign_election() {
        let layout = four_wide_layout();
        let delta = with_first_group([4.0, 3.0, 2.0, 1.0]);
        let pruned = prune_outer_gradient(&delta, 0.75, &layout).unwrap();
        // ceil(0.75·4) = 3 zeros required; smallest magnitudes go first.
        assert_eq!(&pruned.0[..4], &[4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_fraction_is_rejected() {
        let layout = four_wide_layout();
        let delta = ParamVector::zeros(layout.param_count);
        assert!(matches!(
            prune_outer_gradient(&delta, 1.0, &layout),
            Err(CompressionError::InvalidFraction(_))
        ));
        assert!(matches!(
            prune_outer_gradient(&delta, -0.1, &layout),
            Err(CompressionError::InvalidFraction(_))
        ));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let layout = four_wide_layout();
        let delta = ParamVector::zeros(layout.param_count + 3);
        assert!(matches!(
            prune_outer_gradient(&delta, 0.5, &layout),
            Err(CompressionError::LengthMismatch { .. })
        ));
    }

    fn arb_delta(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop_oneof![3 => -10.0..10.0f64, 1 => Just(0.0)],
            n,
        )
    }

    proptest! {
        #[test]
        fn prune_invariants(
            values in arb_delta(135),
            frac in prop::sample::select(vec![0.1, 0.25, 0.5, 0.75, 0.9]),
        ) {
            let cfg = ModelConfig { vocab_size: 7, context_len: 3, embed_dim: 4, hidden_dim: 5 };
            let layout = cfg.layout();
            prop_assert_eq!(layout.param_count, values.len());
            let delta = ParamVector(values);
            let pruned = prune_outer_gradient(&delta, frac, &layout).unwrap();

            // Support subset + survivors unmodified.
            for i in 0..delta.len() {
                prop_assert!(pruned[i] == 0.0 || pruned[i] == delta[i]);
            }
            // Per-group zero fraction ≥ frac.
            for g in layout.neuron_groups() {
                let n = g.len();
                let zeros = g.indices().filter(|&i| pruned[i] == 0.0).count();
                prop_assert!(
                    zeros >= (frac * n as f64).ceil() as usize,
                    "group {:?}: {} zeros of {}", g, zeros, n
                );
            }
            // Idempotence at fixed fraction.
            let twice = prune_outer_gradient(&pruned, frac, &layout).unwrap();
            prop_assert_eq!(twice, pruned);
        }
    }
}
