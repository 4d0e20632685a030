//! Channel importance: `|γ|·sqrt(Σ_j ‖W_{i,j}‖²)` for the consumer slices of
//! a channel, which collapses to `|γ|` once those slices have unit norm.

use crate::error::{Error, Result};
use crate::network::{LayerId, Model};
use crate::tensor::{Scalar, Tensor};

/// `Σ_j ‖W[j, i, :, :]‖²` over all output filters `j`.
pub fn channel_l2<T: Scalar>(weights: &Tensor<T>, i: usize) -> Result<f64> {
    let [n, m, kh, kw] = weights.dims4("channel_l2")?;
    if i >= m {
        return Err(Error::Input(format!("input channel {i} out of range for {m} channels")));
    }
    let slice = kh * kw;
    let data = weights.data();
    let mut sum = 0.0;
    for j in 0..n {
        let start = (j * m + i) * slice;
        sum += data[start..start + slice].iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    Ok(sum)
}

/// Squared norm of one feature column of the classifier weights.
fn head_column_l2<T: Scalar>(weights: &Tensor<T>, i: usize) -> f64 {
    let features = weights.shape()[1];
    weights
        .data()
        .iter()
        .skip(i)
        .step_by(features)
        .map(|v| v.as_f64() * v.as_f64())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FoldOutcome {
    /// Consumer slice divided by `scale`, producer γ and β multiplied by it.
    Folded { scale: f64 },
    /// The consumer slice is all zeros; the channel carries no signal.
    Dead,
    /// The channel is read by more than one layer, by the head, or is part
    /// of a shared group.
    NotFoldable,
}

/// The single consumer conv of a BatchNorm's channels, if folding applies.
fn fold_site<T: Scalar>(model: &Model<T>, bn: LayerId) -> Result<Option<LayerId>> {
    let g = model
        .group_of(bn)
        .ok_or_else(|| Error::Input(format!("layer {bn} is not a BatchNorm")))?;
    let info = &model.groups()[g].info;
    if info.is_shared() || info.feeds_head || info.consumers.len() != 1 {
        return Ok(None);
    }
    Ok(Some(info.consumers[0]))
}

/// Rescales the consumer slice of channel `i` of BatchNorm `bn` to unit norm,
/// moving the factor into that channel's γ and β.
pub fn fold_unit_norm<T: Scalar>(model: &mut Model<T>, bn: LayerId, i: usize) -> Result<FoldOutcome> {
    let Some(consumer) = fold_site(model, bn)? else {
        return Ok(FoldOutcome::NotFoldable);
    };
    let w = model.conv_weight(consumer).expect("consumer conv exists");
    let s = channel_l2(w, i)?.sqrt();
    if s == 0.0 {
        return Ok(FoldOutcome::Dead);
    }
    if s == 1.0 {
        return Ok(FoldOutcome::Folded { scale: 1.0 });
    }
    let [n, m, kh, kw] = w.dims4("fold")?;
    let slice = kh * kw;
    let inv = T::of(1.0 / s);
    let w = model.conv_weight_mut(consumer).expect("consumer conv exists");
    let data = w.data_mut();
    for j in 0..n {
        let start = (j * m + i) * slice;
        for v in &mut data[start..start + slice] {
            *v *= inv;
        }
    }
    let p = model.bn_mut(bn).expect("checked above");
    let st = T::of(s);
    p.gamma[i] *= st;
    p.beta[i] *= st;
    Ok(FoldOutcome::Folded { scale: s })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FoldSummary {
    pub folded: usize,
    pub dead: usize,
    pub not_foldable: usize,
}

/// Folds every kept channel of every foldable singleton group.
pub fn fold_all<T: Scalar>(model: &mut Model<T>) -> Result<FoldSummary> {
    let mut summary = FoldSummary::default();
    let sites: Vec<(LayerId, Vec<usize>)> = model
        .groups()
        .iter()
        .map(|g| (g.info.members[0], g.kept_indices()))
        .collect();
    for (bn, channels) in sites {
        for i in channels {
            match fold_unit_norm(model, bn, i)? {
                FoldOutcome::Folded { .. } => summary.folded += 1,
                FoldOutcome::Dead => summary.dead += 1,
                FoldOutcome::NotFoldable => summary.not_foldable += 1,
            }
        }
    }
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelScore {
    pub group: usize,
    pub channel: usize,
    pub score: f64,
}

pub type ImportanceVector = Vec<ChannelScore>;

/// One score per group-channel, in (group, channel) order. Pruned channels
/// score 0.
pub fn importance_scores<T: Scalar>(model: &Model<T>) -> Result<ImportanceVector> {
    let mut out = Vec::new();
    let (head_w, _) = model.head();
    for g in model.groups() {
        let id = g.info.id;
        if let Some(mask) = &g.mask {
            for (c, &v) in mask.data().iter().enumerate() {
                let score = if g.kept[c] { v.as_f64().abs() } else { 0.0 };
                out.push(ChannelScore {
                    group: id,
                    channel: c,
                    score,
                });
            }
            continue;
        }
        let bn = g.info.members[0];
        let gamma = &model.bn(bn).expect("group member exists").gamma;
        let foldable = fold_site(model, bn)?.is_some();
        for c in 0..g.info.channels {
            let mut l2 = 0.0;
            for &conv in &g.info.consumers {
                l2 += channel_l2(model.conv_weight(conv).expect("consumer exists"), c)?;
            }
            if g.info.feeds_head {
                l2 += head_column_l2(head_w, c);
            }
            let mag = gamma[c].as_f64().abs();
            let score = if !g.kept[c] || l2 == 0.0 {
                0.0
            } else if foldable {
                mag
            } else {
                mag * l2.sqrt()
            };
            out.push(ChannelScore {
                group: id,
                channel: c,
                score,
            });
        }
    }
    if let Some(bad) = out.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite importance for group {} channel {}",
            bad.group, bad.channel
        )));
    }
    Ok(out)
}

/// Indices into `scores`, ascending by score with ties broken by group id
/// then channel index.
pub fn rank_channels(scores: &[ChannelScore]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&scores[a], &scores[b]);
        x.score
            .total_cmp(&y.score)
            .then(x.group.cmp(&y.group))
            .then(x.channel.cmp(&y.channel))
    });
    order
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::network::{convnet6, predict, ParamKey, SpecBuilder};
    use crate::tensor::BnMode;

    fn sc(group: usize, channel: usize, score: f64) -> ChannelScore {
        ChannelScore { group, channel, score }
    }

    #[test]
    fn l2_examples() {
        assert_eq!(channel_l2(&Tensor::<f32>::zeros(&[2, 3, 3, 3]), 1).unwrap(), 0.0);
        assert_eq!(channel_l2(&Tensor::<f32>::full(&[1, 1, 1, 1], 2.0), 0).unwrap(), 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f64>::from_fn(&[3, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut flat = 0.0;
        for j in 0..3 {
            for a in 0..3 {
                for b in 0..3 {
                    let v = w.data()[((j * 4 + 2) * 3 + a) * 3 + b];
                    flat += v * v;
                }
            }
        }
        assert!((channel_l2(&w, 2).unwrap() - flat).abs() < 1e-6);
        assert!(matches!(channel_l2(&w, 4), Err(Error::Input(_))));
    }

    fn chain() -> Model<f32> {
        let mut b = SpecBuilder::new("chain", 2, 5, 5);
        let x = b.conv_bn_relu(b.input(), 3, 3, 1);
        let x = b.conv_bn_relu(x, 2, 1, 1);
        b.head(x, 4);
        Model::init(b.finish(), 0).unwrap()
    }

    #[test]
    fn fold_example_halves_slice() {
        let mut m = chain();
        // Consumer conv 4 is 1×1 with 2 filters; channel 0 slice norm 2.
        let w = m.conv_weight_mut(4).unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        w.data_mut()[0] = 2.0;
        w.data_mut()[1] = 1.0;
        m.bn_mut(2).unwrap().gamma[0] = 0.5;
        m.bn_mut(2).unwrap().beta[0] = 0.1;
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| ((i * 13) % 11) as f32 / 11.0 - 0.4);
        let before = predict(&m, &x, BnMode::FrozenStats).unwrap();
        assert_eq!(fold_unit_norm(&mut m, 2, 0).unwrap(), FoldOutcome::Folded { scale: 2.0 });
        assert_eq!(m.conv_weight(4).unwrap().data()[0], 1.0);
        assert_eq!(m.bn(2).unwrap().gamma[0], 1.0);
        let after = predict(&m, &x, BnMode::FrozenStats).unwrap();
        assert!(before.max_abs_diff(&after).unwrap() < 1e-5);
        // Unit-norm slice: no-op.
        let snapshot = m.parts();
        assert_eq!(fold_unit_norm(&mut m, 2, 0).unwrap(), FoldOutcome::Folded { scale: 1.0 });
        assert_eq!(snapshot.conv, m.parts().conv);
        // Channel 2's slice is zero: dead.
        assert_eq!(fold_unit_norm(&mut m, 2, 2).unwrap(), FoldOutcome::Dead);
        // Last BN feeds the head.
        assert_eq!(fold_unit_norm(&mut m, 5, 0).unwrap(), FoldOutcome::NotFoldable);
    }

    #[test]
    fn folding_everything_preserves_logits_and_score() {
        let mut m = Model::<f32>::init(convnet6(3, 8, 8, 10), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for key in m.param_keys() {
            if matches!(key, ParamKey::Gamma(_) | ParamKey::Beta(_)) {
                for v in m.param_mut(key).unwrap().data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
        let pre = importance_pre_fold(&m);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0f32..1.0));
        let before = predict(&m, &x, BnMode::FrozenStats).unwrap();
        let summary = fold_all(&mut m).unwrap();
        assert_eq!(summary.folded, 16 + 16 + 32 + 32 + 64);
        assert_eq!(summary.not_foldable, 64);
        let after = predict(&m, &x, BnMode::FrozenStats).unwrap();
        assert!(before.max_abs_diff(&after).unwrap() < 1e-5);
        let post = importance_scores(&m).unwrap();
        for (a, b) in pre.iter().zip(&post) {
            assert!((a - b.score).abs() < 1e-6 * a.max(1.0), "{a} vs {}", b.score);
        }
    }

    fn importance_pre_fold(m: &Model<f32>) -> Vec<f64> {
        let mut out = Vec::new();
        for g in m.groups() {
            let gamma = &m.bn(g.info.members[0]).unwrap().gamma;
            for c in 0..g.info.channels {
                let mut l2 = 0.0;
                for &conv in &g.info.consumers {
                    l2 += channel_l2(m.conv_weight(conv).unwrap(), c).unwrap();
                }
                if g.info.feeds_head {
                    l2 += head_column_l2(m.head().0, c);
                }
                out.push(((gamma[c] as f64).powi(2) * l2).sqrt());
            }
        }
        out
    }

    #[test]
    fn score_examples() {
        let mut m = chain();
        m.bn_mut(2).unwrap().gamma[1] = -0.7;
        m.bn_mut(2).unwrap().gamma[2] = 0.0;
        // Make the head column of BN 5 channel 0 have squared norm 2.
        let (w, _) = m.head_mut();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        w.data_mut()[0] = 1.0;
        w.data_mut()[2] = 1.0;
        m.bn_mut(5).unwrap().gamma[0] = 0.5;
        let s = importance_scores(&m).unwrap();
        assert!((s[1].score - 0.7).abs() < 1e-7);
        assert_eq!(s[2].score, 0.0);
        assert!((s[3].score - 0.5 * 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn ranking_examples() {
        let s = vec![sc(0, 0, 0.5), sc(0, 1, 0.1), sc(0, 2, 0.3)];
        assert_eq!(rank_channels(&s), vec![1, 2, 0]);
        let tie = vec![sc(2, 0, 1.0), sc(0, 5, 1.0), sc(0, 1, 1.0)];
        assert_eq!(rank_channels(&tie), vec![2, 1, 0]);
    }

    proptest! {
        #[test]
        fn ranking_is_permutation_invariant(seed in 0u64..1000, len in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<ChannelScore> = (0..len)
                .map(|i| sc(i % 3, i / 3, (rng.random_range(0..5) as f64) / 4.0))
                .collect();
            let ranked: Vec<(usize, usize)> =
                rank_channels(&scores).iter().map(|&i| (scores[i].group, scores[i].channel)).collect();
            let mut shuffled = scores.clone();
            shuffled.shuffle(&mut rng);
            let again: Vec<(usize, usize)> =
                rank_channels(&shuffled).iter().map(|&i| (shuffled[i].group, shuffled[i].channel)).collect();
            prop_assert_eq!(ranked, again);
        }
    }
}
