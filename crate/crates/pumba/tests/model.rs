mod common;

use common::{normal, rng, small_config, small_samples};
use proptest::prelude::*;
use pumba::autodiff::Tape;
use pumba::eval::CapriCategory;
use pumba::loss::bce;
use pumba::model::{split_groups, BranchGroupSpec, InterfacePairSample, PumbaModel, GROUP_NAMES};
use pumba::{Error, Tensor};
use rand::seq::SliceRandom;

fn random_sample(seed: u64, native: bool) -> InterfacePairSample {
    let mut r = rng(seed);
    InterfacePairSample {
        complex_id: format!("c{seed}"),
        model_id: "m".into(),
        native,
        capri: CapriCategory::Incorrect,
        image: normal(&[13, 16, 16], &mut r).cast(),
        energies: normal(&[9], &mut r).data().iter().map(|&v| v as f32).collect(),
    }
}

fn model(seed: u64) -> PumbaModel {
    PumbaModel::new(small_config(), seed).unwrap()
}

#[test]
fn scores_are_deterministic_probabilities() {
    for seed in 0..100 {
        let m = model(seed % 10);
        let s = random_sample(seed, seed % 2 == 0);
        let a = m.score(&s).unwrap();
        assert!(a.score.is_finite() && (0.0..=1.0).contains(&a.score));
        assert_eq!(a.branch_embeddings.dims2(), (5, 16));
        if seed < 10 {
            let b = m.score(&s).unwrap();
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }
}

#[test]
fn swapping_branch_embeddings_changes_the_score() {
    let m = model(1);
    let e = m.score(&random_sample(1, true)).unwrap().branch_embeddings;
    let base = m.score_from_branch_embeddings(&e).unwrap();
    let swapped = Tensor::from_fn([5, 16], |i| {
        let (r, c) = (i / 16, i % 16);
        let r = match r {
            0 => 4,
            4 => 0,
            r => r,
        };
        e.data()[r * 16 + c]
    });
    assert_ne!(m.score_from_branch_embeddings(&swapped).unwrap(), base);
    assert!(m.score_from_branch_embeddings(&Tensor::zeros([4, 16])).is_err());
}

#[test]
fn recomputed_score_matches_direct_score() {
    let m = model(2);
    let s = random_sample(2, false);
    let b = m.score(&s).unwrap();
    let again = m.score_from_branch_embeddings(&b.branch_embeddings).unwrap();
    assert!((again - b.score).abs() <= 1e-6);
}

#[test]
fn energies_enter_through_the_integration_layer() {
    let mut m = model(3);
    let s = random_sample(3, true);
    let mut groups = split_groups(&s, &m.config.groups).unwrap();
    // charge: 3 energy terms
    let g = 2;
    let base = m.hybrid_branch(g, &groups[g]).unwrap();
    groups[g].energies.data_mut()[1] += 0.5;
    assert!(m.hybrid_branch(g, &groups[g]).unwrap().max_abs_diff(&base) > 1e-4);

    // with zero energies, the energy rows of the first integration matrix
    // are irrelevant
    groups[g].energies = Tensor::zeros([3]);
    let before = m.hybrid_branch(g, &groups[g]).unwrap();
    let fc1 = m.branches[g].fc1_w;
    let w = m.params.get_mut(fc1);
    let rows = w.dims2().0;
    for r in rows - 3..rows {
        for v in &mut w.data_mut()[r * 16..(r + 1) * 16] {
            *v = 7.0;
        }
    }
    assert_eq!(m.hybrid_branch(g, &groups[g]).unwrap(), before);
}

#[test]
fn branch_isolation() {
    let m = model(4);
    let s = random_sample(4, true);
    let original = m.score(&s).unwrap();
    let spec = &m.config.groups;
    for (g, group) in spec.groups.iter().enumerate() {
        let mut blanked = s.clone();
        let plane = 16 * 16;
        for &c in &group.channels {
            blanked.image.data_mut()[c * plane..(c + 1) * plane].fill(0.0);
        }
        for &e in &group.energies {
            blanked.energies[e] = 0.0;
        }
        let perturbed = m.score(&blanked).unwrap();
        for r in 0..5 {
            let diff = (0..16)
                .map(|c| (perturbed.branch_embeddings.at2(r, c) - original.branch_embeddings.at2(r, c)).abs())
                .fold(0.0f32, f32::max);
            if r == g {
                assert!(diff > 0.0, "{} embedding did not move", GROUP_NAMES[g]);
            } else {
                assert_eq!(diff, 0.0, "blanking {} moved branch {r}", GROUP_NAMES[g]);
            }
        }
        let mut restored = perturbed.branch_embeddings.clone();
        for c in 0..16 {
            restored.data_mut()[g * 16 + c] = original.branch_embeddings.at2(g, c);
        }
        let rescored = m.score_from_branch_embeddings(&restored).unwrap();
        assert!((rescored - original.score).abs() <= 1e-6);
    }
}

#[test]
fn bce_gradient_reaches_every_parameter() {
    let (mut zeros, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let m = model(100 + seed);
        let samples: Vec<_> = (0..4).map(|i| random_sample(seed * 10 + i, i % 2 == 0)).collect();
        let refs: Vec<_> = samples.iter().collect();
        let labels: Vec<bool> = samples.iter().map(|s| s.native).collect();
        let mut tape = Tape::<f32>::new();
        let p = m.params.bind(&mut tape, true);
        let out = m.forward_batch(&mut tape, &p, &refs).unwrap();
        let loss = bce(&mut tape, out.scores, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (id, name, _) in m.params.iter() {
            let g = grads.wrt(p.var(id));
            assert!(g.max_abs() > 0.0, "seed {seed}: {name} has no gradient");
            zeros += g.data().iter().filter(|&&v| v == 0.0).count();
            total += g.len();
        }
    }
    let frac = zeros as f64 / total as f64;
    assert!(frac <= 1e-3, "{:.4}% exact-zero gradient entries", 100.0 * frac);
}

#[test]
fn default_split_shapes() {
    let s = random_sample(5, true);
    let groups = split_groups(&s, &BranchGroupSpec::default()).unwrap();
    let sizes: Vec<_> = groups.iter().map(|g| (g.image.shape()[0], g.energies.len())).collect();
    assert_eq!(sizes, vec![(5, 3), (2, 1), (2, 3), (2, 1), (2, 1)]);
}

#[test]
fn uncovered_channel_is_a_config_error() {
    let s = random_sample(6, true);
    let mut spec = BranchGroupSpec::default();
    spec.groups[0].channels.retain(|&c| c != 12);
    let err = split_groups(&s, &spec).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("[12]"));
}

/// A random partition of 13 channels and 9 energies into the five groups,
/// each group getting at least one channel.
fn random_spec(seed: u64) -> BranchGroupSpec {
    let mut r = rng(seed);
    let mut channels: Vec<usize> = (0..13).collect();
    channels.shuffle(&mut r);
    let mut spec = BranchGroupSpec::default();
    for g in &mut spec.groups {
        g.channels.clear();
        g.energies.clear();
    }
    for (i, c) in channels.into_iter().enumerate() {
        let g = if i < 5 { i } else { rand::Rng::random_range(&mut r, 0..5) };
        spec.groups[g].channels.push(c);
    }
    for e in 0..9 {
        let g = rand::Rng::random_range(&mut r, 0..5);
        spec.groups[g].energies.push(e);
    }
    spec
}

proptest! {
    #[test]
    fn groups_partition_the_channels(seed in 0u64..10_000) {
        let spec = random_spec(seed);
        let s = random_sample(seed, true);
        let groups = split_groups(&s, &spec).unwrap();
        let plane = 16 * 16;
        let mut rebuilt = vec![None; 13];
        for (g, input) in spec.groups.iter().zip(&groups) {
            for (k, &c) in g.channels.iter().enumerate() {
                prop_assert!(rebuilt[c].is_none());
                rebuilt[c] = Some(input.image.data()[k * plane..(k + 1) * plane].to_vec());
            }
            for (k, &e) in g.energies.iter().enumerate() {
                prop_assert_eq!(input.energies.data()[k], s.energies[e]);
            }
        }
        for (c, plane_data) in rebuilt.into_iter().enumerate() {
            prop_assert_eq!(plane_data.unwrap(), s.image.data()[c * plane..(c + 1) * plane].to_vec());
        }
    }

    #[test]
    fn relabelling_channels_relabels_sub_images(seed in 0u64..10_000) {
        let spec = random_spec(seed);
        let s = random_sample(seed, true);
        // reverse channel order in the image and in the spec together
        let mut flipped = s.clone();
        let plane = 16 * 16;
        flipped.image = Tensor::from_fn([13, 16, 16], |i| s.image.data()[(12 - i / plane) * plane + i % plane]);
        let mut flipped_spec = spec.clone();
        for g in &mut flipped_spec.groups {
            g.channels.iter_mut().for_each(|c| *c = 12 - *c);
        }
        prop_assert_eq!(split_groups(&s, &spec).unwrap(), split_groups(&flipped, &flipped_spec).unwrap());
    }
}

#[test]
fn synthetic_samples_score_in_range() {
    let m = model(7);
    for s in small_samples(2, 3, 1.0, 0) {
        let b = m.score(&s).unwrap();
        assert!((0.0..=1.0).contains(&b.score));
    }
}
