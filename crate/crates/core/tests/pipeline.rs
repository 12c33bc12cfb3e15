//! Mid-scale pipeline checks that sit between the unit tests and the full
//! acceptance surrogate: the ablation ordering of label sources and the
//! behavior of the moving-average refinement with oracle predictions.

use frusseg::crf::CrfParams;
use frusseg::frangi::{vesselness, VesselnessParams};
use frusseg::metrics::{confusion, dsc};
use frusseg::network::NetworkConfig;
use frusseg::phantom::{generate_dataset, generate_phantom, PhantomSpec, Split};
use frusseg::volume::MaskVolume;
use frusseg::weaksup::{
    build_probability_map, initial_pseudo_label, train, update_pseudo_label, TrainConfig,
    TrainItem, TrainMode,
};
use ndarray::Array3;

fn to_item(i: &frusseg::phantom::DatasetItem) -> TrainItem {
    TrainItem {
        id: i.id.clone(),
        volume: i.phantom.volume.clone(),
        bbox: i.phantom.loose_bbox,
        gt: Some(i.phantom.ground_truth.clone()),
    }
}

/// Bbox-as-label Dice is far below the CAM+vesselness+CRF initial labels,
/// and the trained-with-updates pipeline keeps its label quality at least
/// at the initial level (the ordering the published ablations show).
#[test]
fn label_source_ordering() {
    let base = PhantomSpec::desk_default(0);
    let items = generate_dataset(&base, 6, 2, 0, 99).unwrap();
    let train_items: Vec<TrainItem> = items
        .iter()
        .filter(|i| i.split == Split::Train)
        .map(to_item)
        .collect();
    let val_items: Vec<TrainItem> = items
        .iter()
        .filter(|i| i.split == Split::Val)
        .map(to_item)
        .collect();
    let mut tc = TrainConfig::desk(3);
    tc.phase1_epochs = 8;
    tc.phase2_epochs = 4;
    tc.phase3_min = 3;
    tc.phase3_max = 8;
    tc.update_period = 2;
    let mut nc = NetworkConfig::compact(3);
    nc.decoder_channels = 16;
    let out = train(&train_items, &val_items, &tc, &nc).unwrap();

    let get = |stage: &str| {
        out.label_quality
            .iter()
            .find(|(s, _)| s == stage)
            .map(|(_, d)| *d)
            .unwrap_or_else(|| panic!("missing label quality stage {stage}"))
    };
    let bbox = get("bbox");
    let initial = get("initial");
    let final_q = get("final");
    println!("label quality: bbox {bbox:.4} < initial {initial:.4} <= final {final_q:.4}");
    assert!(
        bbox < initial,
        "bbox-as-label {bbox:.4} should be far below initial labels {initial:.4}"
    );
    assert!(
        final_q >= initial - 0.02,
        "updates degraded labels: initial {initial:.4} -> final {final_q:.4}"
    );
}

/// Feeding the ground truth as the prediction, the moving-average update
/// must not degrade label quality across refreshes.
#[test]
fn oracle_prediction_updates_are_non_decreasing() {
    let spec = PhantomSpec::desk_default(31);
    let p = generate_phantom(&spec).unwrap();
    let v = vesselness(&p.volume.data, &VesselnessParams::default());
    let cam = Array3::from_elem(p.volume.data.dim(), 1.0f32);
    let u = build_probability_map(&v, &cam, &p.volume).unwrap();
    let params = CrfParams {
        tau_u: 0.03,
        window_radius_vox: 3,
        ..CrfParams::default()
    };
    let mut state =
        initial_pseudo_label(&u, &p.volume.data, &p.loose_bbox, &params, 0.8).unwrap();
    let d0 = dsc(&confusion(&state.y_current, &p.ground_truth).unwrap());
    let mut prev = d0;
    for epoch in 1..=2 {
        update_pseudo_label(
            &mut state,
            &u,
            &p.ground_truth,
            &p.volume.data,
            &p.loose_bbox,
            &params,
            epoch,
        )
        .unwrap();
        let d = dsc(&confusion(&state.y_current, &p.ground_truth).unwrap());
        println!("update {epoch}: label dice {prev:.4} -> {d:.4}");
        assert!(
            d >= prev - 1e-6,
            "oracle-fed update decreased Dice: {prev:.4} -> {d:.4}"
        );
        prev = d;
    }
    assert!(prev >= d0);
}

/// Training on bbox-filled labels produces boxy low-Dice predictions while
/// the pseudo labels stay inside the loose bbox throughout.
#[test]
fn pseudo_labels_stay_inside_bbox_during_training() {
    let base = PhantomSpec::desk_default(0);
    let items = generate_dataset(&base, 3, 1, 0, 55).unwrap();
    let train_items: Vec<TrainItem> = items
        .iter()
        .filter(|i| i.split == Split::Train)
        .map(to_item)
        .collect();
    let val_items: Vec<TrainItem> = items
        .iter()
        .filter(|i| i.split == Split::Val)
        .map(to_item)
        .collect();
    let mut tc = TrainConfig::desk(5);
    tc.phase1_epochs = 4;
    tc.phase2_epochs = 2;
    tc.phase3_min = 2;
    tc.phase3_max = 4;
    tc.update_period = 2;
    let mut nc = NetworkConfig::compact(5);
    nc.decoder_channels = 8;
    let out = train(&train_items, &val_items, &tc, &nc).unwrap();
    // labels cannot be read back from TrainOutput directly; re-derive the
    // initial ones and verify the invariant the trainer enforces
    for item in &train_items {
        let v = vesselness(&item.volume.data, &tc.frangi);
        let cam = Array3::from_elem(item.volume.data.dim(), 1.0f32);
        let u = build_probability_map(&v, &cam, &item.volume).unwrap();
        let state =
            initial_pseudo_label(&u, &item.volume.data, &item.bbox, &tc.crf, tc.eta).unwrap();
        for ((i, j, k), &m) in state.y_current.data.indexed_iter() {
            if m == 1 {
                assert!(
                    item.bbox.contains([i as u32, j as u32, k as u32]),
                    "pseudo label outside loose bbox at {i},{j},{k}"
                );
            }
        }
    }
    assert!(out.logs.iter().all(|l| l.losses.is_finite()));
}

/// The supervised twin needs voxel ground truth and rejects datasets
/// without it; weak mode trains fine on the same data.
#[test]
fn supervised_needs_gt_weak_does_not() {
    let base = PhantomSpec::desk_default(0);
    let items = generate_dataset(&base, 2, 1, 0, 77).unwrap();
    let mut train_items: Vec<TrainItem> = items
        .iter()
        .filter(|i| i.split == Split::Train)
        .map(to_item)
        .collect();
    let val_items: Vec<TrainItem> = items
        .iter()
        .filter(|i| i.split == Split::Val)
        .map(to_item)
        .collect();
    for t in &mut train_items {
        t.gt = None;
    }
    let mut tc = TrainConfig::desk(9);
    tc.phase1_epochs = 1;
    tc.phase2_epochs = 1;
    tc.phase3_min = 1;
    tc.phase3_max = 1;
    let mut nc = NetworkConfig {
        block_channels: [4, 4, 8, 8, 8],
        decoder_channels: 8,
        gn_groups: 2,
        rng_seed: 9,
    };
    let weak = train(&train_items, &val_items, &tc, &nc);
    assert!(weak.is_ok(), "weak mode must not require ground truth: {:?}", weak.err().map(|e| e.to_string()));
    tc.mode = TrainMode::FullySupervised;
    nc.rng_seed = 10;
    assert!(train(&train_items, &val_items, &tc, &nc).is_err());
}

/// Masks from bbox filling match the bbox voxel count exactly.
#[test]
fn bbox_mask_has_expected_volume() {
    let spec = PhantomSpec::desk_default(2);
    let p = generate_phantom(&spec).unwrap();
    let mut m = MaskVolume::zeros(p.volume.shape());
    let r = p.loose_bbox.ranges();
    m.data
        .slice_mut(ndarray::s![r[0].clone(), r[1].clone(), r[2].clone()])
        .fill(1);
    assert_eq!(m.count_ones(), p.loose_bbox.num_voxels());
    let c = confusion(&m, &p.ground_truth).unwrap();
    let d = dsc(&c);
    assert!(d < 0.4, "bbox-as-mask Dice should be low, got {d:.3}");
}
