// temporary calibration harness; removed before release
use frusseg::crf::CrfParams;
use frusseg::frangi::{vesselness, VesselnessParams};
use frusseg::metrics::{confusion, dsc};
use frusseg::network::{Network, NetworkConfig};
use frusseg::phantom::{generate_dataset, PhantomSpec, Split};
use frusseg::volume::normalize_01;
use frusseg::weaksup::{
    build_probability_map, infer, initial_pseudo_label, train, TrainConfig, TrainItem, TrainMode,
};

fn main() {
    let stage = std::env::args().nth(1).unwrap_or_else(|| "fuse".into());
    let base = PhantomSpec::desk_default(0);
    let items = generate_dataset(&base, 4, 1, 1, 7).unwrap();

    if stage == "bench" {
        use std::time::Instant;
        let item = &items[0];
        let norm = normalize_01(&item.phantom.volume.data, 255.0);
        let mut nc = NetworkConfig::compact(1);
        nc.decoder_channels = 16;
        let mut net = Network::<f32>::new(nc).unwrap();
        let t = Instant::now();
        let n = 5;
        for _ in 0..n {
            let (pyr, cache) = net.encode(&norm).unwrap();
            let mut grads = frusseg::network::PyramidGrads::zeros_like(&pyr);
            grads.g5.fill(1e-3);
            net.encoder_backward(&cache, &grads);
            net.zero_grads();
        }
        println!("encode+backward: {:.3} s/step", t.elapsed().as_secs_f64() / n as f64);
        let (pyr, _) = net.encode(&norm).unwrap();
        let roi = frusseg::volume::BoundingBox3::new([0, 2, 2], [44, 30, 30]);
        let t = Instant::now();
        for _ in 0..n {
            let (probs, dcache) = net.decode_roi(&pyr, roi).unwrap();
            let g = ndarray::Array3::from_elem(probs.dim(), 1e-3f32);
            let mut grads = frusseg::network::PyramidGrads::zeros_like(&pyr);
            net.decode_backward(&dcache, &g, &mut grads);
            net.zero_grads();
        }
        println!("decode+backward (44x28x28 roi): {:.3} s/roi", t.elapsed().as_secs_f64() / n as f64);
        let t = Instant::now();
        let v = vesselness(&item.phantom.volume.data, &VesselnessParams::default());
        println!("vesselness: {:.3} s", t.elapsed().as_secs_f64());
        let u = build_probability_map(&v, &ndarray::Array3::from_elem(v.dim(), 1.0f32), &item.phantom.volume).unwrap();
        let params = CrfParams { tau_u: 0.03, window_radius_vox: 3, ..CrfParams::default() };
        let t = Instant::now();
        let _ = initial_pseudo_label(&u, &item.phantom.volume.data, &item.phantom.loose_bbox, &params, 0.8).unwrap();
        println!("bbox-crop crf: {:.3} s", t.elapsed().as_secs_f64());
        return;
    }

    if stage == "fuse" {
        // stage A: vesselness + ideal CAM magnitudes, then with phase-1 CAM
        let item = &items[0];
        let vol = &item.phantom.volume;
        let gt = &item.phantom.ground_truth;
        let v = vesselness(&vol.data, &VesselnessParams::default());
        let mut v_tube = 0.0f64;
        let mut v_bg = 0.0f64;
        let (mut nt, mut nb) = (0u64, 0u64);
        for (x, m) in v.iter().zip(gt.data.iter()) {
            if *m == 1 {
                v_tube += *x as f64;
                nt += 1;
            } else {
                v_bg += *x as f64;
                nb += 1;
            }
        }
        println!(
            "vesselness: tube mean {:.4}, bg mean {:.4}",
            v_tube / nt as f64,
            v_bg / nb as f64
        );

        // fuse with CAM == 1 to see the headroom
        let ones = ndarray::Array3::from_elem(vol.data.dim(), 1.0f32);
        let u = build_probability_map(&v, &ones, vol).unwrap();
        let mut hist = [0u64; 10];
        let mut tube_u = 0.0f64;
        for (x, m) in u.iter().zip(gt.data.iter()) {
            if *m == 1 {
                tube_u += *x as f64;
                let b = ((x * 10.0) as usize).min(9);
                hist[b] += 1;
            }
        }
        println!("u(on tube, cam=1): mean {:.4}, hist {:?}", tube_u / nt as f64, hist);

        for tau in [0.02f32, 0.05, 0.08, 0.1, 0.15, 0.2] {
            let params = CrfParams {
                tau_u: tau,
                window_radius_vox: 3,
                ..CrfParams::default()
            };
            let state =
                initial_pseudo_label(&u, &vol.data, &item.phantom.loose_bbox, &params, 0.8)
                    .unwrap();
            let c = confusion(&state.y_current, gt).unwrap();
            println!(
                "tau_u {:.2}: label dice {:.4} (fallback {})",
                tau,
                dsc(&c),
                state.fallback_used
            );
        }
    }

    if stage == "cam" {
        // stage B: phase 1 only, check CAM quality
        let train_items: Vec<TrainItem> = items
            .iter()
            .filter(|i| i.split == Split::Train)
            .map(|i| TrainItem {
                id: i.id.clone(),
                volume: i.phantom.volume.clone(),
                bbox: i.phantom.loose_bbox,
                gt: Some(i.phantom.ground_truth.clone()),
            })
            .collect();
        let mut tc = TrainConfig::desk(1);
        tc.phase2_epochs = 0;
        tc.phase3_max = 0;
        tc.phase3_min = 0;
        let mut nc = NetworkConfig::compact(1);
        nc.decoder_channels = 16;
        let out = train(&train_items, &[], &tc, &nc).unwrap();
        for (s, d) in &out.label_quality {
            println!("label quality {s}: {d:.4}");
        }
        // CAM vs tube
        let item = &train_items[0];
        let norm = normalize_01(&item.volume.data, 255.0);
        let (pyr, _) = out.network.encode(&norm).unwrap();
        let dims = item.volume.data.dim();
        let cam = out
            .network
            .compute_cam(&pyr.b5, Some([dims.0, dims.1, dims.2]));
        let full = cam.full.unwrap();
        let gt = item.gt.as_ref().unwrap();
        let mut c_tube = 0.0f64;
        let mut c_bg = 0.0f64;
        let (mut nt, mut nb) = (0u64, 0u64);
        for (x, m) in full.iter().zip(gt.data.iter()) {
            if *m == 1 {
                c_tube += *x as f64;
                nt += 1;
            } else {
                c_bg += *x as f64;
                nb += 1;
            }
        }
        println!(
            "cam: tube mean {:.4}, bg mean {:.4}",
            c_tube / nt as f64,
            c_bg / nb as f64
        );
    }

    if stage == "diag" {
        let items = generate_dataset(&base, 6, 2, 2, 7).unwrap();
        let to_item = |i: &frusseg::phantom::DatasetItem| TrainItem {
            id: i.id.clone(),
            volume: i.phantom.volume.clone(),
            bbox: i.phantom.loose_bbox,
            gt: Some(i.phantom.ground_truth.clone()),
        };
        let train_items: Vec<TrainItem> = items.iter().filter(|i| i.split == Split::Train).map(to_item).collect();
        let val_items: Vec<TrainItem> = items.iter().filter(|i| i.split == Split::Val).map(to_item).collect();
        let test_items: Vec<TrainItem> = items.iter().filter(|i| i.split == Split::Test).map(to_item).collect();
        let tc = TrainConfig::desk(1);
        let mut nc = NetworkConfig::compact(1);
        nc.decoder_channels = 16;
        let out = train(&train_items, &val_items, &tc, &nc).unwrap();
        for item in test_items.iter().chain(val_items.iter()) {
            let norm = normalize_01(&item.volume.data, 255.0);
            let (pyr, _) = out.network.encode(&norm).unwrap();
            let (loc, _) = out.network.localize(&pyr.b5);
            let lmax = loc.iter().cloned().fold(f32::MIN, f32::max);
            let above = loc.iter().filter(|&&v| v > tc.tau_loc).count();
            let rois = frusseg::network::extract_rois(&loc, tc.tau_loc, tc.m_rois_test, item.volume.shape());
            let gtb = item.gt.as_ref().unwrap().tight_bbox().unwrap();
            println!("{}: loc max {:.3}, {} cells above tau, gt bbox {}", item.id, lmax, above, gtb);
            for r in &rois {
                let inter = r.intersects(&gtb);
                let (probs, _) = out.network.decode_roi(&pyr, *r).unwrap();
                let pmax = probs.iter().cloned().fold(f32::MIN, f32::max);
                let n_hi = probs.iter().filter(|&&p| p > 0.5).count();
                println!("  roi {} hits_gt={} decode max {:.3} above0.5 {}", r, inter, pmax, n_hi);
            }
            let (pred, fb) = infer(&out.network, &item.volume, tc.m_rois_test, tc.tau_loc).unwrap();
            let c = confusion(&pred, item.gt.as_ref().unwrap()).unwrap();
            println!("  dice {:.4} fallback {}", dsc(&c), fb);
        }
        return;
    }

    if stage == "full" {
        let t0 = std::time::Instant::now();
        let n: usize = std::env::args()
            .nth(2)
            .and_then(|s| s.parse().ok())
            .unwrap_or(6);
        let items = generate_dataset(&base, n, 5, 10, 2024).unwrap();
        let to_item = |i: &frusseg::phantom::DatasetItem| TrainItem {
            id: i.id.clone(),
            volume: i.phantom.volume.clone(),
            bbox: i.phantom.loose_bbox,
            gt: Some(i.phantom.ground_truth.clone()),
        };
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
        let test_items: Vec<TrainItem> = items
            .iter()
            .filter(|i| i.split == Split::Test)
            .map(to_item)
            .collect();
        let tc = TrainConfig::desk(1);
        let mut nc = NetworkConfig::compact(1);
        nc.decoder_channels = 16;
        let out = train(&train_items, &val_items, &tc, &nc).unwrap();
        for log in &out.logs {
            println!(
                "p{} e{:02}: cls {:.4} loc {:.4} seg {:.4} val {:?}",
                log.phase, log.epoch, log.losses.l_cls, log.losses.l_loc, log.losses.l_seg, log.val_dice
            );
        }
        for (s, d) in &out.label_quality {
            println!("label quality {s}: {d:.4}");
        }
        for f in &out.flags {
            println!("flag: {f}");
        }
        let mut dices = Vec::new();
        for item in &test_items {
            let (pred, fb) = infer(&out.network, &item.volume, tc.m_rois_test, tc.tau_loc).unwrap();
            let c = confusion(&pred, item.gt.as_ref().unwrap()).unwrap();
            dices.push(dsc(&c));
            println!("test {}: dice {:.4} fallback {}", item.id, dsc(&c), fb);
        }
        println!(
            "mean test dice: {:.4}, elapsed {:.1}s",
            dices.iter().sum::<f32>() / dices.len() as f32,
            t0.elapsed().as_secs_f64()
        );
    }
}

#[allow(dead_code)]
fn bench_note() {}
