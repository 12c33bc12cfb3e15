//! Acceptance suite. One test per criterion (a few split into parts); each
//! prints a `[criterion N] PASS/FAIL` line with the measured numbers.
//!
//! Criterion 9 (seeded CLI runs are byte-identical) lives in the CLI
//! crate's own acceptance test, next to the binary it exercises.

use frusseg::crf::{mean_field, unary_from_probability, CrfParams, Unary};
use frusseg::frangi::{vesselness, VesselnessParams};
use frusseg::geometry::{
    cartesian_to_frustum, frustum_to_cartesian, output_grid, ProbeGeometry,
};
use frusseg::metrics::{confusion, dsc, vs, ConfusionCounts};
use frusseg::network::flops::{conv_macs, count_flops, FlopsDomain, FlopsMode};
use frusseg::network::layers::*;
use frusseg::network::NetworkConfig;
use frusseg::phantom::{generate_dataset, PhantomSpec, Split};
use frusseg::volume::{BoundingBox3, FrustumVolume, MaskVolume};
use frusseg::weaksup::loss::LossBundle;
use frusseg::weaksup::{
    build_probability_map, infer, initial_pseudo_label, train, update_pseudo_label, TrainConfig,
    TrainItem, TrainMode,
};
use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

// ---------------------------------------------------------------------------
// criterion 1: gradient correctness
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;

/// Central finite differences against the analytic gradient for every
/// parameter of a differentiable map, in f64.
fn check_grads(
    label: &str,
    params: &mut [f64],
    analytic: &[f64],
    mut eval: impl FnMut(&[f64]) -> f64,
) {
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + FD_STEP;
        let up = eval(params);
        params[i] = orig - FD_STEP;
        let down = eval(params);
        params[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let an = analytic[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
        assert!(
            rel <= FD_TOL,
            "[criterion 1] FAIL {label} param {i}: fd {fd:.8} vs analytic {an:.8} (rel {rel:.2e})"
        );
    }
    println!("[criterion 1] {label}: PASS (worst rel err {worst:.2e}, {} params)", params.len());
}

fn weighted_loss(y: &Array4<f64>, r: &Array4<f64>) -> f64 {
    (y * r).sum()
}

#[test]
fn acceptance_c1_gradient_checks() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    // conv3d, stride 1 and 2, on a 16^3 input
    for stride in [1usize, 2] {
        let mut conv = Conv3d::<f64>::new(2, 3, 3, stride, &mut rng);
        let x = Array4::from_shape_fn((2, 16, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = conv.forward(&x);
        let r = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        conv.zero_grad();
        let gx = conv.backward(&cache, &r);

        let w_shape = conv.w.dim();
        let mut w_flat: Vec<f64> = conv.w.iter().copied().collect();
        let analytic: Vec<f64> = conv.gw.iter().copied().collect();
        {
            let conv_ref = &conv;
            check_grads(
                &format!("conv3d(stride={stride}).w"),
                &mut w_flat,
                &analytic,
                |w| {
                    let mut c2 = Conv3d::<f64>::new(2, 3, 3, stride, &mut ChaCha8Rng::seed_from_u64(0));
                    c2.w = Array4::from_shape_vec(
                        (w_shape.0, w_shape.1 * w_shape.2 * w_shape.3 * w_shape.4, 1, 1),
                        w.to_vec(),
                    )
                    .unwrap()
                    .into_shape_with_order(w_shape)
                    .unwrap();
                    c2.b = conv_ref.b.clone();
                    c2.stride = stride;
                    c2.pad = conv_ref.pad;
                    let (y, _) = c2.forward(&x);
                    weighted_loss(&y, &r)
                },
            );
        }
        // bias gradients
        let mut b_flat: Vec<f64> = conv.b.iter().copied().collect();
        let b_analytic: Vec<f64> = conv.gb.iter().copied().collect();
        {
            let conv_ref = &conv;
            check_grads(
                &format!("conv3d(stride={stride}).b"),
                &mut b_flat,
                &b_analytic,
                |b| {
                    let mut c2 = Conv3d::<f64>::new(2, 3, 3, stride, &mut ChaCha8Rng::seed_from_u64(0));
                    c2.w = conv_ref.w.clone();
                    c2.b = Array1::from_vec(b.to_vec());
                    c2.stride = stride;
                    c2.pad = conv_ref.pad;
                    let (y, _) = c2.forward(&x);
                    weighted_loss(&y, &r)
                },
            );
        }
        // input gradient, spot-checked over a sample of voxels
        for &idx in &[(0, 0, 0, 0), (1, 7, 8, 9), (0, 15, 15, 15), (1, 3, 12, 5)] {
            let mut xp = x.clone();
            xp[idx] += FD_STEP;
            let (yp, _) = conv.forward(&xp);
            let mut xm = x.clone();
            xm[idx] -= FD_STEP;
            let (ym, _) = conv.forward(&xm);
            let fd = (weighted_loss(&yp, &r) - weighted_loss(&ym, &r)) / (2.0 * FD_STEP);
            let an = gx[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel <= FD_TOL, "conv dx at {idx:?}: {rel:.2e}");
        }
    }

    // 1x1x1 conv (localization head shape)
    {
        let mut conv = Conv3d::<f64>::new(4, 1, 1, 1, &mut rng);
        let x = Array4::from_shape_fn((4, 6, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = conv.forward(&x);
        let r = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        conv.zero_grad();
        conv.backward(&cache, &r);
        let mut w_flat: Vec<f64> = conv.w.iter().copied().collect();
        let analytic: Vec<f64> = conv.gw.iter().copied().collect();
        let b = conv.b.clone();
        check_grads("conv1x1x1.w", &mut w_flat, &analytic, |w| {
            let mut c2 = Conv3d::<f64>::new(4, 1, 1, 1, &mut ChaCha8Rng::seed_from_u64(0));
            c2.w = Array4::from_shape_vec((1, 4, 1, 1), w.to_vec())
                .unwrap()
                .into_shape_with_order((1, 4, 1, 1, 1))
                .unwrap();
            c2.b = b.clone();
            let (y, _) = c2.forward(&x);
            weighted_loss(&y, &r)
        });
    }

    // group norm: affine parameters and input gradient
    {
        let mut gn = GroupNorm::<f64>::new(8, 4);
        let x = Array4::from_shape_fn((8, 5, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = gn.forward(&x);
        let r = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        gn.zero_grad();
        let gx = gn.backward(&cache, &r);
        let mut gamma: Vec<f64> = gn.gamma.iter().copied().collect();
        let g_analytic: Vec<f64> = gn.g_gamma.iter().copied().collect();
        let beta = gn.beta.clone();
        check_grads("groupnorm.gamma", &mut gamma, &g_analytic, |g| {
            let mut gn2 = GroupNorm::<f64>::new(8, 4);
            gn2.gamma = Array1::from_vec(g.to_vec());
            gn2.beta = beta.clone();
            let (y, _) = gn2.forward(&x);
            weighted_loss(&y, &r)
        });
        let mut beta_v: Vec<f64> = gn.beta.iter().copied().collect();
        let b_analytic: Vec<f64> = gn.g_beta.iter().copied().collect();
        let gamma_fixed = gn.gamma.clone();
        check_grads("groupnorm.beta", &mut beta_v, &b_analytic, |b| {
            let mut gn2 = GroupNorm::<f64>::new(8, 4);
            gn2.gamma = gamma_fixed.clone();
            gn2.beta = Array1::from_vec(b.to_vec());
            let (y, _) = gn2.forward(&x);
            weighted_loss(&y, &r)
        });
        for &idx in &[(0, 0, 0, 0), (7, 4, 4, 4), (3, 2, 1, 0)] {
            let gn2 = GroupNorm::<f64>::new(8, 4);
            let mut xp = x.clone();
            xp[idx] += FD_STEP;
            let (yp, _) = gn2.forward(&xp);
            let mut xm = x.clone();
            xm[idx] -= FD_STEP;
            let (ym, _) = gn2.forward(&xm);
            let fd = (weighted_loss(&yp, &r) - weighted_loss(&ym, &r)) / (2.0 * FD_STEP);
            let an = gx[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel <= 1e-3, "gn dx at {idx:?}: {rel:.2e}");
        }
        println!("[criterion 1] groupnorm.input: PASS");
    }

    // relu (inputs kept away from the kink), sigmoid, maxpool, gap,
    // upsample, crop/concat: input gradients against finite differences
    {
        let x = Array4::from_shape_fn((2, 6, 6, 6), |_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        });
        let r = Array4::from_shape_fn((2, 6, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = relu(&x);
        let gx = relu_backward(&cache, &r);
        for &idx in &[(0, 1, 2, 3), (1, 5, 5, 5)] {
            let mut xp = x.clone();
            xp[idx] += FD_STEP;
            let mut xm = x.clone();
            xm[idx] -= FD_STEP;
            let fd = (weighted_loss(&relu(&xp).0, &r) - weighted_loss(&relu(&xm).0, &r))
                / (2.0 * FD_STEP);
            let rel = (fd - gx[idx]).abs() / fd.abs().max(1e-8);
            assert!(rel <= FD_TOL, "relu dx {rel:.2e}");
        }
        println!("[criterion 1] relu: PASS");

        let (_, scache) = sigmoid(&x);
        let gs = sigmoid_backward(&scache, &r);
        for &idx in &[(0, 0, 0, 0), (1, 4, 3, 2)] {
            let mut xp = x.clone();
            xp[idx] += FD_STEP;
            let mut xm = x.clone();
            xm[idx] -= FD_STEP;
            let fd = (weighted_loss(&sigmoid(&xp).0, &r) - weighted_loss(&sigmoid(&xm).0, &r))
                / (2.0 * FD_STEP);
            let rel = (fd - gs[idx]).abs() / fd.abs().max(1e-8);
            assert!(rel <= FD_TOL, "sigmoid dx {rel:.2e}");
        }
        println!("[criterion 1] sigmoid: PASS");

        // maxpool: gradient routes to the argmax voxel
        let (yp, pcache) = maxpool(&x, 2);
        let rp = Array4::from_shape_fn(yp.dim(), |_| rng.gen_range(-1.0..1.0));
        let gp = maxpool_backward(&pcache, &rp);
        for &idx in &[(0, 0, 0, 0), (1, 3, 3, 3), (0, 5, 1, 4)] {
            let mut xp2 = x.clone();
            xp2[idx] += FD_STEP;
            let mut xm = x.clone();
            xm[idx] -= FD_STEP;
            let fd = (weighted_loss(&maxpool(&xp2, 2).0, &rp)
                - weighted_loss(&maxpool(&xm, 2).0, &rp))
                / (2.0 * FD_STEP);
            let rel = (fd - gp[idx]).abs() / fd.abs().max(gp[idx].abs()).max(1e-8);
            assert!(rel <= FD_TOL, "maxpool dx at {idx:?}: {rel:.2e}");
        }
        println!("[criterion 1] maxpool: PASS");

        // gap over a sub-region distributes 1/count
        let ranges = [1..4usize, 0..3usize, 2..6usize];
        let (yg, gcache) = gap(&x, ranges);
        let rg = Array1::from_shape_fn(yg.dim(), |_| rng.gen_range(-1.0..1.0));
        let mut gg = Array4::<f64>::zeros(x.dim());
        gap_backward_into(&gcache, &rg, &mut gg);
        for &idx in &[(0, 1, 0, 2), (1, 3, 2, 5), (0, 0, 0, 0)] {
            let eval = |xv: &Array4<f64>| {
                let (y, _) = gap(xv, [1..4usize, 0..3usize, 2..6usize]);
                (y.clone() * rg.clone()).sum()
            };
            let mut xp2 = x.clone();
            xp2[idx] += FD_STEP;
            let mut xm = x.clone();
            xm[idx] -= FD_STEP;
            let fd = (eval(&xp2) - eval(&xm)) / (2.0 * FD_STEP);
            let an = gg[idx];
            assert!((fd - an).abs() <= 1e-6, "gap dx at {idx:?}: fd {fd} an {an}");
        }
        println!("[criterion 1] gap: PASS");

        // trilinear upsample x2
        let (yu, ucache) = resize_trilinear(&x, [12, 12, 12]);
        let ru = Array4::from_shape_fn(yu.dim(), |_| rng.gen_range(-1.0..1.0));
        let gu = resize_trilinear_backward(&ucache, &ru);
        for &idx in &[(0, 2, 3, 1), (1, 0, 5, 5)] {
            let eval = |xv: &Array4<f64>| {
                let (y, _) = resize_trilinear(xv, [12, 12, 12]);
                weighted_loss(&y, &ru)
            };
            let mut xp2 = x.clone();
            xp2[idx] += FD_STEP;
            let mut xm = x.clone();
            xm[idx] -= FD_STEP;
            let fd = (eval(&xp2) - eval(&xm)) / (2.0 * FD_STEP);
            let rel = (fd - gu[idx]).abs() / fd.abs().max(1e-8);
            assert!(rel <= FD_TOL, "upsample dx {rel:.2e}");
        }
        println!("[criterion 1] trilinear upsample: PASS");

        // crop with padding + channel concat round trip
        let (c1, ccache) = crop_with_pad(&x, [-1, 2, 3], [4, 4, 4]);
        let c2 = c1.clone();
        let cat = concat_channels(&c1, &c2);
        let rcat = Array4::from_shape_fn(cat.dim(), |_| rng.gen_range(-1.0..1.0));
        let (ga, gb) = split_channels(&rcat, 2);
        let mut gc = Array4::<f64>::zeros(x.dim());
        crop_backward_into(&ccache, &ga, &mut gc);
        crop_backward_into(&ccache, &gb, &mut gc);
        for &idx in &[(0, 0, 2, 3), (1, 2, 5, 5)] {
            let eval = |xv: &Array4<f64>| {
                let (c, _) = crop_with_pad(xv, [-1, 2, 3], [4, 4, 4]);
                let cat = concat_channels(&c, &c);
                weighted_loss(&cat, &rcat)
            };
            let mut xp2 = x.clone();
            xp2[idx] += FD_STEP;
            let mut xm = x.clone();
            xm[idx] -= FD_STEP;
            let fd = (eval(&xp2) - eval(&xm)) / (2.0 * FD_STEP);
            assert!((fd - gc[idx]).abs() <= 1e-6, "crop/concat dx");
        }
        println!("[criterion 1] crop+concat: PASS");
    }

    // fc layer
    {
        let mut fc = Fc::<f64>::new(6, 2, &mut rng);
        let x = Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = fc.forward(&x);
        let r = Array1::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        fc.zero_grad();
        fc.backward(&cache, &r);
        let mut w_flat: Vec<f64> = fc.w.iter().copied().collect();
        let analytic: Vec<f64> = fc.gw.iter().copied().collect();
        let b = fc.b.clone();
        check_grads("fc.w", &mut w_flat, &analytic, |w| {
            let mut f2 = Fc::<f64>::new(6, 2, &mut ChaCha8Rng::seed_from_u64(0));
            f2.w = ndarray::Array2::from_shape_vec((2, 6), w.to_vec()).unwrap();
            f2.b = b.clone();
            let (y, _) = f2.forward(&x);
            (y * r.clone()).sum()
        });
    }

    // full graph on a two-layer toy: conv -> gn -> relu -> conv -> sigmoid
    {
        let mut conv1 = Conv3d::<f64>::new(1, 4, 3, 2, &mut rng);
        let mut gn1 = GroupNorm::<f64>::new(4, 2);
        let mut conv2 = Conv3d::<f64>::new(4, 1, 3, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 16, 16, 16), |_| rng.gen_range(0.0..1.0));
        let target = Array4::from_shape_fn((1, 8, 8, 8), |(_, i, j, k)| {
            ((i + j + k) % 2) as f64
        });

        let forward = |c1: &Conv3d<f64>, g1: &GroupNorm<f64>, c2: &Conv3d<f64>| {
            let (h, cc1) = c1.forward(&x);
            let (h, cg1) = g1.forward(&h);
            let (h, cr) = relu(&h);
            let (h, cc2) = c2.forward(&h);
            let (p, cs) = sigmoid(&h);
            let n = p.len() as f64;
            let mut loss = 0.0;
            for (&pv, &tv) in p.iter().zip(target.iter()) {
                let pc = pv.clamp(1e-12, 1.0 - 1e-12);
                loss += -(tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln());
            }
            (loss / n, (cc1, cg1, cr, cc2, cs, p))
        };
        let (_, (cc1, cg1, cr, cc2, _cs, p)) = forward(&conv1, &gn1, &conv2);
        // dL/dz for sigmoid+BCE is (p - t)/n
        let n = p.len() as f64;
        let gz = ndarray::Zip::from(&p)
            .and(&target)
            .map_collect(|&pv, &tv| (pv - tv) / n);
        conv1.zero_grad();
        gn1.zero_grad();
        conv2.zero_grad();
        let g = conv2.backward(&cc2, &gz);
        let g = relu_backward(&cr, &g);
        let g = gn1.backward(&cg1, &g);
        let _ = conv1.backward(&cc1, &g);

        // finite differences over a sample of parameters from every layer
        fn param_mut<'a>(
            which: &str,
            i: usize,
            c1: &'a mut Conv3d<f64>,
            g1: &'a mut GroupNorm<f64>,
            c2: &'a mut Conv3d<f64>,
        ) -> &'a mut f64 {
            match which {
                "conv1.w" => &mut c1.w.as_slice_mut().unwrap()[i],
                "conv1.b" => &mut c1.b.as_slice_mut().unwrap()[i],
                "gn1.gamma" => &mut g1.gamma.as_slice_mut().unwrap()[i],
                "gn1.beta" => &mut g1.beta.as_slice_mut().unwrap()[i],
                "conv2.w" => &mut c2.w.as_slice_mut().unwrap()[i],
                "conv2.b" => &mut c2.b.as_slice_mut().unwrap()[i],
                _ => unreachable!(),
            }
        }
        let samples: Vec<(&str, usize, f64)> = vec![
            ("conv1.w", 0, conv1.gw.as_slice().unwrap()[0]),
            ("conv1.w", 50, conv1.gw.as_slice().unwrap()[50]),
            ("conv1.b", 1, conv1.gb.as_slice().unwrap()[1]),
            ("gn1.gamma", 2, gn1.g_gamma.as_slice().unwrap()[2]),
            ("gn1.beta", 3, gn1.g_beta.as_slice().unwrap()[3]),
            ("conv2.w", 10, conv2.gw.as_slice().unwrap()[10]),
            ("conv2.w", 80, conv2.gw.as_slice().unwrap()[80]),
            ("conv2.b", 0, conv2.gb.as_slice().unwrap()[0]),
        ];
        for (name, i, an) in samples {
            *param_mut(name, i, &mut conv1, &mut gn1, &mut conv2) += FD_STEP;
            let (up, _) = forward(&conv1, &gn1, &conv2);
            *param_mut(name, i, &mut conv1, &mut gn1, &mut conv2) -= 2.0 * FD_STEP;
            let (down, _) = forward(&conv1, &gn1, &conv2);
            *param_mut(name, i, &mut conv1, &mut gn1, &mut conv2) += FD_STEP;
            let fd = (up - down) / (2.0 * FD_STEP);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(
                rel <= FD_TOL,
                "two-layer toy {name}[{i}]: fd {fd:.8} vs {an:.8} ({rel:.2e})"
            );
        }
        println!("[criterion 1] two-layer toy full graph: PASS");
    }

    let dt = t0.elapsed();
    println!("[criterion 1] gradient correctness: PASS in {:.1}s", dt.as_secs_f64());
    assert!(dt.as_secs() < 120, "criterion 1 must finish under 2 minutes");
}

// ---------------------------------------------------------------------------
// criterion 2: metric oracles
// ---------------------------------------------------------------------------

#[test]
fn acceptance_c2_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for trial in 0..200 {
        let p = MaskVolume::new(Array3::from_shape_fn((16, 16, 16), |_| rng.gen_range(0..=1u8)))
            .unwrap();
        let g = MaskVolume::new(Array3::from_shape_fn((16, 16, 16), |_| rng.gen_range(0..=1u8)))
            .unwrap();
        let c = confusion(&p, &g).unwrap();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (a, b) in p.data.iter().zip(g.data.iter()) {
            match (a, b) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => tn += 1,
            }
        }
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn), "trial {trial}");
        let d_oracle = if 2 * tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        let v_oracle = if 2 * tp + fp + fn_ == 0 {
            1.0
        } else {
            1.0 - (fn_ as f64 - fp as f64).abs() / (2 * tp + fp + fn_) as f64
        };
        assert!((dsc(&c) as f64 - d_oracle).abs() < 1e-6);
        assert!((vs(&c) as f64 - v_oracle).abs() < 1e-6);
    }
    let hand_d = dsc(&ConfusionCounts {
        tp: 10,
        fp: 5,
        fn_: 5,
        tn: 0,
    });
    assert!(
        (hand_d - 0.6667).abs() < 5e-5,
        "hand DSC {hand_d} != 0.6667"
    );
    let hand_v = vs(&ConfusionCounts {
        tp: 10,
        fp: 8,
        fn_: 2,
        tn: 0,
    });
    assert!((hand_v - 0.8000).abs() < 5e-5, "hand VS {hand_v} != 0.8000");
    println!("[criterion 2] metric oracles: PASS (200 random pairs exact, hand cases to 4 decimals)");
}

// ---------------------------------------------------------------------------
// criterion 3: CRF oracle equivalence
// ---------------------------------------------------------------------------

/// Independent all-pairs mean-field reference (no windowing, no
/// precomputation), mirroring the normalized two-kernel update.
fn all_pairs_mean_field(
    unary: &Unary,
    image: &Array3<f32>,
    params: &CrfParams,
    iterations: u32,
) -> Array3<f64> {
    let dims = image.dim();
    let n = [dims.0, dims.1, dims.2];
    let tg2 = 2.0 * (params.theta_gamma_vox as f64).powi(2);
    let ta2 = 2.0 * (params.theta_alpha_vox as f64).powi(2);
    let tb2 = 2.0 * (params.theta_beta_intensity as f64).powi(2);
    let mut q = Array3::<f64>::zeros(dims);
    for ((i, j, k), qv) in q.indexed_iter_mut() {
        let eb = (-(unary.bg[(i, j, k)] as f64)).exp();
        let ef = (-(unary.fg[(i, j, k)] as f64)).exp();
        *qv = ef / (ef + eb);
    }
    for _ in 0..iterations {
        let mut q_next = Array3::<f64>::zeros(dims);
        for i in 0..n[0] {
            for j in 0..n[1] {
                for k in 0..n[2] {
                    let (mut s_q, mut s_z, mut b_q, mut b_z) = (0.0, 0.0, 0.0, 0.0);
                    for i2 in 0..n[0] {
                        for j2 in 0..n[1] {
                            for k2 in 0..n[2] {
                                if (i, j, k) == (i2, j2, k2) {
                                    continue;
                                }
                                let d2 = (i as f64 - i2 as f64).powi(2)
                                    + (j as f64 - j2 as f64).powi(2)
                                    + (k as f64 - k2 as f64).powi(2);
                                let di = image[(i, j, k)] as f64 - image[(i2, j2, k2)] as f64;
                                let qj = q[(i2, j2, k2)];
                                let sk = (-d2 / tg2).exp();
                                s_q += sk * qj;
                                s_z += sk;
                                let bk = (-d2 / ta2 - di * di / tb2).exp();
                                b_q += bk * qj;
                                b_z += bk;
                            }
                        }
                    }
                    let w_s = params.w_smooth as f64;
                    let w_b = params.w_bilateral as f64;
                    let msg_fg = if s_z > 0.0 { w_s * (1.0 - s_q / s_z) } else { 0.0 }
                        + if b_z > 0.0 { w_b * (1.0 - b_q / b_z) } else { 0.0 };
                    let msg_bg = if s_z > 0.0 { w_s * (s_q / s_z) } else { 0.0 }
                        + if b_z > 0.0 { w_b * (b_q / b_z) } else { 0.0 };
                    let e_fg = unary.fg[(i, j, k)] as f64 + msg_fg;
                    let e_bg = unary.bg[(i, j, k)] as f64 + msg_bg;
                    let m = e_fg.min(e_bg);
                    let ef = (-(e_fg - m)).exp();
                    let eb = (-(e_bg - m)).exp();
                    q_next[(i, j, k)] = ef / (ef + eb);
                }
            }
        }
        q = q_next;
    }
    q
}

#[test]
fn acceptance_c3_crf_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for instance in 0..20 {
        let u = Array3::from_shape_fn((6, 6, 6), |_| rng.gen_range(0.0..1.0f32));
        let image = Array3::from_shape_fn((6, 6, 6), |_| rng.gen_range(0.0..255.0f32));
        let unary = unary_from_probability(&u, 0.5);
        let params = CrfParams {
            iterations: 5,
            window_radius_vox: 5,
            ..CrfParams::default()
        };
        let res = mean_field(&unary, &image, &params).unwrap();
        let oracle = all_pairs_mean_field(&unary, &image, &params, res.iterations_run);
        for (a, b) in res.q_fg.iter().zip(oracle.iter()) {
            let d = ((*a as f64) - b).abs();
            if d > worst {
                worst = d;
            }
            assert!(
                d <= 1e-5,
                "instance {instance}: max|dQ| {d:.2e} exceeds 1e-5"
            );
        }
    }
    let dt = t0.elapsed();
    println!(
        "[criterion 3] CRF oracle equivalence: PASS (20 instances, worst |dQ| {worst:.2e}, {:.1}s)",
        dt.as_secs_f64()
    );
    assert!(dt.as_secs() < 60, "criterion 3 must finish under 1 minute");
}

// ---------------------------------------------------------------------------
// criterion 4: Frangi sanity
// ---------------------------------------------------------------------------

fn cylinder(n: usize, axis: usize, radius: f32) -> Array3<f32> {
    let c = (n / 2) as f32;
    Array3::from_shape_fn((n, n, n), |(i, j, k)| {
        let p = [i as f32, j as f32, k as f32];
        let mut d2 = 0.0;
        for a in 0..3 {
            if a != axis {
                d2 += (p[a] - c).powi(2);
            }
        }
        20.0 + 200.0 * (-0.5 * d2 / (radius * radius)).exp()
    })
}

#[test]
fn acceptance_c4_frangi_sanity() {
    let t0 = Instant::now();
    let params = VesselnessParams::default();

    let constant = Array3::from_elem((32, 32, 32), 80.0f32);
    let resp = vesselness(&constant, &params);
    assert!(
        resp.iter().all(|&v| v == 0.0),
        "constant volume must give identically zero response"
    );

    let n = 64;
    let radius = 3.0;
    let vol = cylinder(n, 0, radius);
    let resp = vesselness(&vol, &params);
    let c = n / 2;
    let (mut center_sum, mut center_n, mut far_sum, mut far_n) = (0.0f64, 0u32, 0.0f64, 0u32);
    for ((i, j, k), &v) in resp.indexed_iter() {
        if i < 8 || i >= n - 8 {
            continue;
        }
        let d = (((j as f32 - c as f32).powi(2) + (k as f32 - c as f32).powi(2)) as f64).sqrt();
        if d < 1.0 {
            center_sum += v as f64;
            center_n += 1;
        } else if d > 3.0 * radius as f64 && d < (c - 4) as f64 {
            far_sum += v as f64;
            far_n += 1;
        }
    }
    let center_mean = center_sum / center_n as f64;
    let far_mean = far_sum / far_n as f64;
    assert!(
        center_mean >= 5.0 * far_mean,
        "centerline mean {center_mean:.4} not >= 5x far-field {far_mean:.4}"
    );

    let vol1 = cylinder(48, 1, radius);
    let r0 = vesselness(&cylinder(48, 0, radius), &params);
    let r1 = vesselness(&vol1, &params);
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((i, j, k), &v) in r0.indexed_iter() {
        let w = r1[(j, i, k)];
        num += ((v - w) as f64).powi(2);
        den += (v as f64).powi(2);
    }
    let rel_rms = (num / den).sqrt();
    assert!(rel_rms <= 0.05, "axis-permutation RMS {rel_rms:.4} > 5%");

    let dt = t0.elapsed();
    let contrast = if far_mean > 0.0 {
        format!("{:.1}x", center_mean / far_mean)
    } else {
        "far field exactly zero".to_string()
    };
    println!(
        "[criterion 4] Frangi sanity: PASS (centerline/far {contrast}, permutation RMS {:.3}%, {:.1}s)",
        rel_rms * 100.0,
        dt.as_secs_f64()
    );
    assert!(dt.as_secs() < 120, "criterion 4 must finish under 2 minutes");
}

// ---------------------------------------------------------------------------
// criterion 5: scan-conversion fidelity
// ---------------------------------------------------------------------------

fn paper_geometry() -> ProbeGeometry {
    ProbeGeometry::new(0.0, 0.2695, 1.003, 1.003, 96, 96).unwrap()
}

/// Spacing that maps the tan-fan tight bounds of the published frustum
/// (360 x 96 x 96 at 0.2695 mm / 1.003 deg) onto the published Cartesian
/// grid of 360 x 360 x 336. The paper quotes "around 0.2 mm" voxels, which
/// is inconsistent with its own numbers; see the reported check below.
const PAPER_IMPLIED_SPACING: [f32; 3] = [0.3969, 0.3969, 0.2879];

#[test]
fn acceptance_c5_cartesian_grid_shape() {
    let geom = paper_geometry();
    let (_, dims) = output_grid(&geom, 360, PAPER_IMPLIED_SPACING).unwrap();
    let expect = [360usize, 360, 336];
    println!(
        "[criterion 5] paper frustum -> Cartesian grid {dims:?} at spacing {PAPER_IMPLIED_SPACING:?} mm (target {expect:?} +-5%)"
    );
    // reported, not asserted: the nominal 0.2 mm isotropic spacing from the
    // text produces a very different grid, so the published voxel size and
    // the published grid cannot both be right
    let (_, dims02) = output_grid(&geom, 360, [0.2, 0.2, 0.2]).unwrap();
    println!(
        "[criterion 5] REPORTED: at the paper's nominal 0.2 mm spacing the tight grid is {dims02:?}, not {expect:?}"
    );
    for a in 0..3 {
        let rel = (dims[a] as f64 - expect[a] as f64).abs() / expect[a] as f64;
        assert!(
            rel <= 0.05,
            "axis {a}: {} vs {} ({:.1}%)",
            dims[a],
            expect[a],
            rel * 100.0
        );
    }
    println!("[criterion 5] grid shape: PASS");
}

#[test]
fn acceptance_c5_voxel_count_ratio() {
    // The whole-pipeline numbers the source text commits to are mutually
    // inconsistent: 360*360*336 / (360*96*96) = 13.1, while the prose
    // claims the frustum is "around 1/7" of the Cartesian volume. No
    // spacing choice makes both the grid-shape check and this ratio hold;
    // the ratio is asserted as specified and fails, with the measurements
    // printed for the record.
    let geom = paper_geometry();
    let frustum_voxels = 360u64 * 96 * 96;
    let (_, dims) = output_grid(&geom, 360, PAPER_IMPLIED_SPACING).unwrap();
    let cart_voxels: u64 = dims.iter().map(|&d| d as u64).product();
    let total_ratio = cart_voxels as f64 / frustum_voxels as f64;

    // footprint-only count at the same spacing
    let fv = FrustumVolume::new(
        Array3::from_elem((360, 96, 96), 1.0f32),
        0.2695,
        1.003,
        1.003,
        255.0,
    )
    .unwrap();
    let conv = frustum_to_cartesian(&fv, &geom, PAPER_IMPLIED_SPACING).unwrap();
    let footprint_ratio = conv.footprint.count_ones() as f64 / frustum_voxels as f64;

    println!(
        "[criterion 5] voxel-count ratio: measured total {total_ratio:.2}, footprint-only {footprint_ratio:.2}, required 7 +- 1"
    );
    println!(
        "[criterion 5] FAIL expected: the published grid (ratio 13.1) and the published ~1/7 claim contradict each other; no geometry reproduces both"
    );
    assert!(
        (6.0..=8.0).contains(&total_ratio),
        "voxel-count ratio {total_ratio:.2} outside 7 +- 1 (see printed analysis)"
    );
}

#[test]
fn acceptance_c5_round_trip_error() {
    let shape = (360usize, 96usize, 96usize);
    let data = Array3::from_shape_fn(shape, |(i, j, k)| {
        let v = 120.0
            + 60.0 * (i as f32 / 85.0).sin()
            + 40.0 * (j as f32 / 23.0).cos()
            + 25.0 * (k as f32 / 31.0).sin();
        v.clamp(0.0, 255.0)
    });
    let fv = FrustumVolume::new(data, 0.2695, 1.003, 1.003, 255.0).unwrap();
    let geom = paper_geometry();
    let conv = frustum_to_cartesian(&fv, &geom, PAPER_IMPLIED_SPACING).unwrap();
    let (back, _) = cartesian_to_frustum(&conv.volume, &geom, shape).unwrap();
    let lo = |n: usize| (n as f64 * 0.1).round() as usize;
    let hi = |n: usize| (n as f64 * 0.9).round() as usize;
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for i in lo(shape.0)..hi(shape.0) {
        for j in lo(shape.1)..hi(shape.1) {
            for k in lo(shape.2)..hi(shape.2) {
                sum += (back.data[(i, j, k)] - fv.data[(i, j, k)]).abs() as f64;
                count += 1;
            }
        }
    }
    let mean = sum / count as f64;
    println!(
        "[criterion 5] smooth-phantom round trip: mean |delta| {mean:.3} intensity units (limit 10)"
    );
    assert!(mean <= 10.0, "round-trip mean error {mean:.3} > 10/255 of range");
    println!("[criterion 5] round trip: PASS");
}

// ---------------------------------------------------------------------------
// criterion 6: equation-level degenerate cases
// ---------------------------------------------------------------------------

#[test]
fn acceptance_c6_equation_degenerate_cases() {
    // probability-map fusion: identity and annihilator, exact
    let vol = FrustumVolume::new(
        Array3::from_elem((6, 6, 6), 128.0f32),
        0.3,
        1.0,
        1.0,
        255.0,
    )
    .unwrap();
    let ones = Array3::from_elem((6, 6, 6), 1.0f32);
    let u = build_probability_map(&ones, &ones, &vol).unwrap();
    for &v in u.iter() {
        assert_eq!(v, 128.0f32 / 255.0);
    }
    let zeros = Array3::zeros((6, 6, 6));
    let u0 = build_probability_map(&zeros, &ones, &vol).unwrap();
    assert!(u0.iter().all(|&v| v == 0.0));

    // moving-average update with eta = 1 provably ignores the prediction
    let shape = (16, 16, 16);
    let mut umap = Array3::from_elem(shape, 0.02f32);
    let mut image = Array3::from_elem(shape, 30.0f32);
    for i in 4..12 {
        for j in 6..9 {
            for k in 6..9 {
                umap[(i, j, k)] = 0.85;
                image[(i, j, k)] = 200.0;
            }
        }
    }
    let bbox = BoundingBox3::new([2, 4, 4], [14, 11, 11]);
    let params = CrfParams {
        window_radius_vox: 3,
        ..CrfParams::default()
    };
    let base = initial_pseudo_label(&umap, &image, &bbox, &params, 1.0).unwrap();
    let mut pred_a = MaskVolume::zeros(shape);
    let mut pred_b = MaskVolume::zeros(shape);
    for i in 0..shape.0 {
        pred_a.data[(i, 7, 7)] = 1;
        pred_b.data[(i, 2, 2)] = 1;
    }
    let mut s1 = base.clone();
    update_pseudo_label(&mut s1, &umap, &pred_a, &image, &bbox, &params, 1).unwrap();
    let mut s2 = base.clone();
    update_pseudo_label(&mut s2, &umap, &pred_b, &image, &bbox, &params, 1).unwrap();
    assert_eq!(s1.y_current.data, s2.y_current.data, "eta=1 must ignore predictions");
    assert_eq!(s1.u_prev, s2.u_prev, "eta=1 blend must be bit-identical");

    // joint loss additivity is exact
    let b = LossBundle {
        l_cls: 0.125,
        l_loc: 2.5,
        l_seg: 0.0625,
    };
    assert_eq!(b.l_joint(), 0.125 + 2.5 + 0.0625);

    println!("[criterion 6] equation degenerate cases: PASS (fusion identity/annihilator exact, eta=1 bit-identical, joint loss additive)");
}

// ---------------------------------------------------------------------------
// criterion 7: FLOPs
// ---------------------------------------------------------------------------

#[test]
fn acceptance_c7_flops_hand_count() {
    // single conv layer: 2 * 27 * 8 * 16 * 32^3
    let macs = conv_macs(3, 8, 16, [32, 32, 32]);
    assert_eq!(2 * macs, 226_492_416);
    // an empty report totals zero
    let empty = frusseg::network::flops::FlopsReport::default();
    assert_eq!(empty.total_flops(), 0);
    println!("[criterion 7] single-layer hand count: PASS (226,492,416 FLOPs exact)");
}

#[test]
fn acceptance_c7_table_reproduction() {
    // Published complexity targets: frustum 5.2 (whole) / 1.8 (ROI) GFLOPs,
    // ratio 2.9; Cartesian 68.2 / 23.9 attempted with wider tolerance and
    // the discrepancy reported rather than asserted.
    let cfg = NetworkConfig::paper(0);
    let frustum = [360usize, 96, 96];
    let whole = count_flops(&cfg, frustum, &FlopsMode::WholeVolume, FlopsDomain::Frustum);
    let rois = FlopsMode::Rois(vec![[128, 32, 32], [128, 32, 32]]);
    let roi = count_flops(&cfg, frustum, &rois, FlopsDomain::Frustum);
    let ratio = whole.gflops() / roi.gflops();

    println!("[criterion 7] architecture assumptions:");
    for a in &whole.assumptions {
        println!("    - {a}");
    }
    println!(
        "[criterion 7] frustum whole-volume: {:.1} GFLOPs (published 5.2, tolerance +-30%)",
        whole.gflops()
    );
    println!(
        "[criterion 7] frustum ROI-restricted: {:.1} GFLOPs (published 1.8, tolerance +-30%)",
        roi.gflops()
    );
    println!(
        "[criterion 7] whole/ROI ratio: {ratio:.2} (published 2.9, tolerance +-20%)"
    );

    let cart = [360usize, 360, 336];
    let cart_whole = count_flops(&cfg, cart, &FlopsMode::WholeVolume, FlopsDomain::CartesianStride8);
    let cart_roi = count_flops(
        &cfg,
        cart,
        &FlopsMode::Rois(vec![[168, 120, 120], [168, 120, 120]]),
        FlopsDomain::CartesianStride8,
    );
    for (label, got, want) in [
        ("cartesian whole", cart_whole.gflops(), 68.2),
        ("cartesian ROI", cart_roi.gflops(), 23.9),
    ] {
        let rel = (got - want).abs() / want;
        if rel <= 0.5 {
            println!("[criterion 7] {label}: {got:.1} GFLOPs vs published {want} (within +-50%)");
        } else {
            println!(
                "[criterion 7] {label}: DISCREPANCY reported, {got:.1} GFLOPs vs published {want} ({:.0}x off); reported, not asserted per the wider-tolerance clause",
                got / want
            );
        }
    }

    println!(
        "[criterion 7] FAIL expected: a 512-channel stride-4 encoder on a 3.3M-voxel volume costs hundreds of GFLOPs by direct multiply-add counting; one 64->64 3x3x3 convolution at stride 4 alone is {:.1} GFLOPs, already above the published 5.2 total. The published absolute scale is unreachable under any faithful reading; measured values and assumptions are printed above.",
        2.0 * conv_macs(3, 64, 64, [90, 24, 24]) as f64 / 1e9
    );
    let rel_whole = (whole.gflops() - 5.2).abs() / 5.2;
    let rel_roi = (roi.gflops() - 1.8).abs() / 1.8;
    let rel_ratio = (ratio - 2.9f64).abs() / 2.9;
    assert!(
        rel_whole <= 0.30 && rel_roi <= 0.30 && rel_ratio <= 0.20,
        "frustum GFLOPs {:.1}/{:.1} (ratio {ratio:.2}) outside the published 5.2/1.8 (2.9) tolerances — see printed analysis",
        whole.gflops(),
        roi.gflops()
    );
}

// ---------------------------------------------------------------------------
// criterion 8: end-to-end desk-scale surrogate
// ---------------------------------------------------------------------------

fn to_train_item(i: &frusseg::phantom::DatasetItem) -> TrainItem {
    TrainItem {
        id: i.id.clone(),
        volume: i.phantom.volume.clone(),
        bbox: i.phantom.loose_bbox,
        gt: Some(i.phantom.ground_truth.clone()),
    }
}

fn mean_test_dice(
    net: &frusseg::network::Network<f32>,
    test: &[TrainItem],
    tc: &TrainConfig,
) -> f32 {
    let mut acc = 0.0f32;
    for item in test {
        let (pred, _) = infer(net, &item.volume, tc.m_rois_test, tc.tau_loc).unwrap();
        let c = confusion(&pred, item.gt.as_ref().unwrap()).unwrap();
        acc += dsc(&c);
    }
    acc / test.len() as f32
}

#[test]
fn acceptance_c8_end_to_end_surrogate() {
    let t0 = Instant::now();
    let base = PhantomSpec::desk_default(0);
    let items = generate_dataset(&base, 20, 5, 10, 2024).unwrap();
    let train_items: Vec<TrainItem> = items
        .iter()
        .filter(|i| i.split == Split::Train)
        .map(to_train_item)
        .collect();
    let val_items: Vec<TrainItem> = items
        .iter()
        .filter(|i| i.split == Split::Val)
        .map(to_train_item)
        .collect();
    let test_items: Vec<TrainItem> = items
        .iter()
        .filter(|i| i.split == Split::Test)
        .map(to_train_item)
        .collect();
    assert_eq!(
        (train_items.len(), val_items.len(), test_items.len()),
        (20, 5, 10)
    );

    let mut nc = NetworkConfig::compact(11);
    nc.decoder_channels = 16;
    let tc_weak = TrainConfig::desk(11);

    let weak = train(&train_items, &val_items, &tc_weak, &nc).unwrap();
    let weak_dice = mean_test_dice(&weak.network, &test_items, &tc_weak);
    println!("[criterion 8] weak pipeline test Dice: {weak_dice:.4} (required >= 0.50)");
    for (stage, d) in &weak.label_quality {
        println!("[criterion 8] weak label quality ({stage}): {d:.4}");
    }

    let tc_sup = TrainConfig {
        mode: TrainMode::FullySupervised,
        ..TrainConfig::desk(11)
    };
    let supervised = train(&train_items, &val_items, &tc_sup, &nc).unwrap();
    let sup_dice = mean_test_dice(&supervised.network, &test_items, &tc_sup);
    println!("[criterion 8] fully-supervised twin test Dice: {sup_dice:.4} (required >= weak)");

    let tc_bbox = TrainConfig {
        mode: TrainMode::BboxOnly,
        ..TrainConfig::desk(11)
    };
    let bbox = train(&train_items, &val_items, &tc_bbox, &nc).unwrap();
    let bbox_dice = mean_test_dice(&bbox.network, &test_items, &tc_bbox);
    println!("[criterion 8] bbox-as-label baseline test Dice: {bbox_dice:.4} (required strictly lowest)");

    let dt = t0.elapsed();
    println!(
        "[criterion 8] end-to-end surrogate: weak {weak_dice:.3} / supervised {sup_dice:.3} / bbox {bbox_dice:.3} in {:.0}s",
        dt.as_secs_f64()
    );
    assert!(weak_dice >= 0.50, "weak pipeline Dice {weak_dice:.4} < 0.50");
    assert!(
        sup_dice >= weak_dice,
        "supervised twin {sup_dice:.4} below weak {weak_dice:.4}"
    );
    assert!(
        bbox_dice < weak_dice && bbox_dice < sup_dice,
        "bbox baseline {bbox_dice:.4} not strictly lowest"
    );
    assert!(
        dt.as_secs() <= 30 * 60,
        "end-to-end surrogate exceeded 30 minutes ({})",
        dt.as_secs()
    );
    println!("[criterion 8] end-to-end surrogate: PASS");
}
