use proptest::prelude::*;
use susep::losses::{contrastive_from_similarities, contrastive_loss, cosine_similarity};
use susep::metrics::{nrmse, xsim};
use susep::physics::{dipole_kernel, field_forward, SourcePair};
use susep::synth::crop_patches;
use susep::volume::{Dims, Volume3D};

fn vol(n: usize, data: Vec<f64>) -> Volume3D {
    Volume3D::from_data([n, n, n], [1.0; 3], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crops_cover_every_voxel(
        d in prop::array::uniform3(8usize..40),
        w in prop::array::uniform3(1usize..16),
        s in prop::array::uniform3(1usize..20),
    ) {
        let w = [w[0].min(d[0]), w[1].min(d[1]), w[2].min(d[2])];
        // strides longer than the window leave gaps by design
        let s = [1 + s[0] % w[0], 1 + s[1] % w[1], 1 + s[2] % w[2]];
        let origins = crop_patches(d, w, s).unwrap();
        let dims = Dims::from(d);
        let mut hit = vec![false; dims.len()];
        for o in &origins {
            for k in 0..3 {
                prop_assert!(o[k] + w[k] <= d[k]);
            }
            for z in o[2]..o[2] + w[2] {
                for y in o[1]..o[1] + w[1] {
                    for x in o[0]..o[0] + w[0] {
                        hit[dims.index(x, y, z)] = true;
                    }
                }
            }
        }
        prop_assert!(hit.iter().all(|&h| h));
        let mut sorted = origins.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), origins.len());
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(
        x in prop::collection::vec(-5.0f64..5.0, 24),
        y in prop::collection::vec(-5.0f64..5.0, 24),
        k in 0.01f64..100.0,
    ) {
        let c = cosine_similarity(&x, &y, 2).unwrap().value;
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let xs: Vec<f64> = x.iter().map(|v| v * k).collect();
        let cs = cosine_similarity(&xs, &y, 2).unwrap().value;
        prop_assert!((c - cs).abs() < 1e-9);
    }

    #[test]
    fn contrastive_is_positive_and_monotone(
        s in prop::array::uniform4(-1.0f64..1.0),
        bump in 0.0f64..0.5,
    ) {
        let l = contrastive_from_similarities(s[0], s[1], s[2], s[3]);
        prop_assert!(l > 0.0);
        // raising a matched similarity never increases the loss
        prop_assert!(contrastive_from_similarities(s[0] + bump, s[1], s[2], s[3]) <= l + 1e-15);
        prop_assert!(contrastive_from_similarities(s[0], s[1] + bump, s[2], s[3]) >= l - 1e-15);
    }

    #[test]
    fn contrastive_of_vectors_stays_in_closed_range(
        v in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 16), 4),
    ) {
        let l = contrastive_loss(&v[0], &v[1], &v[2], &v[3], 1).unwrap();
        let lo = 2.0 * (1.0 + (-2.0f64).exp()).ln();
        let hi = 2.0 * (1.0 + 2.0f64.exp()).ln();
        prop_assert!(l >= lo - 1e-12 && l <= hi + 1e-12);
    }

    #[test]
    fn xsim_is_symmetric_and_nrmse_scale_free(
        a in prop::collection::vec(-1.0f64..1.0, 512),
        b in prop::collection::vec(-1.0f64..1.0, 512),
        k in 0.1f64..10.0,
    ) {
        let (va, vb) = (vol(8, a.clone()), vol(8, b.clone()));
        let ab = xsim(&va, &vb, None).unwrap();
        let ba = xsim(&vb, &va, None).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        let sa = vol(8, a.iter().map(|v| v * k).collect());
        let sb = vol(8, b.iter().map(|v| v * k).collect());
        let e = nrmse(&va, &vb, None).unwrap();
        prop_assert!((nrmse(&sa, &sb, None).unwrap() - e).abs() <= 1e-9 * e.max(1.0));
    }

    #[test]
    fn field_is_linear_and_zero_mean(
        p in prop::collection::vec(0.0f64..1.0, 512),
        q in prop::collection::vec(-1.0f64..0.0, 512),
        k in -3.0f64..3.0,
    ) {
        let kernel = dipole_kernel([8, 8, 8], [1.0; 3]).unwrap();
        let zero = vol(8, vec![0.0; 512]);
        let fp = field_forward(&SourcePair::new(vol(8, p.clone()), zero.clone()).unwrap(), &kernel).unwrap();
        let fq = field_forward(&SourcePair::new(zero.clone(), vol(8, q.clone())).unwrap(), &kernel).unwrap();
        let mixed = SourcePair::new(vol(8, p.iter().map(|v| v * k.abs()).collect()), vol(8, q)).unwrap();
        let f = field_forward(&mixed, &kernel).unwrap();
        for i in 0..512 {
            prop_assert!((f.data()[i] - (k.abs() * fp.data()[i] + fq.data()[i])).abs() < 1e-10);
        }
        prop_assert!(f.data().iter().sum::<f64>().abs() < 1e-9);
    }
}
