use std::f64::consts::PI;
use std::path::Path;

use proptest::prelude::*;

use fodiff::nn::Checkpoint;
use fodiff::pipeline::fvol::{decode, encode_volume, Fvol};
use fodiff::pipeline::RunConfig;
use fodiff::sh::{acc_voxel, eval_basis, order_block_sizes};
use fodiff::volume::ChannelVolume;

fn coeffs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 45)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Addition theorem: Σ_m Y_lm(d)² = (2l+1)/4π for every order l.
    #[test]
    fn basis_order_energy_is_constant(theta in 0.0f64..PI, phi in 0.0f64..2.0 * PI) {
        let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
        let b = eval_basis(&[d], 8).unwrap();
        let row = b.row(0);
        let mut start = 0;
        for (i, w) in order_block_sizes(8).unwrap().into_iter().enumerate() {
            let l = 2 * i;
            let e: f64 = row[start..start + w].iter().map(|v| v * v).sum();
            prop_assert!((e - (2 * l + 1) as f64 / (4.0 * PI)).abs() < 1e-10);
            start += w;
        }
    }

    #[test]
    fn acc_is_symmetric_bounded_and_scale_free(u in coeffs(), v in coeffs(), k in 0.01f64..100.0) {
        if let Some(a) = acc_voxel(&u, &v).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
            prop_assert!((a - acc_voxel(&v, &u).unwrap().unwrap()).abs() < 1e-15);
            let scaled: Vec<f64> = u.iter().map(|x| x * k).collect();
            prop_assert!((a - acc_voxel(&scaled, &v).unwrap().unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn acc_ignores_the_isotropic_term(u in coeffs(), v in coeffs(), c in -5.0f64..5.0) {
        let mut w = u.clone();
        w[0] = c;
        prop_assert_eq!(acc_voxel(&u, &v).unwrap(), acc_voxel(&w, &v).unwrap());
    }

    #[test]
    fn fvol_round_trip(x in 1usize..5, y in 1usize..5, z in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..x * y * z * c).map(|_| rng.random_range(-1e3f32..1e3) as f64).collect();
        let vol = ChannelVolume::from_vec((x, y, z), c, data).unwrap();
        let bytes = encode_volume(&vol).unwrap();
        prop_assert_eq!(bytes.len(), 28 + 4 * x * y * z * c);
        match decode(&bytes, Path::new("mem")).unwrap() {
            Fvol::Volume(back) => prop_assert_eq!(back, vol),
            Fvol::Mask(_) => prop_assert!(false, "decoded as mask"),
        }
        prop_assert!(decode(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    #[test]
    fn config_text_round_trip(seed in any::<u64>(), lr in 1e-6f64..1e-1, iters in 1usize..100_000, clip in prop::option::of(0.5f64..20.0)) {
        let run = RunConfig { seed, lr, iterations: iters, x0_clip: clip, ..RunConfig::desk() };
        prop_assert_eq!(RunConfig::from_text(&run.to_text()).unwrap(), run);
    }
}

#[test]
fn checkpoint_file_round_trip_is_byte_exact() {
    let run = RunConfig::desk();
    let net = fodiff::nn::Denoiser::new(run.denoiser()).unwrap();
    let ck = Checkpoint { config_text: run.to_text(), params: net.params().clone() };
    let path = std::env::temp_dir().join(format!("fodiff-prop-{}.fdck", std::process::id()));
    ck.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(back.config_text, ck.config_text);
    std::fs::write(&path, &first[..first.len() / 2]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    std::fs::remove_file(&path).unwrap();
}
