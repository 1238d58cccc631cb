use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use icmp_compute::life::{
    glider_equivalence_experiment, run_with_control, update_step, validating_network, GliderConfig,
    LifeConfig, LifeGrid,
};
use icmp_compute::transport::NetworkConfig;

/// Direct rule on a torus, written out without the library's neighbor code.
fn reference_step(g: &LifeGrid) -> Vec<u8> {
    let (w, h) = (g.width(), g.height());
    let mut out = vec![0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut n = 0;
            for dr in [h - 1, 0, 1] {
                for dc in [w - 1, 0, 1] {
                    if (dr, dc) != (0, 0) {
                        n += g.get((r + dr) % h, (c + dc) % w);
                    }
                }
            }
            let y = g.get(r, c);
            out[r * w + c] = (n == 3 || (n == 2 && y == 1)) as u8;
        }
    }
    out
}

#[test]
fn glider_translates_on_larger_torus() {
    let g = LifeGrid::glider(8, 8).unwrap();
    let mut x = g.clone();
    for _ in 0..32 {
        x = x.step_oracle();
    }
    // eight diagonal shifts of one cell bring it home on an 8x8 torus
    assert_eq!(x.cells(), g.cells());
    assert_eq!(x.generation, 32);
}

#[test]
fn small_torus_control_never_dies() {
    let mut x = LifeGrid::glider(4, 4).unwrap();
    for _ in 0..8192 {
        x = x.step_oracle();
        assert!(x.live() > 0);
    }
}

#[test]
fn glider_clean_with_more_attempts() {
    // same lossy network; four rounds push the per-cell miss rate to ~1e-7
    let cfg = GliderConfig {
        life: LifeConfig { attempts: 4, ..LifeConfig::default() },
        ..GliderConfig::default()
    };
    let rep = glider_equivalence_experiment(&cfg).unwrap();
    assert_eq!(rep.site_updates, 1 << 17);
    assert!(rep.clean(), "first deviation {:?}", rep.first_deviation);
}

#[test]
fn duplicated_and_reordered_replies_do_not_change_outcome() {
    let mut net_cfg = NetworkConfig::lossless(4);
    net_cfg.duplicate_probability = 0.5;
    net_cfg.reorder_window = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let initial = LifeGrid::random(12, 9, 0.35, &mut rng).unwrap();
    let (mut net, a) = validating_network(12, 9, net_cfg).unwrap();
    let rep = run_with_control(&initial, 40, &mut net, &a, &LifeConfig::default()).unwrap();
    assert!(rep.clean());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lossless_message_step_matches_reference(seed in any::<u64>(), w in 3usize..9, h in 3usize..9, density in 0.1f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = LifeGrid::random(w, h, density, &mut rng).unwrap();
        let (mut net, a) = validating_network(w, h, NetworkConfig::lossless(seed)).unwrap();
        let (next, rep) = update_step(&g, &mut net, &a, &LifeConfig::default()).unwrap();
        let expected = reference_step(&g);
        prop_assert_eq!(next.cells(), &expected[..]);
        let control = g.step_oracle();
        prop_assert_eq!(control.cells(), &expected[..]);
        prop_assert!(rep.messages_sent <= (2 * 2 * w * h) as u64);
    }
}
