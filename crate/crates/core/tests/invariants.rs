mod common;

use candle_core::{DType, Device, Tensor};
use common::{disk_oracle, invariant_suite, pool_oracle, rand_tensor, report, vals};
use finemask::base_model::Point;
use finemask::checkpoint::{decode_archive, encode_archive};
use finemask::localization::{assemble_local_feature, crop_subimages, multi_granularity_pool};
use finemask::nn::{Attention, ParamStore};
use finemask::retarget::rasterize_clicks;
use finemask::video::{MemoryBank, MemoryEntry};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn structural_invariants_hold() {
    let checks = invariant_suite();
    report(&checks);
    for c in &checks {
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
}

fn entry(i: usize) -> MemoryEntry {
    MemoryEntry { embedding: Tensor::zeros((2, 1, 1), DType::F32, &Device::Cpu).unwrap(), frame_index: i }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quadrant_tiles_reassemble(seed in any::<u64>(), half in 1usize..6, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = rand_tensor(&mut rng, &[1, c, 2 * half, 2 * half], DType::F32);
        let subs = crop_subimages(&img).unwrap();
        prop_assert_eq!(subs.subs.dims(), &[4, 1, c, 2 * half, 2 * half]);
        let tiles: Vec<Tensor> = subs.positions.iter().map(|&(r, q)| img.narrow(2, r * half, half).unwrap().narrow(3, q * half, half).unwrap()).collect();
        let back = assemble_local_feature(&Tensor::stack(&tiles, 0).unwrap(), &subs.positions).unwrap();
        prop_assert_eq!(vals(&back), vals(&img));
    }

    #[test]
    fn pooling_matches_window_means(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = 8 * n;
        let x = rand_tensor(&mut rng, &[1, 2, side, side], DType::F64);
        let pooled = multi_granularity_pool(&x, &[2, 4, 8]).unwrap();
        for (p, k) in pooled.iter().zip([2, 4, 8]) {
            for (a, b) in vals(p).iter().zip(pool_oracle(&vals(&x), (1, 2, side, side), k)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rasterizer_matches_disk_oracle(x in 0u32..128, y in 0u32..128, r in 0usize..8, neg in any::<bool>()) {
        let p = if neg { Point::negative(x as f64, y as f64) } else { Point::positive(x as f64, y as f64) };
        prop_assert_eq!(rasterize_clicks(&[p], 32, 128, r), disk_oracle(&[p], 32, 128, r));
    }

    #[test]
    fn bank_keeps_the_newest_entries(cap in 1usize..6, n in 0usize..20, pinned in any::<bool>()) {
        let mut bank = MemoryBank::new(cap).unwrap();
        let start = if pinned { bank.pin(entry(0)).unwrap(); 1 } else { 0 };
        for i in start..start + n {
            bank.push(entry(i)).unwrap();
        }
        let kept: Vec<usize> = (start + n.saturating_sub(cap)..start + n).collect();
        let mut want = if pinned { vec![0] } else { vec![] };
        want.extend(kept);
        prop_assert_eq!(bank.frame_indices(), want);
    }

    #[test]
    fn attention_weights_are_distributions(seed in any::<u64>(), tq in 1usize..6, tk in 1usize..9, scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::new(DType::F64, seed);
        let attn = Attention::new(&store.root(false), 8, 6, 2, 1).unwrap();
        let q = (rand_tensor(&mut rng, &[1, tq, 8], DType::F64) * scale).unwrap();
        let kv = (rand_tensor(&mut rng, &[1, tk, 6], DType::F64) * scale).unwrap();
        let w = attn.trace(&q, &kv, &kv).unwrap().weights;
        for s in vals(&w.sum(3).unwrap()) {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn archive_round_trip_is_exact(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = std::collections::BTreeMap::new();
        for i in 0..n {
            let dims = vec![i + 1, 3];
            let t = rand_tensor(&mut rng, &dims, DType::F32);
            table.insert(format!("p{i}.weight"), (dims, t.flatten_all().unwrap().to_vec1::<f32>().unwrap()));
        }
        let (m, b) = encode_archive(&table);
        let back = decode_archive(&m, &b).unwrap();
        prop_assert_eq!(&back, &table);
        prop_assert_eq!(encode_archive(&back), (m, b));
    }
}
