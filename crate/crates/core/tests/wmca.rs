mod common;

use hmnet::numerics::{FeatureGrid, Tensor};
use hmnet::wmca::{
    relative_position_bias, tile_merge, tile_partition, wmca_attend, TileLayout, BIAS_SIDE, TILE, TILE_AREA,
};

use common::wmca::{dense_oracle_error, self_attention_matches, tile_locality_holds, wmca_instance};

#[test]
fn single_tile_matches_dense_attention() {
    for seed in 0..20 {
        let (h, w) = (1 + seed as usize % 7, 7 - seed as usize % 5);
        let err = dense_oracle_error(&wmca_instance(seed, h, w));
        assert!(err < 1e-9, "seed {seed} {h}x{w}: {err:e}");
    }
}

#[test]
fn multi_tile_matches_block_masked_dense_attention() {
    for (seed, (h, w)) in [(8, 8), (9, 10), (14, 7), (15, 3)].into_iter().enumerate() {
        let err = dense_oracle_error(&wmca_instance(50 + seed as u64, h, w));
        assert!(err < 1e-9, "{h}x{w}: {err:e}");
    }
}

#[test]
fn perturbation_stays_inside_its_tile() {
    for (seed, (h, w)) in [(8, 8), (10, 15), (21, 9)].into_iter().enumerate() {
        assert!(tile_locality_holds(&wmca_instance(seed as u64, h, w)), "{h}x{w}");
    }
}

#[test]
fn self_attention_is_the_equal_input_special_case() {
    let checked = (0..12).filter_map(|seed| self_attention_matches(seed)).inspect(|&ok| assert!(ok)).count();
    assert!(checked >= 3);
}

#[test]
fn partition_and_merge_are_inverse() {
    for (h, w) in [(1, 1), (7, 7), (8, 8), (13, 20)] {
        let x = FeatureGrid::new(8, Tensor::from_fn(&[h, w, 3], |i| i as f64 + 0.5)).unwrap();
        let tiles = tile_partition(&x);
        let layout = TileLayout::new(h, w);
        assert_eq!(tiles.data.shape(), &[layout.num_tiles(), TILE_AREA, 3]);
        assert_eq!(tiles.mask.iter().filter(|&&m| !m).count(), layout.masked_cells());
        let back = tile_merge(&tiles, 8);
        assert!(back.tensor.bit_eq(&x.tensor));
        let mut seen = vec![0; h * w];
        for t in 0..layout.num_tiles() {
            for (_, g) in layout.valid(t) {
                seen[g] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}

#[test]
fn bias_lookup_matches_coordinate_deltas() {
    let table = Tensor::from_fn(&[2, BIAS_SIDE * BIAS_SIDE], |i| i as f64);
    let full = relative_position_bias(&table).unwrap();
    for h in 0..2 {
        for i in 0..TILE_AREA {
            for j in 0..TILE_AREA {
                let dr = (i / TILE) as i64 - (j / TILE) as i64;
                let dc = (i % TILE) as i64 - (j % TILE) as i64;
                let expect = h * BIAS_SIDE * BIAS_SIDE + ((dr + 6) * 13 + dc + 6) as usize;
                assert_eq!(full.data()[(h * TILE_AREA + i) * TILE_AREA + j], expect as f64);
            }
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_over_valid_keys() {
    let inst = wmca_instance(3, 10, 9);
    let (_, c) = wmca_attend(&inst.params, &inst.store, &inst.x1, &inst.x2).unwrap();
    let layout = c.layout();
    for t in 0..layout.num_tiles() {
        let n = layout.valid(t).len();
        for h in 0..inst.params.heads {
            let w = c.weights(t, h, inst.params.heads);
            assert_eq!(w.len(), n * n);
            for r in w.chunks(n) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
