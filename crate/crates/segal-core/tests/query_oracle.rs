//! Region selection against a brute-force full-sort oracle, including
//! tie-heavy score distributions.

use proptest::prelude::*;
use rand::Rng;
use segal_core::alquery::{select_regions, RegionGrid, RegionQuery};
use segal_core::seeding;

fn random_grid(seed: u64, tie_heavy: bool) -> RegionGrid {
    let mut rng = seeding::stream_from(seed);
    let tiles_y = rng.random_range(1..6usize);
    let tiles_x = rng.random_range(1..6usize);
    let n = tiles_y * tiles_x;
    let eligible: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.8).collect();
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            if !eligible[i] {
                f64::NEG_INFINITY
            } else if tie_heavy {
                // Scores from a tiny discrete set force tie-breaking.
                [0.1, 0.5, 0.9][rng.random_range(0..3usize)]
            } else {
                rng.random_range(0.0..1.7)
            }
        })
        .collect();
    RegionGrid {
        region_size: 8,
        tiles_y,
        tiles_x,
        scores,
        eligible,
    }
}

/// Oracle: full stable sort of eligible tiles by (score desc, index asc).
fn brute_force(image: usize, grid: &RegionGrid, budget: usize) -> Vec<RegionQuery> {
    let mut tiles: Vec<usize> = (0..grid.num_tiles()).filter(|&t| grid.eligible[t]).collect();
    tiles.sort_by(|&a, &b| {
        grid.scores[b]
            .partial_cmp(&grid.scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    tiles
        .into_iter()
        .take(budget)
        .map(|t| RegionQuery {
            image,
            tile_row: t / grid.tiles_x,
            tile_col: t % grid.tiles_x,
            score: grid.scores[t],
        })
        .collect()
}

#[test]
fn selection_matches_brute_force_on_random_grids() {
    for seed in 0..200u64 {
        let tie_heavy = seed % 2 == 0;
        let grid = random_grid(seed, tie_heavy);
        let budget = (seed % 5 + 1) as usize;
        let expected = brute_force(7, &grid, budget);
        let got = select_regions(&[(7, grid)], budget).unwrap();
        assert_eq!(got, expected, "seed {seed} budget {budget}");
    }
}

#[test]
fn never_selects_ineligible_tiles() {
    for seed in 300..340u64 {
        let grid = random_grid(seed, true);
        let eligible = grid.eligible.clone();
        let tiles_x = grid.tiles_x;
        let got = select_regions(&[(0, grid)], 100).unwrap();
        for q in &got {
            assert!(eligible[q.tile_row * tiles_x + q.tile_col]);
            assert!(q.score.is_finite());
        }
    }
}

proptest! {
    #[test]
    fn selection_equals_oracle_property(
        seed in 0u64..10_000,
        budget in 1usize..8,
    ) {
        let grid = random_grid(seed, seed % 3 == 0);
        let expected = brute_force(1, &grid, budget);
        let got = select_regions(&[(1, grid)], budget).unwrap();
        prop_assert_eq!(got, expected);
    }
}
