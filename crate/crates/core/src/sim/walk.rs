use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SimWorld;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WalkError {
    UnknownPage(usize),
    /// No simple path of the requested length leaves the start page.
    DeadEnd { reached: usize },
}

impl fmt::Display for WalkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WalkError::UnknownPage(p) => write!(f, "page {p} does not exist"),
            WalkError::DeadEnd { reached } => write!(f, "walk dead-ends after {reached} hops"),
        }
    }
}

impl core::error::Error for WalkError {}

/// Seeded random walk of exactly `hops` links without revisiting a page.
///
/// Returns the page path including the start. Backtracks when a branch dead-ends,
/// so a walk fails only when no such simple path exists.
pub fn random_walk(world: &SimWorld, start: usize, hops: usize, salt: u64) -> Result<Vec<usize>, WalkError> {
    if start >= world.pages.len() {
        return Err(WalkError::UnknownPage(start));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed() ^ salt.rotate_left(17) ^ (start as u64));
    let mut path = alloc::vec![start];
    let mut best = 0;
    if extend(world, &mut path, hops, &mut rng, &mut best) {
        Ok(path)
    } else {
        Err(WalkError::DeadEnd { reached: best })
    }
}

fn extend(world: &SimWorld, path: &mut Vec<usize>, hops: usize, rng: &mut ChaCha8Rng, best: &mut usize) -> bool {
    *best = (*best).max(path.len() - 1);
    if path.len() == hops + 1 {
        return true;
    }
    let here = *path.last().unwrap_or(&0);
    let mut next: Vec<usize> = world.pages[here]
        .outlinks
        .iter()
        .map(|r| r.target)
        .filter(|t| !path.contains(t))
        .collect();
    next.sort_unstable();
    next.dedup();
    next.shuffle(rng);
    for t in next {
        path.push(t);
        if extend(world, path, hops, rng, best) {
            return true;
        }
        path.pop();
    }
    false
}
