//! Data-parallel helpers. With the `parallel` feature (default) these fan
//! out over rayon; without it they fall back to plain iteration so the
//! whole pipeline stays usable single-threaded.

#[cfg(feature = "parallel")]
pub fn pmap<'a, T, R, F>(xs: &'a [T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&'a T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    xs.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn pmap<'a, T, R, F>(xs: &'a [T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&'a T) -> R + Sync + Send,
{
    xs.iter().map(f).collect()
}

/// Always-sequential map, the comparison arm for benches and equivalence
/// tests.
pub fn smap<'a, T, R, F>(xs: &'a [T], f: F) -> Vec<R>
where
    F: Fn(&'a T) -> R,
{
    xs.iter().map(f).collect()
}
