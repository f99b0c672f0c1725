//! Order-preserving data-parallel map over episode or sample indices.
//!
//! With the `parallel` feature disabled every [`Exec`] runs sequentially.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl std::str::FromStr for Exec {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "sequential" | "seq" => Ok(Exec::Sequential),
            "parallel" | "par" => Ok(Exec::Parallel),
            _ => Err(crate::Error::Config(format!("unknown execution mode '{s}'"))),
        }
    }
}

/// `(0..n).map(f)` with results in index order.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i * i) as u64 ^ 0x5a;
        assert_eq!(map_indices(Exec::Sequential, 1000, f), map_indices(Exec::Parallel, 1000, f));
    }
}
