use super::{falling_factorial_f64, Kernel, MAX_ARITY};
use crate::error::{domain, Error, Result};

/// All partitions of `{0, .., q-1}` into `q/2` unordered pairs.
pub fn pair_partitions(q: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    if q % 2 != 0 {
        return Err(domain(format!("pair partitions need an even size, got {q}")));
    }
    fn rec(rest: &[usize], acc: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        let Some((&first, tail)) = rest.split_first() else {
            out.push(acc.clone());
            return;
        };
        for k in 0..tail.len() {
            acc.push((first, tail[k]));
            let remaining: Vec<usize> = tail
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .map(|(_, &v)| v)
                .collect();
            rec(&remaining, acc, out);
            acc.pop();
        }
    }
    let items: Vec<usize> = (0..q).collect();
    let mut out = Vec::new();
    rec(&items, &mut Vec::new(), &mut out);
    Ok(out)
}

/// All set partitions of `{0, .., q-1}`, via restricted growth strings.
pub fn set_partitions(q: usize) -> Vec<Vec<Vec<usize>>> {
    if q == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    let mut a = vec![0usize; q];
    loop {
        let blocks = a.iter().max().copied().unwrap_or(0) + 1;
        let mut part = vec![Vec::new(); blocks];
        for (i, &b) in a.iter().enumerate() {
            part[b].push(i);
        }
        out.push(part);

        // next restricted growth string: a[0] = 0, a[i] <= 1 + max(a[..i])
        let mut i = q - 1;
        loop {
            if i == 0 {
                return out;
            }
            let prefix_max = a[..i].iter().copied().max().unwrap_or(0);
            if a[i] <= prefix_max {
                a[i] += 1;
                for x in a[i + 1..].iter_mut() {
                    *x = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Rubin-Vitale expansion of the unnormalized injection sum
/// `Σ_{s injective} Π_a f_a(x_{s_a})` for a product kernel:
///
/// ```text
/// Σ_{π partition of [q]} Π_{V ∈ π} (-1)^{|V|-1} (|V|-1)! Σ_i Π_{v ∈ V} f_v(x_i)
/// ```
///
/// Dividing by `(N)_q` gives `m(x)^{⊙q}(F)`.
pub fn rubin_vitale<S: 'static>(points: &[S], kernel: &Kernel<S>) -> Result<f64> {
    let factors = kernel.factors().ok_or_else(|| {
        Error::UnsupportedKernel("the Rubin-Vitale expansion needs a product kernel".into())
    })?;
    let q = factors.len();
    debug_assert!(q <= MAX_ARITY);
    // power sums over every nonempty subset of factors
    let masks = 1usize << q;
    let mut sums = vec![0.0; masks];
    let mut prods = vec![0.0; masks];
    let mut vals = [0.0; MAX_ARITY];
    for x in points {
        for (v, f) in vals.iter_mut().zip(factors) {
            *v = f.eval(x);
        }
        prods[0] = 1.0;
        for mask in 1..masks {
            let low = mask.trailing_zeros() as usize;
            prods[mask] = prods[mask & (mask - 1)] * vals[low];
            sums[mask] += prods[mask];
        }
    }
    let mut total = 0.0;
    for part in set_partitions(q) {
        let mut term = 1.0;
        for block in &part {
            let size = block.len();
            let mask = block.iter().fold(0usize, |m, &v| m | (1 << v));
            let sign = if size % 2 == 1 { 1.0 } else { -1.0 };
            term *= sign * falling_factorial_f64(size - 1, size - 1) * sums[mask];
        }
        total += term;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statistics::ScalarFn;

    #[test]
    fn pair_partition_counts() {
        assert_eq!(pair_partitions(2).unwrap(), vec![vec![(0, 1)]]);
        assert_eq!(pair_partitions(4).unwrap().len(), 3);
        assert_eq!(pair_partitions(6).unwrap().len(), 15);
        assert_eq!(pair_partitions(8).unwrap().len(), 105);
        assert!(pair_partitions(3).is_err());
        assert_eq!(pair_partitions(0).unwrap(), vec![Vec::<(usize, usize)>::new()]);
    }

    #[test]
    fn bell_numbers() {
        let bell = [1, 1, 2, 5, 15, 52, 203, 877, 4140];
        for (q, &b) in bell.iter().enumerate() {
            assert_eq!(set_partitions(q).len(), b, "q = {q}");
        }
    }

    #[test]
    fn two_factor_expansion() {
        let f = ScalarFn::new(|x: &f64| *x);
        let k = crate::statistics::Kernel::power(f, 2, 1e6).unwrap();
        let pts = [1.0, 2.0, 4.0];
        let s: f64 = pts.iter().sum();
        let s2: f64 = pts.iter().map(|x| x * x).sum();
        assert_eq!(rubin_vitale(&pts, &k).unwrap(), s * s - s2);
        let one = crate::statistics::Kernel::product(vec![ScalarFn::new(|x: &f64| *x)], 1e6).unwrap();
        assert_eq!(rubin_vitale(&pts, &one).unwrap(), s);
    }

    #[test]
    fn general_kernel_unsupported() {
        let k = crate::statistics::Kernel::general(2, 1.0, true, |_: &[&f64]| 0.0).unwrap();
        assert!(matches!(rubin_vitale(&[0.0, 1.0], &k), Err(Error::UnsupportedKernel(_))));
    }
}
