//! Arithmetic function library available to induced programs.
//!
//! Every entry knows its arity, how argument dimensions combine, how to
//! evaluate itself and how to pull an upstream gradient back onto each
//! argument (a vector-Jacobian product). Jacobians are never materialised.

use std::fmt;
use std::sync::Arc;

/// A pure vector function usable inside a program body.
pub trait Function: Send + Sync + fmt::Debug {
    /// Printed head symbol, e.g. `+`.
    fn symbol(&self) -> &'static str;

    /// Alternative spellings accepted by the parser.
    fn aliases(&self) -> &'static [&'static str] {
        &[]
    }

    fn arity(&self) -> usize;

    /// Output dimension for the given argument dimensions, `None` when the
    /// combination does not typecheck.
    fn result_dim(&self, arg_dims: &[usize]) -> Option<usize>;

    /// Canonical argument dimension signatures producing an output of `out`.
    ///
    /// Search uses this to enumerate type-compatible replacement subtrees.
    fn signatures(&self, out: usize) -> Vec<Vec<usize>>;

    /// Resolve argument dimensions given the expected output and whatever
    /// argument dimensions are already known.
    fn infer_arg_dims(&self, out: usize, known: &[Option<usize>]) -> Option<Vec<usize>>;

    fn is_commutative(&self) -> bool;

    fn eval(&self, args: &[&[f64]]) -> Vec<f64>;

    /// Gradient of `upstream · f(args)` with respect to argument `which`.
    fn vjp(&self, args: &[&[f64]], upstream: &[f64], which: usize) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct Add;

#[derive(Debug, Clone, Copy)]
pub struct Sub;

/// Scalar times vector. Either argument may be the scalar; when both are
/// one-dimensional the product is ordinary multiplication.
#[derive(Debug, Clone, Copy)]
pub struct Scale;

fn same_dims(arg_dims: &[usize]) -> Option<usize> {
    match arg_dims {
        [a, b] if a == b => Some(*a),
        _ => None,
    }
}

fn same_dims_infer(out: usize, known: &[Option<usize>]) -> Option<Vec<usize>> {
    if known.len() != 2 || known.iter().flatten().any(|&d| d != out) {
        return None;
    }
    Some(vec![out, out])
}

impl Function for Add {
    fn symbol(&self) -> &'static str {
        "+"
    }
    fn aliases(&self) -> &'static [&'static str] {
        &["add"]
    }
    fn arity(&self) -> usize {
        2
    }
    fn result_dim(&self, arg_dims: &[usize]) -> Option<usize> {
        same_dims(arg_dims)
    }
    fn signatures(&self, out: usize) -> Vec<Vec<usize>> {
        vec![vec![out, out]]
    }
    fn infer_arg_dims(&self, out: usize, known: &[Option<usize>]) -> Option<Vec<usize>> {
        same_dims_infer(out, known)
    }
    fn is_commutative(&self) -> bool {
        true
    }
    fn eval(&self, args: &[&[f64]]) -> Vec<f64> {
        args[0].iter().zip(args[1]).map(|(a, b)| a + b).collect()
    }
    fn vjp(&self, _args: &[&[f64]], upstream: &[f64], _which: usize) -> Vec<f64> {
        upstream.to_vec()
    }
}

impl Function for Sub {
    fn symbol(&self) -> &'static str {
        "-"
    }
    fn aliases(&self) -> &'static [&'static str] {
        &["sub"]
    }
    fn arity(&self) -> usize {
        2
    }
    fn result_dim(&self, arg_dims: &[usize]) -> Option<usize> {
        same_dims(arg_dims)
    }
    fn signatures(&self, out: usize) -> Vec<Vec<usize>> {
        vec![vec![out, out]]
    }
    fn infer_arg_dims(&self, out: usize, known: &[Option<usize>]) -> Option<Vec<usize>> {
        same_dims_infer(out, known)
    }
    fn is_commutative(&self) -> bool {
        false
    }
    fn eval(&self, args: &[&[f64]]) -> Vec<f64> {
        args[0].iter().zip(args[1]).map(|(a, b)| a - b).collect()
    }
    fn vjp(&self, _args: &[&[f64]], upstream: &[f64], which: usize) -> Vec<f64> {
        if which == 0 {
            upstream.to_vec()
        } else {
            upstream.iter().map(|g| -g).collect()
        }
    }
}

impl Scale {
    /// Index of the scalar argument (the first one when both are scalars).
    fn scalar_index(args: &[&[f64]]) -> usize {
        if args[0].len() == 1 {
            0
        } else {
            1
        }
    }
}

impl Function for Scale {
    fn symbol(&self) -> &'static str {
        "*"
    }
    fn aliases(&self) -> &'static [&'static str] {
        &["scale"]
    }
    fn arity(&self) -> usize {
        2
    }
    fn result_dim(&self, arg_dims: &[usize]) -> Option<usize> {
        match arg_dims {
            [1, d] | [d, 1] => Some(*d),
            _ => None,
        }
    }
    fn signatures(&self, out: usize) -> Vec<Vec<usize>> {
        vec![vec![1, out]]
    }
    fn infer_arg_dims(&self, out: usize, known: &[Option<usize>]) -> Option<Vec<usize>> {
        if known.len() != 2 {
            return None;
        }
        if out == 1 {
            return known
                .iter()
                .flatten()
                .all(|&d| d == 1)
                .then(|| vec![1, 1]);
        }
        let dims = match (known[0], known[1]) {
            (Some(1), _) => vec![1, out],
            (Some(_), _) => vec![out, 1],
            (None, Some(1)) => vec![out, 1],
            (None, Some(_)) => vec![1, out],
            (None, None) => vec![1, out],
        };
        self.result_dim(&dims)
            .filter(|&d| d == out)
            .filter(|_| known.iter().zip(&dims).all(|(k, d)| k.is_none_or(|k| k == *d)))
            .map(|_| dims)
    }
    fn is_commutative(&self) -> bool {
        true
    }
    fn eval(&self, args: &[&[f64]]) -> Vec<f64> {
        let s = Self::scalar_index(args);
        let c = args[s][0];
        args[1 - s].iter().map(|x| c * x).collect()
    }
    fn vjp(&self, args: &[&[f64]], upstream: &[f64], which: usize) -> Vec<f64> {
        let s = Self::scalar_index(args);
        let other = args[1 - s];
        if which == s {
            vec![upstream.iter().zip(other).map(|(g, x)| g * x).sum()]
        } else {
            let c = args[s][0];
            upstream.iter().map(|g| c * g).collect()
        }
    }
}

/// The set of functions `F` an induced program may call.
#[derive(Debug, Clone)]
pub struct FunctionLibrary {
    entries: Vec<Arc<dyn Function>>,
}

impl Default for FunctionLibrary {
    fn default() -> Self {
        Self::standard()
    }
}

impl FunctionLibrary {
    /// Vector addition, subtraction and scalar scaling.
    pub fn standard() -> Self {
        Self {
            entries: vec![Arc::new(Add), Arc::new(Sub), Arc::new(Scale)],
        }
    }

    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn with(mut self, f: impl Function + 'static) -> Self {
        self.entries.push(Arc::new(f));
        self
    }

    pub fn get(&self, name: &str) -> Option<&dyn Function> {
        self.entries
            .iter()
            .find(|f| f.symbol() == name || f.aliases().contains(&name))
            .map(|f| f.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Function> {
        self.entries.iter().map(|f| f.as_ref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest arity across the library.
    pub fn max_arity(&self) -> usize {
        self.iter().map(|f| f.arity()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_jacobian_check(f: &dyn Function, args: &[Vec<f64>]) {
        let refs: Vec<&[f64]> = args.iter().map(|a| a.as_slice()).collect();
        let out = f.eval(&refs);
        let h = 1e-6;
        for (k, upstream_seed) in (0..out.len()).enumerate() {
            let mut upstream = vec![0.0; out.len()];
            upstream[upstream_seed] = 1.0;
            for which in 0..args.len() {
                let analytic = f.vjp(&refs, &upstream, which);
                for i in 0..args[which].len() {
                    let mut plus = args.to_vec();
                    let mut minus = args.to_vec();
                    plus[which][i] += h;
                    minus[which][i] -= h;
                    let p: Vec<&[f64]> = plus.iter().map(|a| a.as_slice()).collect();
                    let m: Vec<&[f64]> = minus.iter().map(|a| a.as_slice()).collect();
                    let numeric = (f.eval(&p)[k] - f.eval(&m)[k]) / (2.0 * h);
                    assert!(
                        (numeric - analytic[i]).abs() < 1e-7,
                        "{} arg {which} coord {i}: {numeric} vs {}",
                        f.symbol(),
                        analytic[i]
                    );
                }
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let lib = FunctionLibrary::standard();
        let v2 = vec![vec![1.5, -2.0], vec![0.25, 3.0]];
        fd_jacobian_check(lib.get("+").unwrap(), &v2);
        fd_jacobian_check(lib.get("-").unwrap(), &v2);
        fd_jacobian_check(lib.get("*").unwrap(), &[vec![-0.7], vec![0.3, 2.0, -1.0]]);
        fd_jacobian_check(lib.get("*").unwrap(), &[vec![0.3, 2.0], vec![4.0]]);
        fd_jacobian_check(lib.get("*").unwrap(), &[vec![1.3], vec![-2.0]]);
    }

    #[test]
    fn add_and_scale_values() {
        let lib = FunctionLibrary::standard();
        assert_eq!(lib.get("add").unwrap().eval(&[&[1.0, 2.0], &[3.0, 4.0]]), vec![4.0, 6.0]);
        assert_eq!(lib.get("scale").unwrap().eval(&[&[2.0], &[1.0, -1.0]]), vec![2.0, -2.0]);
    }

    #[test]
    fn add_gradient_passes_through_unchanged() {
        let add = Add;
        let g = [0.3, -1.25];
        assert_eq!(add.vjp(&[&[1.0, 2.0], &[5.0, 6.0]], &g, 0), g.to_vec());
        assert_eq!(add.vjp(&[&[1.0, 2.0], &[5.0, 6.0]], &g, 1), g.to_vec());
    }

    #[test]
    fn scale_gradient_wrt_scalar_is_dot_product() {
        let v = [1.0, -2.0, 0.5];
        let g = [0.2, 0.4, -4.0];
        let dc = Scale.vjp(&[&[3.0], &v], &g, 0);
        assert_eq!(dc, vec![0.2 - 0.8 - 2.0]);
    }

    #[test]
    fn scale_dimension_rules() {
        assert_eq!(Scale.result_dim(&[1, 3]), Some(3));
        assert_eq!(Scale.result_dim(&[3, 1]), Some(3));
        assert_eq!(Scale.result_dim(&[2, 3]), None);
        assert_eq!(Scale.infer_arg_dims(2, &[None, None]), Some(vec![1, 2]));
        assert_eq!(Scale.infer_arg_dims(2, &[Some(2), None]), Some(vec![2, 1]));
        assert_eq!(Scale.infer_arg_dims(2, &[Some(3), None]), None);
        assert_eq!(Add.infer_arg_dims(2, &[Some(1), None]), None);
    }
}
