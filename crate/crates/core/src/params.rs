//! Named parameter groups.
//!
//! Each group is generic over its element type: `Matrix` for stored values,
//! gradients and optimizer moments, [`Var`](crate::autodiff::Var) when bound
//! to a tape for one forward pass.

use rand::Rng;

use crate::matrix::Matrix;

macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$fmeta:meta])* $field:ident ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T = $crate::matrix::Matrix> {
            $( $(#[$fmeta])* pub $field: T, )*
        }

        impl<T> $name<T> {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> $name<U> {
                $name { $( $field: f(stringify!($field), &self.$field), )* }
            }

            pub fn iter(&self) -> impl Iterator<Item = (&'static str, &T)> {
                [$( (stringify!($field), &self.$field) ),*].into_iter()
            }

            pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut T)> {
                [$( (stringify!($field), &mut self.$field) ),*].into_iter()
            }
        }
    };
}

pub(crate) use param_group;

/// Uniform `(-a, a)` initialization with `a = 1/sqrt(fan_in)`.
pub(crate) fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}
