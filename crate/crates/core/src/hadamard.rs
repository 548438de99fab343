//! Non-power-of-two Hadamard factors.
//!
//! A Walsh-Hadamard kernel of size `N = 2^k · m` is `H_{2^k} ⊗ H_m`. The
//! `m × m` factors are generated at runtime by the Paley constructions rather
//! than stored as tables:
//!
//! * Paley I, prime `q ≡ 3 (mod 4)`, order `q + 1` (12 from q = 11, 20 from q = 19)
//! * Paley II, prime `q ≡ 1 (mod 4)`, order `2(q + 1)` (28 from q = 13)
//!
//! To support another factor size, add its construction to [`unnormalized`]
//! and its order to [`BUNDLED_FACTORS`].

/// Factor orders (besides 1) accepted by the WHT planner.
pub const BUNDLED_FACTORS: [usize; 3] = [12, 20, 28];

/// ±1 Hadamard matrix of order `m`, row-major, or `None` if `m` is not bundled.
pub fn unnormalized(m: usize) -> Option<Vec<i8>> {
    match m {
        1 => Some(vec![1]),
        12 => Some(paley_one(11)),
        20 => Some(paley_one(19)),
        28 => Some(paley_two(13)),
        _ => None,
    }
}

/// Splits `n` as `2^k · m` with `m` either 1 or a bundled factor. Returns
/// `(2^k, m)`.
pub fn factorize(n: usize) -> Option<(usize, usize)> {
    if n == 0 {
        return None;
    }
    if n.is_power_of_two() {
        return Some((n, 1));
    }
    BUNDLED_FACTORS
        .iter()
        .copied()
        .find(|&m| n.is_multiple_of(m) && (n / m).is_power_of_two())
        .map(|m| (n / m, m))
}

/// Legendre symbol χ(a) over the prime field of order `q`.
fn quadratic_character(a: i64, q: i64) -> i8 {
    let a = a.rem_euclid(q);
    if a == 0 {
        return 0;
    }
    let mut is_square = false;
    for x in 1..q {
        if (x * x) % q == a {
            is_square = true;
            break;
        }
    }
    if is_square {
        1
    } else {
        -1
    }
}

fn jacobsthal(q: usize) -> Vec<i8> {
    let qi = q as i64;
    let mut out = vec![0i8; q * q];
    for i in 0..q {
        for j in 0..q {
            out[i * q + j] = quadratic_character(j as i64 - i as i64, qi);
        }
    }
    out
}

fn paley_one(q: usize) -> Vec<i8> {
    debug_assert_eq!(q % 4, 3);
    let n = q + 1;
    let jac = jacobsthal(q);
    let mut h = vec![0i8; n * n];
    // H = I + S with S = [[0, 1ᵀ], [-1, Q]].
    for j in 1..n {
        h[j] = 1;
        h[j * n] = -1;
    }
    for i in 0..q {
        for j in 0..q {
            h[(i + 1) * n + (j + 1)] = jac[i * q + j];
        }
    }
    for i in 0..n {
        h[i * n + i] += 1;
    }
    h
}

fn paley_two(q: usize) -> Vec<i8> {
    debug_assert_eq!(q % 4, 1);
    let c_order = q + 1;
    let jac = jacobsthal(q);
    // Symmetric conference matrix C = [[0, 1ᵀ], [1, Q]].
    let mut c = vec![0i8; c_order * c_order];
    for j in 1..c_order {
        c[j] = 1;
        c[j * c_order] = 1;
    }
    for i in 0..q {
        for j in 0..q {
            c[(i + 1) * c_order + (j + 1)] = jac[i * q + j];
        }
    }
    // H = C ⊗ [[1, -1], [-1, -1]] + I ⊗ [[1, 1], [1, -1]].
    let n = 2 * c_order;
    let mut h = vec![0i8; n * n];
    for i in 0..c_order {
        for j in 0..c_order {
            let cij = c[i * c_order + j];
            let block: [[i8; 2]; 2] = if i == j {
                [[1, 1], [1, -1]]
            } else {
                [[cij, -cij], [-cij, -cij]]
            };
            for (a, row) in block.iter().enumerate() {
                for (b, &v) in row.iter().enumerate() {
                    h[(2 * i + a) * n + (2 * j + b)] = v;
                }
            }
        }
    }
    h
}
