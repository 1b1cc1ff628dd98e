//! Small scalar optimization helpers.

/// Golden-section minimization of `f` on [a, b].
pub(crate) fn golden_min<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> Result<(f64, f64), E> {
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d)?;
        }
    }
    let x = 0.5 * (a + b);
    Ok((x, f(x)?))
}

/// Grid scan of `f` over [lo, hi] with `n` intervals followed by golden-section
/// refinement around the best grid point.
pub(crate) fn scan_min<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    lo: f64,
    hi: f64,
    n: usize,
    tol: f64,
) -> Result<(f64, f64), E> {
    let step = (hi - lo) / n as f64;
    let mut best = (lo, f(lo)?);
    for k in 1..=n {
        let x = lo + k as f64 * step;
        let v = f(x)?;
        if v < best.1 {
            best = (x, v);
        }
    }
    let refined = golden_min(&mut f, best.0 - step, best.0 + step, tol)?;
    Ok(if refined.1 <= best.1 { refined } else { best })
}

/// Vertex offset (in units of the grid step, within [−0.5, 0.5]) of the
/// parabola through three equally spaced samples around a local extremum.
pub(crate) fn parabolic_offset(left: f64, mid: f64, right: f64) -> f64 {
    let denom = left - 2.0 * mid + right;
    if denom == 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}
