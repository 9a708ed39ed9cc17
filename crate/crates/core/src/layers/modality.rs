/// Number of strict interior local maxima of `f` sampled on `grid` uniform
/// points over `[lo, hi]`. Returns 0 when `grid < 3`.
pub fn local_maxima_count<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, grid: usize) -> usize {
    if grid < 3 {
        return 0;
    }
    let step = (hi - lo) / (grid - 1) as f64;
    let v: Vec<f64> = (0..grid).map(|i| f(lo + step * i as f64)).collect();
    v.windows(3).filter(|w| w[1] > w[0] && w[1] > w[2]).count()
}
