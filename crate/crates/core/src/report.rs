//! Matrix dumps for offline inspection: CSV and ASCII PGM.

use thoughtroute_autodiff::Tensor;

/// One line per row, comma-separated, full precision.
pub fn matrix_csv(m: &Tensor) -> String {
    let cols = m.shape()[m.rank() - 1];
    let mut out = String::new();
    for row in m.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// `P2` grayscale image, one pixel row per matrix row, each scaled so the
/// row maximum maps to 255.
pub fn matrix_pgm(m: &Tensor) -> String {
    let cols = m.shape()[m.rank() - 1];
    let rows = m.numel() / cols;
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for row in m.data().chunks(cols) {
        let mx = row.iter().copied().fold(0.0f64, f64::max);
        let px: Vec<String> = row
            .iter()
            .map(|&v| {
                let p = if mx > 0.0 { (255.0 * v / mx).round() } else { 0.0 };
                format!("{}", p.clamp(0.0, 255.0) as u8)
            })
            .collect();
        out.push_str(&px.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_rows_light_one_pixel() {
        let m = Tensor::new([2, 3], vec![0.0, 1.0, 0.0, 0.2, 0.0, 0.0]).unwrap();
        assert_eq!(matrix_pgm(&m), "P2\n3 2\n255\n0 255 0\n255 0 0\n");
        assert_eq!(matrix_csv(&m), "0,1,0\n0.2,0,0\n");
    }
}
