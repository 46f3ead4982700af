use crate::datapipe::ImageRecord;
use crate::error::{Error, Result};

/// Value reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub(crate) fn check_dims(op: &'static str, x: &ImageRecord, y: &ImageRecord) -> Result<()> {
    if !x.same_dims(y) {
        return Err(Error::invalid(
            op,
            format!(
                "`{}` is {}x{}x{}, `{}` is {}x{}x{}",
                x.id, x.channels, x.height, x.width, y.id, y.channels, y.height, y.width
            ),
        ));
    }
    Ok(())
}

pub fn mse(x: &ImageRecord, y: &ImageRecord) -> Result<f64> {
    check_dims("mse", x, y)?;
    let sum: u64 = x
        .pixels
        .iter()
        .zip(&y.pixels)
        .map(|(&a, &b)| {
            let d = a.abs_diff(b) as u64;
            d * d
        })
        .sum();
    Ok(sum as f64 / x.pixels.len() as f64)
}

/// `10 log10(255^2 / MSE)` over all samples, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &ImageRecord, y: &ImageRecord) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / m).log10()).min(PSNR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: u8) -> ImageRecord {
        ImageRecord::new("f", 3, 4, 4, vec![v; 48]).unwrap()
    }

    #[test]
    fn reference_values() {
        assert_eq!(psnr(&flat(7), &flat(7)).unwrap(), PSNR_CAP_DB);
        assert_eq!(psnr(&flat(0), &flat(255)).unwrap(), 0.0);
        let one = psnr(&flat(10), &flat(11)).unwrap();
        assert!((one - 48.130803608679).abs() < 1e-9, "{one}");
    }

    #[test]
    fn dimension_mismatch() {
        let small = ImageRecord::new("s", 3, 2, 2, vec![0; 12]).unwrap();
        assert!(psnr(&flat(0), &small).is_err());
    }
}
