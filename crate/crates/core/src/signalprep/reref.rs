use super::Recording;
use crate::error::{ensure, Result};

/// Common average reference: subtracts the across-channel mean at every
/// time point. `data` is `[channels × samples]`.
pub fn car_matrix(data: &[f64], channels: usize) -> Result<Vec<f64>> {
    ensure!(channels >= 2, InvalidArgument, "common average reference needs at least 2 channels, got {}", channels);
    ensure!(data.len() % channels == 0, Shape, "{} values do not split over {} channels", data.len(), channels);
    let samples = data.len() / channels;
    let mut mean = vec![0.0; samples];
    for row in data.chunks(samples.max(1)) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= channels as f64);
    let mut out = data.to_vec();
    for row in out.chunks_mut(samples.max(1)) {
        row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    Ok(out)
}

pub fn car(rec: &Recording) -> Result<Recording> {
    let data = car_matrix(rec.data(), rec.n_channels())?;
    rec.with_data(data, rec.fs)
}
