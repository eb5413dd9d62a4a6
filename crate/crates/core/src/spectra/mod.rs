//! Spectral index construction.
//!
//! A paint material's continuous reflectance spectrum is weighted by the
//! solar spectrum (elementwise, after peak-normalizing the solar curve) to
//! give its apparent reflectance as seen from orbit, then averaged over each
//! of the 13 sensor bands. Stacking the per-material band vectors as columns
//! yields the spectral index `C`, the printable-material basis every
//! adversarial cube pixel is mixed from.
//!
//! The shipped band table holds standard Sentinel-2A band ranges (the
//! 13-band indexing runs B1..B8, B8A, B9..B12) and the shipped solar curve
//! is a coarse AM1.5-shaped fixture; both are plain CSV and user-replaceable.

use std::path::Path;

use crate::grad::Tensor;
use crate::{Error, Result};

mod parse;

pub use parse::{
    load_band_table, load_material_library, load_solar, parse_band_table,
    parse_material_library, parse_solar,
};

/// Number of sensor bands everywhere in this crate.
pub const NUM_BANDS: usize = 13;

/// Embedded default band table (standard Sentinel-2A ranges).
pub const DEFAULT_BANDS_CSV: &str = include_str!("../../data/bands_s2a.csv");
/// Embedded default solar spectrum (coarse AM1.5-shaped, peak-normalized on use).
pub const DEFAULT_SOLAR_CSV: &str = include_str!("../../data/solar_am15.csv");
/// Embedded 80-material synthetic paint library.
pub const DEFAULT_MATERIALS_CSV: &str = include_str!("../../data/materials_80.csv");

/// A sampled spectrum on a strictly increasing wavelength grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    wavelengths_nm: Vec<f64>,
    values: Vec<f64>,
}

impl Spectrum {
    fn validated(wavelengths_nm: Vec<f64>, values: Vec<f64>, max_value: f64) -> Result<Self> {
        if wavelengths_nm.len() != values.len() {
            return Err(Error::invalid(format!(
                "spectrum has {} wavelengths but {} values",
                wavelengths_nm.len(),
                values.len()
            )));
        }
        if wavelengths_nm.len() < 2 {
            return Err(Error::invalid("spectrum needs at least 2 samples".to_string()));
        }
        if wavelengths_nm.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(
                "spectrum wavelengths must be strictly increasing".to_string(),
            ));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > max_value)
        {
            return Err(Error::invalid(format!(
                "spectrum value {v} outside [0, {max_value}]"
            )));
        }
        Ok(Spectrum {
            wavelengths_nm,
            values,
        })
    }

    /// A reflectance spectrum; values must lie in [0, 1].
    pub fn reflectance(wavelengths_nm: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::validated(wavelengths_nm, values, 1.0)
    }

    /// An irradiance spectrum; values must be finite and non-negative.
    pub fn irradiance(wavelengths_nm: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::validated(wavelengths_nm, values, f64::INFINITY)
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min_nm(&self) -> f64 {
        self.wavelengths_nm[0]
    }

    pub fn max_nm(&self) -> f64 {
        *self.wavelengths_nm.last().unwrap()
    }

    /// Linear interpolation; `None` outside the support.
    pub fn value_at(&self, nm: f64) -> Option<f64> {
        if nm < self.min_nm() || nm > self.max_nm() {
            return None;
        }
        let idx = match self
            .wavelengths_nm
            .binary_search_by(|w| w.partial_cmp(&nm).unwrap())
        {
            Ok(i) => return Some(self.values[i]),
            Err(i) => i,
        };
        let (w0, w1) = (self.wavelengths_nm[idx - 1], self.wavelengths_nm[idx]);
        let (v0, v1) = (self.values[idx - 1], self.values[idx]);
        Some(v0 + (v1 - v0) * (nm - w0) / (w1 - w0))
    }

    fn peak(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// One sensor band: 1-based index and wavelength range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub index: u8,
    pub min_nm: f64,
    pub max_nm: f64,
}

/// The 13 sensor bands, sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct BandTable {
    bands: Vec<Band>,
}

impl BandTable {
    pub fn new(mut bands: Vec<Band>) -> Result<Self> {
        if bands.len() != NUM_BANDS {
            return Err(Error::invalid(format!(
                "band table needs exactly {NUM_BANDS} bands, got {}",
                bands.len()
            )));
        }
        bands.sort_by_key(|b| b.index);
        for (i, b) in bands.iter().enumerate() {
            if b.index as usize != i + 1 {
                return Err(Error::invalid(format!(
                    "band indices must be unique and cover 1..{NUM_BANDS}; problem near band {}",
                    b.index
                )));
            }
            if !(b.min_nm < b.max_nm) {
                return Err(Error::invalid(format!(
                    "band {} has min_nm {} >= max_nm {}",
                    b.index, b.min_nm, b.max_nm
                )));
            }
        }
        Ok(BandTable { bands })
    }

    /// The embedded Sentinel-2A table.
    pub fn sentinel2a() -> Self {
        parse_band_table(DEFAULT_BANDS_CSV).expect("embedded band table is valid")
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn get(&self, index: u8) -> Option<&Band> {
        self.bands.get(index as usize - 1)
    }
}

/// A named material reflectance spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub name: String,
    pub spectrum: Spectrum,
}

/// Band-integrated apparent reflectances of Q materials: a 13×Q matrix whose
/// column q describes material q across the sensor bands.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralIndex {
    names: Vec<String>,
    /// Row-major [NUM_BANDS][Q].
    values: Vec<f64>,
}

impl SpectralIndex {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid(
                "spectral index needs at least one material".to_string(),
            ));
        }
        if values.len() != names.len() * NUM_BANDS {
            return Err(Error::invalid(format!(
                "spectral index expects {} values for {} materials, got {}",
                names.len() * NUM_BANDS,
                names.len(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "spectral index entry {v} outside [0,1]"
            )));
        }
        Ok(SpectralIndex { names, values })
    }

    pub fn material_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Entry for 0-based band row and material column.
    pub fn entry(&self, band: usize, material: usize) -> f64 {
        self.values[band * self.material_count() + material]
    }

    pub fn column(&self, material: usize) -> [f64; NUM_BANDS] {
        let mut out = [0.0; NUM_BANDS];
        for (b, o) in out.iter_mut().enumerate() {
            *o = self.entry(b, material);
        }
        out
    }

    /// The matrix as a `[13, Q]` engine tensor (columns = materials).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(vec![NUM_BANDS, self.material_count()], |i| {
            self.values[i] as f32
        })
    }

    /// CSV round trip: header `band,<name...>`, 13 numbered rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("band");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for b in 0..NUM_BANDS {
            out.push_str(&(b + 1).to_string());
            for q in 0..self.material_count() {
                out.push(',');
                // Display picks the shortest representation that parses back
                // to the same f64, keeping the round trip exact.
                out.push_str(&format!("{}", self.entry(b, q)));
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty index file".to_string(),
        })?;
        let mut cols = header.split(',');
        if cols.next() != Some("band") {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header starting with 'band'".to_string(),
            });
        }
        let names: Vec<String> = cols.map(str::to_string).collect();
        if names.is_empty() {
            return Err(Error::Parse {
                line: 1,
                msg: "no materials".to_string(),
            });
        }
        let q = names.len();
        let mut values = vec![0.0f64; NUM_BANDS * q];
        let mut rows = 0usize;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != q + 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} fields, got {}", q + 1, fields.len()),
                });
            }
            let band: usize = fields[0].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad band index '{}'", fields[0]),
            })?;
            if band < 1 || band > NUM_BANDS {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("band index {band} outside 1..{NUM_BANDS}"),
                });
            }
            for (j, f) in fields[1..].iter().enumerate() {
                values[(band - 1) * q + j] = f.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad value '{f}'"),
                })?;
            }
            rows += 1;
        }
        if rows != NUM_BANDS {
            return Err(Error::invalid(format!(
                "index file has {rows} band rows, expected {NUM_BANDS}"
            )));
        }
        SpectralIndex::new(names, values)
    }
}

/// Solar-weight a reflectance spectrum: peak-normalize the solar curve,
/// interpolate it onto the reflectance grid, multiply elementwise, and clip
/// to [0, 1]. The output grid is the part of the reflectance grid inside the
/// solar support.
pub fn apply_solar(reflectance: &Spectrum, solar: &Spectrum) -> Result<Spectrum> {
    let lo = reflectance.min_nm().max(solar.min_nm());
    let hi = reflectance.max_nm().min(solar.max_nm());
    if !(lo < hi) {
        return Err(Error::invalid(format!(
            "reflectance [{}, {}] and solar [{}, {}] ranges are disjoint",
            reflectance.min_nm(),
            reflectance.max_nm(),
            solar.min_nm(),
            solar.max_nm()
        )));
    }
    let peak = solar.peak();
    let mut w = Vec::new();
    let mut v = Vec::new();
    for (i, &nm) in reflectance.wavelengths().iter().enumerate() {
        if nm < lo || nm > hi {
            continue;
        }
        let s = if peak == 0.0 {
            0.0
        } else {
            solar.value_at(nm).unwrap_or(0.0) / peak
        };
        w.push(nm);
        v.push((reflectance.values()[i] * s).clamp(0.0, 1.0));
    }
    Spectrum::reflectance(w, v)
}

/// Mean of the spectrum over each band interval: trapezoidal integral over
/// `[min_nm, max_nm]` divided by the bandwidth, with linear interpolation at
/// the band edges. Exact for piecewise-linear spectra.
pub fn integrate_bands(spectrum: &Spectrum, bands: &BandTable) -> Result<[f64; NUM_BANDS]> {
    let mut out = [0.0f64; NUM_BANDS];
    for band in bands.bands() {
        if band.min_nm < spectrum.min_nm() || band.max_nm > spectrum.max_nm() {
            return Err(Error::invalid(format!(
                "band {} [{}, {}] outside spectrum support [{}, {}]",
                band.index,
                band.min_nm,
                band.max_nm,
                spectrum.min_nm(),
                spectrum.max_nm()
            )));
        }
        // Knots: band edges plus every interior sample.
        let mut knots = vec![band.min_nm];
        for &w in spectrum.wavelengths() {
            if w > band.min_nm && w < band.max_nm {
                knots.push(w);
            }
        }
        knots.push(band.max_nm);
        let mut integral = 0.0f64;
        for pair in knots.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let fa = spectrum.value_at(a).unwrap();
            let fb = spectrum.value_at(b).unwrap();
            integral += 0.5 * (fa + fb) * (b - a);
        }
        out[band.index as usize - 1] = integral / (band.max_nm - band.min_nm);
    }
    Ok(out)
}

/// Column q = band-integrated solar-weighted reflectance of material q.
pub fn build_spectral_index(
    library: &[Material],
    solar: &Spectrum,
    bands: &BandTable,
) -> Result<SpectralIndex> {
    if library.is_empty() {
        return Err(Error::invalid("no materials".to_string()));
    }
    let q = library.len();
    let mut values = vec![0.0f64; NUM_BANDS * q];
    for (qi, mat) in library.iter().enumerate() {
        let apparent = apply_solar(&mat.spectrum, solar)?;
        let col = integrate_bands(&apparent, bands)?;
        for (b, &v) in col.iter().enumerate() {
            values[b * q + qi] = v;
        }
    }
    SpectralIndex::new(library.iter().map(|m| m.name.clone()).collect(), values)
}

/// The embedded default solar curve.
pub fn solar_reference() -> Spectrum {
    parse_solar(DEFAULT_SOLAR_CSV).expect("embedded solar spectrum is valid")
}

/// The embedded 80-material synthetic library.
pub fn embedded_material_library() -> Vec<Material> {
    parse_material_library(DEFAULT_MATERIALS_CSV).expect("embedded material library is valid")
}
