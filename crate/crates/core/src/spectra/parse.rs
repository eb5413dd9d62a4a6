//! CSV loaders for the three spectral input formats.
//!
//! All errors carry 1-based line numbers. Material libraries put materials
//! in columns (`wavelength_nm,<name1>,<name2>,...`), one sample per row.

use std::path::Path;

use crate::spectra::{Band, BandTable, Material, Spectrum, NUM_BANDS};
use crate::{Error, Result};

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what} '{field}'"),
    })
}

struct Rows<'a> {
    header: Vec<&'a str>,
    /// (1-based line number, fields)
    records: Vec<(usize, Vec<&'a str>)>,
}

fn split_rows(text: &str) -> Result<Rows<'_>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "empty file".to_string(),
    })?;
    let header: Vec<&str> = header_line.split(',').map(str::trim).collect();
    let records = lines
        .map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect()))
        .collect();
    Ok(Rows { header, records })
}

/// Parse a material library: header `wavelength_nm,<names...>`, one
/// wavelength sample per row, reflectances in [0, 1].
pub fn parse_material_library(text: &str) -> Result<Vec<Material>> {
    if text.trim().is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no materials".to_string(),
        });
    }
    let rows = split_rows(text)?;
    if rows.header.first() != Some(&"wavelength_nm") {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header starting with 'wavelength_nm'".to_string(),
        });
    }
    let names: Vec<&str> = rows.header[1..].to_vec();
    if names.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no materials".to_string(),
        });
    }
    if rows.records.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no samples".to_string(),
        });
    }
    let mut wavelengths = Vec::with_capacity(rows.records.len());
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(rows.records.len()); names.len()];
    let mut prev = f64::NEG_INFINITY;
    for (line, fields) in &rows.records {
        if fields.len() != names.len() + 1 {
            return Err(Error::Parse {
                line: *line,
                msg: format!("expected {} fields, got {}", names.len() + 1, fields.len()),
            });
        }
        let w = parse_f64(fields[0], *line, "wavelength")?;
        if !(w > prev) {
            return Err(Error::Parse {
                line: *line,
                msg: format!("wavelengths must be strictly increasing ({w} after {prev})"),
            });
        }
        prev = w;
        wavelengths.push(w);
        for (col, field) in columns.iter_mut().zip(&fields[1..]) {
            let v = parse_f64(field, *line, "reflectance")?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("reflectance {v} outside [0,1]"),
                });
            }
            col.push(v);
        }
    }
    names
        .iter()
        .zip(columns)
        .map(|(name, values)| {
            Ok(Material {
                name: name.to_string(),
                spectrum: Spectrum::reflectance(wavelengths.clone(), values)?,
            })
        })
        .collect()
}

pub fn load_material_library(path: &Path) -> Result<Vec<Material>> {
    parse_material_library(&std::fs::read_to_string(path)?)
}

/// Parse a band table: header `band,min_nm,max_nm`, exactly 13 rows.
pub fn parse_band_table(text: &str) -> Result<BandTable> {
    let rows = split_rows(text)?;
    if rows.header != ["band", "min_nm", "max_nm"] {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header 'band,min_nm,max_nm'".to_string(),
        });
    }
    let mut bands = Vec::with_capacity(NUM_BANDS);
    for (line, fields) in &rows.records {
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: *line,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let index: u8 = fields[0].trim().parse().map_err(|_| Error::Parse {
            line: *line,
            msg: format!("bad band index '{}'", fields[0]),
        })?;
        bands.push(Band {
            index,
            min_nm: parse_f64(fields[1], *line, "min_nm")?,
            max_nm: parse_f64(fields[2], *line, "max_nm")?,
        });
    }
    BandTable::new(bands)
}

pub fn load_band_table(path: &Path) -> Result<BandTable> {
    parse_band_table(&std::fs::read_to_string(path)?)
}

/// Parse a solar spectrum: header `wavelength_nm,irradiance`, values >= 0.
pub fn parse_solar(text: &str) -> Result<Spectrum> {
    let rows = split_rows(text)?;
    if rows.header != ["wavelength_nm", "irradiance"] {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header 'wavelength_nm,irradiance'".to_string(),
        });
    }
    let mut w = Vec::with_capacity(rows.records.len());
    let mut v = Vec::with_capacity(rows.records.len());
    let mut prev = f64::NEG_INFINITY;
    for (line, fields) in &rows.records {
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: *line,
                msg: format!("expected 2 fields, got {}", fields.len()),
            });
        }
        let nm = parse_f64(fields[0], *line, "wavelength")?;
        if !(nm > prev) {
            return Err(Error::Parse {
                line: *line,
                msg: format!("wavelengths must be strictly increasing ({nm} after {prev})"),
            });
        }
        prev = nm;
        let irr = parse_f64(fields[1], *line, "irradiance")?;
        if !irr.is_finite() || irr < 0.0 {
            return Err(Error::Parse {
                line: *line,
                msg: format!("irradiance {irr} must be >= 0"),
            });
        }
        w.push(nm);
        v.push(irr);
    }
    Spectrum::irradiance(w, v)
}

pub fn load_solar(path: &Path) -> Result<Spectrum> {
    parse_solar(&std::fs::read_to_string(path)?)
}
