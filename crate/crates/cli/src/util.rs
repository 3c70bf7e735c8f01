//! Shared plumbing: seeds, image IO, CSV artifacts.

use crate::CliError;
use std::io::Write;
use std::path::{Path, PathBuf};
use uqc_core::ImageF;

/// Seed precedence: flag > UQC_SEED env > 0.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("UQC_SEED").ok().and_then(|s| s.parse().ok())).unwrap_or(0)
}

/// Derives an independent substream for a tagged purpose.
pub fn substream(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn load_image(path: &Path) -> anyhow::Result<ImageF> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ImageF::from_rgb8(w, h, img.as_raw()))
}

pub fn save_png(path: &Path, img: &ImageF) -> anyhow::Result<()> {
    let buf = img.to_rgb8();
    image::save_buffer(
        path,
        &buf,
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
    )?;
    Ok(())
}

/// Loads every decodable image in a directory, sorted by file name so runs
/// are reproducible. Unreadable files are skipped with a warning.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, ImageF)>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(e.into()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
            )
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match load_image(&p) {
            Ok(img) => {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                out.push((name, img));
            }
            Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}

/// Quotes a CSV field per RFC 4180 when needed.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes a CSV artifact: a `# config:` echo line, a header, then rows.
/// Output is byte-stable for identical inputs.
pub fn write_csv(
    path: &Path,
    config_json: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# config: {config_json}")?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|c| csv_field(c)).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Fixed-precision float formatting so CSV bytes do not wobble.
pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

pub fn fmt_sci(v: f64) -> String {
    format!("{v:.6e}")
}
