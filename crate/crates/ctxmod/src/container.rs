//! Dataset directories: `meta.txt` (key=value) plus little-endian f32
//! `images.f32` and `responses.f32`, train split first.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ctxmod_core::dataset::Dataset;
use ctxmod_core::synth::SyntheticNeuron;

use crate::DataError;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.txt";
pub const IMAGES_FILE: &str = "images.f32";
pub const RESPONSES_FILE: &str = "responses.f32";

pub fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn f32_from_bytes(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn neuron_line(n: &SyntheticNeuron) -> String {
    [
        n.theta,
        n.freq,
        n.phase,
        n.sigma,
        n.center_row,
        n.center_col,
        n.gain,
        n.surround_inner,
        n.surround_outer,
        n.semi_saturation,
        n.noise_sd,
        n.scale,
        n.offset,
        n.energy_ref,
    ]
    .iter()
    .map(|v| v.to_string())
    .collect::<Vec<_>>()
    .join(" ")
}

fn parse_neuron(s: &str) -> Option<SyntheticNeuron> {
    let v: Vec<f64> = s.split_whitespace().map(str::parse).collect::<Result<_, _>>().ok()?;
    if v.len() != 14 {
        return None;
    }
    Some(SyntheticNeuron {
        theta: v[0],
        freq: v[1],
        phase: v[2],
        sigma: v[3],
        center_row: v[4],
        center_col: v[5],
        gain: v[6],
        surround_inner: v[7],
        surround_outer: v[8],
        semi_saturation: v[9],
        noise_sd: v[10],
        scale: v[11],
        offset: v[12],
        energy_ref: v[13],
    })
}

/// Writes `ds` under `dir` (created if needed). `extra` lands in the meta
/// file verbatim, after the fixed keys.
pub fn save_dataset(ds: &Dataset, dir: &Path, extra: &[(String, String)]) -> Result<(), DataError> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut images = f32_bytes(&ds.train_images);
    images.extend(f32_bytes(&ds.val_images));
    let mut responses = f32_bytes(&ds.train_responses);
    responses.extend(f32_bytes(&ds.val_responses));
    let mut meta = vec![
        format!("format_version={FORMAT_VERSION}"),
        format!("side={}", ds.side),
        format!("n_train={}", ds.len(ctxmod_core::dataset::Split::Train)),
        format!("n_val={}", ds.len(ctxmod_core::dataset::Split::Val)),
        format!("n_neurons={}", ds.n_neurons),
        format!("seed={}", ds.seed),
        format!("images_crc32={:08x}", crc32fast::hash(&images)),
        format!("responses_crc32={:08x}", crc32fast::hash(&responses)),
    ];
    for (i, n) in ds.neurons.iter().enumerate() {
        meta.push(format!("neuron.{i}={}", neuron_line(n)));
    }
    for (k, v) in extra {
        meta.push(format!("{k}={v}"));
    }
    let write = |name: &str, bytes: &[u8]| fs::write(dir.join(name), bytes).map_err(|e| DataError::io(&dir.join(name), e));
    write(IMAGES_FILE, &images)?;
    write(RESPONSES_FILE, &responses)?;
    write(META_FILE, (meta.join("\n") + "\n").as_bytes())?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<BTreeMap<String, String>, DataError> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::Format(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T, DataError> {
    meta.get(key)
        .ok_or_else(|| DataError::Format(format!("meta is missing `{key}`")))?
        .parse()
        .map_err(|_| DataError::Format(format!("meta `{key}` is malformed")))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta = read_meta(dir)?;
    let version: u32 = get(&meta, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let side: usize = get(&meta, "side")?;
    let n_train: usize = get(&meta, "n_train")?;
    let n_val: usize = get(&meta, "n_val")?;
    let n_neurons: usize = get(&meta, "n_neurons")?;
    let read = |name: &str, key: &str| -> Result<Vec<u8>, DataError> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| DataError::io(&path, e))?;
        let want = u32::from_str_radix(meta.get(key).map(String::as_str).unwrap_or(""), 16)
            .map_err(|_| DataError::Format(format!("meta `{key}` is malformed")))?;
        let got = crc32fast::hash(&bytes);
        if got != want {
            return Err(DataError::Checksum {
                file: path,
                expected: want,
                found: got,
            });
        }
        Ok(bytes)
    };
    let images = f32_from_bytes(&read(IMAGES_FILE, "images_crc32")?);
    let responses = f32_from_bytes(&read(RESPONSES_FILE, "responses_crc32")?);
    let px = side * side;
    if images.len() != (n_train + n_val) * px || responses.len() != (n_train + n_val) * n_neurons {
        return Err(DataError::Format(format!(
            "{} image values and {} responses do not match {n_train}+{n_val} images of {side}×{side} × {n_neurons} neurons",
            images.len(),
            responses.len()
        )));
    }
    let mut neurons = Vec::new();
    for i in 0.. {
        match meta.get(&format!("neuron.{i}")) {
            Some(s) => neurons.push(parse_neuron(s).ok_or_else(|| DataError::Format(format!("neuron.{i} is malformed")))?),
            None => break,
        }
    }
    let ds = Dataset {
        side,
        n_neurons,
        train_images: images[..n_train * px].to_vec(),
        val_images: images[n_train * px..].to_vec(),
        train_responses: responses[..n_train * n_neurons].to_vec(),
        val_responses: responses[n_train * n_neurons..].to_vec(),
        seed: get(&meta, "seed")?,
        neurons,
    };
    ds.validate()?;
    Ok(ds)
}

/// Reads every binary (P5) PGM in `dir`, sorted by file name, scaled to
/// [0, 1]. All images must be `side`×`side`.
pub fn load_pgm_dir(dir: &Path, side: usize) -> Result<Vec<Vec<f32>>, DataError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_pgm(p, side)).collect()
}

fn read_pgm(path: &Path, side: usize) -> Result<Vec<f32>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |why: &str| DataError::Format(format!("{}: {why}", path.display()));
    // Header: magic, width, height, maxval, separated by whitespace and
    // optional comments, then exactly one whitespace byte.
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    if fields[0] != "P5" {
        return Err(bad("only binary (P5) PGM is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w != side || h != side {
        return Err(bad(&format!("{w}×{h}, expected {side}×{side}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    let wide = maxval > 255;
    let need = w * h * if wide { 2 } else { 1 };
    let data = bytes.get(i..i + need).ok_or_else(|| bad("truncated pixel data"))?;
    let m = maxval as f32;
    Ok(if wide {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / m).collect()
    } else {
        data.iter().map(|&b| b as f32 / m).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 51, 102]);
        fs::write(dir.path().join("a.pgm"), &bytes).unwrap();
        let imgs = load_pgm_dir(dir.path(), 2).unwrap();
        assert_eq!(imgs, vec![vec![0.0, 1.0, 0.2, 0.4]]);
        assert!(load_pgm_dir(dir.path(), 3).is_err());
    }
}
