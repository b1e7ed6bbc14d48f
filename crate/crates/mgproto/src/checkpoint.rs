//! Versioned binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    7 bytes   "MGPROTO"
//! version  u32       format version, currently 1
//! C        u32       number of classes
//! M        u32       components per class
//! D        u32       feature dimensionality
//! per class c = 0..C:
//!     priors   M     f64
//!     means    M*D   f64, row-major (component-major)
//! optional sections, each introduced by a 4-byte tag:
//!     "NET0"   feature extractor parameters (see `net`)
//! ```
//!
//! A head-only file is a complete, loadable checkpoint; the net section is
//! appended by training so that evaluation can re-featurize raw data. Every
//! checkpoint has a JSON mirror (same stem, `.json`) for human inspection;
//! the binary file is the source of truth.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::density::{ClassMixture, ModelHead};
use crate::error::{Error, Result};
use crate::net::TinyNet;

/// File magic, first bytes of every checkpoint.
pub const MAGIC: &[u8; 7] = b"MGPROTO";

/// Current format version.
pub const FORMAT_VERSION: u32 = 1;

/// Tag introducing the feature-extractor section.
pub const NET_SECTION_TAG: &[u8; 4] = b"NET0";

/// A loaded checkpoint: always a head, optionally the feature extractor that
/// produced its feature space.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub head: ModelHead,
    pub net: Option<TinyNet>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64_slice(w: &mut impl Write, vals: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| bad(path, format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64_vec(r: &mut impl Read, n: usize, path: &Path, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| bad(path, format!("truncated while reading {what}")))?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

/// Serializes `head` (and `net`, when given) to `path`, plus the JSON mirror
/// next to it.
pub fn save(path: &Path, head: &ModelHead, net: Option<&TinyNet>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u32(&mut buf, FORMAT_VERSION)?;
    write_u32(&mut buf, head.num_classes() as u32)?;
    write_u32(&mut buf, head.num_components() as u32)?;
    write_u32(&mut buf, head.dim() as u32)?;
    for mix in head.classes() {
        write_f64_slice(&mut buf, mix.priors().iter().copied())?;
        write_f64_slice(&mut buf, mix.means().iter().copied())?;
    }
    if let Some(net) = net {
        buf.extend_from_slice(NET_SECTION_TAG);
        write_u32(&mut buf, net.raw_dim() as u32)?;
        write_u32(&mut buf, net.out_dim() as u32)?;
        write_f64_slice(&mut buf, net.params_iter())?;
    }
    std::fs::write(path, &buf)?;
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&mirror(head, net))?,
    )?;
    Ok(())
}

/// Loads a checkpoint, validating magic, version, shapes, finiteness, and
/// the prior simplex per class.
pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let data = std::fs::read(path)?;
    let mut r: &[u8] = &data;

    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| bad(path, "truncated header"))?;
    if &magic != MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported format version {version}")));
    }
    let c = read_u32(&mut r, path, "class count")? as usize;
    let m = read_u32(&mut r, path, "component count")? as usize;
    let d = read_u32(&mut r, path, "feature dim")? as usize;
    if c < 2 || m == 0 || d == 0 {
        return Err(bad(path, format!("implausible shape C={c} M={m} D={d}")));
    }

    let mut classes = Vec::with_capacity(c);
    for class_id in 0..c {
        let priors = read_f64_vec(&mut r, m, path, "priors")?;
        let means = read_f64_vec(&mut r, m * d, path, "means")?;
        let mix = ClassMixture::new(
            class_id,
            Array2::from_shape_vec((m, d), means)
                .map_err(|e| bad(path, format!("means shape: {e}")))?,
            Array1::from_vec(priors),
        )
        .map_err(|e| bad(path, format!("class {class_id}: {e}")))?;
        classes.push(mix);
    }
    let head = ModelHead::new(classes).map_err(|e| bad(path, e.to_string()))?;

    let mut net = None;
    if !r.is_empty() {
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag)
            .map_err(|_| bad(path, "truncated section tag"))?;
        if &tag != NET_SECTION_TAG {
            return Err(bad(path, format!("unknown section tag {tag:?}")));
        }
        let raw_dim = read_u32(&mut r, path, "net raw dim")? as usize;
        let out_dim = read_u32(&mut r, path, "net out dim")? as usize;
        if out_dim != d {
            return Err(bad(
                path,
                format!("net out dim {out_dim} disagrees with head dim {d}"),
            ));
        }
        let count = TinyNet::param_count_for(raw_dim, out_dim);
        let params = read_f64_vec(&mut r, count, path, "net params")?;
        net = Some(
            TinyNet::from_params(raw_dim, out_dim, &params)
                .map_err(|e| bad(path, format!("net section: {e}")))?,
        );
    }
    if !r.is_empty() {
        return Err(bad(path, format!("{} trailing bytes", r.len())));
    }
    Ok(Checkpoint { head, net })
}

/// Loads a checkpoint and insists the net section is present.
pub fn load_with_net(path: &Path) -> Result<(ModelHead, TinyNet)> {
    let ck = load(path)?;
    match ck.net {
        Some(net) => Ok((ck.head, net)),
        None => Err(bad(path, "missing feature-extractor section")),
    }
}

#[derive(Serialize)]
struct MirrorClass {
    class_id: usize,
    priors: Vec<f64>,
    means: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct Mirror {
    format: &'static str,
    format_version: u32,
    num_classes: usize,
    num_components: usize,
    feature_dim: usize,
    covariance_diag: f64,
    has_net: bool,
    net_raw_dim: Option<usize>,
    net_param_count: Option<usize>,
    classes: Vec<MirrorClass>,
}

fn mirror(head: &ModelHead, net: Option<&TinyNet>) -> Mirror {
    Mirror {
        format: "mgproto-checkpoint",
        format_version: FORMAT_VERSION,
        num_classes: head.num_classes(),
        num_components: head.num_components(),
        feature_dim: head.dim(),
        covariance_diag: crate::density::COVARIANCE_DIAG,
        has_net: net.is_some(),
        net_raw_dim: net.map(|n| n.raw_dim()),
        net_param_count: net.map(|n| n.param_count()),
        classes: head
            .classes()
            .iter()
            .map(|mix| MirrorClass {
                class_id: mix.class_id(),
                priors: mix.priors().to_vec(),
                means: mix.means().rows().into_iter().map(|r| r.to_vec()).collect(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_head() -> ModelHead {
        ModelHead::new(vec![
            ClassMixture::new(0, array![[0.25, -1.5], [2.0, 0.0]], array![0.625, 0.375]).unwrap(),
            ClassMixture::new(1, array![[1.0, 1.0], [-1.0, 3.5]], array![0.5, 0.5]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.mgp");
        let head = sample_head();
        save(&path, &head, None).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.head, head);
        assert!(loaded.net.is_none());
        // The JSON mirror exists and round-trips the shape info.
        let mirror: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap())
                .unwrap();
        assert_eq!(mirror["num_classes"], 2);
        assert_eq!(mirror["num_components"], 2);
        assert_eq!(mirror["feature_dim"], 2);
    }

    #[test]
    fn roundtrip_with_net_section() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.mgp");
        let head = sample_head();
        let net = TinyNet::identity(3, 2).unwrap();
        save(&path, &head, Some(&net)).unwrap();
        let (h2, n2) = load_with_net(&path).unwrap();
        assert_eq!(h2, head);
        assert_eq!(n2, net);
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corrupt.mgp");
        std::fs::write(&path, b"NOTMGPROTO_____").unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        assert!(err.is_usage());
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.mgp");
        let full = dir.path().join("full.mgp");
        save(&full, &sample_head(), None).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn missing_file_is_a_usage_error() {
        let err = load(Path::new("/nonexistent/x.mgp")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.mgp");
        let full = dir.path().join("full.mgp");
        save(&full, &sample_head(), None).unwrap();
        let mut bytes = std::fs::read(&full).unwrap();
        bytes[7..11].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
