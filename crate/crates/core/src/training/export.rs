use std::path::Path;

use crate::data::Dataset;
use crate::encoder::{embed, EncoderParams};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::textio::{push_f64s, write_file, LineReader};

/// Writes one line per sample, `label v_0 … v_{C-1}`, after a header line
/// `# label v0 v1 …`. Values round-trip exactly.
pub fn export_embeddings(encoder: &EncoderParams, dataset: &Dataset, path: &Path) -> Result<()> {
    let v = embed(encoder, dataset.features())?;
    write_embeddings(path, &v, dataset.labels())
}

pub fn write_embeddings(path: &Path, embeddings: &Tensor, labels: &[usize]) -> Result<()> {
    let mut out = String::from("# label");
    for j in 0..embeddings.cols() {
        out.push_str(&format!(" v{j}"));
    }
    out.push('\n');
    for (row, label) in embeddings.row_iter().zip(labels) {
        out.push_str(&label.to_string());
        out.push(' ');
        push_f64s(&mut out, row);
    }
    write_file(path, &out)
}

pub fn load_embeddings(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let mut r = LineReader::open(path)?;
    let header = r.next_line()?.to_string();
    let cols = header
        .strip_prefix("# label")
        .ok_or_else(|| r.error("missing `# label ...` header"))?
        .split_whitespace()
        .count();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    while !r.at_end() {
        let line = r.next_line()?.to_string();
        let (label, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        labels.push(
            label
                .parse()
                .map_err(|_| r.error(format!("bad label `{label}`")))?,
        );
        data.extend(r.parse_f64s(rest, cols)?);
    }
    Ok((Tensor::matrix(labels.len(), cols, data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_gaussian_clusters, ClusterSpec};
    use crate::encoder::init_encoder;
    use crate::numerics::SeededRng;

    #[test]
    fn export_round_trip() {
        let spec = ClusterSpec {
            class_count: 3,
            per_class: 7,
            dim: 4,
            center_spread: 2.0,
            within_sigma: 0.5,
        };
        let d = generate_gaussian_clusters(&spec, &mut SeededRng::new(0)).unwrap();
        let enc = init_encoder(&[4, 8, 5], &mut SeededRng::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        export_embeddings(&enc, &d, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), d.len() + 1);
        let (v, labels) = load_embeddings(&path).unwrap();
        assert_eq!(labels, d.labels());
        assert!(v.bit_eq(&embed(&enc, d.features()).unwrap()));
    }
}
