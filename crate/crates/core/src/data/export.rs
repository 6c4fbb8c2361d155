use std::path::Path;

use serde::Serialize;

use super::DomainDataset;
use crate::error::{Error, Result};
use crate::Label;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Serialize)]
struct Row<'a> {
    path: String,
    label: Label,
    class: &'a str,
    domain: usize,
}

/// Writes `domain_<id>/<split>/<index>.png` for every record plus one
/// manifest CSV (`path,label,class,domain`, paths relative to `dir`).
pub fn export_sequence(datasets: &[DomainDataset], dir: &Path) -> Result<()> {
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST)).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(dir.join(MANIFEST), io),
        other => Error::Dataset(format!("{other:?}")),
    })?;
    for ds in datasets {
        for (split, records) in [("train", &ds.train), ("test", &ds.test)] {
            let rel = format!("domain_{}/{split}", ds.spec.domain_id);
            let sub = dir.join(&rel);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (i, r) in records.iter().enumerate() {
                let name = format!("{i:05}.png");
                r.image.to_rgb8().save(sub.join(&name))?;
                manifest.serialize(Row {
                    path: format!("{rel}/{name}"),
                    label: r.label,
                    class: &r.class,
                    domain: r.domain_id,
                })?;
            }
        }
    }
    manifest.flush().map_err(|e| Error::io(dir.join(MANIFEST), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_domains, generate_sequence};

    #[test]
    fn manifest_lists_every_image() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_sequence(&default_domains(4, 2, 0), 32).unwrap();
        export_sequence(&ds, dir.path()).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join(MANIFEST)).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 18);
        assert_eq!(&rows[1][1], "fake");
        let img = image::open(dir.path().join(&rows[0][0])).unwrap();
        assert_eq!(img.width(), 32);
    }
}
