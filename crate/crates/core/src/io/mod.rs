//! File formats: the native volume container, a NIfTI-1 ingestion reader, and state files.

pub mod container;
pub mod nifti;
pub mod state;

use std::path::Path;

pub use container::{decode, encode, Dtype, Header, Kind, Volume};
pub use nifti::{decode_nifti, read_nifti};
pub use state::{export_state, import_state};

use crate::error::Result;

/// Write a volume as a float32 container.
pub fn write_volume(path: &Path, volume: &Volume, modality: Option<&str>) -> Result<()> {
    container::write_container(path, volume, Dtype::Float32, modality)
}

/// Read a native container, or a `.nii` file (as an untagged image).
pub fn read_volume(path: &Path) -> Result<(Volume, Header)> {
    let is_nifti = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("nii"));
    if !is_nifti {
        return container::read_container(path);
    }
    let image = read_nifti(path)?;
    let header = Header {
        kind: Kind::Image,
        dims: crate::grid::Field::grid(&image).dims().to_vec(),
        spacing: crate::grid::Field::grid(&image).spacing().to_vec(),
        channels: 1,
        dtype: Dtype::Float64,
        modality: None,
        classes: None,
    };
    Ok((Volume::Image(image), header))
}
