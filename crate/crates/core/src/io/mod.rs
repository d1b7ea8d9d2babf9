//! Volume file formats.

pub mod nifti;
pub mod xvol;

use std::path::Path;

use crate::error::Result;
use crate::volume::Volume;

/// Reads a volume, choosing the decoder from the file name: `.nii` and
/// `.nii.gz` are NIfTI-1, anything else is XVOL.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        nifti::read(path)
    } else {
        xvol::read(path)
    }
}
