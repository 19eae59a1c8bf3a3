//! NIfTI volume I/O. Arrays on the Rust side are indexed `(z, y, x)`; files
//! store `x` fastest, so axes are reversed at the boundary.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{DataElement, IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::datamodel::{remap_labels, DatasetDescriptor, VolumeSample};
use crate::error::{Error, Result};

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a 3D volume, returning it as `(z, y, x)` together with its header.
pub fn read_volume<T>(path: &Path) -> Result<(Array3<T>, NiftiHeader)>
where
    T: DataElement + Clone,
{
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let data = obj
        .into_volume()
        .into_ndarray::<T>()
        .map_err(|e| nifti_err(path, e))?;
    let data = match data.ndim() {
        3 => data,
        4 if data.shape()[3] == 1 => data.index_axis_move(ndarray::Axis(3), 0),
        n => return Err(nifti_err(path, format!("expected a 3D volume, found {n} dimensions"))),
    };
    let xyz = data.into_dimensionality::<Ix3>().map_err(|e| nifti_err(path, e))?;
    let zyx = xyz.reversed_axes().as_standard_layout().into_owned();
    Ok((zyx, header))
}

/// Voxel spacing in `(z, y, x)` order.
pub fn spacing_zyx(header: &NiftiHeader) -> [f64; 3] {
    [
        header.pixdim[3] as f64,
        header.pixdim[2] as f64,
        header.pixdim[1] as f64,
    ]
}

/// A minimal header for writing `(z, y, x)` volumes with the given spacing.
pub fn header_with_spacing(spacing: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim[1] = spacing[2] as f32;
    h.pixdim[2] = spacing[1] as f32;
    h.pixdim[3] = spacing[0] as f32;
    h.xyzt_units = 2;
    h
}

/// Writes a `(z, y, x)` volume, copying orientation and spacing from
/// `reference`.
pub fn write_volume<T>(path: &Path, data: &Array3<T>, reference: &NiftiHeader) -> Result<()>
where
    T: DataElement + bytemuck::Pod,
{
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut header = reference.clone();
    header.scl_slope = 1.0;
    header.scl_inter = 0.0;
    let xyz = data.t();
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&xyz)
        .map_err(|e| nifti_err(path, e))
}

/// Loads volume `index` of `descriptor`, remapping labels into the global
/// class space.
pub fn load_sample(descriptor: &Arc<DatasetDescriptor>, index: usize) -> Result<VolumeSample> {
    let vref = descriptor.volume_refs().get(index).ok_or_else(|| {
        Error::Contract(format!(
            "dataset `{}` has no volume {index}",
            descriptor.name()
        ))
    })?;
    let (image, header) = read_volume::<f32>(&vref.image)?;
    let labels = match &vref.label {
        Some(p) => {
            let (raw, _) = read_volume::<u8>(p)?;
            Some(remap_labels(&raw, descriptor.remap())?)
        }
        None => None,
    };
    Ok(VolumeSample {
        id: vref.id.clone(),
        image,
        spacing: spacing_zyx(&header),
        labels,
        source: descriptor.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_axes_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii.gz");
        let data = Array3::from_shape_fn((2, 3, 4), |(z, y, x)| (100 * z + 10 * y + x) as f32);
        write_volume(&path, &data, &header_with_spacing([2.5, 0.7, 0.8])).unwrap();
        let (back, header) = read_volume::<f32>(&path).unwrap();
        assert_eq!(back, data);
        let sp = spacing_zyx(&header);
        assert!((sp[0] - 2.5).abs() < 1e-6 && (sp[1] - 0.7).abs() < 1e-6 && (sp[2] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_volume::<f32>(Path::new("/nonexistent/volume.nii")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
