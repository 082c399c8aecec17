//! Sparse voxel scene container, curve serialization with cyclic shift, and
//! padding-free grouping.
//!
//! Linear voxel order is x-fastest: `lin = x + d*(y + h*z)` for dims `(d, h, w)`
//! with `x in [0, d)`, `y in [0, h)`, `z in [0, w)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sfc::{self, CurveKind};

pub const VSER_MAGIC: &[u8; 4] = b"VSER";
pub const VSER_VERSION: u16 = 1;

/// Dense label volume plus per-voxel feature vectors for the occupied voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: (usize, usize, usize),
    num_classes: u16,
    feature_dim: usize,
    labels: Vec<u8>,
    /// Features of occupied voxels in ascending linear-index order, `feature_dim` each.
    features: Vec<f64>,
    /// Ascending linear indices of occupied voxels (label > 0).
    occupied: Vec<usize>,
}

impl VoxelGrid {
    pub fn new(
        dims: (usize, usize, usize),
        num_classes: u16,
        feature_dim: usize,
        labels: Vec<u8>,
        features: Vec<f64>,
    ) -> Result<Self> {
        let volume = dims.0 * dims.1 * dims.2;
        if labels.len() != volume {
            return Err(Error::Invalid(format!(
                "label volume {} does not match dims {:?}",
                labels.len(),
                dims
            )));
        }
        for &l in &labels {
            if u16::from(l) > num_classes {
                return Err(Error::LabelOutOfRange { label: l, classes: num_classes });
            }
        }
        let occupied: Vec<usize> =
            labels.iter().enumerate().filter(|(_, &l)| l > 0).map(|(i, _)| i).collect();
        if features.len() != occupied.len() * feature_dim {
            return Err(Error::Invalid(format!(
                "expected {} feature values for {} occupied voxels, got {}",
                occupied.len() * feature_dim,
                occupied.len(),
                features.len()
            )));
        }
        Ok(VoxelGrid { dims, num_classes, feature_dim, labels, features, occupied })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn occupied(&self) -> &[usize] {
        &self.occupied
    }

    pub fn num_occupied(&self) -> usize {
        self.occupied.len()
    }

    /// Feature vector of the `row`-th occupied voxel (linear-index order).
    pub fn feature(&self, row: usize) -> &[f64] {
        &self.features[row * self.feature_dim..(row + 1) * self.feature_dim]
    }

    pub fn coord_of(&self, lin: usize) -> (u32, u32, u32) {
        let (d, h, _) = self.dims;
        ((lin % d) as u32, ((lin / d) % h) as u32, (lin / (d * h)) as u32)
    }

    pub fn linear_of(&self, coord: (u32, u32, u32)) -> usize {
        let (d, h, _) = self.dims;
        coord.0 as usize + d * (coord.1 as usize + h * coord.2 as usize)
    }

    /// Smallest bits-per-axis that covers every coordinate of this grid.
    pub fn bits_per_axis(&self) -> u32 {
        let side = self.dims.0.max(self.dims.1).max(self.dims.2).max(2);
        (usize::BITS - (side - 1).leading_zeros()).max(1)
    }

    pub fn read_vser(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::from_reader(&mut f)
    }

    pub fn write_vser(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.to_writer(&mut f)
    }

    pub fn from_reader(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != VSER_MAGIC {
            return Err(Error::BadFormat("bad VSER magic".into()));
        }
        let version = read_u16(r)?;
        if version != VSER_VERSION {
            return Err(Error::BadFormat(format!("unsupported VSER version {version}")));
        }
        let d = read_u32(r)? as usize;
        let h = read_u32(r)? as usize;
        let w = read_u32(r)? as usize;
        let num_classes = read_u16(r)?;
        let feature_dim = read_u16(r)? as usize;
        let volume = d
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::BadFormat("dims overflow".into()))?;
        let mut labels = vec![0u8; volume];
        r.read_exact(&mut labels)?;
        let occupied = labels.iter().filter(|&&l| l > 0).count();
        let mut features = Vec::with_capacity(occupied * feature_dim);
        let mut buf = [0u8; 4];
        for _ in 0..occupied * feature_dim {
            r.read_exact(&mut buf)?;
            features.push(f32::from_le_bytes(buf) as f64);
        }
        VoxelGrid::new((d, h, w), num_classes, feature_dim, labels, features)
    }

    pub fn to_writer(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(VSER_MAGIC)?;
        w.write_all(&VSER_VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.0 as u32).to_le_bytes())?;
        w.write_all(&(self.dims.1 as u32).to_le_bytes())?;
        w.write_all(&(self.dims.2 as u32).to_le_bytes())?;
        w.write_all(&self.num_classes.to_le_bytes())?;
        w.write_all(&(self.feature_dim as u16).to_le_bytes())?;
        w.write_all(&self.labels)?;
        for &v in &self.features {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

/// Which voxels take part in serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SerializeScope {
    /// Non-empty voxels only (the padding-free default).
    Occupied,
    /// Every voxel, for comparison against the occupied-only path.
    All,
}

/// An ordering of voxel linear indices along a curve, rotated by a cyclic shift.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedSequence {
    pub order: Vec<usize>,
    pub kind: CurveKind,
    pub shift: usize,
}

impl SerializedSequence {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Sort the grid's occupied voxels by curve key, then rotate left by `shift mod n`.
pub fn serialize(grid: &VoxelGrid, kind: CurveKind, shift: usize) -> Result<SerializedSequence> {
    serialize_scoped(grid, kind, shift, SerializeScope::Occupied)
}

pub fn serialize_scoped(
    grid: &VoxelGrid,
    kind: CurveKind,
    shift: usize,
    scope: SerializeScope,
) -> Result<SerializedSequence> {
    if grid.num_occupied() == 0 {
        return Err(Error::EmptyScene);
    }
    let bits = grid.bits_per_axis();
    let indices: Vec<usize> = match scope {
        SerializeScope::Occupied => grid.occupied().to_vec(),
        SerializeScope::All => (0..grid.num_voxels()).collect(),
    };
    let mut keyed: Vec<(u64, usize)> = indices
        .into_iter()
        .map(|lin| Ok((sfc::encode(kind, bits, grid.coord_of(lin))?, lin)))
        .collect::<Result<_>>()?;
    keyed.sort_unstable();
    let mut order: Vec<usize> = keyed.into_iter().map(|(_, lin)| lin).collect();
    let n = order.len();
    order.rotate_left(shift % n);
    Ok(SerializedSequence { order, kind, shift })
}

/// Contiguous length-`<= G` slices covering a serialized sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub group_size: usize,
    /// Half-open `[start, end)` ranges over sequence positions.
    pub boundaries: Vec<(usize, usize)>,
}

impl GroupPartition {
    pub fn num_groups(&self) -> usize {
        self.boundaries.len()
    }
}

pub fn partition(seq: &SerializedSequence, group_size: usize) -> Result<GroupPartition> {
    partition_len(seq.len(), group_size)
}

pub fn partition_len(n: usize, group_size: usize) -> Result<GroupPartition> {
    if group_size < 1 {
        return Err(Error::InvalidGroupSize(group_size));
    }
    let boundaries = (0..n.div_ceil(group_size))
        .map(|i| (i * group_size, ((i + 1) * group_size).min(n)))
        .collect();
    Ok(GroupPartition { group_size, boundaries })
}

/// Token-pair counts of grouped attention vs full attention over `n` tokens.
pub fn attention_token_cost(n: usize, group_size: usize) -> Result<(u64, u64)> {
    let part = partition_len(n, group_size)?;
    let grouped = part
        .boundaries
        .iter()
        .map(|&(s, e)| {
            let len = (e - s) as u64;
            len * len
        })
        .sum();
    Ok((grouped, (n as u64) * (n as u64)))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
