//! Fixed-grid voxelization with per-voxel seeded point sampling.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kitti_io::{Point, PointCloud};

/// Number of feature channels produced by [`voxelize`]: mean x, y, z, intensity.
pub const VOXEL_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelizerConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub max_points_per_voxel: usize,
    pub seed: u64,
}

impl Default for VoxelizerConfig {
    fn default() -> Self {
        VoxelizerConfig {
            range_min: [0.0, -40.0, -3.0],
            range_max: [70.4, 40.0, 1.0],
            voxel_size: [0.05, 0.05, 0.1],
            max_points_per_voxel: 5,
            seed: 0,
        }
    }
}

impl VoxelizerConfig {
    /// Voxel counts per axis. Fails unless every extent is a positive integer
    /// multiple of the voxel size.
    pub fn grid_shape(&self) -> Result<[usize; 3]> {
        let mut shape = [0usize; 3];
        for a in 0..3 {
            let extent = self.range_max[a] - self.range_min[a];
            let v = self.voxel_size[a];
            if !(v > 0.0) || !(extent > 0.0) {
                return Err(Error::Config(format!(
                    "axis {a}: range and voxel size must be positive"
                )));
            }
            let n = extent / v;
            let r = n.round();
            if r < 1.0 || (n - r).abs() > 1e-6 * r.max(1.0) {
                return Err(Error::Config(format!(
                    "axis {a}: extent {extent} is not an integer multiple of voxel size {v}"
                )));
            }
            shape[a] = r as usize;
        }
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_shape()?;
        if self.max_points_per_voxel == 0 {
            return Err(Error::Config("max_points_per_voxel must be at least 1".into()));
        }
        Ok(())
    }

    /// Voxel index of a point, or `None` when it falls outside the range.
    pub fn voxel_index(&self, p: &Point, shape: [usize; 3]) -> Option<[usize; 3]> {
        let xyz = p.xyz();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if !(xyz[a] >= self.range_min[a] && xyz[a] < self.range_max[a]) {
                return None;
            }
            let i = ((xyz[a] - self.range_min[a]) / self.voxel_size[a]).floor();
            if i < 0.0 || i >= shape[a] as f64 {
                return None;
            }
            idx[a] = i as usize;
        }
        Some(idx)
    }
}

/// Active voxel sites sorted by `(iz, iy, ix)`, each with a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    /// (n_x, n_y, n_z)
    pub shape: [usize; 3],
    /// (ix, iy, iz) per site
    pub indices: Vec<[usize; 3]>,
    /// row-major `sites × channels`
    pub features: Vec<f64>,
    pub channels: usize,
}

impl SparseVoxelGrid {
    pub fn empty(shape: [usize; 3], channels: usize) -> Self {
        SparseVoxelGrid {
            shape,
            indices: Vec::new(),
            features: Vec::new(),
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn feature(&self, site: usize) -> &[f64] {
        &self.features[site * self.channels..(site + 1) * self.channels]
    }

    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        (idx[2] * self.shape[1] + idx[1]) * self.shape[0] + idx[0]
    }

    /// Dense `(n_z, n_y, n_x, channels)` array.
    pub fn densify(&self) -> Vec<f64> {
        let [nx, ny, nz] = self.shape;
        let mut dense = vec![0.0; nx * ny * nz * self.channels];
        for (s, &idx) in self.indices.iter().enumerate() {
            let base = self.linear_index(idx) * self.channels;
            dense[base..base + self.channels].copy_from_slice(self.feature(s));
        }
        dense
    }

    /// Inverse of [`densify`](Self::densify); cells whose features are all zero
    /// are treated as inactive.
    pub fn sparsify(shape: [usize; 3], channels: usize, dense: &[f64]) -> Self {
        let [nx, ny, nz] = shape;
        let mut grid = SparseVoxelGrid::empty(shape, channels);
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let base = ((iz * ny + iy) * nx + ix) * channels;
                    let f = &dense[base..base + channels];
                    if f.iter().any(|&v| v != 0.0) {
                        grid.indices.push([ix, iy, iz]);
                        grid.features.extend_from_slice(f);
                    }
                }
            }
        }
        grid
    }

    /// Text dump: a header line then `ix iy iz f0 f1 …` per site.
    pub fn dump(&self) -> String {
        let mut s = format!(
            "shape {} {} {} channels {}\n",
            self.shape[0], self.shape[1], self.shape[2], self.channels
        );
        for (i, idx) in self.indices.iter().enumerate() {
            let _ = write!(s, "{} {} {}", idx[0], idx[1], idx[2]);
            for v in self.feature(i) {
                let _ = write!(s, " {v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Deterministic per-voxel RNG stream keyed by (seed, voxel linear index).
fn voxel_rng(seed: u64, linear: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(linear as u64);
    rng
}

fn point_key(p: &Point) -> [u64; 4] {
    [
        p.x.to_bits(),
        p.y.to_bits(),
        p.z.to_bits(),
        p.intensity.to_bits(),
    ]
}

pub fn voxelize(cloud: &PointCloud, cfg: &VoxelizerConfig) -> Result<SparseVoxelGrid> {
    cfg.validate()?;
    let shape = cfg.grid_shape()?;
    let [nx, ny, _] = shape;

    let mut keyed: Vec<(usize, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            cfg.voxel_index(p, shape)
                .map(|[ix, iy, iz]| ((iz * ny + iy) * nx + ix, i))
        })
        .collect();
    // Order inside a voxel by point value so the sample does not depend on
    // arrival order.
    keyed.sort_unstable_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| point_key(&cloud.points[a.1]).cmp(&point_key(&cloud.points[b.1])))
    });

    let mut grid = SparseVoxelGrid::empty(shape, VOXEL_FEATURES);
    let mut start = 0;
    while start < keyed.len() {
        let lin = keyed[start].0;
        let mut end = start + 1;
        while end < keyed.len() && keyed[end].0 == lin {
            end += 1;
        }
        let members = &keyed[start..end];
        let mut sum = [0.0f64; VOXEL_FEATURES];
        let mut add = |p: &Point| {
            sum[0] += p.x;
            sum[1] += p.y;
            sum[2] += p.z;
            sum[3] += p.intensity;
        };
        let count = if members.len() > cfg.max_points_per_voxel {
            let mut rng = voxel_rng(cfg.seed, lin);
            let mut picked =
                rand::seq::index::sample(&mut rng, members.len(), cfg.max_points_per_voxel).into_vec();
            picked.sort_unstable();
            for k in picked {
                add(&cloud.points[members[k].1]);
            }
            cfg.max_points_per_voxel
        } else {
            for m in members {
                add(&cloud.points[m.1]);
            }
            members.len()
        };
        let ix = lin % nx;
        let iy = (lin / nx) % ny;
        let iz = lin / (nx * ny);
        grid.indices.push([ix, iy, iz]);
        grid.features.extend(sum.iter().map(|s| s / count as f64));
        start = end;
    }
    Ok(grid)
}

/// Fraction of inactive cells.
pub fn sparsity(grid: &SparseVoxelGrid) -> f64 {
    let total = (grid.shape[0] * grid.shape[1] * grid.shape[2]) as f64;
    if total == 0.0 {
        return 1.0;
    }
    1.0 - grid.len() as f64 / total
}
