//! Sparse 3D convolution over active voxel sites and the voxel feature encoder.
//!
//! A [`Rulebook`] lists, for every kernel offset, the `(input site, output
//! site)` pairs the offset connects. Execution gathers the input rows of one
//! offset, multiplies by that offset's `c_in × c_out` weight slice and
//! scatter-adds into the output rows.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::nn_core::layers::{he_normal, BatchNorm};
use crate::nn_core::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
use crate::voxel_grid::SparseVoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Output sites equal input sites; kernel centered on each site.
    Submanifold,
    /// No padding; output coordinate `o` reads inputs `o·stride + offset`.
    Strided,
}

/// Active sites of a batch of grids, sorted by `(batch, iz, iy, ix)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSet {
    /// (n_x, n_y, n_z)
    pub shape: [usize; 3],
    pub batch: usize,
    /// (batch, ix, iy, iz)
    pub coords: Vec<[usize; 4]>,
}

impl SiteSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn key(&self, c: [usize; 4]) -> u64 {
        let [nx, ny, nz] = self.shape;
        ((((c[0] * nz + c[3]) * ny + c[2]) * nx) + c[1]) as u64
    }

    fn sort(&mut self) {
        let s = self.clone();
        self.coords.sort_unstable_by_key(|&c| s.key(c));
        self.coords.dedup();
    }

    /// Sites of a batch of voxel grids (all of the same shape).
    pub fn from_grids(grids: &[SparseVoxelGrid]) -> Result<Self> {
        let shape = grids
            .first()
            .map(|g| g.shape)
            .ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let mut coords = Vec::new();
        for (b, g) in grids.iter().enumerate() {
            if g.shape != shape {
                return Err(shape_err!("batch grids have shapes {:?} and {:?}", shape, g.shape));
            }
            coords.extend(g.indices.iter().map(|&[x, y, z]| [b, x, y, z]));
        }
        let mut s = SiteSet {
            shape,
            batch: grids.len(),
            coords,
        };
        s.sort();
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rulebook {
    /// kernel extent per axis (x, y, z)
    pub kernel: [usize; 3],
    /// per offset `(dz·k_y + dy)·k_x + dx`, the `(input, output)` ordinal pairs
    pub pairs: Vec<Vec<(u32, u32)>>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Rulebook {
    pub fn volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

fn offset_index(kernel: [usize; 3], d: [usize; 3]) -> usize {
    (d[2] * kernel[1] + d[1]) * kernel[0] + d[0]
}

/// Build the gather–scatter plan and the output site set.
pub fn build_rulebook(
    sites: &SiteSet,
    kernel: [usize; 3],
    stride: [usize; 3],
    mode: ConvMode,
) -> Result<(Rulebook, SiteSet)> {
    if kernel.iter().any(|&k| k == 0) || stride.iter().any(|&s| s == 0) {
        return Err(Error::Config(format!(
            "sparse conv kernel {kernel:?} and stride {stride:?} must be >= 1"
        )));
    }
    let volume: usize = kernel.iter().product();
    let mut pairs = vec![Vec::new(); volume];
    match mode {
        ConvMode::Submanifold => {
            if kernel.iter().any(|k| k % 2 == 0) || stride != [1, 1, 1] {
                return Err(Error::Config(format!(
                    "submanifold conv needs odd kernel and unit stride, got {kernel:?}/{stride:?}"
                )));
            }
            let lookup: HashMap<u64, u32> = sites
                .coords
                .iter()
                .enumerate()
                .map(|(i, &c)| (sites.key(c), i as u32))
                .collect();
            let half = kernel.map(|k| (k / 2) as isize);
            for (out, &c) in sites.coords.iter().enumerate() {
                for dz in 0..kernel[2] {
                    for dy in 0..kernel[1] {
                        for dx in 0..kernel[0] {
                            let p = [
                                c[1] as isize + dx as isize - half[0],
                                c[2] as isize + dy as isize - half[1],
                                c[3] as isize + dz as isize - half[2],
                            ];
                            if (0..3).any(|a| p[a] < 0 || p[a] >= sites.shape[a] as isize) {
                                continue;
                            }
                            let key = sites.key([c[0], p[0] as usize, p[1] as usize, p[2] as usize]);
                            if let Some(&inp) = lookup.get(&key) {
                                pairs[offset_index(kernel, [dx, dy, dz])].push((inp, out as u32));
                            }
                        }
                    }
                }
            }
            let rb = Rulebook {
                kernel,
                pairs,
                n_in: sites.len(),
                n_out: sites.len(),
            };
            Ok((rb, sites.clone()))
        }
        ConvMode::Strided => {
            let mut out_shape = [0usize; 3];
            for a in 0..3 {
                if sites.shape[a] < kernel[a] {
                    return Err(shape_err!(
                        "strided conv kernel {kernel:?} larger than grid {:?}",
                        sites.shape
                    ));
                }
                out_shape[a] = (sites.shape[a] - kernel[a]) / stride[a] + 1;
            }
            // (input ordinal, offset, output coordinate)
            let mut links: Vec<(u32, usize, [usize; 4])> = Vec::new();
            for (inp, &c) in sites.coords.iter().enumerate() {
                let ic = [c[1], c[2], c[3]];
                // Enumerate offsets per axis that land on a valid output.
                let mut per_axis: [Vec<(usize, usize)>; 3] = Default::default();
                for a in 0..3 {
                    for d in 0..kernel[a] {
                        if ic[a] >= d && (ic[a] - d) % stride[a] == 0 {
                            let o = (ic[a] - d) / stride[a];
                            if o < out_shape[a] {
                                per_axis[a].push((d, o));
                            }
                        }
                    }
                }
                for &(dz, oz) in &per_axis[2] {
                    for &(dy, oy) in &per_axis[1] {
                        for &(dx, ox) in &per_axis[0] {
                            links.push((inp as u32, offset_index(kernel, [dx, dy, dz]), [c[0], ox, oy, oz]));
                        }
                    }
                }
            }
            let mut out_sites = SiteSet {
                shape: out_shape,
                batch: sites.batch,
                coords: links.iter().map(|l| l.2).collect(),
            };
            out_sites.sort();
            let lookup: HashMap<u64, u32> = out_sites
                .coords
                .iter()
                .enumerate()
                .map(|(i, &c)| (out_sites.key(c), i as u32))
                .collect();
            for (inp, k, oc) in links {
                pairs[k].push((inp, lookup[&out_sites.key(oc)]));
            }
            for p in &mut pairs {
                p.sort_unstable_by_key(|&(i, o)| (o, i));
            }
            let rb = Rulebook {
                kernel,
                pairs,
                n_in: sites.len(),
                n_out: out_sites.len(),
            };
            Ok((rb, out_sites))
        }
    }
}

fn check_shapes(x: &Tensor, w: &Tensor, rb: &Rulebook) -> Result<(usize, usize)> {
    let (n, cin) = match x.shape[..] {
        [n, c] => (n, c),
        _ => return Err(shape_err!("sparse features must be (n, c), got {:?}", x.shape)),
    };
    if n != rb.n_in {
        return Err(shape_err!("rulebook expects {} input sites, got {n}", rb.n_in));
    }
    match w.shape[..] {
        [k, ci, co] if k == rb.volume() && ci == cin => Ok((cin, co)),
        _ => Err(shape_err!(
            "sparse weights {:?} incompatible with kernel volume {} and {cin} input channels",
            w.shape,
            rb.volume()
        )),
    }
}

fn gather_rows(src: &[f64], width: usize, rows: impl Iterator<Item = usize>, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * width);
    for r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

/// `out[o] += W[offset]ᵀ · in[i]` over every rulebook pair, plus bias.
pub fn sparse_conv_forward(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, rb: &Rulebook) -> Result<Tensor> {
    let (cin, cout) = check_shapes(x, w, rb)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(shape_err!("sparse conv bias has {} values, need {cout}", b.len()));
        }
    }
    let mut y = Tensor::zeros(&[rb.n_out, cout]);
    if let Some(b) = bias {
        for row in y.data.chunks_mut(cout.max(1)) {
            row.copy_from_slice(b);
        }
    }
    let partial: Vec<Option<Vec<f64>>> = rb
        .pairs
        .par_iter()
        .enumerate()
        .map(|(k, pairs)| {
            if pairs.is_empty() {
                return None;
            }
            let p = pairs.len();
            let xs = gather_rows(&x.data, cin, pairs.iter().map(|&(i, _)| i as usize), p);
            let wk = &w.data[k * cin * cout..(k + 1) * cin * cout];
            let mut yk = vec![0.0; p * cout];
            crate::nn_core::conv_gemm(p, cin, cout, &xs, false, wk, false, 0.0, &mut yk);
            Some(yk)
        })
        .collect();
    for (pairs, yk) in rb.pairs.iter().zip(partial) {
        let Some(yk) = yk else { continue };
        for (r, &(_, o)) in pairs.iter().enumerate() {
            let dst = &mut y.data[o as usize * cout..(o as usize + 1) * cout];
            dst.iter_mut().zip(&yk[r * cout..(r + 1) * cout]).for_each(|(a, b)| *a += b);
        }
    }
    Ok(y)
}

/// Transpose of [`sparse_conv_forward`]: returns `(dx, dw, dbias)`.
pub fn sparse_conv_backward(dy: &[f64], rb: &Rulebook, x: &Tensor, w: &Tensor) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (cin, cout) = check_shapes(x, w, rb)?;
    if dy.len() != rb.n_out * cout {
        return Err(shape_err!("upstream gradient has {} values, need {}", dy.len(), rb.n_out * cout));
    }
    let mut db = vec![0.0; cout];
    for row in dy.chunks(cout.max(1)) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    let parts: Vec<Option<(Vec<f64>, Vec<f64>)>> = rb
        .pairs
        .par_iter()
        .enumerate()
        .map(|(k, pairs)| {
            if pairs.is_empty() {
                return None;
            }
            let p = pairs.len();
            let xs = gather_rows(&x.data, cin, pairs.iter().map(|&(i, _)| i as usize), p);
            let gs = gather_rows(dy, cout, pairs.iter().map(|&(_, o)| o as usize), p);
            let wk = &w.data[k * cin * cout..(k + 1) * cin * cout];
            let mut dwk = vec![0.0; cin * cout];
            crate::nn_core::conv_gemm(cin, p, cout, &xs, true, &gs, false, 0.0, &mut dwk);
            let mut dxs = vec![0.0; p * cin];
            crate::nn_core::conv_gemm(p, cout, cin, &gs, false, wk, true, 0.0, &mut dxs);
            Some((dwk, dxs))
        })
        .collect();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for (k, (pairs, part)) in rb.pairs.iter().zip(parts).enumerate() {
        let Some((dwk, dxs)) = part else { continue };
        dw[k * cin * cout..(k + 1) * cin * cout].copy_from_slice(&dwk);
        for (r, &(i, _)) in pairs.iter().enumerate() {
            let dst = &mut dx[i as usize * cin..(i as usize + 1) * cin];
            dst.iter_mut().zip(&dxs[r * cin..(r + 1) * cin]).for_each(|(a, b)| *a += b);
        }
    }
    Ok((dx, dw, db))
}

/// One encoder block: submanifold layers then a strided down-sampling layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VfeBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub subm_layers: usize,
    /// x/y stride of the down-sampling layer (its x/y kernel equals the stride)
    pub xy_stride: usize,
    pub z_kernel: usize,
    pub z_stride: usize,
}

impl VfeBlockSpec {
    pub const fn new(in_channels: usize, out_channels: usize, subm_layers: usize, xy_stride: usize) -> Self {
        VfeBlockSpec {
            in_channels,
            out_channels,
            subm_layers,
            xy_stride,
            z_kernel: 2,
            z_stride: 2,
        }
    }

    pub const fn z_squeeze(mut self, kernel: usize, stride: usize) -> Self {
        self.z_kernel = kernel;
        self.z_stride = stride;
        self
    }

    pub fn down_kernel(&self) -> [usize; 3] {
        [self.xy_stride, self.xy_stride, self.z_kernel]
    }

    pub fn down_stride(&self) -> [usize; 3] {
        [self.xy_stride, self.xy_stride, self.z_stride]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("block channels must be > 0".into()));
        }
        if !(1..=2).contains(&self.xy_stride) || !(1..=2).contains(&self.z_stride) {
            return Err(Error::Config(format!("block strides must be 1 or 2: {self:?}")));
        }
        if self.z_kernel == 0 {
            return Err(Error::Config("z kernel must be >= 1".into()));
        }
        Ok(())
    }
}

pub const SUBM_KERNEL: [usize; 3] = [3, 3, 3];

/// Default encoder: `(4,16,2,2) (16,32,2,2) (32,64,3,2) (64,64,3,1)`, with z
/// halved by each of the first three blocks and squeezed to two levels by the
/// last (kernel 3, stride 2 on five levels).
pub fn default_blocks() -> Vec<VfeBlockSpec> {
    vec![
        VfeBlockSpec::new(4, 16, 2, 2),
        VfeBlockSpec::new(16, 32, 2, 2),
        VfeBlockSpec::new(32, 64, 3, 2),
        VfeBlockSpec::new(64, 64, 3, 1).z_squeeze(3, 2),
    ]
}

/// Grid shape after every block, starting from `shape`.
pub fn block_shapes(shape: [usize; 3], blocks: &[VfeBlockSpec]) -> Result<Vec<[usize; 3]>> {
    let mut out = Vec::with_capacity(blocks.len());
    let mut s = shape;
    for b in blocks {
        let k = b.down_kernel();
        let st = b.down_stride();
        for a in 0..3 {
            if s[a] < k[a] {
                return Err(shape_err!("grid {s:?} too small for block {b:?}"));
            }
            s[a] = (s[a] - k[a]) / st[a] + 1;
        }
        out.push(s);
    }
    Ok(out)
}

/// Sparse convolution without bias followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct SparseConvBnRelu {
    pub weight: ParamId,
    pub bn: BatchNorm,
}

impl SparseConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, volume: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            he_normal(rng, &[volume, cin, cout], volume * cin),
        );
        SparseConvBnRelu {
            weight,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, rb: &Arc<Rulebook>, mode: Mode) -> Result<Var> {
        let w = g.param(store, self.weight);
        let c = g.sparse_conv(x, w, None, rb.clone())?;
        let n = self.bn.forward(g, store, c, mode)?;
        let y = g.relu(n);
        g.discard(&[c, n]);
        Ok(y)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    spec: VfeBlockSpec,
    subm: Vec<SparseConvBnRelu>,
    down: SparseConvBnRelu,
}

/// Sparse voxel feature encoder producing a BEV feature map.
#[derive(Debug, Clone)]
pub struct VoxelEncoder {
    blocks: Vec<EncoderBlock>,
}

/// Rulebooks for one batch, reusable across forward passes on the same input.
#[derive(Debug, Clone)]
pub struct EncoderPlan {
    pub input_sites: SiteSet,
    /// per block: submanifold rulebook, down-sampling rulebook
    pub rulebooks: Vec<(Arc<Rulebook>, Arc<Rulebook>)>,
    pub output_sites: SiteSet,
}

impl VoxelEncoder {
    pub fn new(store: &mut ParamStore, name: &str, specs: &[VfeBlockSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut blocks = Vec::new();
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if i > 0 && specs[i - 1].out_channels != s.in_channels {
                return Err(Error::Config(format!(
                    "block {} outputs {} channels but block {} expects {}",
                    i,
                    specs[i - 1].out_channels,
                    i + 1,
                    s.in_channels
                )));
            }
            let vol: usize = SUBM_KERNEL.iter().product();
            let subm = (0..s.subm_layers)
                .map(|l| {
                    let cin = if l == 0 { s.in_channels } else { s.out_channels };
                    SparseConvBnRelu::new(store, &format!("{name}.block{}.subm{l}", i + 1), vol, cin, s.out_channels, rng)
                })
                .collect();
            let cin_down = if s.subm_layers == 0 { s.in_channels } else { s.out_channels };
            let down_vol: usize = s.down_kernel().iter().product();
            let down = SparseConvBnRelu::new(
                store,
                &format!("{name}.block{}.down", i + 1),
                down_vol,
                cin_down,
                s.out_channels,
                rng,
            );
            blocks.push(EncoderBlock { spec: *s, subm, down });
        }
        Ok(VoxelEncoder { blocks })
    }

    pub fn specs(&self) -> Vec<VfeBlockSpec> {
        self.blocks.iter().map(|b| b.spec).collect()
    }

    pub fn plan(&self, grids: &[SparseVoxelGrid]) -> Result<EncoderPlan> {
        let input_sites = SiteSet::from_grids(grids)?;
        let mut sites = input_sites.clone();
        let mut rulebooks = Vec::new();
        for b in &self.blocks {
            let (subm, _) = build_rulebook(&sites, SUBM_KERNEL, [1, 1, 1], ConvMode::Submanifold)?;
            let (down, next) = build_rulebook(&sites, b.spec.down_kernel(), b.spec.down_stride(), ConvMode::Strided)?;
            rulebooks.push((Arc::new(subm), Arc::new(down)));
            sites = next;
        }
        Ok(EncoderPlan {
            input_sites,
            rulebooks,
            output_sites: sites,
        })
    }

    /// BEV channel count: last block channels times remaining z levels.
    pub fn bev_channels(&self, grid_shape: [usize; 3]) -> Result<usize> {
        let shapes = block_shapes(grid_shape, &self.specs())?;
        let last = shapes.last().copied().unwrap_or(grid_shape);
        let c = self.blocks.last().map_or(0, |b| b.spec.out_channels);
        Ok(c * last[2])
    }

    /// Encode a batch of grids into a `(batch, C·n_z, n_y, n_x)` BEV map.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        grids: &[SparseVoxelGrid],
        plan: &EncoderPlan,
        mode: Mode,
    ) -> Result<Var> {
        let channels = grids[0].channels;
        let mut feats = Vec::with_capacity(plan.input_sites.len() * channels);
        for grid in grids {
            if grid.channels != channels {
                return Err(shape_err!("batch grids disagree on channel count"));
            }
            feats.extend_from_slice(&grid.features);
        }
        // Input rows follow the sorted site order; per-grid sites are sorted
        // by (iz, iy, ix) already, and batches are concatenated in order.
        let mut x = g.input(Tensor::new(vec![plan.input_sites.len(), channels], feats)?);
        if let Some(first) = self.blocks.first() {
            if first.spec.in_channels != channels {
                return Err(shape_err!(
                    "encoder expects {} input channels, grid has {channels}",
                    first.spec.in_channels
                ));
            }
        }
        for (b, (subm_rb, down_rb)) in self.blocks.iter().zip(&plan.rulebooks) {
            for layer in &b.subm {
                let y = layer.forward(g, store, x, subm_rb, mode)?;
                g.discard(&[x]);
                x = y;
            }
            let y = b.down.forward(g, store, x, down_rb, mode)?;
            g.discard(&[x]);
            x = y;
        }
        let out = &plan.output_sites;
        let [nx, ny, nz] = out.shape;
        let c = g.value(x).shape[1];
        let base: Vec<usize> = out
            .coords
            .iter()
            .map(|&[b, ix, iy, iz]| ((b * c * nz + iz) * ny + iy) * nx + ix)
            .collect();
        let bev = g.scatter_dense(x, Arc::new(base), nz * ny * nx, &[out.batch, c * nz, ny, nx])?;
        g.discard(&[x]);
        Ok(bev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sites(shape: [usize; 3], coords: &[[usize; 3]]) -> SiteSet {
        let mut s = SiteSet {
            shape,
            batch: 1,
            coords: coords.iter().map(|&[x, y, z]| [0, x, y, z]).collect(),
        };
        s.sort();
        s
    }

    #[test]
    fn isolated_site_has_only_center_pair() {
        let s = sites([5, 5, 5], &[[2, 2, 2]]);
        let (rb, out) = build_rulebook(&s, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).unwrap();
        assert_eq!(out, s);
        assert_eq!(rb.num_pairs(), 1);
        assert_eq!(rb.pairs[13], vec![(0, 0)]);
    }

    #[test]
    fn neighbouring_sites_have_four_pairs() {
        let s = sites([4, 4, 4], &[[0, 0, 0], [1, 0, 0]]);
        let (rb, _) = build_rulebook(&s, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).unwrap();
        assert_eq!(rb.num_pairs(), 4);
        assert_eq!(rb.pairs[13].len(), 2);
        // input at x+1 relative to output: offset dx = 2
        assert_eq!(rb.pairs[offset_index([3, 3, 3], [2, 1, 1])], vec![(1, 0)]);
        assert_eq!(rb.pairs[offset_index([3, 3, 3], [0, 1, 1])], vec![(0, 1)]);
    }

    #[test]
    fn strided_floor_division() {
        let s = sites([4, 4, 4], &[[0, 0, 0], [1, 1, 1]]);
        let (rb, out) = build_rulebook(&s, [2, 2, 2], [2, 2, 2], ConvMode::Strided).unwrap();
        assert_eq!(out.coords, vec![[0, 0, 0, 0]]);
        assert_eq!(out.shape, [2, 2, 2]);
        assert_eq!(rb.num_pairs(), 2);
    }

    #[test]
    fn submanifold_rejects_even_kernel() {
        let s = sites([4, 4, 4], &[[0, 0, 0]]);
        assert!(build_rulebook(&s, [2, 3, 3], [1, 1, 1], ConvMode::Submanifold).is_err());
    }

    #[test]
    fn identity_center_weight_and_empty_grid() {
        let s = sites([4, 4, 4], &[[0, 0, 0], [1, 0, 0], [3, 2, 1]]);
        let (rb, _) = build_rulebook(&s, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).unwrap();
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut w = Tensor::zeros(&[27, 2, 2]);
        w.data[13 * 4] = 1.0;
        w.data[13 * 4 + 3] = 1.0;
        let y = sparse_conv_forward(&x, &w, None, &rb).unwrap();
        assert_eq!(y.data, x.data);

        let e = sites([4, 4, 4], &[]);
        let (rb, out) = build_rulebook(&e, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).unwrap();
        assert!(out.is_empty());
        let y = sparse_conv_forward(&Tensor::zeros(&[0, 2]), &w, None, &rb).unwrap();
        assert_eq!(y.shape, vec![0, 2]);
    }

    #[test]
    fn single_pair_weight_grad_is_outer_product() {
        let s = sites([3, 3, 3], &[[1, 1, 1]]);
        let (rb, _) = build_rulebook(&s, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.5, -2.0]).unwrap();
        let w = Tensor::zeros(&[27, 2, 3]);
        let dy = [1.0, 3.0, -1.0];
        let (dx, dw, db) = sparse_conv_backward(&dy, &rb, &x, &w).unwrap();
        assert_eq!(db, dy.to_vec());
        assert!(dx.iter().all(|&v| v == 0.0));
        let center = &dw[13 * 6..14 * 6];
        assert_eq!(center, &[0.5, 1.5, -0.5, -2.0, -6.0, 2.0]);
        assert!(dw[..13 * 6].iter().chain(&dw[14 * 6..]).all(|&v| v == 0.0));

        let (dx, dw, db) = sparse_conv_backward(&[0.0; 3], &rb, &x, &w).unwrap();
        assert!(dx.iter().chain(&dw).chain(&db).all(|&v| v == 0.0));
    }

    #[test]
    fn default_block_shapes() {
        let shapes = block_shapes([1408, 1600, 40], &default_blocks()).unwrap();
        assert_eq!(shapes, vec![[704, 800, 20], [352, 400, 10], [176, 200, 5], [176, 200, 2]]);
        let shapes = block_shapes([176, 200, 40], &default_blocks()).unwrap();
        assert_eq!(shapes.last(), Some(&[22, 25, 2]));
    }

    #[test]
    fn encoder_rejects_channel_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = [VfeBlockSpec::new(4, 16, 1, 2), VfeBlockSpec::new(8, 16, 1, 2)];
        assert!(VoxelEncoder::new(&mut store, "vfe", &specs, &mut rng).is_err());
    }

    /// Dense 3D convolution of the densified sites, evaluated at `out` coords.
    fn dense_oracle(
        s: &SiteSet,
        x: &Tensor,
        w: &Tensor,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [isize; 3],
        out: &[[usize; 4]],
    ) -> Vec<f64> {
        let (cin, cout) = (w.shape[1], w.shape[2]);
        let [nx, ny, nz] = s.shape;
        let mut dense = vec![0.0; nx * ny * nz * cin];
        for (i, c) in s.coords.iter().enumerate() {
            let at = ((c[3] * ny + c[2]) * nx + c[1]) * cin;
            dense[at..at + cin].copy_from_slice(&x.data[i * cin..(i + 1) * cin]);
        }
        let mut res = Vec::new();
        for o in out {
            for co in 0..cout {
                let mut acc = 0.0;
                for dz in 0..kernel[2] {
                    for dy in 0..kernel[1] {
                        for dx in 0..kernel[0] {
                            let p = [
                                (o[1] * stride[0] + dx) as isize - pad[0],
                                (o[2] * stride[1] + dy) as isize - pad[1],
                                (o[3] * stride[2] + dz) as isize - pad[2],
                            ];
                            if (0..3).any(|a| p[a] < 0 || p[a] >= s.shape[a] as isize) {
                                continue;
                            }
                            let at = ((p[2] as usize * ny + p[1] as usize) * nx + p[0] as usize) * cin;
                            let k = offset_index(kernel, [dx, dy, dz]);
                            for ci in 0..cin {
                                acc += dense[at + ci] * w.data[(k * cin + ci) * cout + co];
                            }
                        }
                    }
                }
                res.push(acc);
            }
        }
        res
    }

    fn random_sites(rng: &mut ChaCha8Rng, shape: [usize; 3], n: usize) -> SiteSet {
        let coords: Vec<[usize; 3]> = (0..n)
            .map(|_| [rng.random_range(0..shape[0]), rng.random_range(0..shape[1]), rng.random_range(0..shape[2])])
            .collect();
        sites(shape, &coords)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s = random_sites(&mut rng, [6, 6, 6], 10);
            let x = random_tensor(&mut rng, &[s.len(), 3]);
            let w = random_tensor(&mut rng, &[27, 3, 2]);
            let (rb, out) = build_rulebook(&s, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).unwrap();
            let y = sparse_conv_forward(&x, &w, None, &rb).unwrap();
            let d = dense_oracle(&s, &x, &w, [3, 3, 3], [1, 1, 1], [1, 1, 1], &out.coords);
            let err = y.data.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "submanifold diff {err}");

            let w = random_tensor(&mut rng, &[12, 3, 2]);
            let (rb, out) = build_rulebook(&s, [2, 2, 3], [2, 2, 1], ConvMode::Strided).unwrap();
            assert_eq!(out.shape, [3, 3, 4]);
            let y = sparse_conv_forward(&x, &w, None, &rb).unwrap();
            let d = dense_oracle(&s, &x, &w, [2, 2, 3], [2, 2, 1], [0, 0, 0], &out.coords);
            let err = y.data.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "strided diff {err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_sites(&mut rng, [5, 5, 5], 14);
        let (rb, _) = build_rulebook(&s, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).unwrap();
        let rb = Arc::new(rb);
        let x = random_tensor(&mut rng, &[s.len(), 2]);
        let w = random_tensor(&mut rng, &[27, 2, 3]);
        let b = random_tensor(&mut rng, &[3]);
        let r = crate::nn_core::gradcheck::check_inputs(
            &[x, w, b],
            |g, v| g.sparse_conv(v[0], v[1], Some(v[2]), rb.clone()),
            200,
            3,
        )
        .unwrap();
        assert!(r.rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn submanifold_preserves_site_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [0, 1, 7, 30] {
            let s = random_sites(&mut rng, [4, 5, 6], n);
            let (rb, out) = build_rulebook(&s, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).unwrap();
            assert_eq!(out.len(), s.len());
            assert_eq!(rb.pairs[13].len(), s.len());
        }
    }

    fn toy_grid(indices: Vec<[usize; 3]>) -> SparseVoxelGrid {
        let n = indices.len();
        SparseVoxelGrid {
            shape: [32, 32, 40],
            indices,
            features: (0..n * 4).map(|i| 0.1 * (i % 7) as f64 + 0.2).collect(),
            channels: 4,
        }
    }

    #[test]
    fn encoder_shapes_and_support() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = VoxelEncoder::new(&mut store, "vfe", &default_blocks(), &mut rng).unwrap();
        assert_eq!(enc.bev_channels([32, 32, 40]).unwrap(), 128);

        let empty = toy_grid(vec![]);
        let plan = enc.plan(std::slice::from_ref(&empty)).unwrap();
        let mut g = Graph::new();
        let bev = enc.forward(&mut g, &mut store, &[empty], &plan, Mode::Train).unwrap();
        assert_eq!(g.value(bev).shape, vec![1, 128, 4, 4]);
        assert!(g.value(bev).data.iter().all(|&v| v == 0.0));

        // Eval mode so a lone site is not normalized away by its own batch.
        for v in store.ids().filter(|&id| store.name(id).ends_with("bn.beta")).collect::<Vec<_>>() {
            store.value_mut(v).data.iter_mut().for_each(|b| *b = 0.5);
        }
        let one = toy_grid(vec![[21, 9, 17]]);
        let plan = enc.plan(std::slice::from_ref(&one)).unwrap();
        let mut g = Graph::new();
        let bev = enc.forward(&mut g, &mut store, &[one], &plan, Mode::Eval).unwrap();
        let t = g.value(bev);
        let mut nonzero = 0;
        for c in 0..128 {
            for y in 0..4 {
                for x in 0..4 {
                    if t.at4(0, c, y, x) != 0.0 {
                        assert_eq!((x, y), (21 / 8, 9 / 8));
                        nonzero += 1;
                    }
                }
            }
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn encoder_batches_are_independent_in_eval() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = VoxelEncoder::new(&mut store, "vfe", &default_blocks(), &mut rng).unwrap();
        let a = toy_grid(vec![[0, 0, 0], [1, 0, 0], [9, 20, 30]]);
        let b = toy_grid(vec![[5, 5, 5]]);
        let run = |store: &mut ParamStore, grids: &[SparseVoxelGrid]| {
            let plan = enc.plan(grids).unwrap();
            let mut g = Graph::inference();
            let v = enc.forward(&mut g, store, grids, &plan, Mode::Eval).unwrap();
            g.value(v).clone()
        };
        let both = run(&mut store, &[a.clone(), b.clone()]);
        let only_a = run(&mut store, &[a]);
        let only_b = run(&mut store, &[b]);
        let half = both.len() / 2;
        assert_eq!(&both.data[..half], &only_a.data[..]);
        assert_eq!(&both.data[half..], &only_b.data[..]);
    }
}
