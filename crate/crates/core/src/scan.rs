//! Scan orders: permutations that flatten feature tensors into sequences.
//!
//! A position `(band b, row r, col x)` of a `C×H×W` tensor has flat index
//! `b*H*W + r*W + x`. Purely spatial orders are defined on `H*W` indices and
//! apply to every channel alike. `forward[i]` is the source index placed at
//! sequence position `i`.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

/// Which generator produced an order, with its parameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum OrderDescriptor {
    Global {
        height: usize,
        width: usize,
        reverse: bool,
    },
    LocalPatch {
        height: usize,
        width: usize,
        patch: usize,
        reverse: bool,
    },
    CrossCube {
        height: usize,
        width: usize,
        channels: usize,
        spec: CubeSpec,
    },
    Custom,
}

/// A permutation of `[0, L)` together with its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    forward: Vec<usize>,
    inverse: Vec<usize>,
    descriptor: OrderDescriptor,
}

impl ScanOrder {
    /// Wraps an explicit permutation, rejecting anything that is not a
    /// bijection on `[0, len)`.
    pub fn from_forward(forward: Vec<usize>, descriptor: OrderDescriptor) -> Result<Self> {
        let l = forward.len();
        let mut inverse = vec![usize::MAX; l];
        for (i, &j) in forward.iter().enumerate() {
            if j >= l || inverse[j] != usize::MAX {
                return Err(Error::arg(format!(
                    "scan order is not a permutation of 0..{l} (entry {j} at position {i})"
                )));
            }
            inverse[j] = i;
        }
        Ok(ScanOrder {
            forward,
            inverse,
            descriptor,
        })
    }

    pub fn identity(len: usize) -> Self {
        ScanOrder {
            forward: (0..len).collect(),
            inverse: (0..len).collect(),
            descriptor: OrderDescriptor::Custom,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn descriptor(&self) -> &OrderDescriptor {
        &self.descriptor
    }

    /// The order that undoes this one.
    pub fn inverted(&self) -> ScanOrder {
        ScanOrder {
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
            descriptor: OrderDescriptor::Custom,
        }
    }

    /// Applies `other` after `self`: position `i` reads `self[other[i]]`.
    pub fn then(&self, other: &ScanOrder) -> Result<ScanOrder> {
        if other.len() != self.len() {
            return Err(Error::dim(format!(
                "cannot compose orders of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        let forward = other.forward.iter().map(|&i| self.forward[i]).collect();
        ScanOrder::from_forward(forward, OrderDescriptor::Custom)
    }

    /// `out[i] = values[forward[i]]`.
    pub fn gather<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.forward.iter().map(|&j| values[j]).collect()
    }
}

/// Patch side and spatial-spectral cube dimensions for the cross scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CubeSpec {
    pub patch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Default for CubeSpec {
    fn default() -> Self {
        CubeSpec {
            patch: 4,
            h: 2,
            w: 2,
            c: 4,
        }
    }
}

impl fmt::Display for CubeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P={} cube={}x{}x{}", self.patch, self.h, self.w, self.c)
    }
}

impl CubeSpec {
    /// Checks that patches tile `H×W` and cubes tile a `P×P×C` patch.
    pub fn validate(&self, height: usize, width: usize, channels: usize) -> Result<()> {
        let CubeSpec { patch, h, w, c } = *self;
        if patch == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::dim(format!("cube spec {self} has a zero size")));
        }
        if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::dim(format!(
                "patch side {patch} must divide H={height} and W={width}"
            )));
        }
        if patch % h != 0 || patch % w != 0 || !channels.is_multiple_of(c) {
            return Err(Error::dim(format!(
                "cube {h}x{w}x{c} must tile a {patch}x{patch}x{channels} patch"
            )));
        }
        Ok(())
    }
}

fn finish(mut forward: Vec<usize>, reverse: bool, descriptor: OrderDescriptor) -> ScanOrder {
    if reverse {
        forward.reverse();
    }
    ScanOrder::from_forward(forward, descriptor).expect("generators emit permutations")
}

/// Row-major traversal of an `H×W` grid, optionally reversed.
pub fn global_order(height: usize, width: usize, reverse: bool) -> ScanOrder {
    finish(
        (0..height * width).collect(),
        reverse,
        OrderDescriptor::Global { height, width, reverse },
    )
}

/// Visits `P×P` patches row-major over the patch grid and pixels row-major
/// inside each patch.
pub fn local_patch_order(height: usize, width: usize, patch: usize, reverse: bool) -> Result<ScanOrder> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::dim(format!(
            "patch side {patch} must divide H={height} and W={width}"
        )));
    }
    let mut forward = Vec::with_capacity(height * width);
    for pr in 0..height / patch {
        for pc in 0..width / patch {
            for r in 0..patch {
                for x in 0..patch {
                    forward.push((pr * patch + r) * width + pc * patch + x);
                }
            }
        }
    }
    Ok(finish(
        forward,
        reverse,
        OrderDescriptor::LocalPatch {
            height,
            width,
            patch,
            reverse,
        },
    ))
}

/// Spatial-spectral cube order over a `C×H×W` tensor.
///
/// `P×P×C` patches are visited row-major. Inside a patch, channel blocks of
/// `c` bands are the outer loop and `h×w` spatial cubes are visited
/// row-major within each block. Inside a cube the band index varies
/// fastest, then pixels row-major, so consecutive elements are adjacent
/// bands of one pixel and then neighbouring pixels.
pub fn cross_cube_order(height: usize, width: usize, channels: usize, spec: CubeSpec) -> Result<ScanOrder> {
    spec.validate(height, width, channels)?;
    let CubeSpec { patch, h, w, c } = spec;
    let plane = height * width;
    let mut forward = Vec::with_capacity(channels * plane);
    for pr in 0..height / patch {
        for pc in 0..width / patch {
            for cb in 0..channels / c {
                for cr in 0..patch / h {
                    for cc in 0..patch / w {
                        for r in 0..h {
                            for x in 0..w {
                                let row = pr * patch + cr * h + r;
                                let col = pc * patch + cc * w + x;
                                for b in 0..c {
                                    forward.push((cb * c + b) * plane + row * width + col);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(finish(
        forward,
        false,
        OrderDescriptor::CrossCube {
            height,
            width,
            channels,
            spec,
        },
    ))
}

/// Pixel-by-pixel spectral scan over the same patch tiling: the full
/// spectrum of each pixel in turn, pixels row-major within `P×P` patches.
/// This is the cross order with `1×1×C` cubes and serves as the locality
/// baseline.
pub fn spectral_pixel_order(height: usize, width: usize, channels: usize, patch: usize) -> Result<ScanOrder> {
    cross_cube_order(
        height,
        width,
        channels,
        CubeSpec {
            patch,
            h: 1,
            w: 1,
            c: channels,
        },
    )
}

/// Outcome of [`validate_order`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrderReport {
    pub is_bijection: bool,
    /// Largest `|forward[i+1] - forward[i]|`.
    pub max_neighbor_distance: usize,
}

/// Checks bijectivity and measures the largest flat-index jump between
/// consecutive sequence positions.
pub fn validate_order(order: &ScanOrder) -> OrderReport {
    let fwd = order.forward();
    let l = fwd.len();
    let mut seen = vec![false; l];
    let mut is_bijection = order.inverse.len() == l;
    for (i, &j) in fwd.iter().enumerate() {
        if j >= l || seen[j] || order.inverse.get(j) != Some(&i) {
            is_bijection = false;
            break;
        }
        seen[j] = true;
    }
    let max_neighbor_distance = fwd.windows(2).map(|p| p[0].abs_diff(p[1])).max().unwrap_or(0);
    OrderReport {
        is_bijection,
        max_neighbor_distance,
    }
}

/// The four spatial orders used by the local-enhanced scan.
#[derive(Clone, Debug)]
pub struct SpatialOrders {
    pub global_fwd: Arc<ScanOrder>,
    pub global_rev: Arc<ScanOrder>,
    pub local_fwd: Arc<ScanOrder>,
    pub local_rev: Arc<ScanOrder>,
}

impl SpatialOrders {
    pub fn as_array(&self) -> [&Arc<ScanOrder>; 4] {
        [&self.global_fwd, &self.global_rev, &self.local_fwd, &self.local_rev]
    }
}

/// Memoizes generated orders by descriptor. Reads take a shared lock;
/// insertion is exclusive.
#[derive(Default)]
pub struct OrderCache {
    orders: RwLock<HashMap<OrderDescriptor, Arc<ScanOrder>>>,
}

impl OrderCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn get_or_insert(&self, key: OrderDescriptor, make: impl FnOnce() -> Result<ScanOrder>) -> Result<Arc<ScanOrder>> {
        if let Some(o) = self.orders.read().expect("order cache poisoned").get(&key) {
            return Ok(Arc::clone(o));
        }
        let order = Arc::new(make()?);
        let mut map = self.orders.write().expect("order cache poisoned");
        Ok(Arc::clone(map.entry(key).or_insert(order)))
    }

    pub fn global(&self, height: usize, width: usize, reverse: bool) -> Arc<ScanOrder> {
        let key = OrderDescriptor::Global { height, width, reverse };
        self.get_or_insert(key, || Ok(global_order(height, width, reverse)))
            .expect("global order is infallible")
    }

    pub fn local(&self, height: usize, width: usize, patch: usize, reverse: bool) -> Result<Arc<ScanOrder>> {
        let key = OrderDescriptor::LocalPatch {
            height,
            width,
            patch,
            reverse,
        };
        self.get_or_insert(key, || local_patch_order(height, width, patch, reverse))
    }

    pub fn cross(&self, height: usize, width: usize, channels: usize, spec: CubeSpec) -> Result<Arc<ScanOrder>> {
        let key = OrderDescriptor::CrossCube {
            height,
            width,
            channels,
            spec,
        };
        self.get_or_insert(key, || cross_cube_order(height, width, channels, spec))
    }

    pub fn spatial(&self, height: usize, width: usize, patch: usize) -> Result<SpatialOrders> {
        Ok(SpatialOrders {
            global_fwd: self.global(height, width, false),
            global_rev: self.global(height, width, true),
            local_fwd: self.local(height, width, patch, false)?,
            local_rev: self.local(height, width, patch, true)?,
        })
    }

    pub fn len(&self) -> usize {
        self.orders.read().expect("order cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
