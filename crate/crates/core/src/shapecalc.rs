//! Output-volume arithmetic for convolution and max-pooling layers, and a
//! chain validator used to check architectures before any weights exist.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `width × height × depth` activation volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VolumeShape {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl VolumeShape {
    pub const fn new(width: usize, height: usize, depth: usize) -> Self {
        Self {
            width,
            height,
            depth,
        }
    }

    pub fn volume(&self) -> usize {
        self.width * self.height * self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filter: usize,
    pub num_filters: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(filter: usize, num_filters: usize, padding: usize, stride: usize) -> Self {
        Self {
            filter,
            num_filters,
            padding,
            stride,
        }
    }

    /// Stride-1 convolution whose padding keeps the spatial size (odd filters only).
    pub const fn same(filter: usize, num_filters: usize) -> Self {
        Self::new(filter, num_filters, same_padding(filter), 1)
    }
}

/// Padding that preserves spatial size for an odd filter at stride 1.
pub const fn same_padding(filter: usize) -> usize {
    filter.saturating_sub(1) / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub const fn new(window: usize, stride: usize) -> Self {
        Self { window, stride }
    }
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::InvalidConfig(format!("{name} must be >= 1")))
    } else {
        Ok(())
    }
}

/// `X2 = ⌊(X1 + 2P − F) / S⌋ + 1`, likewise for Y; depth becomes K.
pub fn conv_output_shape(input: VolumeShape, spec: ConvSpec) -> Result<VolumeShape> {
    check_positive("filter extent", spec.filter)?;
    check_positive("filter count", spec.num_filters)?;
    check_positive("stride", spec.stride)?;
    let padded_w = input.width + 2 * spec.padding;
    let padded_h = input.height + 2 * spec.padding;
    if padded_w < spec.filter || padded_h < spec.filter {
        return Err(Error::FilterTooLarge {
            width: input.width,
            height: input.height,
            filter: spec.filter,
            padding: spec.padding,
        });
    }
    Ok(VolumeShape {
        width: (padded_w - spec.filter) / spec.stride + 1,
        height: (padded_h - spec.filter) / spec.stride + 1,
        depth: spec.num_filters,
    })
}

/// `X2 = ⌊(X1 − F) / S⌋ + 1`, likewise for Y; depth unchanged.
pub fn pool_output_shape(input: VolumeShape, spec: PoolSpec) -> Result<VolumeShape> {
    check_positive("pool window", spec.window)?;
    check_positive("stride", spec.stride)?;
    if input.width < spec.window || input.height < spec.window {
        return Err(Error::WindowTooLarge {
            width: input.width,
            height: input.height,
            window: spec.window,
        });
    }
    Ok(VolumeShape {
        width: (input.width - spec.window) / spec.stride + 1,
        height: (input.height - spec.window) / spec.stride + 1,
        depth: input.depth,
    })
}

/// Geometry-only description of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerGeom {
    Conv(ConvSpec),
    Pool(PoolSpec),
    /// Collapses the spatial dimensions by averaging; yields a depth-length vector.
    GlobalAvgPool,
    Flatten,
    Dense(usize),
    /// Element-wise layers (activations, dropout) that keep the shape.
    Elementwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainShape {
    Volume(VolumeShape),
    Vector(usize),
}

impl ChainShape {
    pub fn len(&self) -> usize {
        match self {
            ChainShape::Volume(v) => v.volume(),
            ChainShape::Vector(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shape after each layer of `layers`, starting from `input`.
pub fn validate_chain(input: VolumeShape, layers: &[LayerGeom]) -> Result<Vec<ChainShape>> {
    if layers.is_empty() {
        return Err(Error::EmptyChain);
    }
    let mut current = ChainShape::Volume(input);
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        current = match (*layer, current) {
            (LayerGeom::Conv(spec), ChainShape::Volume(v)) => ChainShape::Volume(conv_output_shape(v, spec)?),
            (LayerGeom::Pool(spec), ChainShape::Volume(v)) => ChainShape::Volume(pool_output_shape(v, spec)?),
            (LayerGeom::GlobalAvgPool, ChainShape::Volume(v)) => ChainShape::Vector(v.depth),
            (LayerGeom::Flatten, ChainShape::Volume(v)) => ChainShape::Vector(v.volume()),
            (LayerGeom::Flatten, ChainShape::Vector(n)) => ChainShape::Vector(n),
            (LayerGeom::Dense(width), ChainShape::Vector(_)) => {
                check_positive("dense width", width)?;
                ChainShape::Vector(width)
            }
            (LayerGeom::Dense(width), ChainShape::Volume(v)) if v.width == 1 && v.height == 1 => {
                check_positive("dense width", width)?;
                ChainShape::Vector(width)
            }
            (LayerGeom::Dense(_), ChainShape::Volume(_)) => return Err(Error::DenseBeforeFlatten(i)),
            (LayerGeom::Elementwise, s) => s,
            (other, ChainShape::Vector(n)) => {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} ({other:?}) needs a spatial volume but receives a {n}-vector"
                )))
            }
        };
        shapes.push(current);
    }
    Ok(shapes)
}
