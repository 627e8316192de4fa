use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type a [`Tensor`](crate::Tensor) can hold.
///
/// Implemented for `f32` (training and analysis) and `f64` (gradient
/// checking). The byte codec is little-endian and is what checkpoints store.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints and dataset files.
    const DTYPE: &'static str;
    /// Encoded width in bytes.
    const BYTES: usize;

    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
    fn put_be(self, out: &mut Vec<u8>);
    fn get_be(bytes: &[u8]) -> Self;

    /// Lossy conversion from a literal; every `f64` is representable within rounding.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to any float")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

macro_rules! impl_scalar {
    ($ty:ty, $tag:literal) => {
        impl Scalar for $ty {
            const DTYPE: &'static str = $tag;
            const BYTES: usize = std::mem::size_of::<$ty>();

            fn put_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn get_le(bytes: &[u8]) -> Self {
                let mut raw = [0u8; std::mem::size_of::<$ty>()];
                raw.copy_from_slice(&bytes[..Self::BYTES]);
                <$ty>::from_le_bytes(raw)
            }
            fn put_be(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_be_bytes());
            }
            fn get_be(bytes: &[u8]) -> Self {
                let mut raw = [0u8; std::mem::size_of::<$ty>()];
                raw.copy_from_slice(&bytes[..Self::BYTES]);
                <$ty>::from_be_bytes(raw)
            }
        }
    };
}

impl_scalar!(f32, "f32");
impl_scalar!(f64, "f64");
