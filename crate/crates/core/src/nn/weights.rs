//! Weight file format: 4-byte magic `SPNW`, a format version byte, then the
//! canonical serialization of every parameter tensor in layer order (weight
//! before bias within a layer). This byte stream is what weight digests hash
//! and what the weight-sync protocol encrypts.

use crate::nn::layer::LayerSpec;
use crate::nn::topology::NetError;
use crate::tensor::{checksum, Tensor, TensorChecksum};

pub const WEIGHT_MAGIC: &[u8; 4] = b"SPNW";
pub const WEIGHT_VERSION: u8 = 1;

pub fn weight_bytes(layers: &[LayerSpec]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.push(WEIGHT_VERSION);
    for layer in layers {
        for p in layer.parameters() {
            out.extend_from_slice(&p.to_bytes());
        }
    }
    out
}

pub fn weight_digest(layers: &[LayerSpec]) -> TensorChecksum {
    checksum(&weight_bytes(layers))
}

/// Parses one canonical tensor starting at `offset`, returning it and the
/// number of bytes consumed.
pub fn parse_tensor_at(bytes: &[u8], offset: usize) -> Result<(Tensor, usize), NetError> {
    let header = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| NetError::WeightFormat("truncated tensor header".into()))?;
    let rank = u32::from_be_bytes(header.try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(NetError::WeightFormat(format!("bad tensor rank {rank}")));
    }
    let mut elems: usize = 1;
    for i in 0..rank {
        let dim_bytes = bytes
            .get(offset + 4 + 4 * i..offset + 8 + 4 * i)
            .ok_or_else(|| NetError::WeightFormat("truncated dims".into()))?;
        let d = u32::from_be_bytes(dim_bytes.try_into().unwrap()) as usize;
        elems = elems
            .checked_mul(d)
            .ok_or_else(|| NetError::WeightFormat("dim overflow".into()))?;
    }
    let total = 4 + 4 * rank + 8 * elems;
    let slice = bytes
        .get(offset..offset + total)
        .ok_or_else(|| NetError::WeightFormat("truncated payload".into()))?;
    let tensor = Tensor::from_bytes(slice)
        .map_err(|e| NetError::WeightFormat(format!("bad tensor: {e}")))?;
    Ok((tensor, total))
}

/// Replaces the parameters of `layers` with those in a weight file. Shapes
/// must match the existing parameters exactly.
pub fn apply_weight_bytes(layers: &mut [LayerSpec], bytes: &[u8]) -> Result<(), NetError> {
    if bytes.len() < 5 || &bytes[0..4] != WEIGHT_MAGIC {
        return Err(NetError::WeightFormat("missing SPNW magic".into()));
    }
    if bytes[4] != WEIGHT_VERSION {
        return Err(NetError::WeightFormat(format!(
            "unsupported weight format version {}",
            bytes[4]
        )));
    }
    let mut offset = 5;
    for (li, layer) in layers.iter_mut().enumerate() {
        if let LayerSpec::FullyConnected { weight, bias } = layer {
            let (w, used) = parse_tensor_at(bytes, offset)?;
            if w.shape() != weight.shape() {
                return Err(NetError::ParameterShapeMismatch(li));
            }
            *weight = w;
            offset += used;
            if let Some(b) = bias {
                let (nb, used) = parse_tensor_at(bytes, offset)?;
                if nb.shape() != b.shape() {
                    return Err(NetError::ParameterShapeMismatch(li));
                }
                *b = nb;
                offset += used;
            }
        }
    }
    if offset != bytes.len() {
        return Err(NetError::WeightFormat(format!(
            "{} trailing bytes after parameters",
            bytes.len() - offset
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::{initialize, Initializer};
    use crate::nn::topology::NetworkTopology;

    fn net(seed: u64) -> NetworkTopology {
        let topo = NetworkTopology::chain(vec![
            LayerSpec::fully_connected(3, 5, true).unwrap(),
            LayerSpec::Relu,
            LayerSpec::fully_connected(5, 2, false).unwrap(),
        ])
        .unwrap();
        initialize(&topo, Initializer::xavier(seed))
    }

    #[test]
    fn weight_file_round_trip_is_bitwise() {
        let a = net(11);
        let bytes = a.weight_bytes();
        assert_eq!(&bytes[0..4], b"SPNW");
        assert_eq!(bytes[4], 1);

        let mut layers = net(99).layers().to_vec();
        apply_weight_bytes(&mut layers, &bytes).unwrap();
        assert_eq!(weight_digest(&layers), a.weight_digest());
    }

    #[test]
    fn digest_stable_across_round_trip() {
        let a = net(5);
        let mut layers = a.layers().to_vec();
        let d0 = weight_digest(&layers);
        let bytes = weight_bytes(&layers);
        apply_weight_bytes(&mut layers, &bytes).unwrap();
        assert_eq!(weight_digest(&layers), d0);
    }

    #[test]
    fn rejects_bad_magic_and_shape() {
        let a = net(1);
        let mut layers = a.layers().to_vec();
        assert!(apply_weight_bytes(&mut layers, b"XXXX\x01junk").is_err());

        let b = NetworkTopology::chain(vec![
            LayerSpec::fully_connected(4, 4, true).unwrap(),
        ])
        .unwrap();
        let mut wrong = b.layers().to_vec();
        assert!(apply_weight_bytes(&mut wrong, &a.weight_bytes()).is_err());
    }
}
