//! Shared fixtures for the criterion benchmarks in `benches/`.
use weave_core::conditioning::{AttentionWeights, ReferenceSet};
use weave_core::geometry::{build_box_room, RoomSpec};
use weave_core::image_io::solid;
use weave_core::rng::Stream;
use weave_core::{Scene, Tensor};

/// The two-instance toy room with flat red and blue references.
pub fn toy() -> (Scene, ReferenceSet) {
    let scene = build_box_room(&RoomSpec::toy()).unwrap();
    let refs = ReferenceSet::from_images(vec![solid([0.9, 0.1, 0.1], 32, 32), solid([0.1, 0.1, 0.9], 32, 32)]).unwrap();
    (scene, refs)
}

pub fn normals(shape: &[usize], rng: &mut Stream) -> Tensor {
    Tensor::new(shape, rng.normals(shape.iter().product())).unwrap()
}

pub struct AttentionInputs {
    pub weights: AttentionWeights,
    pub queries: Tensor,
    pub tokens: Vec<Tensor>,
    pub masks: Vec<Vec<f64>>,
}

/// 256 query positions of width 32 attending to two 16-token references.
pub fn attention_inputs(seed: u64) -> AttentionInputs {
    let mut rng = Stream::new(seed, 0);
    AttentionInputs {
        weights: AttentionWeights {
            w_q: normals(&[32, 32], &mut rng),
            w_k: normals(&[16, 32], &mut rng),
            w_v: normals(&[16, 32], &mut rng),
        },
        queries: normals(&[256, 32], &mut rng),
        tokens: vec![normals(&[16, 16], &mut rng), normals(&[16, 16], &mut rng)],
        masks: vec![vec![0.5; 256]; 2],
    }
}
