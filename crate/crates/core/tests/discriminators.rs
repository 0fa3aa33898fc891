use candle_core::{Device, Tensor, Var};
use gclab_core::discriminators::{CropInputs, ImageInputs};
use gclab_core::nn::{to_vec, Adam, AdamConfig};
use gclab_core::{DiscriminatorEnsemble, EnsembleConfig, Member};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RES: usize = 32;

fn ensemble(seed: u64) -> DiscriminatorEnsemble {
    let cfg = EnsembleConfig {
        resolution: RES,
        crop_size: RES,
        ..EnsembleConfig::default()
    };
    DiscriminatorEnsemble::new(seed, cfg).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), lo: f32, hi: f32) -> Tensor {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    Tensor::from_vec((0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>(), shape, &Device::Cpu).unwrap()
}

fn binary(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), p: f64) -> Tensor {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    Tensor::from_vec((0..n).map(|_| f32::from(u8::from(rng.random_bool(p)))).collect::<Vec<f32>>(), shape, &Device::Cpu).unwrap()
}

fn image_inputs(rng: &mut ChaCha8Rng, n: usize) -> ImageInputs {
    ImageInputs {
        image: uniform(rng, (n, 3, RES, RES), -1.0, 1.0),
        mask: binary(rng, (n, 1, RES, RES), 0.4),
        guidance: binary(rng, (n, 5, RES, RES), 0.3),
    }
}

fn crop_inputs(rng: &mut ChaCha8Rng, n: usize) -> CropInputs {
    CropInputs {
        image: uniform(rng, (n, 3, RES, RES), -1.0, 1.0),
        mask: binary(rng, (n, 1, RES, RES), 0.4),
        guidance: binary(rng, (n, 5, RES, RES), 0.3),
        shape: binary(rng, (n, 1, RES, RES), 0.5),
    }
}

fn values(t: &Tensor) -> Vec<f32> {
    to_vec(t).unwrap()
}

#[test]
fn every_member_gives_one_finite_logit_per_element() {
    let e = ensemble(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [1, 3, 4, 6] {
        let x = image_inputs(&mut rng, n);
        let c = crop_inputs(&mut rng, n);
        for m in Member::ALL {
            let logits = if m.is_object() { e.crop_logits(m, &c) } else { e.image_logits(m, &x) }.unwrap();
            assert_eq!(logits.dims(), &[n]);
            assert!(values(&logits).iter().all(|v| v.is_finite()));
            let again = if m.is_object() { e.crop_logits(m, &c) } else { e.image_logits(m, &x) }.unwrap();
            assert_eq!(values(&logits), values(&again));
        }
    }
    let wrong = CropInputs { image: uniform(&mut rng, (1, 3, 16, 16), -1.0, 1.0), ..crop_inputs(&mut rng, 1) };
    assert!(e.d_object(&wrong).is_err());
}

#[test]
fn image_logit_responds_to_hole_pixels() {
    let e = ensemble(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = image_inputs(&mut rng, 4);
    let mask = values(&x.mask);
    let holes: Vec<usize> = (0..RES * RES).filter(|&p| mask[p] == 1.0).collect();
    let base = values(&e.d_image(&x).unwrap());
    let image = values(&x.image);
    let mut sensitive = 0;
    for _ in 0..50 {
        let p = holes[rng.random_range(0..holes.len())];
        let ch = rng.random_range(0..3);
        let mut img = image.clone();
        img[ch * RES * RES + p] += 0.05;
        let moved = ImageInputs { image: Tensor::from_vec(img, (4, 3, RES, RES), &Device::Cpu).unwrap(), ..x.clone() };
        let out = values(&e.d_image(&moved).unwrap());
        sensitive += usize::from(out[0] != base[0]);
    }
    assert!(sensitive >= 45, "{sensitive}/50 hole pixels moved the logit");
}

#[test]
fn semantic_logit_depends_on_guidance() {
    let e = ensemble(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut changed = 0;
    for _ in 0..100 {
        let x = image_inputs(&mut rng, 2);
        let swapped = ImageInputs {
            guidance: Tensor::cat(&[x.guidance.narrow(0, 1, 1).unwrap(), x.guidance.narrow(0, 0, 1).unwrap()], 0).unwrap(),
            ..x.clone()
        };
        let a = values(&e.d_semantic(&x).unwrap());
        let b = values(&e.d_semantic(&swapped).unwrap());
        changed += usize::from(a[0] != b[0]);
    }
    assert!(changed >= 90, "{changed}/100 guidance swaps moved the logit");
}

#[test]
fn object_logit_consumes_the_shape_map() {
    let e = ensemble(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut changed = 0;
    for _ in 0..100 {
        let c = crop_inputs(&mut rng, 1);
        let blank = CropInputs { shape: c.shape.zeros_like().unwrap(), ..c.clone() };
        let a = values(&e.d_object(&c).unwrap());
        let b = values(&e.d_object(&blank).unwrap());
        changed += usize::from(a[0] != b[0]);
    }
    assert!(changed >= 90, "{changed}/100 shape ablations moved the logit");
}

#[test]
fn object_semantic_gradient_reaches_instance_pixels() {
    let e = ensemble(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = crop_inputs(&mut rng, 2);
    let image = Var::from_tensor(&c.image).unwrap();
    let inputs = CropInputs { image: image.as_tensor().clone(), ..c.clone() };
    let logit = e.d_object_semantic(&inputs).unwrap().sum_all().unwrap();
    let grads = logit.backward().unwrap();
    let g = values(grads.get(image.as_tensor()).unwrap());
    let shape = values(&c.shape);
    let inside: Vec<usize> = (0..RES * RES).filter(|&p| shape[p] == 1.0).collect();
    let mut nonzero = 0;
    for _ in 0..50 {
        let p = inside[rng.random_range(0..inside.len())];
        let ch = rng.random_range(0..3);
        nonzero += usize::from(g[ch * RES * RES + p] != 0.0);
    }
    assert!(nonzero >= 45, "{nonzero}/50 instance pixels with gradient");
}

#[test]
fn zeroed_projection_reduces_to_branch_b() {
    let e = ensemble(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = image_inputs(&mut rng, 3);
    let before = values(&e.d_semantic(&x).unwrap());
    e.image_semantic_d.zero_projection().unwrap();
    let fused = values(&e.d_semantic(&x).unwrap());
    let branch_b = values(&e.image_semantic_d.forward_branch_b(&x.concat().unwrap()).unwrap());
    assert_eq!(fused, branch_b);
    assert_ne!(before, fused);

    let c = crop_inputs(&mut rng, 2);
    e.object_semantic_d.zero_projection().unwrap();
    let fused = values(&e.d_object_semantic(&c).unwrap());
    let branch_b = values(&e.object_semantic_d.forward_branch_b(&c.concat().unwrap()).unwrap());
    assert_eq!(fused, branch_b);
}

#[test]
fn optimizer_steps_leave_the_frozen_encoder_untouched() {
    let e = ensemble(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frozen = e.encoder().checksum().unwrap();
    let before = e.checksums().unwrap();
    let mut opt = Adam::new(AdamConfig::default());
    for _ in 0..3 {
        let x = image_inputs(&mut rng, 2);
        let loss = e.d_semantic(&x).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(e.store(Member::ImageSemanticD), &grads).unwrap();
    }
    let after = e.checksums().unwrap();
    assert_eq!(e.encoder().checksum().unwrap(), frozen);
    assert_eq!(after["frozen_encoder"], before["frozen_encoder"]);
    assert_ne!(after["image_semantic_d"], before["image_semantic_d"]);
    assert_eq!(after["image_d"], before["image_d"]);
}
