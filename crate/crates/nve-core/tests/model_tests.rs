use std::collections::BTreeSet;

use nve_core::model::{
    build_toy_model, embed, forward, inject_outlier, normalize_weights, read_container,
    write_container, LayoutTag, Matrix, ModelSpec, RawTensor, RawWeightContainer, SlotKind,
};

fn spec(seed: u64) -> ModelSpec {
    ModelSpec {
        num_layers: 3,
        hidden_dim: 8,
        ffn_dim: 16,
        num_heads: 2,
        vocab_size: 32,
        seed,
    }
}

#[test]
fn spec_validation() {
    let mut s = spec(1);
    s.num_heads = 3; // 8 % 3 != 0
    assert!(s.validate().is_err());
    s = spec(1);
    s.num_layers = 0;
    assert!(s.validate().is_err());
}

#[test]
fn build_is_deterministic_and_seed_sensitive() {
    let a = build_toy_model(&spec(7)).unwrap();
    let b = build_toy_model(&spec(7)).unwrap();
    let c = build_toy_model(&spec(8)).unwrap();
    assert_eq!(a.weight_digest(), b.weight_digest());
    assert_ne!(a.weight_digest(), c.weight_digest());
    assert_eq!(a.architecture_key(), b.architecture_key());
    assert_ne!(a.architecture_key(), c.architecture_key());
}

#[test]
fn forward_deterministic_and_skipping_is_identity() {
    let model = build_toy_model(&spec(3)).unwrap();
    let tokens = [1u32, 5, 9, 2];
    let a = forward(&model, &tokens, None).unwrap();
    let b = forward(&model, &tokens, None).unwrap();
    assert_eq!(a.hidden, b.hidden);
    assert_eq!(a.taps.len(), 3);
    // Skipping every layer leaves the normalized embeddings.
    let none: BTreeSet<usize> = BTreeSet::new();
    let skipped = forward(&model, &tokens, Some(&none)).unwrap();
    assert!(skipped.taps.is_empty());
    let embedded = embed(&model, &tokens).unwrap();
    let expect: Vec<Vec<f32>> = embedded
        .iter()
        .map(|x| nve_core::model::rms_norm(x, nve_core::model::RMS_EPS))
        .collect();
    assert_eq!(skipped.hidden, expect);
}

#[test]
fn forward_rejects_bad_tokens() {
    let model = build_toy_model(&spec(3)).unwrap();
    assert!(forward(&model, &[], None).is_err());
    assert!(forward(&model, &[99], None).is_err());
}

#[test]
fn outlier_injection_scales_one_slot() {
    let base = build_toy_model(&spec(4)).unwrap();
    let scaled = inject_outlier(&base, 1, SlotKind::Down, 5.0).unwrap();
    for (i, (a, b)) in base.layers.iter().zip(&scaled.layers).enumerate() {
        for slot in SlotKind::ALL {
            if i == 1 && slot == SlotKind::Down {
                for (x, y) in a.slot(slot).data.iter().zip(&b.slot(slot).data) {
                    assert_eq!(*y, *x * 5.0);
                }
            } else {
                assert_eq!(a.slot(slot), b.slot(slot));
            }
        }
    }
    assert!(inject_outlier(&base, 9, SlotKind::Down, 5.0).is_err());
    assert!(inject_outlier(&base, 0, SlotKind::Down, f32::NAN).is_err());
}

fn plain_tensors(model: &nve_core::model::ToyModel) -> Vec<RawTensor> {
    let mut out = Vec::new();
    for (l, lw) in model.layers.iter().enumerate() {
        for slot in SlotKind::ALL {
            let m = lw.slot(slot);
            out.push(RawTensor {
                name: format!("blk.{l}.{}", slot.name()),
                shape: vec![m.rows, m.cols],
                layout: LayoutTag::Plain,
                data: m.data.clone(),
            });
        }
    }
    out
}

#[test]
fn plain_container_passes_through() {
    let model = build_toy_model(&spec(5)).unwrap();
    let raw = RawWeightContainer {
        tensors: plain_tensors(&model),
    };
    let norm = normalize_weights(&raw, &model.spec).unwrap();
    for (a, b) in model.layers.iter().zip(&norm.layers) {
        for slot in SlotKind::ALL {
            assert_eq!(a.slot(slot), b.slot(slot));
        }
    }
}

#[test]
fn fused_qkv_splits_in_row_blocks() {
    let model = build_toy_model(&spec(6)).unwrap();
    let d = model.spec.hidden_dim;
    let mut tensors = Vec::new();
    for (l, lw) in model.layers.iter().enumerate() {
        let mut fused = lw.q.data.clone();
        fused.extend_from_slice(&lw.k.data);
        fused.extend_from_slice(&lw.v.data);
        tensors.push(RawTensor {
            name: format!("blk.{l}.qkv"),
            shape: vec![3 * d, d],
            layout: LayoutTag::FusedQkv,
            data: fused,
        });
        let mut gate_up = lw.gate.data.clone();
        gate_up.extend_from_slice(&lw.up.data);
        tensors.push(RawTensor {
            name: format!("blk.{l}.gate_up"),
            shape: vec![2 * model.spec.ffn_dim, d],
            layout: LayoutTag::FusedGateUp,
            data: gate_up,
        });
        for slot in [SlotKind::O, SlotKind::Down] {
            let m = lw.slot(slot);
            tensors.push(RawTensor {
                name: format!("blk.{l}.{}", slot.name()),
                shape: vec![m.rows, m.cols],
                layout: LayoutTag::Plain,
                data: m.data.clone(),
            });
        }
    }
    let norm = normalize_weights(&RawWeightContainer { tensors }, &model.spec).unwrap();
    for (a, b) in model.layers.iter().zip(&norm.layers) {
        for slot in SlotKind::ALL {
            assert_eq!(a.slot(slot), b.slot(slot), "{}", slot.name());
        }
    }
}

#[test]
fn conv1d_layout_transposes_and_roundtrips() {
    let model = build_toy_model(&spec(7)).unwrap();
    let mut tensors = plain_tensors(&model);
    // Replace layer 0's Q with the (in x out) transposed storage.
    let q = &model.layers[0].q;
    let t = q.transpose();
    assert_eq!(t.transpose(), *q); // transpose is an involution
    tensors[0] = RawTensor {
        name: "blk.0.q".into(),
        shape: vec![t.rows, t.cols],
        layout: LayoutTag::Conv1dTransposed,
        data: t.data.clone(),
    };
    let norm = normalize_weights(&RawWeightContainer { tensors }, &model.spec).unwrap();
    assert_eq!(norm.layers[0].q, *q);
}

#[test]
fn normalize_reports_typed_errors() {
    let model = build_toy_model(&spec(8)).unwrap();
    // Missing slot.
    let mut tensors = plain_tensors(&model);
    tensors.retain(|t| t.name != "blk.1.gate");
    let err = normalize_weights(&RawWeightContainer { tensors }, &model.spec).unwrap_err();
    assert!(err.to_string().contains("gate") && err.to_string().contains('1'));
    // Wrong shape names the tensor.
    let mut tensors = plain_tensors(&model);
    tensors[0].shape = vec![4, 4];
    tensors[0].data.truncate(16);
    let err = normalize_weights(&RawWeightContainer { tensors }, &model.spec).unwrap_err();
    assert!(err.to_string().contains("blk.0.q"));
}

#[test]
fn bias_splitting_and_forward_effect() {
    let model = build_toy_model(&spec(9)).unwrap();
    let d = model.spec.hidden_dim;
    let mut tensors = plain_tensors(&model);
    let bias: Vec<f32> = (0..3 * d).map(|i| i as f32 / 10.0).collect();
    tensors.push(RawTensor {
        name: "blk.0.qkv.bias".into(),
        shape: vec![3 * d],
        layout: LayoutTag::FusedQkv,
        data: bias.clone(),
    });
    let norm = normalize_weights(&RawWeightContainer { tensors }, &model.spec).unwrap();
    assert_eq!(
        norm.layers[0].biases.q.as_deref().unwrap(),
        &bias[0..d]
    );
    assert_eq!(
        norm.layers[0].biases.v.as_deref().unwrap(),
        &bias[2 * d..3 * d]
    );
    assert!(norm.layers[1].biases.q.is_none());
}

#[test]
fn container_io_roundtrip() {
    let model = build_toy_model(&spec(10)).unwrap();
    let raw = RawWeightContainer {
        tensors: plain_tensors(&model),
    };
    let mut buf = Vec::new();
    write_container(&mut buf, &raw).unwrap();
    let back = read_container(&mut buf.as_slice()).unwrap();
    assert_eq!(back, raw);
    buf[0] = b'Z';
    assert!(read_container(&mut buf.as_slice()).is_err());
}

#[test]
fn submodel_selects_layers() {
    let model = build_toy_model(&spec(11)).unwrap();
    let sub = model.submodel(&[2, 0]).unwrap();
    assert_eq!(sub.spec.num_layers, 2);
    assert_eq!(sub.layers[0], model.layers[2]);
    assert_eq!(sub.layers[1], model.layers[0]);
    assert!(model.submodel(&[5]).is_err());
    assert!(model.submodel(&[]).is_err());
}

#[test]
fn matrix_shape_checks() {
    assert!(Matrix::new(2, 3, vec![0.0; 5]).is_err());
    let m = Matrix::new(2, 3, (0..6).map(|x| x as f32).collect()).unwrap();
    assert_eq!(m.row(1), &[3.0, 4.0, 5.0]);
    assert_eq!(m.transpose().row(0), &[0.0, 3.0]);
}
