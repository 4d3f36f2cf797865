//! Layers, normalization modes and the multi-head incremental classifier.

mod layers;
mod model;
mod serialize;

pub use layers::{altnorm_forward, channel_stats, AdaptNorm, AltNorm, BatchNormLayer, Conv2d, Linear, NormMode, StatelessNorm};
pub use model::{
    snapshot_model, ArchSpec, Family, ForwardOutput, HeadInit, IncrementalModel, Inference, Layer, NormKind,
    ParamBindings, ParamInfo, ParamLocation, ParamRole, ParamScope, TeacherSnapshot,
};
pub use serialize::{StateScope, FORMAT_VERSION, MAGIC};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::Tensor;

    fn mlp(norm: NormKind) -> IncrementalModel {
        IncrementalModel::build(ArchSpec { family: Family::MicroMlp, norm }, &[6], 11).unwrap()
    }

    fn batch(n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|i| ((i * 37 % 11) as f64) / 11.0).collect()).unwrap()
    }

    #[test]
    fn zero_heads_emit_zero_logits() {
        let mut m = mlp(NormKind::Batch);
        m.add_task_head(3, HeadInit::Zeros, 0).unwrap();
        m.add_task_head(2, HeadInit::Zeros, 0).unwrap();
        let out = m.infer(&batch(4, 6), NormMode::Eval, false).unwrap();
        assert_eq!(out.logits().shape(), &[4, 5]);
        assert!(out.logits().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic_and_pure() {
        let mut m = mlp(NormKind::Batch);
        m.add_task_head(3, HeadInit::KaimingUniform, 5).unwrap();
        let stats = m.scoped_checksum(StateScope::RunningStats);
        let a = m.infer(&batch(5, 6), NormMode::Eval, true).unwrap();
        let b = m.infer(&batch(5, 6), NormMode::Eval, true).unwrap();
        assert_eq!(a.logits(), b.logits());
        assert_eq!(a.features.unwrap().shape(), &[5, 64]);
        assert_eq!(stats, m.scoped_checksum(StateScope::RunningStats));
    }

    #[test]
    fn single_dense_backbone_hand_logits() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dense = Linear { weight: w, bias: Tensor::new(vec![2], vec![0.5, -0.5]).unwrap() };
        let mut m = IncrementalModel::from_layers(vec![2], vec![Layer::Dense(dense)], 2);
        m.add_task_head(1, HeadInit::Zeros, 0).unwrap();
        m.heads_mut()[0].weight = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let out = m.infer(&x, NormMode::Eval, true).unwrap();
        // unit vector e2 selects row 2 of W: [3, 4] + bias -> [3.5, 3.5]; head sums -> 7
        assert_eq!(out.features.unwrap().values(), &[3.5, 3.5]);
        assert_eq!(out.heads[0].values(), &[7.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let mut m = mlp(NormKind::Batch);
        m.add_task_head(2, HeadInit::Zeros, 0).unwrap();
        assert!(matches!(m.infer(&batch(3, 5), NormMode::Eval, false), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn add_task_head_contracts() {
        let mut m = mlp(NormKind::Batch);
        m.add_task_head(2, HeadInit::KaimingUniform, 1).unwrap();
        m.add_task_head(3, HeadInit::KaimingUniform, 1).unwrap();
        let backbone = m.scoped_checksum(StateScope::Backbone);
        let head0 = m.scoped_checksum(StateScope::Head(0));
        m.add_task_head(5, HeadInit::KaimingUniform, 1).unwrap();
        assert_eq!(m.num_heads(), 3);
        assert_eq!(m.num_classes(), 10);
        assert_eq!(backbone, m.scoped_checksum(StateScope::Backbone));
        assert_eq!(head0, m.scoped_checksum(StateScope::Head(0)));
        assert!(matches!(m.add_task_head(0, HeadInit::Zeros, 1), Err(crate::Error::Parameter(_))));

        let mut a = mlp(NormKind::Batch);
        let mut b = mlp(NormKind::Batch);
        a.add_task_head(4, HeadInit::KaimingUniform, 99).unwrap();
        b.add_task_head(4, HeadInit::KaimingUniform, 99).unwrap();
        assert_eq!(a.heads()[0], b.heads()[0]);
    }

    #[test]
    fn builders_are_seed_deterministic() {
        for family in [Family::MicroMlp, Family::MicroCnn] {
            let arch = ArchSpec { family, norm: NormKind::Batch };
            let shape: &[usize] = if family == Family::MicroMlp { &[6] } else { &[1, 8, 8] };
            let a = IncrementalModel::build(arch, shape, 3).unwrap();
            let b = IncrementalModel::build(arch, shape, 3).unwrap();
            let c = IncrementalModel::build(arch, shape, 4).unwrap();
            assert_eq!(a.checksum(), b.checksum());
            assert_ne!(a.checksum(), c.checksum());
        }
    }

    #[test]
    fn micro_cnn_runs_all_norm_variants() {
        let x = Tensor::new(vec![3, 1, 8, 8], (0..192).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap();
        for norm in [NormKind::Batch, NormKind::None, NormKind::Layer, NormKind::Group(4)] {
            let mut m = IncrementalModel::build(ArchSpec { family: Family::MicroCnn, norm }, &[1, 8, 8], 1).unwrap();
            m.add_task_head(2, HeadInit::KaimingUniform, 1).unwrap();
            let out = m.infer(&x, NormMode::Train, true).unwrap();
            assert_eq!(out.logits().shape(), &[3, 2]);
            assert_eq!(out.features.unwrap().shape(), &[3, 32]);
        }
    }

    #[test]
    fn snapshot_is_isolated_from_student_updates() {
        let mut student = mlp(NormKind::Batch);
        student.add_task_head(2, HeadInit::KaimingUniform, 1).unwrap();
        let snap = snapshot_model(&student);
        let before = snap.checksum();
        assert_eq!(snapshot_model(snap.model()).checksum(), before);

        let mut g = Graph::new();
        let x = g.param(&batch(4, 6), false);
        let out = student.forward(&mut g, x, NormMode::Train, ParamScope::All).unwrap();
        let loss = g.cross_entropy(out.heads[0], &[0, 1, 0, 1]).unwrap();
        let grads = g.backward(loss).unwrap();
        student.accumulate_gradients(&out.bindings, &grads).unwrap();
        for p in student.parameters_mut() {
            let step: Vec<f64> = p.values().iter().zip(p.grad().unwrap()).map(|(v, g)| v - 0.1 * g).collect();
            p.assign(&step).unwrap();
        }
        assert_ne!(student.checksum(), before);
        assert_eq!(snap.checksum(), before);
    }

    #[test]
    fn adapt_stats_only_moves_running_statistics() {
        let mut m = mlp(NormKind::Batch);
        m.add_task_head(2, HeadInit::KaimingUniform, 1).unwrap();
        let mut snap = snapshot_model(&m);
        let params = snap.model().scoped_checksum(StateScope::Parameters);
        let stats = snap.model().scoped_checksum(StateScope::RunningStats);

        let mut g = Graph::new();
        let x = g.param(&batch(4, 6), false);
        let out = snap.model_mut().forward(&mut g, x, NormMode::AdaptStats(AdaptNorm::BatchStats), ParamScope::All).unwrap();
        let infos = snap.model().param_infos();
        for (i, info) in infos.iter().enumerate() {
            if info.is_norm_affine() {
                assert!(!g.requires_grad(out.bindings.var(i).unwrap()));
            }
        }
        assert_eq!(params, snap.model().scoped_checksum(StateScope::Parameters));
        assert_ne!(stats, snap.model().scoped_checksum(StateScope::RunningStats));
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        for (family, shape, norm) in [
            (Family::MicroMlp, vec![6], NormKind::Batch),
            (Family::MicroCnn, vec![3, 8, 8], NormKind::Group(4)),
            (Family::MicroCnn, vec![1, 8, 8], NormKind::Layer),
        ] {
            let mut m = IncrementalModel::build(ArchSpec { family, norm }, &shape, 2).unwrap();
            m.add_task_head(3, HeadInit::KaimingUniform, 2).unwrap();
            let bytes = m.to_bytes();
            assert_eq!(&bytes[..4], b"CLTA");
            assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
            let back = IncrementalModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn deserialization_rejects_corruption() {
        let m = mlp(NormKind::Batch);
        let mut bytes = m.to_bytes();
        assert!(IncrementalModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(IncrementalModel::from_bytes(&bytes).is_err());
    }
}
