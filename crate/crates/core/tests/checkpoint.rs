use bdense::checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
use bdense::optim::{AdamW, AdamWConfig};
use bdense::schedule::ScheduleSpec;
use bdense::{Error, NetSpec, Parameterization, ScoreNet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn spec_strategy() -> impl Strategy<Value = NetSpec> {
    (
        1usize..4,
        prop::collection::vec(1usize..24, 1..4),
        1usize..6,
        0usize..3,
        1usize..5,
        0.1f64..4.0,
    )
        .prop_map(|(channels, hidden, half, param, branches, sigma_data)| NetSpec {
            channels,
            hidden,
            time_dim: 2 * half,
            parameterization: Parameterization::ALL[param],
            sigma_data,
            branches,
        })
}

fn bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    ckpt.write(&mut buf).unwrap();
    buf
}

fn nets_bit_equal(a: &ScoreNet, b: &ScoreNet) -> bool {
    a.spec() == b.spec()
        && a.named_tensors()
            .iter()
            .zip(b.named_tensors())
            .all(|((na, ta), (nb, tb))| *na == nb && ta.bit_eq(tb))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_network_round_trips_bitwise(spec in spec_strategy(), seed in any::<u64>(), edm in any::<bool>()) {
        let net = ScoreNet::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let schedule = if edm { ScheduleSpec::edm_default(500) } else { ScheduleSpec::vp_default(1024) };
        let ckpt = Checkpoint::from_net(&net, &schedule, json!({ "seed": seed }));
        let buf = bytes(&ckpt);
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        prop_assert_eq!(&back.meta, &ckpt.meta);
        prop_assert!(nets_bit_equal(&back.net().unwrap(), &net));
        // a second pass is byte-identical
        prop_assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn raw_float_bits_survive(bits in prop::collection::vec(any::<u32>(), 1..64)) {
        let values: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        let mut ckpt = Checkpoint::from_net(
            &ScoreNet::new(NetSpec::new(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
            &ScheduleSpec::vp_default(8),
            json!(null),
        );
        ckpt.tensors.push(("extra".into(), Tensor::new(vec![values.len()], values).unwrap()));
        let back = Checkpoint::read(bytes(&ckpt).as_slice()).unwrap();
        let got: Vec<u32> = back.tensors.last().unwrap().1.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
    }

    #[test]
    fn truncation_is_always_reported(cut in 0usize..1000) {
        let net = ScoreNet::new(NetSpec { hidden: vec![8], ..NetSpec::new(2) }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let buf = bytes(&Checkpoint::from_net(&net, &ScheduleSpec::vp_default(16), json!({})));
        let cut = cut % buf.len();
        prop_assert!(matches!(Checkpoint::read(&buf[..cut]), Err(Error::Format(_))));
    }
}

#[test]
fn other_versions_are_rejected_before_parsing() {
    let net = ScoreNet::new(NetSpec::new(2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let buf = bytes(&Checkpoint::from_net(&net, &ScheduleSpec::vp_default(1024), json!({})));
    assert_eq!(&buf[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), FORMAT_VERSION);
    for version in [0u32, FORMAT_VERSION + 1, u32::MAX] {
        let mut bad = buf.clone();
        bad[4..8].copy_from_slice(&version.to_le_bytes());
        // garbage after the header must not matter
        bad[8..].iter_mut().for_each(|b| *b = 0xff);
        let err = Checkpoint::read(bad.as_slice()).unwrap_err().to_string();
        assert!(err.contains(&format!("version {version}")), "{err}");
    }
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read(bad.as_slice()).unwrap_err().to_string().contains("magic"));
    let mut long = buf;
    long.push(0);
    assert!(Checkpoint::read(long.as_slice()).is_err());
}

#[test]
fn optimizer_state_and_files_round_trip() {
    let mut net = ScoreNet::new(NetSpec { hidden: vec![16, 16], ..NetSpec::new(2) }, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut opt = AdamW::new(AdamWConfig::with_lr(1e-3));
    for (i, (_, p)) in net.params_mut().into_iter().enumerate() {
        let g: Vec<f32> = (0..p.len()).map(|j| ((i * 31 + j) % 7) as f32 - 3.0).collect();
        p.accumulate_grad(&g).unwrap();
    }
    opt.step(&mut net.params_mut()).unwrap();
    let ckpt = Checkpoint::from_net(&net, &ScheduleSpec::vp_default(1024), json!({ "role": "teacher" }))
        .with_optimizer(&opt)
        .unwrap();
    let path = std::env::temp_dir().join(format!("bdense-ckpt-{}.bdns", std::process::id()));
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(back, ckpt);
    let restored = back.optimizer().unwrap().unwrap();
    let (s0, m0, v0) = opt.state();
    let (s1, m1, v1) = restored.state();
    assert_eq!(s0, s1);
    let flat = |x: &[Vec<f32>]| x.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(flat(m0), flat(m1));
    assert_eq!(flat(v0), flat(v1));
}
