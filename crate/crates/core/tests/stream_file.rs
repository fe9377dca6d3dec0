use cil_core::harness::stream::{decode_stream, encode_stream, FORMAT_VERSION};
use cil_core::harness::{load_stream, save_stream, synth_stream, validate_file, SynthSpec};
use cil_core::CilError;
use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

struct HandTask {
    classes: Vec<u32>,
    train: Vec<(Vec<f32>, u32)>,
    test: Vec<(Vec<f32>, u32)>,
}

/// Writes the on-disk layout field by field, independently of the library
/// encoder.
fn hand_encode(dim: u32, tasks: &[HandTask], text: &[(u32, Vec<f32>)]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"CILE");
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&dim.to_le_bytes());
    b.extend_from_slice(&(tasks.len() as u32).to_le_bytes());
    for t in tasks {
        b.extend_from_slice(&(t.classes.len() as u32).to_le_bytes());
        for c in &t.classes {
            b.extend_from_slice(&c.to_le_bytes());
        }
        b.extend_from_slice(&(t.train.len() as u32).to_le_bytes());
        b.extend_from_slice(&(t.test.len() as u32).to_le_bytes());
        for split in [&t.train, &t.test] {
            for (row, _) in split {
                for v in row {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
            for (_, label) in split {
                b.extend_from_slice(&label.to_le_bytes());
            }
        }
    }
    b.extend_from_slice(&(text.len() as u32).to_le_bytes());
    for (c, v) in text {
        b.extend_from_slice(&c.to_le_bytes());
        for x in v {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc_oracle(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

/// Bitwise CRC-32 (IEEE, reflected, polynomial 0xEDB88320).
fn crc_oracle(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in bytes {
        crc ^= u32::from(byte);
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

fn two_task_fixture() -> (Vec<HandTask>, Vec<(u32, Vec<f32>)>) {
    let tasks = vec![
        HandTask {
            classes: vec![3, 7],
            train: vec![
                (vec![1.0, 0.0, 0.5], 3),
                (vec![0.9, 0.1, 0.4], 3),
                (vec![0.0, 1.0, 0.0], 7),
                (vec![0.1, 0.8, 0.2], 7),
            ],
            test: vec![(vec![1.1, 0.0, 0.5], 3), (vec![0.0, 1.2, 0.1], 7)],
        },
        HandTask {
            classes: vec![1, 4],
            train: vec![
                (vec![0.0, 0.0, 1.0], 1),
                (vec![0.2, 0.0, 0.9], 1),
                (vec![-1.0, 0.0, 0.0], 4),
                (vec![-0.8, 0.3, 0.0], 4),
            ],
            test: vec![(vec![0.0, 0.1, 1.0], 1), (vec![-0.9, 0.0, 0.1], 4)],
        },
    ];
    let text =
        vec![(1, vec![0.0, 0.0, 2.0]), (3, vec![1.0, 0.0, 0.5]), (4, vec![-1.0, 0.0, 0.0]), (7, vec![0.0, 1.0, 0.0])];
    (tasks, text)
}

#[test]
fn hand_written_file_decodes_and_reencodes_byte_for_byte() {
    let (tasks, text) = two_task_fixture();
    let bytes = hand_encode(3, &tasks, &text);
    let loaded = decode_stream(&bytes).unwrap();
    let s = &loaded.stream;
    assert_eq!(s.dim(), 3);
    assert_eq!(s.class_order(), vec![vec![3, 7], vec![1, 4]]);
    assert_eq!(s.task(1).train.labels, vec![1, 1, 4, 4]);
    assert_eq!(s.task(0).test.embeddings.row(1), &[0.0, f64::from(1.2f32), f64::from(0.1f32)]);
    assert_eq!(s.text().raw_vector(1).unwrap(), &[0.0, 0.0, 2.0]);
    assert_eq!(loaded.checksum, crc_oracle(&bytes[..bytes.len() - 4]));
    assert_eq!(encode_stream(s).unwrap(), bytes);
}

#[test]
fn damaged_files_are_rejected_with_the_right_error() {
    let (tasks, text) = two_task_fixture();
    let good = hand_encode(3, &tasks, &text);

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(decode_stream(&magic), Err(CilError::UnsupportedFormat(_))));

    let mut version = good.clone();
    version[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(decode_stream(&version), Err(CilError::UnsupportedFormat(_))));

    for cut in [3, 10, 40, good.len() - 1] {
        assert!(matches!(decode_stream(&good[..cut]), Err(CilError::CorruptFile(_))), "cut at {cut}");
    }

    let mut flipped = good.clone();
    flipped[30] ^= 0x40;
    assert!(matches!(decode_stream(&flipped), Err(CilError::CorruptFile(_))));

    let mut extra = good[..good.len() - 4].to_vec();
    extra.push(0);
    let crc = crc_oracle(&extra);
    extra.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(decode_stream(&extra), Err(CilError::CorruptFile(_))));
}

#[test]
fn contract_breaches_in_a_well_formed_file() {
    let (mut tasks, text) = two_task_fixture();
    tasks[1].classes = vec![1, 3];
    tasks[1].train[2].1 = 3;
    tasks[1].train[3].1 = 3;
    tasks[1].test[1].1 = 3;
    let text_dup: Vec<_> = text.iter().filter(|(c, _)| *c != 4).cloned().collect();
    let bytes = hand_encode(3, &tasks, &text_dup);
    assert!(matches!(decode_stream(&bytes), Err(CilError::ContractViolation(_))));

    let (mut tasks, text) = two_task_fixture();
    tasks[0].test[0].0 = tasks[0].train[0].0.clone();
    assert!(matches!(decode_stream(&hand_encode(3, &tasks, &text)), Err(CilError::ContractViolation(_))));

    let (tasks, text) = two_task_fixture();
    let missing: Vec<_> = text.iter().filter(|(c, _)| *c != 7).cloned().collect();
    assert!(matches!(decode_stream(&hand_encode(3, &tasks, &missing)), Err(CilError::IncompleteTable(7))));

    let (mut tasks, text) = two_task_fixture();
    tasks[0].train[0].1 = 4;
    assert!(matches!(decode_stream(&hand_encode(3, &tasks, &text)), Err(CilError::ContractViolation(_))));
}

#[test]
fn save_load_and_validate_on_disk() {
    let spec = SynthSpec {
        tasks: 3,
        classes_per_task: 4,
        dim: 16,
        train_per_class: 10,
        test_per_class: 5,
        ..Default::default()
    };
    let stream = synth_stream(&spec, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stream.cile");
    let crc = save_stream(&stream, &path).unwrap();
    let loaded = load_stream(&path).unwrap();
    assert_eq!(loaded.checksum, crc);
    assert_eq!(loaded.stream, stream);
    let summary = validate_file(&path).unwrap();
    assert_eq!((summary.dim, summary.tasks, summary.classes), (16, 3, 12));
    assert_eq!((summary.train_samples, summary.test_samples), (120, 60));
    assert_eq!(summary.checksum, format!("{crc:08x}"));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(validate_file(&path), Err(CilError::CorruptFile(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_streams_survive_the_file_format(
        tasks in 1usize..4,
        classes in 1usize..4,
        dim in 2usize..10,
        seed in 0u64..1000,
        rho in 0.0f64..=1.0,
    ) {
        let spec = SynthSpec {
            tasks,
            classes_per_task: classes,
            dim,
            train_per_class: 3,
            test_per_class: 2,
            rho,
            ..Default::default()
        };
        let stream = synth_stream(&spec, seed).unwrap();
        let bytes = encode_stream(&stream).unwrap();
        let back = decode_stream(&bytes).unwrap();
        prop_assert_eq!(&back.stream, &stream);
        prop_assert_eq!(encode_stream(&back.stream).unwrap(), bytes);
    }
}
