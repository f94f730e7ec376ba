use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specxplain_core::attrib::deeplift_rescale;
use specxplain_core::formats::{
    read_attribution, read_model, read_spectrogram, write_attribution, write_model,
    write_spectrogram, FileFormat,
};
use specxplain_core::net::init;
use specxplain_core::pipeline::Spectrogram;
use specxplain_core::{Target, Tensor};

fn spectrogram(w: usize) -> Spectrogram {
    let mut r = ChaCha8Rng::seed_from_u64(w as u64);
    let values = Tensor::from_vec(&[1, 48, w], (0..48 * w).map(|_| r.gen_range(0.0f32..4.0)).collect()).unwrap();
    Spectrogram::new(values, "probe").unwrap()
}

#[test]
fn spectrogram_round_trips_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spectrogram(37);
    for (name, format) in [("s.bin", FileFormat::Bin), ("s.csv", FileFormat::Csv)] {
        let path = dir.path().join(name);
        write_spectrogram(&spec, &path, format).unwrap();
        let back = read_spectrogram(&path, format).unwrap();
        assert_eq!(back.values(), spec.values(), "{name}");
    }
}

#[test]
fn attribution_round_trips_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let model = init::nisqa_like(5, 15, true);
    let spec = spectrogram(15);
    let map = deeplift_rescale(&model, spec.values(), &Tensor::zeros(&[1, 48, 15]).unwrap(), Target::Head).unwrap();
    let path = dir.path().join("m.att.bin");
    write_attribution(&map, &path, FileFormat::Bin).unwrap();
    assert_eq!(read_attribution(&path).unwrap(), map);
}

#[test]
fn saved_model_reproduces_forward_pass_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let model = init::nisqa_like(6, 15, true);
    let manifest = dir.path().join("model.json");
    write_model(&model, &manifest).unwrap();
    let loaded = read_model(&manifest).unwrap();
    let x = spectrogram(15);
    assert_eq!(model.forward(x.values()).unwrap().0, loaded.forward(x.values()).unwrap().0);
}

#[test]
fn truncated_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bin");
    write_spectrogram(&spectrogram(10), &path, FileFormat::Bin).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_spectrogram(&path, FileFormat::Bin).is_err());
}
