use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use mcdseg::checkpoint;
use mcdseg::data::{
    self, generate_synthetic, load_dataset, load_dataset_dir, rasterize, save_dataset, split,
    SynthConfig,
};
use mcdseg::unet::{build_unet, UNetConfig};
use mcdseg::Error;

fn small_synth(count: usize) -> SynthConfig {
    SynthConfig {
        count,
        extent: 16,
        groups: 4,
        radius: [2.0, 3.5],
        ..SynthConfig::default()
    }
}

fn write_rgb(path: &Path, w: u32, h: u32) {
    RgbImage::from_fn(w, h, |x, y| Rgb([x as u8 * 10, y as u8 * 10, 77]))
        .save(path)
        .unwrap();
}

fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)]))
        .save(path)
        .unwrap();
}

fn dirs(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let (i, m) = (root.join("images"), root.join("masks"));
    fs::create_dir_all(&i).unwrap();
    fs::create_dir_all(&m).unwrap();
    (i, m)
}

#[test]
fn dataset_round_trip_quantizes_images_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ds = generate_synthetic(&small_synth(12)).unwrap();
    split(&mut ds, [0.5, 0.25, 0.25], 9).unwrap();
    save_dataset(&ds, tmp.path()).unwrap();
    let back = load_dataset_dir(tmp.path()).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.items.iter().zip(&back.items) {
        assert_eq!(a.stem, b.stem);
        assert_eq!(a.mask, b.mask);
        assert_eq!((a.group, a.split), (b.group, b.split));
        assert_eq!(a.synth, b.synth);
        let worst = a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0, "{worst}");
    }
    back.check_group_isolation().unwrap();
}

#[test]
fn sidecar_re_rasterizes_to_the_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&small_synth(8)).unwrap();
    save_dataset(&ds, tmp.path()).unwrap();
    for item in &ds.items {
        let text = fs::read_to_string(tmp.path().join("meta").join(format!("{}.json", item.stem)))
            .unwrap();
        let meta: data::SynthMeta = serde_json::from_str(&text).unwrap();
        assert_eq!(rasterize(&meta.cells, 16, 16), item.mask);
    }
}

#[test]
fn three_pairs_load_with_threshold_128() {
    let tmp = tempfile::tempdir().unwrap();
    let (i, m) = dirs(tmp.path());
    for stem in ["g3_a", "g3_b", "plain"] {
        write_rgb(&i.join(format!("{stem}.png")), 5, 4);
        write_gray(&m.join(format!("{stem}.png")), 5, 4, |x, _| {
            if x == 0 {
                128
            } else {
                127
            }
        });
    }
    let ds = load_dataset(&i, &m).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!((ds.height, ds.width), (4, 5));
    for item in &ds.items {
        assert_eq!(item.image.shape(), &[3, 4, 5]);
        assert_eq!(item.mask.count(), 4);
        assert!(item.mask.get(2, 0) && !item.mask.get(2, 1));
    }
    let groups: Vec<u32> = ds.items.iter().map(|i| i.group).collect();
    assert_eq!(groups, vec![3, 3, 4]);
    assert_eq!(ds.items[0].image.data()[1], 10.0 / 255.0);
}

#[test]
fn missing_counterpart_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let (i, m) = dirs(tmp.path());
    write_rgb(&i.join("a.png"), 4, 4);
    write_gray(&m.join("a.png"), 4, 4, |_, _| 0);
    write_gray(&m.join("b.png"), 4, 4, |_, _| 0);
    let err = load_dataset(&i, &m).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains('b'), "{err}");
}

#[test]
fn rgb_mask_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (i, m) = dirs(tmp.path());
    write_rgb(&i.join("a.png"), 4, 4);
    write_rgb(&m.join("a.png"), 4, 4);
    assert!(matches!(load_dataset(&i, &m), Err(Error::Data(_))));
}

#[test]
fn size_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (i, m) = dirs(tmp.path());
    write_rgb(&i.join("a.png"), 4, 4);
    write_gray(&m.join("a.png"), 4, 5, |_, _| 0);
    assert!(matches!(load_dataset(&i, &m), Err(Error::Data(_))));
}

#[test]
fn manifest_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ds = generate_synthetic(&small_synth(8)).unwrap();
    split(&mut ds, [0.5, 0.25, 0.25], 2).unwrap();
    let p = tmp.path().join("manifest.csv");
    data::write_manifest(&ds, &p).unwrap();
    let rows = data::read_manifest(&p).unwrap();
    assert_eq!(rows.len(), ds.len());
    for (item, row) in ds.items.iter().zip(&rows) {
        assert_eq!(row, &(item.stem.clone(), item.group, item.split));
    }
    fs::write(&p, "stem,group,split\nx,1,sideways\n").unwrap();
    assert!(matches!(data::read_manifest(&p), Err(Error::Format { .. })));
}

fn tiny_model() -> mcdseg::unet::ModelGraph {
    build_unet(&UNetConfig {
        input_extent: 16,
        base_width: 2,
        depth: 2,
        bottleneck_extent: 4,
        init_seed: 5,
        ..UNetConfig::default()
    })
    .unwrap()
}

#[test]
fn checkpoint_file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.ckpt");
    let model = tiny_model();
    checkpoint::save(&model, &p).unwrap();
    let back = checkpoint::load(&p).unwrap();
    assert_eq!(checkpoint::encode(&back).unwrap(), fs::read(&p).unwrap());
    assert_eq!(
        checkpoint::checksum(&back).unwrap(),
        checkpoint::checksum(&model).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.ckpt");
    let mut bytes = checkpoint::encode(&tiny_model()).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&p), Err(Error::Checkpoint(_))));
    fs::write(&p, &bytes[..20]).unwrap();
    assert!(matches!(checkpoint::load(&p), Err(Error::Checkpoint(_))));
}
