//! Regenerate the fuzz corpus seeds:
//! `cargo run -p dmsm --example gen_fuzz_corpus -- fuzz/corpus`

use dmsm::backbone::{BackboneModel, ModelConfig};
use dmsm::config::RunConfig;
use dmsm::data::{self, ArrayMeta, DatasetParams};
use dmsm::kspace::generate_vd_mask;
use dmsm::schedule::ScheduleConfig;
use dmsm::trainer::{checkpoint_to_bytes, Adam, LossLogRecord};
use std::path::Path;

fn write(path: &Path, bytes: &[u8]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
    println!("wrote {}", path.display());
}

fn main() {
    let root = std::env::args().nth(1).unwrap_or_else(|| "fuzz/corpus".into());
    let root = Path::new(&root);

    // run_config: the default configuration plus a minimal override.
    let cfg = RunConfig::default();
    write(&root.join("run_config/default.json"), cfg.to_pretty_json().unwrap().as_bytes());
    write(
        &root.join("run_config/minimal.json"),
        br#"{"train": {"steps": 10, "lr": 0.001}}"#,
    );

    // dataset_manifest: build a tiny dataset in a temp dir and lift its
    // manifest.
    let tmp = std::env::temp_dir().join(format!("dmsm-corpus-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&tmp);
    let params = DatasetParams {
        n_train: 1,
        n_val: 1,
        n_test: 1,
        height: 16,
        width: 16,
        n_coils: 2,
        seed: 1,
        accelerations: vec![2.0],
        acs_lines: 2,
        mask_seed: 2,
    };
    let manifest = data::build_dataset(&params, &tmp).unwrap();
    write(
        &root.join("dataset_manifest/small.json"),
        &serde_json::to_vec_pretty(&manifest).unwrap(),
    );

    // array_meta: one sidecar per dtype.
    let complex_meta = std::fs::read(data::meta_path(&tmp.join("slices/0000.img.raw"))).unwrap();
    write(&root.join("array_meta/complex64.json"), &complex_meta);
    let mask_meta = std::fs::read(data::meta_path(&tmp.join("masks/r2/0000.mask.raw"))).unwrap();
    write(&root.join("array_meta/uint8_mask.json"), &mask_meta);
    let float_meta = ArrayMeta {
        format_version: data::META_FORMAT_VERSION,
        shape: vec![8, 8],
        dtype: "float32".into(),
        byte_order: "little".into(),
        acs_region: None,
        nominal_acceleration: None,
    };
    write(
        &root.join("array_meta/float32.json"),
        &serde_json::to_vec_pretty(&float_meta).unwrap(),
    );

    // raw_array: newline-framed sidecar + payload.
    let mut framed = complex_meta.clone();
    framed.retain(|&b| b != b'\n');
    framed.push(b'\n');
    framed.extend_from_slice(&std::fs::read(tmp.join("slices/0000.img.raw")).unwrap());
    write(&root.join("raw_array/complex64.bin"), &framed);
    let mut framed = mask_meta.clone();
    framed.retain(|&b| b != b'\n');
    framed.push(b'\n');
    let mask = generate_vd_mask(16, 16, 2.0, 2, 2).unwrap();
    framed.extend_from_slice(mask.grid());
    write(&root.join("raw_array/uint8_mask.bin"), &framed);

    // checkpoint: a tiny trained-shape container.
    let model_cfg = ModelConfig {
        channels: 4,
        n_pab: 1,
        concat_blocks: vec![1],
        time_embed_dim: 8,
        time_mlp_layers: 2,
        use_dc: true,
    };
    let model = BackboneModel::init(&model_cfg, 9).unwrap();
    let adam = Adam::new(1e-3, 0.9, 0.999, &model);
    let sched = ScheduleConfig { t_steps: 3, beta_start: 0.05, beta_end: 0.3, ..Default::default() };
    let bytes = checkpoint_to_bytes(&model, &adam, 5, &sched).unwrap();
    write(&root.join("checkpoint/tiny.ckpt"), &bytes);

    // loss_log: a few records.
    let mut log = String::new();
    for step in 0..3u64 {
        let rec = LossLogRecord {
            step,
            l_dm: 0.5 / (step + 1) as f64,
            l_ic: 0.25,
            l_kc: 0.125,
            total: 2.0,
        };
        log.push_str(&serde_json::to_string(&rec).unwrap());
        log.push('\n');
    }
    write(&root.join("loss_log/records.jsonl"), log.as_bytes());

    std::fs::remove_dir_all(&tmp).ok();
}
