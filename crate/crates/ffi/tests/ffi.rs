use p2a_core::detection::{gen_scenes, DomainConfig};
use p2a_core::encoder::{encode_image_layer1, encode_text, EncoderWeights, PromptString};
use p2a_core::steering::{steer, SteeringConfig};
use p2a_core::tensor::{channel_stats, rng_fill, Fill, Tensor};
use p2a_ffi::*;
use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

fn image(seed: u64) -> Tensor {
    rng_fill(&[3, 16, 16], seed, Fill::Uniform { half_width: 0.5 })
        .unwrap()
        .map(|v| v + 0.5)
        .unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        p2a_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn steering_matches_the_core_library() {
    unsafe {
        let mut enc = ptr::null_mut();
        assert_eq!(p2a_encoder_new(42, &mut enc), P2aStatus::Ok);
        let imgs: Vec<Tensor> = (0..3).map(image).collect();
        let mut maps = Vec::new();
        for img in &imgs {
            let mut m = ptr::null_mut();
            assert_eq!(p2a_feature_map_from_image(enc, img.data().as_ptr(), 16, 16, &mut m), P2aStatus::Ok);
            maps.push(m as *const P2aFeatureMap);
        }
        let prompt = CString::new("an aerial view of harbor at night in snow").unwrap();
        let mut trg = ptr::null_mut();
        assert_eq!(p2a_encode_text(enc, prompt.as_ptr(), &mut trg), P2aStatus::Ok);
        let cfg = P2aSteerConfig {
            steps: 40,
            lr: 0.05,
            momentum: 0.5,
        };
        let mut set = ptr::null_mut();
        assert_eq!(p2a_steer(enc, maps.as_ptr(), maps.len(), trg, &cfg, &mut set), P2aStatus::Ok);
        assert_eq!(p2a_style_set_len(set), 3);

        let w = EncoderWeights::from_seed(42);
        let feats: Vec<Tensor> = imgs.iter().map(|i| encode_image_layer1(i, &w).unwrap()).collect();
        let t = encode_text(&PromptString::new("an aerial view of harbor at night in snow").unwrap(), &w).unwrap();
        let core_cfg = SteeringConfig {
            steps: 40,
            momentum: 0.5,
            ..SteeringConfig::default()
        };
        let want = steer(&feats, &t, &core_cfg, &w).unwrap();
        for (i, e) in want.entries.iter().enumerate() {
            let (mut mu, mut sigma) = ([0.0; P2A_LAYER1_CHANNELS], [0.0; P2A_LAYER1_CHANNELS]);
            let (mut l0, mut l1) = (0.0, 0.0);
            let st = p2a_style_set_entry(set, i, mu.as_mut_ptr(), sigma.as_mut_ptr(), 8, &mut l0, &mut l1);
            assert_eq!(st, P2aStatus::Ok);
            assert_eq!(mu.to_vec(), e.mu);
            assert_eq!(sigma.to_vec(), e.sigma);
            assert_eq!((l0, l1), (e.loss_init, e.loss_final));
        }
        let mut mu = [0.0; 8];
        let st = p2a_style_set_entry(set, 3, mu.as_mut_ptr(), mu.as_mut_ptr(), 8, ptr::null_mut(), ptr::null_mut());
        assert_eq!(st, P2aStatus::Shape);

        p2a_style_set_free(set);
        p2a_embedding_free(trg);
        for m in maps {
            p2a_feature_map_free(m as *mut P2aFeatureMap);
        }
        p2a_encoder_free(enc);
    }
}

#[test]
fn pin_identity_and_stats_round_trip() {
    unsafe {
        let f = rng_fill(&[2, 3, 3], 5, Fill::Normal { std: 1.5 }).unwrap();
        let mut map = ptr::null_mut();
        assert_eq!(p2a_feature_map_new(f.data().as_ptr(), 2, 3, 3, &mut map), P2aStatus::Ok);
        let (mut c, mut h, mut w) = (0, 0, 0);
        assert_eq!(p2a_feature_map_shape(map, &mut c, &mut h, &mut w), P2aStatus::Ok);
        assert_eq!((c, h, w), (2, 3, 3));
        let (mut mu, mut sigma) = ([0.0; 2], [0.0; 2]);
        assert_eq!(p2a_channel_stats(map, mu.as_mut_ptr(), sigma.as_mut_ptr(), 2), P2aStatus::Ok);
        let st = channel_stats(&f).unwrap();
        assert_eq!((mu.to_vec(), sigma.to_vec()), (st.mu.clone(), st.sigma.clone()));

        let mut out = ptr::null_mut();
        assert_eq!(p2a_pin(map, mu.as_ptr(), sigma.as_ptr(), 2, &mut out), P2aStatus::Ok);
        let mut buf = [0.0; 18];
        assert_eq!(p2a_feature_map_read(out, buf.as_mut_ptr(), 18), P2aStatus::Ok);
        let tol = 1e-5 * (1.0 + f.max_abs());
        assert!(buf.iter().zip(f.data()).all(|(a, b)| (a - b).abs() <= tol));
        assert_eq!(p2a_feature_map_read(out, buf.as_mut_ptr(), 17), P2aStatus::BufferTooSmall);
        assert!(last_error().contains("18 needed"));

        let mut bad = ptr::null_mut();
        assert_eq!(p2a_pin(map, mu.as_ptr(), sigma.as_ptr(), 1, &mut bad), P2aStatus::Shape);
        assert!(bad.is_null());
        p2a_feature_map_free(out);
        p2a_feature_map_free(map);
    }
}

#[test]
fn error_codes() {
    unsafe {
        assert_eq!(p2a_encoder_new(1, ptr::null_mut()), P2aStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut enc = ptr::null_mut();
        assert_eq!(p2a_encoder_new(1, &mut enc), P2aStatus::Ok);
        assert_eq!(last_error(), "");

        let mut emb = ptr::null_mut();
        let empty = CString::new("   ").unwrap();
        assert_eq!(p2a_encode_text(enc, empty.as_ptr(), &mut emb), P2aStatus::Degenerate);
        let bad_utf8 = [0xffu8 as std::ffi::c_char, 0];
        assert_eq!(p2a_encode_text(enc, bad_utf8.as_ptr(), &mut emb), P2aStatus::InvalidUtf8);

        let missing = CString::new("/nonexistent/enc.p2aw").unwrap();
        let mut other = ptr::null_mut();
        assert_eq!(p2a_encoder_load(missing.as_ptr(), &mut other), P2aStatus::Io);

        let zeros = [0.0; 8 * 4 * 4];
        let mut map = ptr::null_mut();
        assert_eq!(p2a_feature_map_new(zeros.as_ptr(), 8, 4, 4, &mut map), P2aStatus::Ok);
        assert_eq!(p2a_embed_feature_map(enc, map, &mut emb), P2aStatus::Ok);
        let mut loss = 0.0;
        let cfg = P2aSteerConfig {
            steps: 1,
            lr: -1.0,
            momentum: 0.0,
        };
        let mut set = ptr::null_mut();
        let maps = [map as *const P2aFeatureMap];
        assert_eq!(p2a_steer(enc, maps.as_ptr(), 1, emb, &cfg, &mut set), P2aStatus::Config);
        let ok_cfg = P2aSteerConfig { lr: 0.05, ..cfg };
        assert_eq!(p2a_steer(enc, maps.as_ptr(), 0, emb, &ok_cfg, &mut set), P2aStatus::Degenerate);
        assert_eq!(p2a_cosine_loss(emb, emb, &mut loss), P2aStatus::Ok);
        assert!(loss.abs() < 1e-12);
        assert_eq!(p2a_style_set_len(ptr::null()), 0);

        p2a_embedding_free(emb);
        p2a_feature_map_free(map);
        p2a_encoder_free(enc);
        p2a_encoder_free(ptr::null_mut());
    }
}

#[test]
fn encoder_file_round_trip_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut enc = ptr::null_mut();
        assert_eq!(p2a_encoder_new(9, &mut enc), P2aStatus::Ok);
        let path = CString::new(dir.path().join("e.p2aw").to_str().unwrap()).unwrap();
        assert_eq!(p2a_encoder_save(enc, path.as_ptr()), P2aStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(p2a_encoder_load(path.as_ptr(), &mut back), P2aStatus::Ok);
        let p = CString::new("fog").unwrap();
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(p2a_encode_text(enc, p.as_ptr(), &mut a), P2aStatus::Ok);
        assert_eq!(p2a_encode_text(back, p.as_ptr(), &mut b), P2aStatus::Ok);
        let (mut va, mut vb) = ([0.0; P2A_EMBED_DIM], [0.0; P2A_EMBED_DIM]);
        p2a_embedding_read(a, va.as_mut_ptr(), P2A_EMBED_DIM);
        p2a_embedding_read(b, vb.as_mut_ptr(), P2A_EMBED_DIM);
        assert_eq!(va, vb);
        p2a_embedding_free(a);
        p2a_embedding_free(b);
        p2a_encoder_free(enc);
        p2a_encoder_free(back);
    }

    let scenes = gen_scenes(&DomainConfig::fog(), 4, 2).unwrap();
    let dataset = p2a_core::dataset::write_dataset(dir.path(), "d", &scenes).unwrap();
    let lines: String = scenes
        .iter()
        .map(|s| {
            let d: Vec<_> = s
                .truth
                .iter()
                .map(|g| serde_json_line(g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2, g.class_id))
                .collect();
            format!("{{\"detections\":[{}]}}\n", d.join(","))
        })
        .collect();
    let preds = dir.path().join("p.jsonl");
    std::fs::write(&preds, lines).unwrap();
    let cs = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    let mut map50 = 0.0;
    unsafe {
        assert_eq!(p2a_eval_map(cs(&dataset).as_ptr(), cs(&preds).as_ptr(), 0.5, &mut map50), P2aStatus::Ok);
        assert_eq!(map50, 1.0);
        assert_eq!(p2a_eval_map(cs(&dataset).as_ptr(), cs(&preds).as_ptr(), 1.5, &mut map50), P2aStatus::Config);
    }
}

fn serde_json_line(x1: f64, y1: f64, x2: f64, y2: f64, class: usize) -> String {
    format!("{{\"x1\":{x1:?},\"y1\":{y1:?},\"x2\":{x2:?},\"y2\":{y2:?},\"class\":{class},\"confidence\":0.9}}")
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header_and_static_library() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include").join("p2a.h");
    assert!(std::fs::read_to_string(&header).unwrap().contains("P2aStatus p2a_steer("));
    let lib = target_dir().join("libp2a_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-I"])
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests").join("smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.starts_with("version 0.1.0 entries 1 loss"), "{stdout}");
}
