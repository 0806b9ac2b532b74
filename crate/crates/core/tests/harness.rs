use std::path::PathBuf;

use cqvad::cdl::classification_head;
use cqvad::config::{Config, LabelMode};
use cqvad::encoder::rescale_to_common;
use cqvad::geometry::Bbox;
use cqvad::harness::ablation::variants;
use cqvad::harness::backbone::level_extents;
use cqvad::harness::checkpoint;
use cqvad::harness::dataset;
use cqvad::harness::dump::{decode_pgm, dump_attention, encode_pgm, map_file_name, quantize};
use cqvad::harness::eval::{average_precision, evaluate_fmap, evaluate_model, pr_curve, Detection, GtBox};
use cqvad::harness::micro::{micro_config, micro_model};
use cqvad::harness::model::Model;
use cqvad::harness::synthetic::{eval_set, generate_clip, training_clip};
use cqvad::harness::train::{clip_gradients, learning_rate, mask_wall_time, train_model, TrainOptions};
use cqvad::ldl::DecoderContext;
use cqvad::matching::MatchConfig;
use cqvad_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cqvad-harness-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn small_config() -> Config {
    let mut c = Config::default();
    c.d_model = 8;
    c.heads = 2;
    c.levels = 2;
    c.points = 2;
    c.actors = 3;
    c.enc_layers = 1;
    c.dec_layers = 2;
    c.classes = 2;
    c.clip_len = 2;
    c.grid_h = 4;
    c.grid_w = 4;
    c.patch = 4;
    c.backbone_dim = 8;
    c.ffn_dim = 16;
    c.fusion_convs = 1;
    c.cue_size = 2;
    c.max_actors = 2;
    c.batch_size = 2;
    c.steps = 3;
    c.eval_clips = 4;
    c.eval_every = 0;
    c.log_every = 1;
    c
}

#[test]
fn level_extents_follow_strides() {
    let mut c = small_config();
    c.clip_len = 4;
    c.grid_h = 8;
    c.grid_w = 6;
    c.levels = 3;
    assert_eq!(level_extents(&c), vec![(4, 8, 6), (2, 4, 3), (1, 2, 1)]);
    c.clip_len = 3;
    c.levels = 2;
    assert_eq!(level_extents(&c), vec![(3, 8, 6), (3, 4, 3)]);
}

#[test]
fn backbone_emits_level_rows() {
    let c = small_config();
    let model = Model::new(&c).unwrap();
    let clip = generate_clip(&c, &mut ChaCha8Rng::seed_from_u64(1), Some(1));
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let (x, levels) = model.backbone.forward(&p, &tape.constant(&clip.frames_tensor())).unwrap();
    let rows: usize = level_extents(&c).iter().map(|&(t, h, w)| t * h * w).sum();
    assert_eq!(x.shape(), vec![rows, c.d_model]);
    assert_eq!(levels.len(), c.levels);
}

#[test]
fn wrong_frame_size_is_rejected() {
    let c = small_config();
    let model = Model::new(&c).unwrap();
    assert!(model.infer(&Tensor::zeros([2, 8, 8, 3])).is_err());
}

#[test]
fn output_shapes() {
    let c = small_config();
    let model = Model::new(&c).unwrap();
    let clip = generate_clip(&c, &mut ChaCha8Rng::seed_from_u64(2), None);
    let out = model.infer(&clip.frames_tensor()).unwrap();
    let (n_a, t, n_c) = (c.actors, c.clip_len, c.classes);
    assert_eq!(out.pred.boxes.len(), n_a * t * 4);
    assert_eq!(out.pred.scores.len(), n_a * t * n_c);
    assert_eq!(out.pred.confidence.len(), n_a);
    assert_eq!(out.class_maps.len(), n_a * t);
    assert_eq!(out.class_maps[0].shape(), &[n_c, c.grid_h * c.grid_w]);
    assert!(out.pred.scores.iter().all(|s| (0.0..=1.0).contains(s)));
}

#[test]
fn same_seed_gives_identical_outputs() {
    let c = small_config();
    let clip = generate_clip(&c, &mut ChaCha8Rng::seed_from_u64(3), None);
    let a = Model::new(&c).unwrap().infer(&clip.frames_tensor()).unwrap();
    let b = Model::new(&c).unwrap().infer(&clip.frames_tensor()).unwrap();
    assert_eq!(a.pred, b.pred);
    assert_eq!(a.class_maps, b.class_maps);
    assert_eq!(generate_clip(&c, &mut ChaCha8Rng::seed_from_u64(3), None), clip);
}

// Runs the modules one by one, frame-major, and reorders at the end.
fn composed(model: &Model, frames: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = &model.cfg;
    let (n_a, t_n, d) = (c.actors, c.clip_len, c.d_model);
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let (x, levels) = model.backbone.forward(&p, &tape.constant(frames)).unwrap();
    let enc = model.encoder.forward(&p, &x, &levels).unwrap();
    let ctx = DecoderContext::new(rescale_to_common(&enc, &levels, (t_n, c.grid_h, c.grid_w)).unwrap(), t_n, c.grid_h, c.grid_w)
        .unwrap();

    let anchors = model.params.get(model.anchors).data().to_vec();
    let init: Vec<f64> = (0..t_n).flat_map(|_| anchors.iter().map(|&v| cqvad_tensor::sigmoid(v))).collect();
    let mut boxes = tape.constant(&Tensor::new([t_n * n_a, 4], init).unwrap());
    let mut ae = tape.constant(&Tensor::zeros([t_n * n_a, d]));
    let mut queries: Vec<Var> = Vec::new();
    let mut f = ae;
    for (n, (ldl, cdl)) in model.ldl.iter().zip(&model.cdl).enumerate() {
        let out = ldl.forward(&p, &ctx, &boxes, &ae, n_a, c.aggregation).unwrap();
        let mut next = Vec::new();
        for r in 0..t_n * n_a {
            let q_in = if n == 0 { p.get(model.class_queries) } else { queries[r] };
            let q_sa = cdl.class_self_attention(&p, &q_in).unwrap();
            let res = cdl
                .forward_actor(&p, &q_sa, &out.f.rows(r, 1).unwrap(), &out.context[r], &out.pos_query.rows(r, 1).unwrap(), &ctx.pos[r / n_a], c.grid_h, c.grid_w)
                .unwrap();
            next.push(res.queries);
        }
        queries = next;
        boxes = out.boxes;
        ae = out.ae;
        f = out.f;
    }
    let logits = model.conf_head.forward(&p, &f).unwrap();
    let logits = logits.value();
    let conf: Vec<f64> = (0..n_a)
        .map(|i| cqvad_tensor::sigmoid((0..t_n).map(|t| logits[t * n_a + i]).sum::<f64>() / t_n as f64))
        .collect();
    let (mut out_boxes, mut out_scores) = (Vec::new(), Vec::new());
    let bv = boxes.value();
    for i in 0..n_a {
        for t in 0..t_n {
            let r = t * n_a + i;
            out_boxes.extend_from_slice(&bv[r * 4..r * 4 + 4]);
            let ci = tape.constant(&Tensor::new([1], vec![conf[i]]).unwrap());
            out_scores.extend_from_slice(&classification_head(&queries[r], c.label_mode, &ci).unwrap().value());
        }
    }
    (out_boxes, out_scores, conf)
}

#[test]
fn pipeline_matches_module_composition() {
    for seed in 0..6 {
        let mut c = micro_config();
        if seed % 2 == 1 {
            c.label_mode = LabelMode::Single;
        }
        let model = micro_model(&c, seed).unwrap();
        let frames = Tensor::from_fn([c.clip_len, c.frame_h(), c.frame_w(), 3], |k| ((k * 37 + seed as usize) % 11) as f64 / 10.0);
        let got = model.infer(&frames).unwrap().pred;
        let (boxes, scores, conf) = composed(&model, &frames);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&got.boxes, &boxes), "seed {seed}");
        assert!(close(&got.scores, &scores), "seed {seed}");
        assert!(close(&got.confidence, &conf), "seed {seed}");
    }
}

#[test]
fn first_loss_is_finite_and_positive() {
    let c = small_config();
    let model = Model::new(&c).unwrap();
    let (loss, grads) = clip_gradients(&model, &training_clip(&c, 0, None), &MatchConfig::from(&c)).unwrap();
    assert!(loss.loss.is_finite() && loss.loss > 0.0, "{}", loss.loss);
    assert_eq!(grads.len(), model.params.len());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut c = small_config();
    c.lr = 0.0;
    c.warmup_start_lr = 0.0;
    c.weight_decay = 0.5;
    let before = Model::new(&c).unwrap();
    let after = train_model(before.clone(), &TrainOptions::default()).unwrap().model;
    for ((_, name, a), (_, _, b)) in before.params.iter().zip(after.params.iter()) {
        assert_eq!(a.data(), b.data(), "{name}");
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let mut c = small_config();
    c.lr = 1e-3;
    c.warmup_start_lr = 1e-4;
    c.warmup_steps = 10;
    c.milestones = vec![20, 30];
    c.lr_decay = 0.1;
    assert_eq!(learning_rate(&c, 0), 1e-4);
    assert!((learning_rate(&c, 5) - 5.5e-4).abs() < 1e-15);
    assert_eq!(learning_rate(&c, 10), 1e-3);
    assert!((learning_rate(&c, 20) - 1e-4).abs() < 1e-15);
    assert!((learning_rate(&c, 35) - 1e-5).abs() < 1e-15);
}

#[test]
fn checkpoint_round_trip() {
    let c = small_config();
    let model = Model::new(&c).unwrap();
    let bytes = checkpoint::to_bytes(&model, 17).unwrap();
    let (back, step) = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(step, 17);
    assert_eq!(back.cfg.to_text(), c.to_text());
    for ((_, name, a), (_, _, b)) in model.params.iter().zip(back.params.iter()) {
        let rounded: Vec<f64> = a.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(rounded, b.data(), "{name}");
    }
    assert_eq!(checkpoint::to_bytes(&back, 17).unwrap(), bytes);

    let dir = scratch("ckpt");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    checkpoint::save(&model, 3, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap().1, 3);
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(checkpoint::from_bytes(&bad).is_err());
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn dataset_round_trip() {
    let mut c = small_config();
    c.classes = 10;
    let clips: Vec<_> = (0..4).map(|k| training_clip(&c, k, None)).collect();
    let back = dataset::decode(&dataset::encode(&clips)).unwrap();
    assert_eq!(back.len(), clips.len());
    for (a, b) in clips.iter().zip(&back) {
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.gt.labels, b.gt.labels);
        assert_eq!(a.scenario, b.scenario);
        for (ta, tb) in a.gt.tubes.iter().flatten().zip(b.gt.tubes.iter().flatten()) {
            let r = ta.to_array().map(|v| v as f32 as f64);
            assert_eq!(r, tb.to_array());
        }
    }
    let dir = scratch("data");
    std::fs::create_dir_all(&dir).unwrap();
    dataset::write(&dir.join("clips.bin"), &clips).unwrap();
    assert_eq!(dataset::read(&dir.join("clips.bin")).unwrap().len(), 4);
    assert!(dataset::decode(b"CQVDCLIP").is_err());
}

#[test]
fn pgm_round_trip() {
    let px: Vec<u8> = (0..12).map(|k| (k * 21) as u8).collect();
    assert_eq!(decode_pgm(&encode_pgm(4, 3, &px)).unwrap(), (4, 3, px));
    assert_eq!(quantize(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
    assert!(decode_pgm(b"P6\n1 1\n255\n\0").is_err());
}

#[test]
fn attention_dump_writes_every_map() {
    let c = small_config();
    let model = Model::new(&c).unwrap();
    let clip = generate_clip(&c, &mut ChaCha8Rng::seed_from_u64(5), None);
    let out = model.infer(&clip.frames_tensor()).unwrap();
    let dir = scratch("dump");
    let files = dump_attention(&dir, &out, c.grid_h, c.grid_w).unwrap();
    assert_eq!(files.len(), c.actors * c.classes * c.clip_len);
    assert_eq!(std::fs::read_dir(&dir).unwrap().count(), files.len());
    let hw = c.grid_h * c.grid_w;
    for i in 0..c.actors {
        for t in 0..c.clip_len {
            for k in 0..c.classes {
                let (w, h, px) = decode_pgm(&std::fs::read(dir.join(map_file_name(i, k, t))).unwrap()).unwrap();
                assert_eq!((w, h), (c.grid_w, c.grid_h));
                let row = &out.class_maps[i * c.clip_len + t].data()[k * hw..(k + 1) * hw];
                assert_eq!(px, quantize(row));
            }
        }
    }
}

fn b(cx: f64) -> Bbox {
    Bbox::new(cx, 0.5, 0.2, 0.2)
}

#[test]
fn fmap_perfect_and_empty() {
    let gts: Vec<GtBox> = (0..3)
        .map(|k| GtBox {
            frame: k,
            class: k % 2,
            bbox: b(0.3),
        })
        .collect();
    let dets: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            frame: g.frame,
            class: g.class,
            score: 0.9,
            bbox: g.bbox,
        })
        .collect();
    assert_eq!(evaluate_fmap(&dets, &gts, 3, 0.5).fmap, 1.0);
    let r = evaluate_fmap(&[], &gts, 3, 0.5);
    assert_eq!(r.fmap, 0.0);
    assert_eq!(r.excluded_classes, vec![2]);
    assert_eq!(r.per_class_ap[2], None);
}

#[test]
fn fmap_three_detections_two_truths() {
    // ranked: hit, miss, hit -> precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    let gts = [
        GtBox { frame: 0, class: 0, bbox: b(0.3) },
        GtBox { frame: 1, class: 0, bbox: b(0.3) },
    ];
    let dets = [
        Detection { frame: 1, class: 0, score: 0.7, bbox: b(0.3) },
        Detection { frame: 0, class: 0, score: 0.9, bbox: b(0.3) },
        Detection { frame: 0, class: 0, score: 0.8, bbox: b(0.7) },
    ];
    let curve = pr_curve(&dets, &gts, 0, 0.5);
    assert_eq!(curve.precision, vec![1.0, 0.5, 2.0 / 3.0]);
    assert_eq!(curve.recall, vec![0.5, 0.5, 1.0]);
    assert!((average_precision(&curve) - 5.0 / 6.0).abs() < 1e-15);
    assert!((evaluate_fmap(&dets, &gts, 1, 0.5).fmap - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn duplicate_detection_counts_once() {
    let gts = [GtBox { frame: 0, class: 0, bbox: b(0.3) }];
    let d = Detection { frame: 0, class: 0, score: 0.9, bbox: b(0.3) };
    let curve = pr_curve(&[d, Detection { score: 0.8, ..d }], &gts, 0, 0.5);
    assert_eq!(curve.precision, vec![1.0, 0.5]);
}

#[test]
fn ablation_variants_flip_one_flag() {
    let base = small_config();
    let v = variants(&base);
    assert_eq!(v.len(), 3);
    for (flag, cfg) in &v {
        assert_eq!(base.diff(cfg), vec![*flag]);
    }
}

#[test]
fn evaluation_ignores_thread_count() {
    let c = small_config();
    let model = Model::new(&c).unwrap();
    let clips = eval_set(&c, None);
    let a = evaluate_model(&model, &clips, 1).unwrap();
    let b = evaluate_model(&model, &clips, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn wall_time_is_masked() {
    let line = r#"{"step":3,"loss":1.5,"fmap":null,"wall_time":0.25}"#;
    assert_eq!(mask_wall_time(line), r#"{"step":3,"loss":1.5,"fmap":null}"#);
    assert_eq!(mask_wall_time("{}"), "{}");
}

#[test]
fn metrics_repeat_across_runs_and_threads() {
    let c = small_config();
    let run = |threads| {
        let opts = TrainOptions {
            threads,
            ..TrainOptions::default()
        };
        let r = train_model(Model::new(&c).unwrap(), &opts).unwrap();
        r.metrics.iter().map(|l| mask_wall_time(l)).collect::<Vec<_>>()
    };
    let a = run(1);
    assert_eq!(a.len(), c.steps);
    assert_eq!(a, run(1));
    assert_eq!(a, run(2));
}
