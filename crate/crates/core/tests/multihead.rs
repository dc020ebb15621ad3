use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use radiomae::checkpoint::read_meta;
use radiomae::datamodel::{make_splits, BoxXywh, Image, ImageSource, LabeledTarget, SplitParams};
use radiomae::finetune::{task_metrics, BackboneConfig, ConvConfig, GlobalPool};
use radiomae::multihead::*;
use radiomae::nn::{Linear, Params};
use radiomae::synthgen::{generate_corpus, memory_source, CorpusSpec, TASK_ABNORMALITY, TASK_IMPLANT};
use radiomae::Error;

/// Two-layer toy network in f64: features → tanh hidden → 38 logits.
struct Toy {
    params: Params,
    hidden: Linear,
    head: Linear,
}

impl Toy {
    fn new(seed: u64) -> Self {
        let mut params = Params::new(seed, DType::F64);
        let hidden = Linear::with_std(&mut params, "hidden", 6, 8, 0, 0.5).unwrap();
        let head = Linear::with_std(&mut params, "head", 8, 38, 1, 0.5).unwrap();
        Self { params, hidden, head }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.head.forward(&self.hidden.forward(x).unwrap().tanh().unwrap()).unwrap()
    }
}

fn features(b: usize, seed: u64) -> Tensor {
    let v: Vec<f64> = (0..b * 6).map(|i| ((i as u64 * 7919 + seed * 31) as f64 * 0.618).sin()).collect();
    Tensor::from_vec(v, (b, 6), &Device::Cpu).unwrap()
}

fn full_targets(b: usize, seed: u64) -> Vec<Vec<LabeledTarget>> {
    (0..b)
        .map(|i| {
            let k = i as u64 + seed;
            vec![
                LabeledTarget::class((k % 2) as usize),
                LabeledTarget::class((k % 4) as usize),
                LabeledTarget::class((k * 5 % 29) as usize),
                LabeledTarget::class((k % 3) as usize),
                LabeledTarget::class((k / 2 % 2) as usize),
            ]
        })
        .collect()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn fully_masked_head_gets_zero_gradient_and_matches_finite_differences() {
    let layout = HeadLayout::standard();
    let toy = Toy::new(5);
    let x = features(6, 1);
    for (h, g) in layout.groups.iter().enumerate() {
        let mut targets = full_targets(6, h as u64);
        for t in &mut targets {
            t[h] = LabeledTarget::masked();
        }
        let loss = masked_multitask_loss(&toy.forward(&x), &targets, &layout).unwrap();
        let grads = loss.backward().unwrap();
        let gw = grads.get(toy.head.weight()).unwrap().to_vec2::<f64>().unwrap();
        let gb = grads.get(toy.head.bias()).unwrap().to_vec1::<f64>().unwrap();
        for r in g.range() {
            assert!(gw[r].iter().all(|&v| v == 0.0), "head {} weight row {r}", g.name);
            assert_eq!(gb[r], 0.0, "head {} bias {r}", g.name);
        }
        assert!(gb.iter().any(|&v| v != 0.0));

        // central differences on a few shared and private coordinates
        for name in ["hidden.weight", "head.weight", "head.bias"] {
            let p = toy.params.get(name).unwrap();
            let base = p.var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let analytic = grads.get(p.var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for idx in [0, 7, base.len() / 2, base.len() - 1] {
                let eps = 1e-6;
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[idx] += delta;
                    p.var.set(&Tensor::from_vec(v, p.var.shape(), &Device::Cpu).unwrap()).unwrap();
                    let l = scalar(&masked_multitask_loss(&toy.forward(&x), &targets, &layout).unwrap());
                    l
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                eval(0.0);
                let a = analytic[idx];
                let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4 || (fd - a).abs() < 1e-9, "{name}[{idx}]: fd {fd} analytic {a}");
            }
        }
    }
}

#[test]
fn fully_masked_batch_is_zero_with_zero_gradients() {
    let layout = HeadLayout::standard();
    let toy = Toy::new(9);
    let targets = vec![vec![LabeledTarget::masked(); 5]; 4];
    let loss = masked_multitask_loss(&toy.forward(&features(4, 2)), &targets, &layout).unwrap();
    assert_eq!(scalar(&loss), 0.0);
    let grads = loss.backward().unwrap();
    for p in toy.params.iter() {
        // an absent gradient is an exact zero
        if let Some(g) = grads.get(p.var.as_tensor()) {
            let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(g.iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }
}

#[test]
fn implant_only_at_half_probability_is_ln2() {
    let layout = HeadLayout::standard();
    let logits = Tensor::zeros((1, 38), DType::F64, &Device::Cpu).unwrap();
    let mut t = vec![LabeledTarget::masked(); 5];
    t[4] = LabeledTarget::known(1.0);
    let l = scalar(&masked_multitask_loss(&logits, &[t], &layout).unwrap());
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
}

fn reference_loss(logits: &[Vec<f64>], targets: &[Vec<LabeledTarget>], layout: &HeadLayout) -> f64 {
    let mut total = 0.0;
    for (h, g) in layout.groups.iter().enumerate() {
        let mut sum = 0.0;
        let mut n = 0;
        for (row, t) in logits.iter().zip(targets) {
            if t[h].is_masked() {
                continue;
            }
            let z = &row[g.range()];
            let term = match g.activation {
                Activation::Sigmoid => {
                    let p = 1.0 / (1.0 + (-z[0]).exp());
                    -(t[h].y * p.ln() + (1.0 - t[h].y) * (1.0 - p).ln())
                }
                Activation::Softmax => {
                    let m = z.iter().cloned().fold(f64::MIN, f64::max);
                    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    lse - z[t[h].y as usize]
                }
            };
            sum += term;
            n += 1;
        }
        if n > 0 {
            total += sum / n as f64;
        }
    }
    total
}

#[test]
fn half_masked_fracture_term_matches_per_sample_reference() {
    let layout = HeadLayout::standard();
    let b = 8;
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|i| (0..38).map(|j| ((i * 38 + j) as f64 * 0.77).sin() * 3.0).collect())
        .collect();
    let logits = Tensor::from_vec(rows.concat(), (b, 38), &Device::Cpu).unwrap();
    let mut targets = full_targets(b, 3);
    for t in targets.iter_mut().step_by(2) {
        t[3] = LabeledTarget::masked();
    }
    let got = scalar(&masked_multitask_loss(&logits, &targets, &layout).unwrap());
    let want = reference_loss(&rows, &targets, &layout);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    // the fracture term alone equals the mean over the unmasked half
    let only: Vec<Vec<LabeledTarget>> = targets
        .iter()
        .map(|t| (0..5).map(|h| if h == 3 { t[3] } else { LabeledTarget::masked() }).collect())
        .collect();
    let frac = scalar(&masked_multitask_loss(&logits, &only, &layout).unwrap());
    let unmasked: Vec<Vec<f64>> = rows.iter().skip(1).step_by(2).cloned().collect();
    let unmasked_t: Vec<Vec<LabeledTarget>> = only.iter().skip(1).step_by(2).cloned().collect();
    assert!((frac - reference_loss(&unmasked, &unmasked_t, &layout)).abs() < 1e-12);
}

#[test]
fn metrics_skip_masked_labels() {
    let layout = HeadLayout::standard();
    let logits: Vec<Vec<f64>> = (0..12).map(|i| (0..38).map(|j| ((i * 3 + j) as f64).cos()).collect()).collect();
    let items: Vec<RegionItem> = full_targets(12, 1)
        .into_iter()
        .enumerate()
        .map(|(i, mut t)| {
            if i % 3 == 0 {
                t[0] = LabeledTarget::masked();
            }
            RegionItem {
                id: format!("r{i}"),
                bbox: BoxXywh::new(0.0, 0.0, 8.0, 8.0),
                targets: t,
            }
        })
        .collect();
    let heads = head_metrics(&layout, &logits, &items, &[true; 5]).unwrap();
    let keep: Vec<usize> = (0..12).filter(|i| i % 3 != 0).collect();
    let p: Vec<Vec<f64>> = keep.iter().map(|&i| layout.probabilities(&logits[i]).unwrap()[0].clone()).collect();
    let y: Vec<f64> = keep.iter().map(|&i| items[i].targets[0].y).collect();
    let direct = task_metrics(&layout.groups[0].task(), &p, &y).unwrap();
    assert_eq!(heads[HEAD_ABNORMALITY].metrics.as_ref().unwrap(), &direct);
    assert_eq!(heads[HEAD_ABNORMALITY].metrics.as_ref().unwrap().n, 8);
}

fn gradient_image(h: usize, w: usize) -> Image {
    let data = (0..h * w).map(|i| ((i % w) as f32 / w as f32) * 0.5 + 0.25).collect();
    Image::new(h, w, 1, data).unwrap()
}

#[test]
fn tight_crop_is_deterministic_and_resized() {
    let img = gradient_image(100, 80);
    let b = BoxXywh::new(10.0, 20.0, 30.0, 40.0);
    let cfg = CropConfig::default();
    let a = crop_region(&img, &b, false, 1, &cfg).unwrap();
    let c = crop_region(&img, &b, false, 2, &cfg).unwrap();
    assert_eq!(a, c);
    assert_eq!((a.image.height(), a.image.width()), (224, 224));
    assert_eq!(a.window, b);
}

#[test]
fn augmented_windows_respect_the_ior_floor() {
    let img = gradient_image(120, 120);
    let b = BoxXywh::new(30.0, 40.0, 50.0, 36.0);
    let cfg = CropConfig {
        out_size: 16,
        ..CropConfig::default()
    };
    for seed in 0..1000 {
        let c = crop_region(&img, &b, true, seed, &cfg).unwrap();
        assert!(ior(&c.window, &b) >= 0.7 - 1e-12, "seed {seed}");
        assert!(c.rotation_deg.abs() <= 10.0);
        assert!((0.9..=1.1).contains(&c.brightness) && (0.9..=1.1).contains(&c.contrast));
    }
}

#[test]
fn full_ior_floor_contains_the_box() {
    let img = gradient_image(120, 120);
    let b = BoxXywh::new(30.0, 40.0, 50.0, 36.0);
    let cfg = CropConfig {
        out_size: 16,
        ior_floor: 1.0,
        ..CropConfig::default()
    };
    for seed in 0..200 {
        let w = crop_region(&img, &b, true, seed, &cfg).unwrap().window;
        assert!(w.x <= b.x && w.y <= b.y && w.x + w.w >= b.x + b.w && w.y + w.h >= b.y + b.h);
    }
}

#[test]
fn tiny_box_is_rejected() {
    let img = gradient_image(32, 32);
    let err = crop_region(&img, &BoxXywh::new(1.0, 1.0, 3.0, 10.0), false, 0, &CropConfig::default());
    assert!(matches!(err, Err(Error::Shape(_))));
}

struct Failing;

impl RegionProposer for Failing {
    fn name(&self) -> &str {
        "failing"
    }

    fn propose(&self, _id: Option<&str>, _image: &Image) -> radiomae::Result<Vec<RegionBox>> {
        Err(Error::Config("detector offline".into()))
    }
}

#[test]
fn proposals_fall_back_and_clip() {
    let img = gradient_image(40, 50);
    let whole = BoxXywh::new(0.0, 0.0, 50.0, 40.0);

    let empty = DetectionProposer::from_json("{}", 0.0).unwrap();
    let (boxes, warnings) = propose_regions(&img, Some("a"), &empty);
    assert_eq!(boxes.len(), 1);
    assert_eq!(boxes[0].bbox, whole);
    assert!(!warnings.is_empty());

    let (boxes, warnings) = propose_regions(&img, None, &Failing);
    assert_eq!(boxes[0].bbox, whole);
    assert!(warnings[0].contains("detector offline"));

    let json = r#"{"a": [{"class": "Distal Femur", "box": [-5, 10, 30, 60], "score": 0.8},
                        {"class": 2, "box": [1, 1, 2, 2], "score": 0.9},
                        {"class": 3, "box": [5, 5, 10, 10], "score": 0.1}]}"#;
    let det = DetectionProposer::from_json(json, 0.5).unwrap();
    let (boxes, _) = propose_regions(&img, Some("a"), &det);
    assert_eq!(boxes.len(), 1);
    assert_eq!(boxes[0].bbox, BoxXywh::new(0.0, 10.0, 25.0, 30.0));
    assert_eq!(boxes[0].confidence, 0.8);
}

#[test]
fn ground_truth_proposer_passes_boxes_through() {
    let items = generate_corpus(&CorpusSpec::new(3, 3, 48, 4)).unwrap();
    let source = memory_source(&items).unwrap();
    let gt = GroundTruthProposer::from_manifest(source.manifest());
    for it in &items {
        let (boxes, warnings) = propose_regions(&it.image, Some(&it.entry.id), &gt);
        assert!(warnings.is_empty());
        assert_eq!(boxes[0].bbox, it.entry.regions[0].bbox);
        assert_eq!(boxes[0].location_class, Some(it.entry.regions[0].location_class));
    }
}

fn region(subtype: [f64; 4], abnormal: f64) -> RegionPrediction {
    let mut probabilities = BTreeMap::new();
    probabilities.insert(HEAD_ABNORMALITY.to_string(), vec![abnormal]);
    probabilities.insert(HEAD_TUMOR_SUBTYPE.to_string(), subtype.to_vec());
    probabilities.insert(HEAD_LOCATION.to_string(), vec![1.0 / 29.0; 29]);
    probabilities.insert(HEAD_FRACTURE.to_string(), vec![0.1, 0.1, 0.8]);
    probabilities.insert(HEAD_IMPLANT.to_string(), vec![0.2]);
    RegionPrediction {
        region: RegionBox {
            bbox: BoxXywh::new(0.0, 0.0, 10.0, 10.0),
            location_class: None,
            confidence: 1.0,
        },
        probabilities,
    }
}

const NORMAL: [f64; 4] = [0.1, 0.1, 0.1, 0.7];
const BENIGN: [f64; 4] = [0.2, 0.1, 0.6, 0.1];

#[test]
fn aggregation_examples() {
    let t = Thresholds::default();
    let p = aggregate_image(vec![region(NORMAL, 0.1), region(BENIGN, 0.9)], t).unwrap();
    assert!(p.tumor_positive);
    assert_eq!(p.malignancy, Malignancy::Benign);

    let p = aggregate_image(vec![region(NORMAL, 0.1), region([0.6, 0.1, 0.2, 0.1], 0.9)], t).unwrap();
    assert_eq!(p.malignancy, Malignancy::Malignant);

    let p = aggregate_image(vec![region(NORMAL, 0.1), region(NORMAL, 0.2)], t).unwrap();
    assert!(!p.tumor_positive);
    assert_eq!(p.malignancy, Malignancy::None);
    assert!(!p.fracture && !p.implant);

    // a malignant probability on a normal-argmax region still counts once positive
    let p = aggregate_image(vec![region([0.45, 0.0, 0.0, 0.55], 0.1), region([0.0, 0.0, 0.9, 0.1], 0.1)], t).unwrap();
    assert_eq!(p.malignancy, Malignancy::Benign);
    let t2 = Thresholds { malignant: 0.4, ..t };
    let p = aggregate_image(vec![region([0.45, 0.0, 0.0, 0.55], 0.1), region([0.0, 0.0, 0.9, 0.1], 0.1)], t2).unwrap();
    assert_eq!(p.malignancy, Malignancy::Malignant);

    let abn = Thresholds {
        trigger: Trigger::Abnormality { threshold: 0.5 },
        ..t
    };
    assert!(aggregate_image(vec![region(NORMAL, 0.6)], abn).unwrap().tumor_positive);
    assert!(!aggregate_image(vec![region(BENIGN, 0.4)], abn).unwrap().tumor_positive);

    assert!(aggregate_image(vec![], t).is_err());
}

fn subtype_strategy() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(0.001f64..1.0).prop_map(|v| {
        let s: f64 = v.iter().sum();
        [v[0] / s, v[1] / s, v[2] / s, v[3] / s]
    })
}

proptest! {
    #[test]
    fn aggregation_is_permutation_invariant(
        regions in prop::collection::vec((subtype_strategy(), 0.0f64..1.0), 1..6),
        rot in 0usize..6,
    ) {
        let preds: Vec<RegionPrediction> = regions.iter().map(|(s, a)| region(*s, *a)).collect();
        let mut shuffled = preds.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = aggregate_image(preds, Thresholds::default()).unwrap();
        let b = aggregate_image(shuffled, Thresholds::default()).unwrap();
        prop_assert_eq!(a.tumor_positive, b.tumor_positive);
        prop_assert_eq!(a.malignancy, b.malignancy);
        prop_assert!(a.malignancy == Malignancy::None || a.tumor_positive);
    }

    #[test]
    fn raising_malignant_probability_never_flips_to_benign(
        regions in prop::collection::vec(subtype_strategy(), 1..6),
        pick in 0usize..6,
        boost in 0.0f64..1.0,
    ) {
        let preds: Vec<RegionPrediction> = regions.iter().map(|s| region(*s, 0.5)).collect();
        let before = aggregate_image(preds.clone(), Thresholds::default()).unwrap();
        let i = pick % regions.len();
        // move mass from the other classes onto malignant
        let s = regions[i];
        let m = s[0] + (1.0 - s[0]) * boost;
        let rest = (1.0 - m) / (1.0 - s[0]).max(1e-12);
        let raised = [m, s[1] * rest, s[2] * rest, s[3] * rest];
        let mut after_preds = preds;
        after_preds[i] = region(raised, 0.5);
        let after = aggregate_image(after_preds, Thresholds::default()).unwrap();
        if before.malignancy == Malignancy::Malignant {
            prop_assert_eq!(after.malignancy, Malignancy::Malignant);
        }
    }
}

#[test]
fn softmax_groups_of_emitted_predictions_sum_to_one() {
    let layout = HeadLayout::standard();
    let logits: Vec<f64> = (0..38).map(|j| (j as f64 * 1.3).sin() * 40.0).collect();
    let p = RegionPrediction::from_logits(RegionBox::whole(&gradient_image(8, 8)), &logits, &layout).unwrap();
    for g in &layout.groups {
        let v = p.head(&g.name).unwrap();
        match g.activation {
            Activation::Softmax => assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6),
            Activation::Sigmoid => assert!((0.0..=1.0).contains(&v[0])),
        }
    }
}

fn tiny_config() -> MultiheadConfig {
    let mut c = MultiheadConfig::toy();
    c.epochs = 1;
    c.batch_size = 8;
    c.backbone = BackboneConfig::Conv(ConvConfig {
        image_size: [16, 16],
        channels: 1,
        widths: vec![4],
        pool: GlobalPool::Max,
    });
    c.crop.out_size = 16;
    c
}

#[test]
fn training_echoes_config_and_reports_untrained_heads() {
    let mut items = generate_corpus(&CorpusSpec::new(20, 20, 48, 8)).unwrap();
    for it in &mut items {
        it.entry.labels.insert(TASK_IMPLANT.to_string(), LabeledTarget::masked());
    }
    let source = memory_source(&items).unwrap();
    let params = SplitParams::new(0.2, 2, 1).stratify(TASK_ABNORMALITY).group_by("patient_id");
    let plan = make_splits(source.manifest(), &params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let result = train_multihead(&source, &plan, &config, dir.path()).unwrap();
    assert_eq!(result.untrained, vec![HEAD_IMPLANT.to_string()]);
    assert_eq!(result.folds.len(), 2);
    assert!(!result.test.contains_key(HEAD_IMPLANT));
    for f in &result.folds {
        assert_eq!(f.test[HEAD_IMPLANT].status, HeadStatus::Untrained);
        let meta: MultiheadMeta = serde_json::from_value(read_meta(&f.checkpoint).unwrap().extra).unwrap();
        assert_eq!(meta.config, config);
        assert_eq!(meta.untrained, vec![HEAD_IMPLANT.to_string()]);
    }
    let model = MultiheadModel::load(&result.folds[0].checkpoint).unwrap();
    assert_eq!(model.layout, HeadLayout::standard());
    let (pred, _) = predict_image(&model, &items[0].image, None, &WholeImageProposer, Thresholds::default()).unwrap();
    assert_eq!(pred.regions.len(), 1);
    assert!(dir.path().join("multihead.json").exists());
}
