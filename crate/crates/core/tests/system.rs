//! Per-probe decisions of both topologies against the score records, and
//! the distilled student against its teacher.

use std::collections::HashMap;

use vitu::config::{parse_config, RunConfig};
use vitu::heads::cosine_similarity;
use vitu::image::Image;
use vitu::pipeline::{
    decide, embed_images, enrollment, evaluate_joint, headed_forward, sequential_decide, train_frm, train_pad,
    train_unified, unified_decide, FrmModel, HeadedModel, Outcome, Thresholds, Topology, TrainedSystem,
};
use vitu::synth::{build_dataset, DatasetSplit};

const SMALL: &str = r#"{
    "model": {"embed_dim": 16, "depth": 3, "heads": 2, "num_identities": 16, "pad_hidden_dim": 8},
    "data": {"num_identities": 20},
    "train": {"frm_epochs": 3, "pad_epochs": 3, "unified_epochs": 3, "batch_size": 8},
    "metrics": {"fmr": 5.0}
}"#;

/// Scores closer than this to a threshold may flip under score rounding.
const MARGIN: f64 = 1e-6;

struct Trained {
    rc: RunConfig,
    split: DatasetSplit,
    frm: FrmModel,
    pad: HeadedModel,
    unified: HeadedModel,
}

fn trained() -> Trained {
    let rc = parse_config(SMALL).unwrap();
    let tc = rc.train_config();
    let split = build_dataset(&rc.data, rc.seed()).unwrap();
    let frm = train_frm(&rc.model, &split.train, &tc).unwrap().model;
    let pad = train_pad(&rc.model, &split.train, &frm, &tc).unwrap().model;
    let unified = train_unified(&rc.model, &split.train, Some(&frm), &tc).unwrap().model;
    Trained { rc, split, frm, pad, unified }
}

fn check_decisions(system: &TrainedSystem, t: &Trained) {
    let test = &t.split.test;
    let (report, records) = evaluate_joint(system, test, &t.rc.metrics).unwrap();
    let th = Thresholds { pad: report.pad_threshold, matching: report.match_threshold };
    let by_pair: HashMap<(String, String), _> =
        records.iter().map(|r| ((r.probe_id.clone(), r.reference_id.clone()), r)).collect();
    let refs = enrollment(test);
    let ref_images: Vec<&Image> = refs.iter().map(|&i| &test[i].image).collect();
    let ref_emb = system.enroll(&ref_images).unwrap();
    let mut checked = 0;
    let mut outcomes = HashMap::new();
    for (_, probe) in test.iter().enumerate().filter(|(i, _)| !refs.contains(i)) {
        for (j, &r) in refs.iter().enumerate() {
            let rec = by_pair[&(probe.stem(), test[r].stem())];
            if (rec.pad_score - th.pad).abs() < MARGIN || (rec.match_score - th.matching).abs() < MARGIN {
                continue;
            }
            let before = system.counters.snapshot();
            let d = match system.topology {
                Topology::Sequential => sequential_decide(&probe.image, &ref_emb[j], system, &th).unwrap(),
                Topology::Unified => unified_decide(&probe.image, &ref_emb[j], system, &th).unwrap(),
            };
            let after = system.counters.snapshot();
            assert_eq!(d.outcome, decide(rec.pad_score, rec.match_score, &th), "{}", probe.stem());
            assert!((d.pad_score - rec.pad_score).abs() < 1e-8);
            let passes: Vec<usize> = after.iter().zip(before).map(|(a, b)| a - b).collect();
            match (system.topology, d.outcome) {
                (Topology::Sequential, Outcome::RejectSpoof) => {
                    assert_eq!(passes, [1, 0, 0]);
                    assert_eq!(d.match_score, None);
                }
                (Topology::Sequential, _) => assert_eq!(passes, [1, 1, 0]),
                (Topology::Unified, _) => assert_eq!(passes, [0, 0, 1]),
            }
            if let Some(m) = d.match_score {
                assert!((m - rec.match_score).abs() < 1e-8);
            }
            *outcomes.entry(format!("{:?}", d.outcome)).or_insert(0) += 1;
            checked += 1;
        }
    }
    assert!(checked >= 60, "{checked}");
    assert!(outcomes.len() >= 2, "{outcomes:?}");
}

#[test]
fn decisions_agree_with_score_records_for_both_topologies() {
    let t = trained();
    let layer = t.rc.pad_layer();
    let seq = TrainedSystem::sequential(t.rc.model.clone(), t.frm.clone(), t.pad.clone(), layer).unwrap();
    check_decisions(&seq, &t);
    let uni = TrainedSystem::unified(t.rc.model.clone(), t.unified.clone(), layer).unwrap();
    check_decisions(&uni, &t);
}

#[test]
fn student_embeddings_stay_close_to_the_teacher() {
    let t = trained();
    let images: Vec<&Image> = t.split.test.iter().map(|s| &s.image).collect();
    let teacher = embed_images(&t.frm.backbone, &t.rc.model, &images).unwrap();
    let (_, student) = headed_forward(&t.unified, &t.rc.model, &images, &[1]).unwrap();
    let mean = teacher.iter().zip(&student).map(|(a, b)| cosine_similarity(a, b).unwrap()).sum::<f64>()
        / teacher.len() as f64;
    assert!(mean >= 0.95, "{mean}");
}
