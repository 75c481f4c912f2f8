use foke_core::inference::Recommendation;
use foke_core::profile::Fusion;
use foke_wasm::{fuse_json, recommend_json, relations_json};
use serde_json::{json, Value};

#[test]
fn relations_follow_the_threshold() {
    let input = json!({ "roots": [[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]], "tau": 0.8 }).to_string();
    let m: Value = serde_json::from_str(&relations_json(&input).unwrap()).unwrap();
    assert_eq!(m["links"], json!([[1, 1, 0], [1, 1, 0], [0, 0, 1]]));

    let loose = json!({ "roots": [[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]], "tau": 0.0 }).to_string();
    let m: Value = serde_json::from_str(&relations_json(&loose).unwrap()).unwrap();
    assert_eq!(m["links"], json!([[1, 1, 1], [1, 1, 1], [1, 1, 1]]));
}

#[test]
fn recommend_matches_hand_computation() {
    // Scores: (0.5 + 0.2)(0.5), (0.5 + 0.2)(0.8), (0)(1).
    let input = json!({ "links": [[1, 1, 0], [1, 1, 0], [0, 0, 1]], "mastery": [0.5, 0.2, 0.0] }).to_string();
    let rec: Recommendation = serde_json::from_str(&recommend_json(&input).unwrap()).unwrap();
    assert_eq!(rec.next, Some(1));
    assert!((rec.scores[1].score - 0.56).abs() < 1e-12);
}

#[test]
fn uniform_weights_average_the_vectors() {
    let input = json!({
        "vectors": { "attributes": [3.0, 0.0], "behaviors": [0.0, 3.0], "trajectory": [0.0, 0.0] },
        "weights": { "w_a": [0.0, 0.0], "w_b": [0.0, 0.0], "w_t": [0.0, 0.0] }
    })
    .to_string();
    let f: Fusion = serde_json::from_str(&fuse_json(&input).unwrap()).unwrap();
    assert!((f.alpha_a - 1.0 / 3.0).abs() < 1e-15);
    assert!((f.embedding[0] - 1.0).abs() < 1e-12 && (f.embedding[1] - 1.0).abs() < 1e-12);
}

#[test]
fn bad_input_is_reported() {
    assert!(recommend_json("{").unwrap_err().starts_with("bad input"));
    let asym = json!({ "links": [[1, 1], [0, 1]], "mastery": [0.0, 0.0] }).to_string();
    assert!(recommend_json(&asym).unwrap_err().contains("symmetry"));
    let mismatch = json!({ "roots": [[1.0, 0.0], [1.0]], "tau": 0.5 }).to_string();
    assert!(relations_json(&mismatch).is_err());
}
