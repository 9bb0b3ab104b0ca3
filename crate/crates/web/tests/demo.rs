use grape_web::{advantages_json, inflation_json, landscape_json};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn advantages_are_affine_invariant() {
    let v = parse(advantages_json("1, 0.6 -0.2,-1, 0.6", -3.0, 7.0).unwrap());
    let a = floats(&v["advantages"]);
    let s = floats(&v["shifted_advantages"]);
    assert_eq!(a.len(), 5);
    assert!(a.iter().sum::<f64>().abs() < 1e-12);
    for (x, y) in a.iter().zip(&s) {
        assert!((x + y).abs() < 1e-12);
    }
    assert!(v["max_deviation"].as_f64().unwrap() < 1e-12);
    assert_eq!(floats(&v["shifted"])[0], 4.0);
}

#[test]
fn unanimous_group_and_bad_input() {
    let v = parse(advantages_json("0.5,0.5,0.5", 2.0, 1.0).unwrap());
    assert!(floats(&v["advantages"]).iter().all(|&x| x == 0.0));
    assert!(advantages_json("1, x", 1.0, 0.0).unwrap_err().contains("`x`"));
    assert!(advantages_json("", 1.0, 0.0).is_err());
}

#[test]
fn landscape_shows_generic_trade_off() {
    let v = parse(landscape_json(256, 32, 8, 3, 0).unwrap());
    let actions = v["actions"].as_array().unwrap();
    assert_eq!(actions.len(), 12);
    let good: Vec<&Value> = actions.iter().filter(|a| a["kind"] == "good").collect();
    assert_eq!(good.len(), 1);
    for a in actions {
        let r = a["rank_reward"].as_f64().unwrap();
        let rank = a["rank"].as_u64().unwrap() as f64;
        assert!((r - (1.0 - 2.0 * (rank - 1.0) / 255.0)).abs() < 1e-12);
    }
    assert!(v["gap"]["delta_sim"].is_f64());
    assert!(landscape_json(256, 32, 8, 3, 8).is_err());
    assert!(landscape_json(1 << 20, 32, 8, 3, 0).is_err());
}

#[test]
fn inflation_curves_share_step_zero() {
    let v = parse(inflation_json(256, 32, 16, 5, 40, 2.0).unwrap());
    for mode in ["rank", "similarity"] {
        assert_eq!(v[mode]["similarity"].as_array().unwrap().len(), 40);
    }
    assert_eq!(v["rank"]["similarity"][0], v["similarity"]["similarity"][0]);
    assert_eq!(v["rank"]["recall_at_1"][0], v["similarity"]["recall_at_1"][0]);
    assert!(v["reproduced"].is_boolean());
    assert!(inflation_json(256, 32, 16, 5, 10_000, 2.0).is_err());
    assert!(inflation_json(256, 32, 16, 5, 10, -1.0).is_err());
}
