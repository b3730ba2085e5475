use groupoid_tiler::systems::SystemSpec;
use groupoid_tiler::tiling::{quasi_tile, reverify, TileOptions, TilingCertificate};

fn certificate() -> TilingCertificate {
    let sys = SystemSpec::odometer(2).build().unwrap().with_depth_cap(256);
    let options = TileOptions { kind: None, max_stage: 10, depth_cap: 256 };
    quasi_tile(&sys, 1, 0.25, &options).unwrap()
}

#[test]
fn json_round_trip_is_lossless() {
    let cert = certificate();
    let text = cert.to_json();
    assert_eq!(TilingCertificate::from_json(&text).unwrap(), cert);
    assert_eq!(TilingCertificate::from_json(&text).unwrap().to_json(), text);
}

#[test]
fn reverification_recomputes_the_claims() {
    let cert = certificate();
    assert!(cert.holds());
    let re = reverify(&cert.to_json()).unwrap();
    assert!(re.castle_valid && re.holds && re.matches);
    assert_eq!(re.worst_ratio, cert.worst_ratio);
}

#[test]
fn tampered_claims_are_caught() {
    let cert = certificate();
    let mut v: serde_json::Value = serde_json::from_str(&cert.to_json()).unwrap();
    v["worst_ratio"]["num"] = serde_json::json!(0);
    let re = reverify(&v.to_string()).unwrap();
    assert!(!re.matches);

    let mut v: serde_json::Value = serde_json::from_str(&cert.to_json()).unwrap();
    let m = &mut v["castle"]["multisections"][0];
    let top = m["index"].as_array_mut().unwrap().pop().unwrap();
    m["bisections"].as_object_mut().unwrap().remove(&format!("{top},0"));
    let re = reverify(&v.to_string()).unwrap();
    assert!(re.castle_valid);
    assert!(!re.matches);
    assert_ne!(re.footprint[0].exact, cert.footprint[0].exact);
}

