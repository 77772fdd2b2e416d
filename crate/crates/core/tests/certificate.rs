//! End-to-end certificate synthesis for the glucose model.

use hilhip_core::clbf::{BmmPlant, CertificateBundle, ClbfConfig};
use hilhip_core::controllers::TherapySettings;
use hilhip_core::fis::{anfis_train, AnfisConfig};
use hilhip_core::harness::{synthesize_neural_controller, wizard_training_data, HumanBehavior, ScenarioAssets, ScenarioConfig};
use hilhip_core::plant::BmmParams;
use hilhip_core::reach::{enclose_output, InputBox};

#[test]
fn bmm_certificate_exists_and_rejects_always_max() {
    let therapy = TherapySettings { carb_ratio: 7.0, ..TherapySettings::default() };
    let data = wizard_training_data(1000, &therapy, 7);
    let fis = anfis_train(&data, &AnfisConfig { rules_per_dim: 3, epochs: 300, lr: 0.2, ..AnfisConfig::default() }).unwrap();
    let bx = InputBox::new(&[(70.0, 300.0), (0.0, 5.0), (0.0, 110.0)]).unwrap();
    let enc = enclose_output(&fis.model, &bx, 8).unwrap();
    let params = BmmParams::default();
    let assets = ScenarioAssets { meals: None, fis: Some(fis.model), certificate: None };
    let demo = ScenarioConfig {
        duration_days: 10.0,
        seed: 1000,
        therapy,
        human: HumanBehavior { bolus_error_sd: 0.3, ..HumanBehavior::default() },
        ..ScenarioConfig::default()
    };
    let cfg = ClbfConfig::bmm(&params, enc);
    let mut cert = synthesize_neural_controller(&params, &demo, &BmmParams::virtual_cohort(), &assets, &cfg).unwrap();
    assert!(cert.exists, "violation {} positivity {}", cert.violation_rate, cert.positivity_rate);
    assert!(cert.violation_rate < 0.02);
    assert!(cert.positivity_rate >= 0.98);

    let plant = BmmPlant::new(params);
    let u_max = plant.u_max;
    let always_max = cert.check_nominal(&plant, &|_| u_max);
    assert!(!always_max.certified, "always-max violation {}", always_max.violation_rate);

    let back = CertificateBundle::from_certificate(&cert).into_certificate().unwrap();
    assert_eq!(back.model, cert.model);
    assert_eq!(back.exists, cert.exists);
}
