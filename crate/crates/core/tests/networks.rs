use choicelab::classical::{ChoiceModel, MnlModel};
use choicelab::datagen::{gen_assortments, sample_dataset, AssortmentDistribution, AssortmentKind};
use choicelab::evaluation::{calibration_bins, delta_u};
use choicelab::neural::{train, Architecture, EncoderSpec, GasnSpec, NeuralModel, RasnSpec, TrainConfig};
use choicelab::rng::{seeded, ChoiceRng};
use choicelab::{Assortment, ChoiceDataset, ChoiceObservation, FeatureTable, ProductUniverse};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const D: usize = 3;
const D_CUSTOMER: usize = 2;

fn architectures(n: usize) -> Vec<Architecture> {
    let encoder = EncoderSpec {
        product_dim: D,
        customer_dim: Some(D_CUSTOMER),
        latent_dim: 4,
        product_layers: vec![5, 4],
        customer_layers: vec![4],
    };
    vec![
        Architecture::Gasn(GasnSpec { n, hidden: vec![6] }),
        Architecture::Rasn(RasnSpec { n, blocks: 2, block_hidden: Some(5) }),
        Architecture::GasnF { assortment_net: GasnSpec { n, hidden: vec![6] }, encoder: encoder.clone(), masked_input: true },
        Architecture::RasnF { assortment_net: RasnSpec { n, blocks: 1, block_hidden: None }, encoder },
        Architecture::TasteNet { n, product_dim: D, customer_dim: D_CUSTOMER, widths: vec![5, n * D] },
        Architecture::DeepMnl { n, product_dim: D, customer_dim: Some(D_CUSTOMER), widths: vec![5] },
    ]
}

fn normal(rng: &mut ChoiceRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random assortments with per-observation product and customer features.
fn feature_dataset(n: usize, m: usize, rng: &mut ChoiceRng) -> ChoiceDataset {
    let observations = (0..m)
        .map(|_| {
            let members: Vec<usize> = loop {
                let s: Vec<usize> = (0..n).filter(|_| rng.random::<bool>()).collect();
                if !s.is_empty() {
                    break s;
                }
            };
            let choice = members[rng.random_range(0..members.len())];
            let mut o = ChoiceObservation::new(choice, Assortment::new(members, n).unwrap());
            o.product_features = Some(FeatureTable::new(n, D, (0..n * D).map(|_| normal(rng)).collect()).unwrap());
            o.customer_features = Some((0..D_CUSTOMER).map(|_| normal(rng)).collect());
            o
        })
        .collect();
    ChoiceDataset::new(ProductUniverse::new(n, None).unwrap(), observations)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gate_holds_for_every_architecture(n in 2usize..7, seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut rng = seeded(seed);
        let ds = feature_dataset(n, 16, &mut rng);
        for arch in architectures(n) {
            let mut model = NeuralModel::new(arch, &mut rng).unwrap();
            for t in model.graph_mut().params_mut() {
                for v in &mut t.values {
                    *v = *v * scale + 0.1 * normal(&mut rng);
                }
            }
            for (p, o) in model.predict(&ds).unwrap().iter().zip(&ds.observations) {
                let mut total = 0.0;
                for i in 0..n {
                    if o.assortment.contains(i) {
                        prop_assert!(p.get(i) >= 0.0);
                        total += p.get(i);
                    } else {
                        prop_assert_eq!(p.get(i), 0.0);
                    }
                }
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}

fn mnl_data(n: usize, m: usize, rng: &mut ChoiceRng) -> ChoiceDataset {
    let truth = MnlModel::new((0..n).map(|_| normal(rng)).collect()).unwrap();
    let dist = AssortmentDistribution { kind: AssortmentKind::D1, n, no_purchase: None };
    let s = gen_assortments(&dist, m, rng).unwrap();
    sample_dataset(&truth, &s, rng).unwrap()
}

#[test]
fn full_batch_training_lowers_the_loss() {
    let mut rng = seeded(11);
    let ds = mnl_data(8, 2_000, &mut rng);
    let mut model = NeuralModel::new(Architecture::Gasn(GasnSpec { n: 8, hidden: vec![8] }), &mut rng).unwrap();
    let before = model.cross_entropy(&ds).unwrap();
    let config = TrainConfig { max_epochs: 50, batch_size: ds.len(), learning_rate: 1e-3, patience: 50, seed: 1 };
    let history = train(&mut model, &ds, &ds, &config).unwrap();
    assert_eq!(history.epochs.len(), 50);
    let after = model.cross_entropy(&ds).unwrap();
    assert!(after < before, "{after} vs {before}");
    // One Adam step per epoch on the full batch: the validation curve never rises.
    for w in history.epochs.windows(2) {
        assert!(w[1].val_ce <= w[0].val_ce + 1e-12);
    }
}

#[test]
fn calibrated_predictions_stay_within_binomial_error() {
    let n = 5;
    let mut rng = seeded(12);
    let truth = MnlModel::new((0..n).map(|_| normal(&mut rng)).collect()).unwrap();
    let dist = AssortmentDistribution { kind: AssortmentKind::D1, n, no_purchase: None };
    let s = gen_assortments(&dist, 50_000, &mut rng).unwrap();
    // Each observation gets its own jittered predictor, and its outcome is drawn from it.
    let mut preds = Vec::new();
    let mut obs = Vec::new();
    for a in &s {
        let jitter: Vec<f64> = truth.utilities.iter().map(|u| u + 0.5 * normal(&mut rng)).collect();
        let model = MnlModel::new(jitter).unwrap();
        let p = model.probs(a).unwrap();
        obs.push(ChoiceObservation::new(model.sample_choice(a, &mut rng).unwrap(), a.clone()));
        preds.push(p);
    }
    let bins = calibration_bins(&preds, &obs, 10).unwrap();
    for product in &bins.products {
        for bin in &product.bins {
            let p = bin.mean_predicted;
            // The variance of a Poisson-binomial mean is at most that of a binomial at the mean rate.
            let se = (p * (1.0 - p) / bin.count as f64).sqrt();
            assert!((bin.mean_empirical - p).abs() < 3.0 * se, "product {}: {bin:?}", product.product);
        }
    }
}

#[test]
fn identity_assortment_net_has_zero_layer_effect() {
    let n = 6;
    let arch = Architecture::GasnF {
        assortment_net: GasnSpec { n, hidden: vec![] },
        encoder: EncoderSpec {
            product_dim: D,
            customer_dim: Some(D_CUSTOMER),
            latent_dim: 3,
            product_layers: vec![3],
            customer_layers: vec![3],
        },
        masked_input: true,
    };
    let mut rng = seeded(13);
    let mut model = NeuralModel::new(arch, &mut rng).unwrap();
    for t in model.graph_mut().params_mut() {
        if t.name == "gasn.0.weight" {
            for r in 0..n {
                for c in 0..n {
                    t.set(r, c, if r == c { 1.0 } else { 0.0 });
                }
            }
        }
    }
    let ds = feature_dataset(n, 300, &mut rng);
    let hist = delta_u(&model, &ds, 200, &mut rng).unwrap();
    assert!(!hist.values.is_empty());
    assert!(hist.values.iter().all(|v| v.abs() < 1e-12));
}
