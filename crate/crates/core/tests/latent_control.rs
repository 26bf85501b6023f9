use palette_core::latent_control::*;
use palette_core::palette_vae::{Vae, VaeConfig};
use palette_core::seeding::stream;
use palette_core::tasks::Domain;
use palette_core::toy_lm::{ModelConfig, PolicyModel, Vocabulary};

fn vae() -> Vae {
    Vae::new(16, VaeConfig { latent_dim: 4, hidden: 8, ..VaeConfig::default() }, &mut stream(1, &[])).unwrap()
}

#[test]
fn prefix_modes() {
    let v = vae();
    let mut rng = stream(2, &[]);
    let t = sample_prefix(&v, 3, PrefixMode::Tiled, &mut rng).unwrap();
    assert_eq!(t.len(), 3);
    assert!(t.rows().iter().all(|r| r == &t.rows()[0]));
    let ind = sample_prefix(&v, 3, PrefixMode::Independent, &mut rng).unwrap();
    for i in 0..3 {
        for j in i + 1..3 {
            assert_ne!(ind.rows()[i], ind.rows()[j]);
        }
    }
    for p in [&t, &ind] {
        assert_eq!(p.provenance(), Provenance::Prior);
        for (row, z) in p.rows().iter().zip(p.latents()) {
            assert_eq!(row, &v.decode(z).unwrap());
        }
    }
    assert!(sample_prefix(&v, 0, PrefixMode::Independent, &mut rng).unwrap().is_empty());
    assert!(sample_prefix(&v, 0, PrefixMode::Tiled, &mut rng).unwrap().is_empty());
}

#[test]
fn fit_region_examples() {
    let r = fit_region(&[vec![1.0], vec![3.0]]).unwrap();
    assert_eq!((r.mean.clone(), r.variance.clone(), r.sample_count), (vec![2.0], vec![1.0], 2));
    let r = fit_region(&[vec![0.5, 2.0]]).unwrap();
    assert_eq!(r.variance, vec![VARIANCE_FLOOR; 2]);
    assert!(fit_region(&[]).is_err());
    let mut rng = stream(3, &[]);
    let zs: Vec<Vec<f64>> =
        (0..100_000).map(|_| (0..3).map(|_| rand::Rng::sample(&mut rng, rand_distr::StandardNormal)).collect()).collect();
    let r = fit_region(&zs).unwrap();
    for j in 0..3 {
        assert!(r.mean[j].abs() < 0.02 && (r.variance[j] - 1.0).abs() < 0.02);
    }
}

#[test]
fn standard_region_matches_prior_bitwise() {
    let v = vae();
    let a = sample_prefix(&v, 4, PrefixMode::Independent, &mut stream(4, &[])).unwrap();
    let b = sample_biased(&DomainRegion::standard(4), Domain::SortK, &v, 4, PrefixMode::Independent, &mut stream(4, &[])).unwrap();
    assert_eq!(a.rows(), b.rows());
    assert_eq!(a.latents(), b.latents());
    assert_eq!(b.provenance(), Provenance::Biased(Domain::SortK));
}

#[test]
fn biased_sampling_moments() {
    let v = vae();
    let region = DomainRegion { mean: vec![1.0, -2.0, 0.5, 0.0], variance: vec![0.25, 4.0, VARIANCE_FLOOR, 1.0], sample_count: 9 };
    let mut rng = stream(5, &[]);
    let zs: Vec<Vec<f64>> = (0..100_000)
        .map(|_| sample_biased(&region, Domain::ModAdd, &v, 1, PrefixMode::Independent, &mut rng).unwrap().latents()[0].clone())
        .collect();
    let fit = fit_region(&zs).unwrap();
    for j in 0..4 {
        let sd = region.variance[j].sqrt();
        assert!((fit.mean[j] - region.mean[j]).abs() < 4.0 * sd / 100_000f64.sqrt() + 1e-12);
        assert!((fit.variance[j] / region.variance[j] - 1.0).abs() < 0.03 || region.variance[j] == VARIANCE_FLOOR);
    }
    assert!(zs.iter().all(|z| (z[2] - 0.5).abs() < 1e-2));
}

#[test]
fn assemble_input_layout() {
    let model = PolicyModel::new(
        ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, max_len: 12, d_ff: 16, ..ModelConfig::default() },
        &mut stream(6, &[]),
    )
    .unwrap();
    let v = vae();
    let q = Vocabulary::standard().parse("sort312?").unwrap();
    let p = sample_prefix(&v, 2, PrefixMode::Independent, &mut stream(7, &[])).unwrap();
    let x = assemble_input(&p, &q, &model).unwrap();
    assert_eq!(x.len(), 2 + q.len());
    assert_eq!(x[0], p.rows()[0]);
    assert_eq!(x[2], model.embedding(q[0]));
    let plain = assemble_input(&PrefixEmbeddings::empty(), &q, &model).unwrap();
    assert!(plain.iter().zip(&q).all(|(r, t)| r == model.embedding(*t)));
    let long = sample_prefix(&v, 8, PrefixMode::Independent, &mut stream(7, &[])).unwrap();
    assert!(assemble_input(&long, &q, &model).is_err());
}

#[test]
fn region_store_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("regions.tsv");
    let store = RegionStore {
        regions: vec![
            (Domain::ModAdd, DomainRegion { mean: vec![0.1, -1.0 / 3.0], variance: vec![1e-6, 2.5], sample_count: 100 }),
            (Domain::Lookup, DomainRegion { mean: vec![1e-300, 7.0], variance: vec![0.3, 0.2], sample_count: 1 }),
        ],
    };
    store.write(&path).unwrap();
    assert_eq!(RegionStore::read(&path).unwrap(), store);
}
