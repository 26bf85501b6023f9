use palette_core::palette_vae::*;
use palette_core::seeding::stream;
use palette_core::tasks::generate_mixed;
use palette_core::toy_lm::{ModelConfig, PolicyModel};
use rand::Rng;
use rand_distr::StandardNormal;

fn tiny(beta: f64) -> Vae {
    let cfg = VaeConfig { latent_dim: 1, hidden: 4, beta, ..VaeConfig::default() };
    let mut v = Vae::new(1, cfg, &mut stream(0, &[])).unwrap();
    for t in v.params_mut().tensors_mut() {
        t.data_mut().fill(0.0);
    }
    v
}

#[test]
fn hand_case_loss() {
    for beta in [0.0, 0.05, 1.0] {
        let mut v = tiny(beta);
        let n = v.params().len();
        // Encoder output bias gives mu = 1, log sigma = 0; decoder output bias 1.
        v.params_mut().tensors_mut()[5].data_mut().copy_from_slice(&[1.0, 0.0]);
        v.params_mut().tensors_mut()[n - 1].data_mut()[0] = 1.0;
        let (loss, _) = elbo_loss(&[2.0], &v, &[0.0]).unwrap();
        assert!((loss - (1.0 + 0.5 * beta)).abs() < 1e-12, "beta {beta}: {loss}");
    }
}

#[test]
fn perfect_decoder_at_prior_gives_zero_loss() {
    let mut v = tiny(0.3);
    let n = v.params().len();
    v.params_mut().tensors_mut()[n - 1].data_mut()[0] = 0.7;
    let (loss, _) = elbo_loss(&[0.7], &v, &[0.0]).unwrap();
    assert!(loss.abs() < 1e-15);
}

#[test]
fn closed_form_kl() {
    let p = GaussianPosterior { mu: vec![0.0; 4], sigma: vec![1.0; 4] };
    assert_eq!(kl_divergence(&p).unwrap(), 0.0);
    let p = GaussianPosterior { mu: vec![1.0], sigma: vec![1.0] };
    assert_eq!(kl_divergence(&p).unwrap(), 0.5);
    assert!(kl_divergence(&GaussianPosterior { mu: vec![0.0], sigma: vec![0.0] }).is_err());
    let p = GaussianPosterior { mu: vec![0.3, -1.2, 0.5], sigma: vec![0.4, 1.5, 0.9] };
    let q = GaussianPosterior { mu: vec![-0.5, 0.3, 1.2], sigma: vec![0.9, 0.4, 1.5] };
    let neg = GaussianPosterior { mu: p.mu.iter().map(|m| -m).collect(), sigma: p.sigma.clone() };
    let a = kl_divergence(&p).unwrap();
    assert!((a - kl_divergence(&neg).unwrap()).abs() < 1e-15);
    let perm = GaussianPosterior { mu: vec![0.5, 0.3, -1.2], sigma: vec![0.9, 0.4, 1.5] };
    assert!((a - kl_divergence(&perm).unwrap()).abs() < 1e-12);
    assert!(kl_divergence(&q).unwrap() >= 0.0);
}

#[test]
fn encoder_contract() {
    let cfg = VaeConfig { latent_dim: 5, hidden: 16, ..VaeConfig::default() };
    let v = Vae::new(7, cfg, &mut stream(1, &[])).unwrap();
    let mut rng = stream(2, &[]);
    for _ in 0..10_000 {
        let h: Vec<f64> = (0..7).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let p = v.encode(&h).unwrap();
        assert_eq!((p.mu.len(), p.sigma.len()), (5, 5));
        assert!(p.sigma.iter().all(|s| *s > 0.0));
    }
    let h = vec![0.1; 7];
    assert_eq!(v.encode(&h).unwrap(), v.encode(&h).unwrap());
    assert!(v.encode(&[0.0; 6]).is_err());
    assert!(v.decode(&[0.0; 4]).is_err());
    assert_eq!(v.decode(&[0.0; 5]).unwrap().len(), 7);
}

#[test]
fn reparameterization() {
    let p = GaussianPosterior { mu: vec![0.5, -2.0], sigma: vec![0.3, 2.0] };
    assert_eq!(reparameterize(&p, &[0.0, 0.0]).unwrap(), p.mu);
    let floor = GaussianPosterior { mu: vec![1.0], sigma: vec![SIGMA_MIN] };
    assert_eq!(reparameterize(&floor, &[2.0]).unwrap(), vec![1.0 + 2e-6]);
    assert!(reparameterize(&p, &[0.0]).is_err());
    let n = 100_000;
    let mut rng = stream(3, &[]);
    let mut sum = [0.0; 2];
    for _ in 0..n {
        let e: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let z = reparameterize(&p, &e).unwrap();
        sum[0] += z[0];
        sum[1] += z[1];
    }
    for j in 0..2 {
        let mean = sum[j] / n as f64;
        assert!((mean - p.mu[j]).abs() < 4.0 * p.sigma[j] / (n as f64).sqrt());
    }
}

#[test]
fn beta_zero_is_pure_reconstruction() {
    let cfg = VaeConfig { latent_dim: 3, hidden: 8, beta: 0.0, ..VaeConfig::default() };
    let v = Vae::new(4, cfg, &mut stream(4, &[])).unwrap();
    let (h, e) = ([0.5, -0.1, 0.3, 0.9], [0.2, -1.0, 0.4]);
    let (loss, _) = elbo_loss(&h, &v, &e).unwrap();
    let z = reparameterize(&v.encode(&h).unwrap(), &e).unwrap();
    let r = v.decode(&z).unwrap();
    let mse: f64 = h.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((loss - mse).abs() < 1e-12);
}

#[test]
fn memorizes_a_repeated_pair() {
    let h = vec![vec![0.3, -0.2, 0.8, 0.1, -0.5, 0.05]; 32];
    let cfg = VaeConfig { latent_dim: 4, hidden: 32, beta: 0.0, epochs: 300, lr: 3e-3, ..VaeConfig::default() };
    let (_, log) = train_vae_on(&h, &cfg, 5).unwrap();
    assert!(log.last().unwrap().recon < 1e-3, "{:?}", log.last());
}

#[test]
fn training_lowers_loss_and_leaves_policy_unchanged() {
    let model = PolicyModel::new(
        ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, max_len: 64, d_ff: 16, ..ModelConfig::default() },
        &mut stream(6, &[]),
    )
    .unwrap();
    let before = model.clone();
    let corpus = generate_mixed(100, 7).unwrap();
    let cfg = VaeConfig { epochs: 30, hidden: 32, ..VaeConfig::default() };
    let (v1, log) = train_vae(&corpus, &model, &cfg, 8).unwrap();
    assert!(log.last().unwrap().loss < log[0].loss);
    assert_eq!(model, before);
    let (v2, log2) = train_vae(&corpus, &model, &cfg, 8).unwrap();
    assert_eq!(v1, v2);
    assert_eq!(log, log2);
    assert!(train_vae(&[], &model, &cfg, 8).is_err());
}

#[test]
fn section_round_trip() {
    let v = Vae::new(6, VaeConfig { latent_dim: 2, hidden: 5, beta: 0.125, ..VaeConfig::default() }, &mut stream(9, &[])).unwrap();
    let back = Vae::from_section(&v.to_section("vae")).unwrap();
    assert_eq!(back.params(), v.params());
    assert_eq!(back.config().beta, 0.125);
}
