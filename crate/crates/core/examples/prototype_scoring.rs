//! Multi-scale prototypes and soft-vote scoring on hand-made features.

use dcpn::fewshot::{
    classify, compute_prototypes, episode_loss, fit_pca, mix_features, score_query, HeadConfig, Metric, MultiScaleFeature,
    PrototypeMatrix, Scale,
};

fn main() -> dcpn::Result<()> {
    // Class A sits on the query at every scale; class B is one unit away.
    let q = MultiScaleFeature {
        z_g: vec![0.0, 0.0],
        z_l: vec![0.0, 0.0],
        z_mix: vec![0.0, 0.0],
    };
    let b = MultiScaleFeature {
        z_g: vec![1.0, 0.0],
        z_l: vec![0.0, 1.0],
        z_mix: vec![-1.0, 0.0],
    };
    let mp = PrototypeMatrix {
        protos: vec![[q.z_g.clone(), q.z_l.clone(), q.z_mix.clone()], [b.z_g, b.z_l, b.z_mix]],
    };
    let r = score_query(&q, &mp, &HeadConfig::default())?;
    println!("distances {:?}", r.distances);
    println!("confidences {:.4?}  probabilities {:.4?}", r.confidence, r.probs);
    println!("predicted {} with loss {:.4}", classify(&r), episode_loss(&[r.clone()], &[0])?);

    // Mixing through PCA fitted on a small bank, then prototypes from two
    // shots per class.
    let bank_g: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), 0.1 * i as f64, 1.0]).collect();
    let bank_l: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.7).cos(), 0.05 * i as f64, (i as f64).sin(), -1.0]).collect();
    let proj = fit_pca(&bank_g, &bank_l, 2, "toy bank")?;
    let feats: Vec<MultiScaleFeature> = (0..4).map(|i| mix_features(&bank_g[i * 9], &bank_l[i * 9], &proj)).collect::<dcpn::Result<_>>()?;
    let mp = compute_prototypes(&feats, &[0, 0, 1, 1])?;
    println!("mix prototype of class 0: {:.4?}", mp.get(0, Scale::Mix));
    for (name, metric) in [("euclidean", Metric::Euclidean), ("cosine", Metric::Cosine)] {
        let cfg = HeadConfig {
            metric,
            ..HeadConfig::default()
        };
        let r = score_query(&feats[1], &mp, &cfg)?;
        println!("{name:>9}: probabilities {:.4?}", r.probs);
    }
    Ok(())
}
