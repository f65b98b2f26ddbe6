//! Episodic sampling, domain tasks and the dataset distance.

use dcpn::data::{
    dataset_distance, generate_synthetic_corpus, make_domain_task, DatasetSpec, DomainKind, EpisodeSpec, Split,
};

fn main() -> dcpn::Result<()> {
    let (corpus, _) = generate_synthetic_corpus(7, 30, 32, 0)?;
    let spec = EpisodeSpec::new(5, 1, 15, 42)?;
    let ep = spec.episode(&corpus, 0)?;
    println!("5-way 1-shot, 15 queries: |support| = {}, |query| = {}", ep.support.len(), ep.query.len());
    println!("source classes in draw order: {:?}", ep.classes);
    println!("support (sample, label): {:?}", ep.support);
    println!("first queries: {:?}", &ep.query[..6]);
    println!("same index, same episode: {}", spec.episode(&corpus, 0)? == ep);
    println!("next index draws classes {:?}", spec.episode(&corpus, 1)?.classes);

    let spec_of = |name: &str, split| DatasetSpec {
        name: name.into(),
        root: "unused".into(),
        split,
        class_names: vec!["a".into(), "b".into()],
    };
    let same = make_domain_task(DomainKind::Same, spec_of("crctp", Split::Train), spec_of("crctp", Split::Test))?;
    let near = make_domain_task(DomainKind::Near, spec_of("crctp", Split::Train), spec_of("nctcrc", Split::Test))?;
    println!("same-domain default: {}-way; near-domain default: {}-way", same.n_way, near.n_way);
    let bad = make_domain_task(DomainKind::Same, spec_of("crctp", Split::Train), spec_of("lc25000", Split::Test));
    println!("same-domain across datasets: {}", bad.unwrap_err());

    let e1 = vec![vec![1.0, 0.0, 0.0]];
    let e2 = vec![vec![0.0, 3.0, 0.0], vec![0.0, 1.0, 0.0]];
    println!("distance between unit means e1 and e2: {:.6}", dataset_distance(&e1, &e2)?);
    Ok(())
}
