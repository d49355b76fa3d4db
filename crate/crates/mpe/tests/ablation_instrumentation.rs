//! The attention counter is process-global, so this check lives in its
//! own test binary where nothing else touches attentive pooling.

mod common;

use common::{small_model, synth_splits};
use mpe::episode::{sample_episode, EpisodeConfig};
use mpe::eval::{ablate, AblationVariant};
use mpe::proto::attentive_invocations;

#[test]
fn no_att_variant_never_invokes_attentive_prototypes() {
    let (train, valid, _) = synth_splits(4);
    let mut model = small_model(&[&train, &valid], 16, 1);
    model.cfg = ablate(&model.cfg, AblationVariant::NoAtt);

    let episode = sample_episode(
        &valid,
        &EpisodeConfig {
            n_way: 3,
            k_shot: 2,
            r_query: 3,
            seed: 4,
        },
    )
    .unwrap();

    let before = attentive_invocations();
    model.predict_episode(&episode).unwrap();
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let mut probe = model.with_params(model.params.clone());
    probe.episode_backward(&episode, &mut rng).unwrap();
    assert_eq!(
        attentive_invocations(),
        before,
        "attention must stay bypassed in the no_att variant"
    );

    // sanity: the full variant does invoke it
    let full = small_model(&[&train, &valid], 16, 1);
    full.predict_episode(&episode).unwrap();
    assert!(attentive_invocations() > before);
}
