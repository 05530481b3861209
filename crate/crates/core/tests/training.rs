use sscr::dataset::generate_episodes;
use sscr::editor::{Editor, EditorConfig};
use sscr::explainer::{Explainer, ExplainerConfig};
use sscr::instructions::Vocabulary;
use sscr::train::{evaluate, Curves, Mode, TrainConfig, Trainer};

#[test]
fn ctc_editor_memorizes_ten_episodes() {
    let vocab = Vocabulary::standard();
    let episodes = generate_episodes(10, 3);
    let mut explainer = Explainer::new(
        ExplainerConfig {
            epochs: 60,
            batch_size: 5,
            ..Default::default()
        },
        &vocab,
        0,
    )
    .unwrap();
    explainer.pretrain(&vocab, &episodes, &episodes, 0).unwrap();

    let mut editor = Editor::new(EditorConfig::default(), &vocab, 0).unwrap();
    let config = TrainConfig {
        mode: Mode::Ctc,
        epochs: 200,
        batch_size: 2,
        ..Default::default()
    };
    let trainer = Trainer::new(&vocab, Some(&explainer), config).unwrap();
    let mut curves = Curves::default();
    trainer.train_editor(&mut editor, &episodes, &mut curves).unwrap();
    let report = evaluate(&editor, &vocab, &episodes).unwrap();
    assert!(report.f1 >= 0.9, "F1 on the training episodes {:.3}", report.f1);
}
