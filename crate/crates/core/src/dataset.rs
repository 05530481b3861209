//! Synthetic multi-turn editing episodes, splits and JSONL persistence.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::instructions::{synthesize, Instruction, ParsedEdit, Relation};
use crate::scene::{Color, ObjectSpec, Placement, Scene, Shape, GRID};

pub const TURNS: usize = 5;

thread_local! {
    static INTERMEDIATE_READS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Number of ground-truth intermediate scenes read through
/// [`Episode::scene_before`] on this thread so far.
pub fn intermediate_reads() -> usize {
    INTERMEDIATE_READS.with(|c| c.get())
}

pub const FORMAT: &str = "sscr-episodes";
pub const VERSION: u32 = 1;

/// Objects removed from training in the zero-shot split.
pub const HELD_OUT: [ObjectSpec; 4] = [
    ObjectSpec { color: Color::Gray, shape: Shape::Cube },
    ObjectSpec { color: Color::Red, shape: Shape::Cube },
    ObjectSpec { color: Color::Green, shape: Shape::Sphere },
    ObjectSpec { color: Color::Purple, shape: Shape::Cylinder },
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub instruction: Instruction,
    pub edit: ParsedEdit,
    /// Scene after this turn's edit.
    pub scene: Scene,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub id: u64,
    pub turns: Vec<Turn>,
}

impl Episode {
    /// Scene before turn `t` (0-based); empty for the first turn. Reads of
    /// intermediate scenes are counted per thread, see [`intermediate_reads`].
    pub fn scene_before(&self, t: usize) -> Scene {
        if t == 0 {
            Scene::empty()
        } else {
            INTERMEDIATE_READS.with(|c| c.set(c.get() + 1));
            self.turns[t - 1].scene.clone()
        }
    }

    pub fn final_scene(&self) -> &Scene {
        &self.turns.last().expect("episode has turns").scene
    }

    pub fn targets(&self) -> impl Iterator<Item = ObjectSpec> + '_ {
        self.turns.iter().map(|t| t.edit.target())
    }

    /// Replays every edit from an empty scene and compares with the stored
    /// scenes and instruction text.
    pub fn validate(&self) -> Result<(), String> {
        if self.turns.len() != TURNS {
            return Err(format!("expected {TURNS} turns, found {}", self.turns.len()));
        }
        if self.turns[0].edit.relation() != Relation::Center {
            return Err("first turn must place an object at the center".into());
        }
        let mut scene = Scene::empty();
        for (t, turn) in self.turns.iter().enumerate() {
            let parsed = turn.instruction.parse().map_err(|e| format!("turn {}: {e}", t + 1))?;
            if parsed != turn.edit {
                return Err(format!("turn {}: text does not match the edit", t + 1));
            }
            scene = scene.apply_edit(&turn.edit).map_err(|e| format!("turn {}: {e}", t + 1))?;
            if scene != turn.scene {
                return Err(format!("turn {}: stored scene differs from replay", t + 1));
            }
        }
        Ok(())
    }
}

fn episode_seed(master: u64, index: u64) -> u64 {
    // splitmix64 step over (master, index)
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Episode `index` of the stream defined by `master_seed`.
pub fn generate_episode(master_seed: u64, index: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(master_seed, index));
    loop {
        if let Some(turns) = try_episode(&mut rng) {
            return Episode { id: index, turns };
        }
    }
}

fn try_episode(rng: &mut ChaCha8Rng) -> Option<Vec<Turn>> {
    let first = ObjectSpec::all().choose(rng)?;
    let mut turns = Vec::with_capacity(TURNS);
    let mut scene = Scene::empty();
    for t in 0..TURNS {
        let mut placed = false;
        for _ in 0..64 {
            let edit = if t == 0 {
                ParsedEdit::center(first)
            } else {
                let present = scene.specs();
                let target = ObjectSpec::all().filter(|s| !present.contains(s)).choose(rng)?;
                let anchor = *present.iter().choose(rng)?;
                let relation = *Relation::ANCHORED.choose(rng)?;
                ParsedEdit::relative(target, relation, anchor)?
            };
            if !is_unambiguous(&scene, &edit) {
                continue;
            }
            if let Ok(next) = scene.apply_edit(&edit) {
                scene = next;
                turns.push(Turn {
                    instruction: synthesize(&edit),
                    edit,
                    scene: scene.clone(),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(turns)
}

/// Number of `(relation, anchor)` pairs over the objects of `scene` that
/// would put `edit`'s target on the same cell as `edit` does. Zero when the
/// edit is infeasible.
pub fn explanations(scene: &Scene, edit: &ParsedEdit) -> usize {
    let Ok(cell) = scene.placement_for(edit) else {
        return 0;
    };
    if edit.relation() == Relation::Center {
        return 1;
    }
    scene
        .specs()
        .into_iter()
        .flat_map(|a| Relation::ANCHORED.into_iter().map(move |r| (r, a)))
        .filter(|&(r, a)| {
            let alt = ParsedEdit::relative(edit.target(), r, a).expect("anchored");
            scene.placement_for(&alt).ok() == Some(cell)
        })
        .count()
}

/// Whether the resulting image pins down the instruction: no other
/// relation/anchor pair leads to the same placement.
pub fn is_unambiguous(scene: &Scene, edit: &ParsedEdit) -> bool {
    explanations(scene, edit) == 1
}

/// `n` episodes with ids `0..n`.
pub fn generate_episodes(n: usize, seed: u64) -> Vec<Episode> {
    (0..n as u64).map(|i| generate_episode(seed, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Share of the training episodes kept, in `(0, 1]`.
    pub fraction: f64,
    /// Training episodes with any of these targets are dropped.
    pub held_out: Vec<ObjectSpec>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 600,
            val: 200,
            test: 200,
            fraction: 1.0,
            held_out: Vec::new(),
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn zero_shot(mut self) -> Self {
        self.held_out = HELD_OUT.to_vec();
        self
    }

    fn admits(&self, ep: &Episode) -> bool {
        !ep.targets().any(|s| self.held_out.contains(&s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("need {needed} {what} episodes, only {available} available")]
    Insufficient {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("line {line}: {message} (last good line: {last_good})")]
    Malformed {
        line: usize,
        last_good: usize,
        message: String,
    },
    #[error("missing or bad header line: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Test takes the first episodes, validation the next, training the rest
/// after the held-out filter; then training is subsampled to the fraction.
pub fn make_split(episodes: &[Episode], config: &SplitConfig) -> Result<Split, DatasetError> {
    if !(config.fraction > 0.0 && config.fraction <= 1.0) {
        return Err(DatasetError::Fraction(config.fraction));
    }
    let need = |what, needed, available| {
        if needed > available {
            Err(DatasetError::Insufficient { what, needed, available })
        } else {
            Ok(())
        }
    };
    need("test", config.test, episodes.len())?;
    let test = episodes[..config.test].to_vec();
    let rest = &episodes[config.test..];
    need("val", config.val, rest.len())?;
    let val = rest[..config.val].to_vec();
    let pool: Vec<&Episode> = rest[config.val..].iter().filter(|e| config.admits(e)).collect();
    need("train", config.train, pool.len())?;
    let train = subsample(pool[..config.train].iter().map(|e| (*e).clone()).collect(), config);
    Ok(Split { train, val, test })
}

fn subsample(train: Vec<Episode>, config: &SplitConfig) -> Vec<Episode> {
    scarce(train, config.fraction, config.seed)
}

/// Seeded uniform subset of `round(fraction * n)` episodes, original order kept.
pub fn scarce(train: Vec<Episode>, fraction: f64, seed: u64) -> Vec<Episode> {
    if fraction >= 1.0 {
        return train;
    }
    let keep = (fraction * train.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca7_c17e);
    let mut idx = rand::seq::index::sample(&mut rng, train.len(), keep).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| train[i].clone()).collect()
}

/// Generates exactly as many episodes as the split needs: test and
/// validation first, then training episodes until enough pass the filter.
pub fn build_split(config: &SplitConfig) -> Result<Split, DatasetError> {
    if !(config.fraction > 0.0 && config.fraction <= 1.0) {
        return Err(DatasetError::Fraction(config.fraction));
    }
    let mut index = 0u64;
    let mut next = || {
        index += 1;
        generate_episode(config.seed, index - 1)
    };
    let test = (0..config.test).map(|_| next()).collect();
    let val = (0..config.val).map(|_| next()).collect();
    let mut train = Vec::with_capacity(config.train);
    while train.len() < config.train {
        let ep = next();
        if config.admits(&ep) {
            train.push(ep);
        }
    }
    Ok(Split {
        train: subsample(train, config),
        val,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    grid: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    id: u64,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    text: String,
    target: (Color, Shape),
    relation: String,
    anchor: Option<(Color, Shape)>,
    scene: Vec<(Color, Shape, usize, usize)>,
}

impl From<&Episode> for EpisodeRecord {
    fn from(ep: &Episode) -> Self {
        let pair = |s: ObjectSpec| (s.color, s.shape);
        Self {
            id: ep.id,
            turns: ep
                .turns
                .iter()
                .map(|t| TurnRecord {
                    text: t.instruction.text(),
                    target: pair(t.edit.target()),
                    relation: t.edit.relation().key().to_string(),
                    anchor: t.edit.anchor().map(pair),
                    scene: t
                        .scene
                        .placements()
                        .iter()
                        .map(|p| (p.spec.color, p.spec.shape, p.x, p.y))
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<EpisodeRecord> for Episode {
    type Error = String;

    fn try_from(rec: EpisodeRecord) -> Result<Self, String> {
        let spec = |(c, s): (Color, Shape)| ObjectSpec::new(c, s);
        let turns = rec
            .turns
            .into_iter()
            .map(|t| {
                let relation = Relation::from_key(&t.relation)
                    .ok_or_else(|| format!("unknown relation `{}`", t.relation))?;
                let edit = match (relation, t.anchor) {
                    (Relation::Center, None) => ParsedEdit::center(spec(t.target)),
                    (Relation::Center, Some(_)) => return Err("center edit with an anchor".into()),
                    (r, Some(a)) => ParsedEdit::relative(spec(t.target), r, spec(a)).expect("anchored"),
                    (_, None) => return Err(format!("`{relation}` edit without an anchor")),
                };
                let instruction = Instruction::tokenize(&t.text).map_err(|e| e.to_string())?;
                let scene = Scene::from_placements(t.scene.into_iter().map(|(c, s, x, y)| Placement {
                    spec: ObjectSpec::new(c, s),
                    x,
                    y,
                }))
                .map_err(|e| e.to_string())?;
                Ok(Turn { instruction, edit, scene })
            })
            .collect::<Result<_, String>>()?;
        let ep = Episode { id: rec.id, turns };
        ep.validate()?;
        Ok(ep)
    }
}

pub fn write_jsonl(episodes: &[Episode], out: impl Write) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        grid: GRID,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for ep in episodes {
        serde_json::to_writer(&mut out, &EpisodeRecord::from(ep))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads episodes written by [`write_jsonl`], replaying every edit.
pub fn read_jsonl(input: impl BufRead) -> Result<Vec<Episode>, DatasetError> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DatasetError::Header("empty file".into()))??;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| DatasetError::Header(e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION || header.grid != GRID {
        return Err(DatasetError::Header(format!(
            "expected {FORMAT} v{VERSION} grid {GRID}, found {} v{} grid {}",
            header.format, header.version, header.grid
        )));
    }
    let mut episodes = Vec::new();
    let mut last_good = 1;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let malformed = |message: String| DatasetError::Malformed {
            line: line_no,
            last_good,
            message,
        };
        let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        episodes.push(Episode::try_from(rec).map_err(malformed)?);
        last_good = line_no;
    }
    Ok(episodes)
}

pub fn save(episodes: &[Episode], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(episodes, std::fs::File::create(path)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Episode>, DatasetError> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Files of a split directory.
pub fn split_paths(dir: &Path) -> [std::path::PathBuf; 3] {
    ["train", "val", "test"].map(|s| dir.join(format!("{s}.jsonl")))
}

pub fn save_split(split: &Split, dir: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir)?;
    let [train, val, test] = split_paths(dir);
    save(&split.train, &train)?;
    save(&split.val, &val)?;
    save(&split.test, &test)
}

pub fn load_split(dir: &Path) -> Result<Split, DatasetError> {
    let [train, val, test] = split_paths(dir);
    Ok(Split {
        train: load(&train)?,
        val: load(&val)?,
        test: load(&test)?,
    })
}

/// Random order of episode indices for one training epoch.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Target specs that occur in any of the episodes.
pub fn target_specs(episodes: &[Episode]) -> BTreeSet<ObjectSpec> {
    episodes.iter().flat_map(|e| e.targets()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episodes_have_five_turns_starting_at_centre() {
        for ep in generate_episodes(200, 3) {
            assert_eq!(ep.turns.len(), TURNS);
            assert_eq!(ep.turns[0].edit.relation(), Relation::Center);
            ep.validate().unwrap();
        }
    }

    #[test]
    fn generated_edits_have_a_single_explanation() {
        for ep in generate_episodes(100, 8) {
            for t in 0..TURNS {
                assert_eq!(explanations(&ep.scene_before(t), &ep.turns[t].edit), 1);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_episodes(50, 11), generate_episodes(50, 11));
        assert_ne!(generate_episodes(5, 11), generate_episodes(5, 12));
    }

    #[test]
    fn every_colour_and_shape_appears() {
        let specs = target_specs(&generate_episodes(1000, 5));
        for c in Color::ALL {
            assert!(specs.iter().any(|s| s.color == c), "{c:?}");
        }
        for s in Shape::ALL {
            assert!(specs.iter().any(|x| x.shape == s), "{s:?}");
        }
    }

    #[test]
    fn fraction_halves_training() {
        let eps = generate_episodes(200, 1);
        let cfg = SplitConfig {
            train: 100,
            val: 20,
            test: 20,
            fraction: 0.5,
            ..Default::default()
        };
        let split = make_split(&eps, &cfg).unwrap();
        assert_eq!(split.train.len(), 50);
        assert_eq!(split.val.len(), 20);
        let full = make_split(&eps, &SplitConfig { fraction: 1.0, ..cfg }).unwrap();
        assert_eq!(full.train.len(), 100);
        let ids: BTreeSet<u64> = full.train.iter().map(|e| e.id).collect();
        assert!(split.train.iter().all(|e| ids.contains(&e.id)));
    }

    #[test]
    fn zero_shot_filter_only_touches_training() {
        let cfg = SplitConfig {
            train: 80,
            val: 40,
            test: 40,
            ..Default::default()
        }
        .zero_shot();
        let split = build_split(&cfg).unwrap();
        assert_eq!(split.train.len(), 80);
        let train_specs = target_specs(&split.train);
        assert!(HELD_OUT.iter().all(|h| !train_specs.contains(h)));
        let test_specs = target_specs(&split.test);
        assert!(HELD_OUT.iter().any(|h| test_specs.contains(h)));
        let eps = generate_episodes(400, 0);
        assert_eq!(make_split(&eps, &cfg).unwrap(), split);
    }

    #[test]
    fn insufficient_episodes_is_error() {
        let eps = generate_episodes(30, 0);
        let cfg = SplitConfig {
            train: 20,
            val: 10,
            test: 10,
            ..Default::default()
        };
        assert!(matches!(
            make_split(&eps, &cfg),
            Err(DatasetError::Insufficient { what: "train", .. })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let eps = generate_episodes(100, 9);
        let mut buf = Vec::new();
        write_jsonl(&eps, &mut buf).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), eps);
    }

    #[test]
    fn empty_list_is_header_only() {
        let mut buf = Vec::new();
        write_jsonl(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"format\":\"sscr-episodes\",\"version\":1,\"grid\":8}"));
        assert!(read_jsonl(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_names_last_good_line() {
        let eps = generate_episodes(3, 9);
        let mut buf = Vec::new();
        write_jsonl(&eps, &mut buf).unwrap();
        buf.truncate(buf.len() - 40);
        let err = read_jsonl(buf.as_slice()).unwrap_err();
        assert!(
            matches!(err, DatasetError::Malformed { line: 4, last_good: 3, .. }),
            "{err}"
        );
        assert!(err.to_string().contains("last good line: 3"));
    }

    #[test]
    fn infeasible_record_is_rejected() {
        let eps = generate_episodes(1, 2);
        let mut buf = Vec::new();
        write_jsonl(&eps, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bad = text.replacen("\"at-the-center\"", "\"behind\"", 1);
        assert!(matches!(
            read_jsonl(bad.as_bytes()),
            Err(DatasetError::Malformed { line: 2, .. })
        ));
    }
}
