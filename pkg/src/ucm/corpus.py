"""Synthetic scene/caption corpus: a stand-in for detector features and
human annotations.

Each scene is 4-8 objects drawn from fixed category/attribute catalogs with
boxes in the unit square. Region features are unit-norm pseudo-random basis
vectors keyed on (category, attribute), plus per-region Gaussian noise, so
the mapping from feature to words is learnable and the clean vector gives
feature regression a real target. Captions come from closed templates:
long scene-level ones (9-12 words, 2-3 objects), short region-level ones
(3-5 words, one object each), and two attribute questions per scene. The
whole corpus is a pure function of (seed, n_scenes, quality_mix).

Low-quality scenes (controlled by ``quality_mix``) get noise sigma 1.0 and
region confidences in U[0.05, 0.25]; normal scenes use sigma 0.1 and
U[0.6, 0.95]. The confidence gap is what the self-training filter keys on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DV = 32
DEFAULT_MAX_LEN = 24

CATEGORIES = (
    "ball", "bead", "block", "bottle", "bowl", "box", "cone", "cube", "cup",
    "cylinder", "disk", "gear", "lamp", "mug", "plate", "prism", "pyramid",
    "ring", "sphere", "wedge",
)
ATTRIBUTES = ("blue", "glass", "green", "metal", "plastic", "red", "wooden", "yellow")
COLOR_ATTRIBUTES = frozenset({"blue", "green", "red", "yellow"})

# answer vocabulary: attributes then categories, ids in that order
ANSWERS = ATTRIBUTES + CATEGORIES

FLAG_COCO = "coco"
FLAG_DENSE = "dense"
FLAG_QUESTION = "question"
FLAG_NONE = "none"
FLAGS = (FLAG_COCO, FLAG_DENSE, FLAG_QUESTION, FLAG_NONE)

_A = lambda i: ("attr", i)
_C = lambda i: ("cat", i)

# scene-level templates: (objects mentioned, token stream), 9-12 words each
SCENE_TEMPLATES = (
    (2, ("the", "scene", "shows", "a", _A(0), _C(0), "beside", "a", _A(1), _C(1))),
    (2, ("there", "is", "a", _A(0), _C(0), "and", "a", _A(1), _C(1), "here")),
    (3, ("a", _A(0), _C(0), "sits", "near", "a", _A(1), _C(1), "and", "a", _A(2), _C(2))),
    (2, ("you", "can", "see", "a", _A(0), _C(0), "next", "to", "a", _A(1), _C(1))),
    (2, ("the", "picture", "shows", "a", _A(0), _C(0), "with", "a", _A(1), _C(1))),
    (3, ("a", _A(0), _C(0), "a", _A(1), _C(1), "and", "a", _A(2), _C(2), "stand", "here")),
)

# region-level templates: 3-5 words, one object
REGION_TEMPLATES = (
    ("a", _A(0), _C(0)),
    ("the", _A(0), _C(0)),
    ("a", _A(0), _C(0), "shape"),
    ("the", _A(0), _C(0), "over", "there"),
    ("one", _A(0), _C(0), "alone"),
)

QUESTION_WORDS = ("what", "color", "material", "is", "the")

# derived seed salts, one per independent random stream
_SCENE_SALT = 101
_QUALITY_SALT = 102
_REGION_SALT = 103
_TEXT_SALT = 104
_BASIS_SALT = 105

REGION_MAGIC = b"UCMREG1\x00"


# vocabulary ------------------------------------------------------------------


class Vocab:
    """Closed whole-word vocabulary; specials occupy the lowest ids in a
    fixed documented order: [PAD], [CLS], [SEP], [MASK], [CND:COCO],
    [CND:DENSE], [CND:Q]."""

    SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[CND:COCO]", "[CND:DENSE]", "[CND:Q]")

    def __init__(self, words: Iterable[str]):
        ordered = list(self.SPECIALS) + sorted(set(words))
        self.id_to_token = tuple(ordered)
        self.token_to_id = {w: i for i, w in enumerate(ordered)}
        if len(self.token_to_id) != len(ordered):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def n_specials(self) -> int:
        return len(self.SPECIALS)

    pad_id = 0
    cls_id = 1
    sep_id = 2
    mask_id = 3
    cnd_coco_id = 4
    cnd_dense_id = 5
    cnd_question_id = 6

    def encode(self, word: str) -> int:
        try:
            return self.token_to_id[word]
        except KeyError:
            raise ValueError(f"word not in vocabulary: {word!r}") from None

    def decode(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def cnd_id(self, flag: str) -> int:
        return {FLAG_COCO: self.cnd_coco_id, FLAG_DENSE: self.cnd_dense_id,
                FLAG_QUESTION: self.cnd_question_id}[flag]


def _template_words() -> set[str]:
    words: set[str] = set()
    for _, stream in SCENE_TEMPLATES:
        words.update(tok for tok in stream if isinstance(tok, str))
    for stream in REGION_TEMPLATES:
        words.update(tok for tok in stream if isinstance(tok, str))
    words.update(QUESTION_WORDS)
    return words


@lru_cache(maxsize=1)
def build_vocab() -> Vocab:
    """The fixed corpus vocabulary; stable across runs by construction."""
    return Vocab(set(CATEGORIES) | set(ATTRIBUTES) | _template_words())


def answer_index(word: str) -> int:
    try:
        return ANSWERS.index(word)
    except ValueError:
        raise ValueError(f"not an answer word: {word!r}") from None


# domain types ----------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    category: int
    attribute: int
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    objects: tuple[SceneObject, ...]


@dataclass
class Region:
    feature: np.ndarray
    clean_feature: np.ndarray
    box: tuple[float, float, float, float]
    width: float
    height: float
    class_id: int
    attribute_id: int
    confidence: float


@dataclass
class RegionSet:
    scene_id: int
    regions: list[Region]

    def __len__(self) -> int:
        return len(self.regions)

    def features_matrix(self) -> np.ndarray:
        return np.stack([r.feature for r in self.regions])

    def spatial_matrix(self) -> np.ndarray:
        rows = [(*r.box, r.width, r.height) for r in self.regions]
        return np.asarray(rows, dtype=np.float64)

    def clean_matrix(self) -> np.ndarray:
        return np.stack([r.clean_feature for r in self.regions])

    def mean_confidence(self) -> float:
        return float(np.mean([r.confidence for r in self.regions]))

    def word_pairs(self) -> set[tuple[str, str]]:
        """(attribute word, category word) pairs present in this scene."""
        return {(ATTRIBUTES[r.attribute_id], CATEGORIES[r.class_id]) for r in self.regions}


@dataclass
class TokenSequence:
    """``[CLS] [CND:*] w_1 .. w_T [SEP]`` plus padding; flag None drops [CND]."""

    ids: list[int]
    flag: str
    length: int
    scene_id: int | None = None

    @property
    def live_len(self) -> int:
        return self.length + (2 if self.flag == FLAG_NONE else 3)

    def live_ids(self) -> list[int]:
        return self.ids[: self.live_len]

    def content_range(self) -> range:
        start = 1 if self.flag == FLAG_NONE else 2
        return range(start, start + self.length)


@dataclass
class TrainingExample:
    region_set: RegionSet
    text: TokenSequence
    matched: bool
    answer_id: int | None
    origin: str  # "labeled" | "pseudo"


@dataclass
class SceneDataset:
    scenes: list[SceneSpec]
    region_sets: dict[int, RegionSet]
    examples: list[TrainingExample]
    vocab: Vocab
    _captions_by_scene: dict[int, list[TrainingExample]] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.examples)

    def scene_ids(self) -> list[int]:
        return sorted(self.region_sets)

    def captions_by_scene(self) -> dict[int, list[TrainingExample]]:
        if not self._captions_by_scene:
            by_scene: dict[int, list[TrainingExample]] = {}
            for ex in self.examples:
                if ex.text.flag in (FLAG_COCO, FLAG_DENSE):
                    by_scene.setdefault(ex.region_set.scene_id, []).append(ex)
            self._captions_by_scene = by_scene
        return self._captions_by_scene

    def all_features(self) -> np.ndarray:
        """Every region feature in the dataset, the pool random maskings draw from."""
        return np.concatenate([self.region_sets[sid].features_matrix() for sid in self.scene_ids()])


# tokenizer --------------------------------------------------------------------


def tokenize(words: Sequence[str], flag: str, vocab: Vocab | None = None,
             max_len: int = DEFAULT_MAX_LEN, scene_id: int | None = None) -> TokenSequence:
    vocab = vocab or build_vocab()
    if flag not in FLAGS:
        raise ValueError(f"unknown condition flag: {flag!r}")
    ids = [vocab.cls_id]
    if flag != FLAG_NONE:
        ids.append(vocab.cnd_id(flag))
    ids.extend(vocab.encode(w) for w in words)
    ids.append(vocab.sep_id)
    if len(ids) > max_len:
        raise ValueError(f"sequence of {len(ids)} tokens exceeds max_len {max_len}")
    ids.extend([vocab.pad_id] * (max_len - len(ids)))
    return TokenSequence(ids=ids, flag=flag, length=len(words), scene_id=scene_id)


def detokenize(ids: Sequence[int], vocab: Vocab | None = None) -> list[str]:
    vocab = vocab or build_vocab()
    return [vocab.decode(i) for i in ids if i >= vocab.n_specials]


# scene generation --------------------------------------------------------------


def generate_scene(generator_seed: int, scene_id: int) -> SceneSpec:
    """Bit-reproducible scene: same (seed, scene_id) gives the same spec."""
    rng = np.random.default_rng([_SCENE_SALT, generator_seed, scene_id])
    n_objects = int(rng.integers(4, 9))
    objects = []
    for _ in range(n_objects):
        cat = int(rng.integers(len(CATEGORIES)))
        attr = int(rng.integers(len(ATTRIBUTES)))
        x1 = float(rng.uniform(0.0, 0.8))
        y1 = float(rng.uniform(0.0, 0.8))
        w = float(rng.uniform(0.1, 0.2))
        h = float(rng.uniform(0.1, 0.2))
        objects.append(SceneObject(category=cat, attribute=attr, box=(x1, y1, x1 + w, y1 + h)))
    return SceneSpec(scene_id=scene_id, objects=tuple(objects))


@lru_cache(maxsize=64)
def _catalog_basis(kind: int, index: int, d_v: int) -> np.ndarray:
    rng = np.random.default_rng([_BASIS_SALT, kind, index, d_v])
    v = rng.normal(size=d_v)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


@lru_cache(maxsize=4096)
def _pair_basis(category: int, attribute: int, d_v: int) -> np.ndarray:
    """Unit-norm deterministic feature for a (category, attribute) pair.

    Built from one hash-seeded direction per catalog entry: pairs sharing a
    category (or attribute) share that component, so the feature-to-word
    mapping is compositional rather than 160 unrelated memorizations.
    """
    v = _catalog_basis(0, category, d_v) + _catalog_basis(1, attribute, d_v)
    v = v / np.linalg.norm(v)
    v.setflags(write=False)
    return v


def build_region_set(scene: SceneSpec, generator_seed: int, low_quality: bool,
                     d_v: int = DEFAULT_DV) -> RegionSet:
    rng = np.random.default_rng([_REGION_SALT, generator_seed, scene.scene_id])
    sigma = 1.0 if low_quality else 0.1
    lo, hi = (0.05, 0.25) if low_quality else (0.6, 0.95)
    regions = []
    for obj in scene.objects:
        clean = _pair_basis(obj.category, obj.attribute, d_v).copy()
        feature = clean + rng.normal(0.0, sigma, size=d_v)
        confidence = float(rng.uniform(lo, hi))
        x1, y1, x2, y2 = obj.box
        regions.append(Region(
            feature=feature, clean_feature=clean, box=obj.box,
            width=x2 - x1, height=y2 - y1,
            class_id=obj.category, attribute_id=obj.attribute, confidence=confidence,
        ))
    return RegionSet(scene_id=scene.scene_id, regions=regions)


def _fill_template(stream, picks: Sequence[SceneObject]) -> list[str]:
    words = []
    for tok in stream:
        if isinstance(tok, str):
            words.append(tok)
        elif tok[0] == "attr":
            words.append(ATTRIBUTES[picks[tok[1]].attribute])
        else:
            words.append(CATEGORIES[picks[tok[1]].category])
    return words


def scene_annotations(scene: SceneSpec, generator_seed: int):
    """(coco captions, dense captions, qa pairs) for one scene.

    Questions prefer objects whose category is unique in the scene so the
    attribute answer is unambiguous.
    """
    rng = np.random.default_rng([_TEXT_SALT, generator_seed, scene.scene_id])
    k = len(scene.objects)

    coco = []
    for _ in range(2):
        n_mention, stream = SCENE_TEMPLATES[int(rng.integers(len(SCENE_TEMPLATES)))]
        picks = [scene.objects[int(i)] for i in rng.choice(k, size=n_mention, replace=False)]
        coco.append(_fill_template(stream, picks))

    dense = []
    for obj in scene.objects:
        stream = REGION_TEMPLATES[int(rng.integers(len(REGION_TEMPLATES)))]
        dense.append(_fill_template(stream, [obj]))

    counts: dict[int, int] = {}
    for obj in scene.objects:
        counts[obj.category] = counts.get(obj.category, 0) + 1
    unique = [i for i, obj in enumerate(scene.objects) if counts[obj.category] == 1]
    rest = [i for i in range(k) if i not in unique]
    order = list(rng.permutation(unique)) + list(rng.permutation(rest))
    qa = []
    for idx in order[:2]:
        obj = scene.objects[int(idx)]
        attr_word = ATTRIBUTES[obj.attribute]
        kind = "color" if attr_word in COLOR_ATTRIBUTES else "material"
        question = ["what", kind, "is", "the", CATEGORIES[obj.category]]
        qa.append((question, attr_word))
    return coco, dense, qa


def generate_dataset(seed: int, n_scenes: int, quality_mix: float,
                     d_v: int = DEFAULT_DV, max_len: int = DEFAULT_MAX_LEN,
                     first_scene_id: int = 0) -> SceneDataset:
    """Labeled dataset: per scene 2 scene captions, one dense caption per
    object, and 2 QA pairs (4 + K examples).

    ``first_scene_id`` offsets the id range so labeled and unlabeled pools
    can live in one pipeline without scene-id collisions.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    if not 0.0 <= quality_mix <= 1.0:
        raise ValueError(f"quality_mix must lie in [0, 1], got {quality_mix}")
    vocab = build_vocab()
    scenes, region_sets, examples = [], {}, []
    for scene_id in range(first_scene_id, first_scene_id + n_scenes):
        scene = generate_scene(seed, scene_id)
        low_q = np.random.default_rng([_QUALITY_SALT, seed, scene_id]).random() < quality_mix
        rs = build_region_set(scene, seed, low_q, d_v=d_v)
        scenes.append(scene)
        region_sets[scene_id] = rs
        coco, dense, qa = scene_annotations(scene, seed)
        for words in coco:
            examples.append(TrainingExample(rs, tokenize(words, FLAG_COCO, vocab, max_len, scene_id), True, None, "labeled"))
        for words in dense:
            examples.append(TrainingExample(rs, tokenize(words, FLAG_DENSE, vocab, max_len, scene_id), True, None, "labeled"))
        for words, answer in qa:
            examples.append(TrainingExample(rs, tokenize(words, FLAG_QUESTION, vocab, max_len, scene_id), True, answer_index(answer), "labeled"))
    return SceneDataset(scenes=scenes, region_sets=region_sets, examples=examples, vocab=vocab)


def sample_negative_caption(example: TrainingExample, dataset: SceneDataset,
                            rng: np.random.Generator) -> TokenSequence:
    """A caption from a uniformly chosen *other* scene (fake-pair sampling)."""
    by_scene = dataset.captions_by_scene()
    others = [sid for sid in sorted(by_scene) if sid != example.region_set.scene_id]
    if not others:
        raise ValueError("negative sampling needs at least 2 scenes")
    sid = others[int(rng.integers(len(others)))]
    pool = by_scene[sid]
    return pool[int(rng.integers(len(pool)))].text


# dataset files -----------------------------------------------------------------
#
# text file: one record per line, tab-separated
#   scene_id  origin  flag  matched  answer  caption words space-separated
# region sidecar: magic UCMREG1\0 then per scene (ascending scene_id):
#   u64 scene_id, u16 K, then K * (d_v f32 features, d_v f32 clean features,
#   4 f32 box, 2 f32 width/height, u16 class, u16 attr, f32 confidence),
# little-endian throughout.


def write_dataset_text(examples: Sequence[TrainingExample], path, vocab: Vocab | None = None) -> None:
    vocab = vocab or build_vocab()
    lines = []
    for ex in examples:
        words = detokenize(ex.text.live_ids(), vocab)
        answer = ANSWERS[ex.answer_id] if ex.answer_id is not None else ""
        lines.append("\t".join([
            str(ex.region_set.scene_id), ex.origin, ex.text.flag,
            "1" if ex.matched else "0", answer, " ".join(words),
        ]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def write_region_file(region_sets: dict[int, RegionSet], path, d_v: int = DEFAULT_DV) -> None:
    with open(path, "wb") as fh:
        fh.write(REGION_MAGIC)
        for sid in sorted(region_sets):
            rs = region_sets[sid]
            fh.write(struct.pack("<QH", sid, len(rs)))
            for r in rs.regions:
                fh.write(np.asarray(r.feature, dtype="<f4").tobytes())
                fh.write(np.asarray(r.clean_feature, dtype="<f4").tobytes())
                fh.write(struct.pack("<4f", *r.box))
                fh.write(struct.pack("<2f", r.width, r.height))
                fh.write(struct.pack("<HHf", r.class_id, r.attribute_id, r.confidence))


def read_region_file(path, d_v: int = DEFAULT_DV) -> dict[int, RegionSet]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(REGION_MAGIC):
        raise ValueError(f"{path}: not a region file (bad magic)")
    off = len(REGION_MAGIC)
    rec = struct.Struct(f"<{d_v}f{d_v}f4f2fHHf")
    region_sets: dict[int, RegionSet] = {}
    while off < len(blob):
        sid, k = struct.unpack_from("<QH", blob, off)
        off += 10
        regions = []
        for _ in range(k):
            vals = rec.unpack_from(blob, off)
            off += rec.size
            feature = np.asarray(vals[:d_v], dtype=np.float64)
            clean = np.asarray(vals[d_v:2 * d_v], dtype=np.float64)
            box = tuple(vals[2 * d_v:2 * d_v + 4])
            width, height = vals[2 * d_v + 4:2 * d_v + 6]
            class_id, attr_id, conf = vals[2 * d_v + 6:]
            regions.append(Region(feature, clean, box, width, height, int(class_id), int(attr_id), float(conf)))
        region_sets[sid] = RegionSet(scene_id=sid, regions=regions)
    return region_sets


def scenes_from_regions(region_sets: dict[int, RegionSet]) -> list[SceneSpec]:
    scenes = []
    for sid in sorted(region_sets):
        objs = tuple(
            SceneObject(category=r.class_id, attribute=r.attribute_id, box=r.box)
            for r in region_sets[sid].regions
        )
        scenes.append(SceneSpec(scene_id=sid, objects=objs))
    return scenes


def read_dataset(text_path, reg_path, d_v: int = DEFAULT_DV,
                 max_len: int = DEFAULT_MAX_LEN) -> SceneDataset:
    vocab = build_vocab()
    region_sets = read_region_file(reg_path, d_v=d_v)
    examples = []
    with open(text_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ValueError(f"{text_path}:{lineno}: expected 6 fields, got {len(parts)}")
            sid, origin, flag, matched, answer, words = parts
            sid = int(sid)
            if sid not in region_sets:
                raise ValueError(f"{text_path}:{lineno}: scene {sid} missing from region file")
            seq = tokenize(words.split() if words else [], flag, vocab, max_len, sid)
            examples.append(TrainingExample(
                region_set=region_sets[sid], text=seq, matched=matched == "1",
                answer_id=answer_index(answer) if answer else None, origin=origin,
            ))
    return SceneDataset(
        scenes=scenes_from_regions(region_sets), region_sets=region_sets,
        examples=examples, vocab=vocab,
    )


def write_dataset(dataset: SceneDataset, text_path, reg_path, d_v: int = DEFAULT_DV) -> None:
    write_dataset_text(dataset.examples, text_path, dataset.vocab)
    write_region_file(dataset.region_sets, reg_path, d_v=d_v)
