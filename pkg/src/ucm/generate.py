"""Zero-shot conditional decoding with the one-directional branch.

Decoding starts from ``[CLS] [CND:flag]`` and repeatedly appends a [MASK]
at the next slot, runs the one branch with that slot as mask position, and
samples the next word from the top-K renormalized softmax of the row just
before the mask. It stops at a sampled [SEP] or at the length cap. No
finetuning happens between training and decoding.

Three augmentations diversify the output: each region feature is zeroed
independently at ``region_mask_ratio`` before decoding, words are sampled
from the top-K rather than argmax (ties break toward the lower token id so
K=1 is exact argmax), and the condition token picks the style. Questions
are never generated. Sampler seeds derive from
(seed, scene, flag, replica), so records are independent of scheduling
order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import corpus
from .corpus import FLAG_COCO, FLAG_DENSE, RegionSet
from .model import BRANCH_ONE, UCModel
from .tensor import Tensor, gather_rows, no_grad

_SAMPLE_SALT = 402

FLAG_CODE = {FLAG_COCO: 0, FLAG_DENSE: 1}


@dataclass
class GenerationConfig:
    top_k: int = 5
    region_mask_ratio: float = 0.5
    max_len: int = 16
    n_coco: int = 5
    n_dense: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if not 0.0 <= self.region_mask_ratio < 1.0:
            raise ValueError("region_mask_ratio must lie in [0, 1)")


@dataclass
class PseudoCaption:
    scene_id: int
    flag: str
    words: list[str]
    masked_region_indices: list[int]
    sampler_seed: tuple[int, ...]


def top_k_sample(logits, k: int, rng: np.random.Generator) -> int:
    """Sample an id from the renormalized softmax over the k highest logits."""
    if k < 1:
        raise ValueError("k must be at least 1")
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    arr = arr.reshape(-1)
    k = min(k, arr.size)
    # sort by (-logit, id): ties break toward the lower token id
    order = np.lexsort((np.arange(arr.size), -arr))
    top = order[:k]
    if k == 1:
        return int(top[0])
    z = arr[top] - arr[top].max()
    p = np.exp(z)
    p /= p.sum()
    return int(top[rng.choice(k, p=p)])


def drop_regions(features: np.ndarray, ratio: float, rng: np.random.Generator,
                 max_attempts: int = 10) -> tuple[np.ndarray, list[int]]:
    """Zero each region independently at ``ratio``; never drop all of them.

    A fully-masked draw is rejected and redrawn; after ``max_attempts``
    rejections one region is kept visible regardless.
    """
    k = features.shape[0]
    for _ in range(max_attempts):
        dropped = [i for i in range(k) if rng.random() < ratio]
        if len(dropped) < k:
            break
    else:
        keep = int(rng.integers(k))
        dropped = [i for i in range(k) if i != keep]
    out = features.copy()
    out[dropped] = 0.0
    return out, dropped


def _decode(model: UCModel, features: np.ndarray, spatial: np.ndarray, flag: str,
            cfg: GenerationConfig, rng: np.random.Generator) -> list[str]:
    vocab = corpus.build_vocab()
    banned = [vocab.pad_id, vocab.cls_id, vocab.mask_id,
              vocab.cnd_coco_id, vocab.cnd_dense_id, vocab.cnd_question_id]
    ids = [vocab.cls_id, vocab.cnd_id(flag)]
    words: list[str] = []
    with no_grad():
        for _ in range(cfg.max_len):
            step_ids = ids + [vocab.mask_id]
            m = len(ids)
            out = model.forward_arrays(step_ids, features, spatial, BRANCH_ONE, m)
            logits = model.mlm_logits(gather_rows(out.lang_hidden, [m - 1])).data.reshape(-1).copy()
            logits[banned] = -np.inf
            token = top_k_sample(logits, cfg.top_k, rng)
            if token == vocab.sep_id:
                break
            ids.append(token)
            words.append(vocab.decode(token))
    return words


def generate_caption(model: UCModel, region_set: RegionSet, flag: str,
                     cfg: GenerationConfig, rng: np.random.Generator) -> list[str]:
    """One caption for one scene under one region-drop pattern."""
    if flag not in (FLAG_COCO, FLAG_DENSE):
        raise ValueError(f"generation flag must be coco or dense, got {flag!r}")
    features, _ = drop_regions(region_set.features_matrix(), cfg.region_mask_ratio, rng)
    return _decode(model, features, region_set.spatial_matrix(), flag, cfg, rng)


def pseudo_label_scene(model: UCModel, region_set: RegionSet,
                       cfg: GenerationConfig) -> list[PseudoCaption]:
    """n_coco + n_dense records with independent drop patterns and seeds."""
    records = []
    for flag, count in ((FLAG_COCO, cfg.n_coco), (FLAG_DENSE, cfg.n_dense)):
        for replica in range(count):
            key = (_SAMPLE_SALT, cfg.seed, region_set.scene_id, FLAG_CODE[flag], replica)
            rng = np.random.default_rng(list(key))
            features, dropped = drop_regions(region_set.features_matrix(), cfg.region_mask_ratio, rng)
            words = _decode(model, features, region_set.spatial_matrix(), flag, cfg, rng)
            records.append(PseudoCaption(
                scene_id=region_set.scene_id, flag=flag, words=words,
                masked_region_indices=dropped, sampler_seed=key,
            ))
    return records


def pseudo_examples(records: list[PseudoCaption], region_sets: dict[int, RegionSet],
                    max_len: int = corpus.DEFAULT_MAX_LEN) -> list[corpus.TrainingExample]:
    """Pseudo records as training examples: origin pseudo, matched, no answer."""
    vocab = corpus.build_vocab()
    out = []
    for rec in records:
        seq = corpus.tokenize(rec.words, rec.flag, vocab, max_len, rec.scene_id)
        out.append(corpus.TrainingExample(
            region_set=region_sets[rec.scene_id], text=seq,
            matched=True, answer_id=None, origin="pseudo",
        ))
    return out
