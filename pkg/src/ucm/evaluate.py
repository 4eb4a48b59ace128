"""Desk-scale metrics: BLEU-4, grounding precision, QA finetune accuracy,
and length statistics by condition flag.

BLEU-4 is the standard corpus recipe reimplemented directly: modified
n-gram precisions for n=1..4 with clipped counts, geometric mean, brevity
penalty against the closest reference length (ties toward the shorter
reference). Zero clipped counts are smoothed with an additive epsilon of
1e-9 so scores are reproducible; a hypothesis shorter than n contributes
the same epsilon at that order.

Grounding precision is measurable here because scenes are synthetic with
known contents: a mentioned pair is an attribute word immediately followed
by a category word, and a pair is grounded when some region in the source
scene carries exactly that (attribute, category) combination. Dense
captions count 1 or 0 on their pair; scene-level captions score the
fraction of their mentioned pairs that are grounded; either way captions
with no extractable pair score 0.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import corpus
from .corpus import FLAG_COCO, FLAG_DENSE, FLAG_NONE, FLAG_QUESTION, TrainingExample
from .generate import PseudoCaption
from .model import BRANCH_BI, UCModel
from .optim import AdamW
from .pretrain import TrainConfig
from .tensor import add, mul, no_grad, softmax_cross_entropy

BLEU_EPS = 1e-9

_FT_SALT = 509


@dataclass
class EvalSummary:
    bleu4: float
    grounding_precision: float
    vqa_accuracy: float
    mean_len_coco: float
    mean_len_dense: float
    counts: dict

    def lines(self) -> list[str]:
        rows = [
            ("bleu4", self.bleu4), ("grounding_precision", self.grounding_precision),
            ("vqa_accuracy", self.vqa_accuracy), ("mean_len_coco", self.mean_len_coco),
            ("mean_len_dense", self.mean_len_dense),
        ]
        out = [f"{k}\t{v:.6f}" for k, v in rows]
        out += [f"n_{k}\t{v}" for k, v in sorted(self.counts.items())]
        return out


# BLEU-4 --------------------------------------------------------------------


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def modified_precision(hypothesis: Sequence[str], references: Sequence[Sequence[str]], n: int) -> tuple[float, int]:
    """(clipped match count, total hypothesis n-grams)."""
    hyp = _ngrams(hypothesis, n)
    if not hyp:
        return 0.0, 0
    best = Counter()
    for ref in references:
        for gram, count in _ngrams(ref, n).items():
            if count > best[gram]:
                best[gram] = count
    clipped = sum(min(count, best[gram]) for gram, count in hyp.items())
    return float(clipped), sum(hyp.values())


def bleu4(hypothesis: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Sentence BLEU with orders 1..4; empty hypothesis scores 0 by convention."""
    if not references:
        raise ValueError("bleu4 needs at least one reference")
    if not hypothesis:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        clipped, total = modified_precision(hypothesis, references, n)
        if total == 0:
            p = BLEU_EPS  # hypothesis shorter than n
        else:
            p = max(clipped, BLEU_EPS) / total
        log_sum += 0.25 * np.log(p)
    c = len(hypothesis)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c >= r else float(np.exp(1.0 - r / c))
    return float(bp * np.exp(log_sum))


# grounding ------------------------------------------------------------------


def mentioned_pairs(words: Sequence[str]) -> list[tuple[str, str]]:
    """Adjacent (attribute word, category word) bigrams in caption order."""
    attrs = set(corpus.ATTRIBUTES)
    cats = set(corpus.CATEGORIES)
    return [(a, b) for a, b in zip(words, words[1:]) if a in attrs and b in cats]


def grounding_precision(pseudo: Sequence[PseudoCaption],
                        scene_pairs: Mapping[int, set[tuple[str, str]]]) -> float:
    """Fraction of caption content actually present in the source scenes."""
    if not pseudo:
        raise ValueError("no captions to score")
    scores = []
    for rec in pseudo:
        if rec.scene_id not in scene_pairs:
            raise ValueError(f"caption references unknown scene {rec.scene_id}")
        truth = scene_pairs[rec.scene_id]
        pairs = mentioned_pairs(rec.words)
        if not pairs:
            scores.append(0.0)
        elif rec.flag == FLAG_DENSE:
            scores.append(1.0 if pairs[0] in truth else 0.0)
        else:
            scores.append(sum(p in truth for p in pairs) / len(pairs))
    return float(np.mean(scores))


def dataset_scene_pairs(region_sets: Mapping[int, corpus.RegionSet]) -> dict[int, set[tuple[str, str]]]:
    return {sid: rs.word_pairs() for sid, rs in region_sets.items()}


def grounding_chance_rate(region_sets: Mapping[int, corpus.RegionSet]) -> float:
    """Expected precision of uniformly random catalog pairs: the enumeration
    baseline a trained model has to beat."""
    n_pairs = len(corpus.ATTRIBUTES) * len(corpus.CATEGORIES)
    rates = [len(rs.word_pairs()) / n_pairs for rs in region_sets.values()]
    return float(np.mean(rates))


# length statistics ------------------------------------------------------------


def length_stats(captions_by_flag: Mapping[str, Sequence[Sequence[str]]]) -> tuple[float, float]:
    coco = captions_by_flag.get(FLAG_COCO, ())
    dense = captions_by_flag.get(FLAG_DENSE, ())
    if not coco or not dense:
        raise ValueError("need at least one caption per flag")
    return (float(np.mean([len(c) for c in coco])),
            float(np.mean([len(c) for c in dense])))


# QA finetune -------------------------------------------------------------------


def _qa_forward(model: UCModel, example: TrainingExample, use_condition_flag: bool):
    seq = example.text
    if not use_condition_flag:
        words = corpus.detokenize(seq.live_ids())
        seq = corpus.tokenize(words, FLAG_NONE, max_len=len(seq.ids), scene_id=seq.scene_id)
    rs = example.region_set
    out = model.forward_arrays(seq.live_ids(), rs.features_matrix(), rs.spatial_matrix(), BRANCH_BI)
    return model.qa_logits(out.cls_feature)


def vqa_accuracy(model: UCModel, qa_examples: Sequence[TrainingExample],
                 use_condition_flag: bool = True) -> float:
    if not qa_examples:
        raise ValueError("no QA examples")
    hits = 0
    with no_grad():
        for ex in qa_examples:
            logits = _qa_forward(model, ex, use_condition_flag)
            hits += int(np.argmax(logits.data)) == ex.answer_id
    return hits / len(qa_examples)


def finetune_vqa(model: UCModel, qa_train: Sequence[TrainingExample],
                 qa_test: Sequence[TrainingExample], epochs: int, seed: int = 0,
                 train_cfg: TrainConfig | None = None,
                 use_condition_flag: bool = True) -> float:
    """Finetune with the QA loss only (bi branch) and report test accuracy.

    The pretrained two-layer QA head on the [CLS] feature is reused; answers
    outside the answer vocabulary simply count as wrong at test time. The
    model is finetuned in place; pass a fresh copy to keep the original.
    """
    if not qa_train or not qa_test:
        raise ValueError("finetune_vqa needs non-empty train and test sets")
    for ex in qa_train:
        if ex.text.flag != FLAG_QUESTION or ex.answer_id is None:
            raise ValueError("finetune_vqa expects matched question examples with answers")
    cfg = train_cfg or TrainConfig(batch_size=16, lr=1e-3)
    batch = min(cfg.batch_size, len(qa_train))
    steps = max(1, -(-len(qa_train) // batch)) * epochs
    opt = AdamW(model.params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay, warmup_fraction=cfg.warmup_fraction,
                total_steps=steps)
    n = len(qa_train)
    for epoch in range(epochs):
        order = np.random.default_rng([_FT_SALT, seed, epoch]).permutation(n)
        for b in range(0, n, batch):
            total = None
            chunk = order[b:b + batch]
            for idx in chunk:
                ex = qa_train[int(idx)]
                loss = softmax_cross_entropy(_qa_forward(model, ex, use_condition_flag), [ex.answer_id])
                total = loss if total is None else add(total, loss)
            mul(total, 1.0 / len(chunk)).backward()
            opt.step()
            opt.zero_grad()
    return vqa_accuracy(model, qa_test, use_condition_flag)


def question_examples(dataset: corpus.SceneDataset) -> list[TrainingExample]:
    return [ex for ex in dataset.examples if ex.text.flag == FLAG_QUESTION and ex.matched]
