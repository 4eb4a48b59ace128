"""Masking policies, the six training losses, batch assembly, training loop.

Text masking comes in two flavors. The bidirectional policy selects each
content word independently at rate 0.15 and, once selected, replaces it
with [MASK] 80% of the time, a random non-special word 10%, and keeps it
10% (one position is force-selected when the draw picks none, so every
example contributes). The one-directional policy masks exactly one
uniformly chosen content word; its loss is computed from the hidden row
just before the mask, which by construction conditions on the words before
it plus the image. Region masking mirrors the text rates, zeroing features
at 80% and swapping in a random dataset feature at 10%. Specials ([CLS],
[CND], [SEP], [PAD]) are never masked: the condition token is the control
signal the model is being trained to obey.

Matching works on 50% negative pairing: the example keeps its image but is
assigned a caption sampled from another scene. Word-prediction and QA
losses are gated on matched=True; the masked-region losses are computed on
both branches and averaged. All randomness derives from
(seed, epoch, example index), so batch assembly is order-independent.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import corpus
from .corpus import FLAG_QUESTION, SceneDataset, TokenSequence, TrainingExample
from .model import BRANCH_BI, BRANCH_ONE, ModelConfig, UCModel
from .optim import AdamW
from .tensor import Tensor, add, gather_rows, mul, softmax_cross_entropy, tsum

SELECT_RATE = 0.15
MASK_SHARE = 0.80
RANDOM_SHARE = 0.10  # remainder is kept unchanged

LABEL_NONE = -1

_SHUFFLE_SALT = 307
_EXAMPLE_SALT = 308

LOSS_TERMS = ("cmlm_bi", "cmlm_one", "itm", "qa", "moam", "mfr")


@dataclass
class MaskedText:
    input_ids: list[int]
    label_ids: list[int]           # original token at masked positions, LABEL_NONE elsewhere
    mask_positions: list[int]


@dataclass
class MaskedRegions:
    features: np.ndarray           # [K, d_v] after masking
    masked_indices: list[int]
    class_labels: list[int]
    attr_labels: list[int]
    clean_features: np.ndarray     # [K, d_v] regression targets


@dataclass
class LossReport:
    cmlm_bi: float = 0.0
    cmlm_one: float = 0.0
    itm: float = 0.0
    qa: float = 0.0
    moam: float = 0.0
    mfr: float = 0.0
    total: float = 0.0
    counts: dict = field(default_factory=dict)

    def line(self, epoch: int) -> str:
        return "\t".join([str(epoch)] + [
            f"{getattr(self, term):.6f}" for term in LOSS_TERMS
        ] + [f"{self.total:.6f}"])


def mask_text_bi(seq: TokenSequence, rng: np.random.Generator,
                 vocab: corpus.Vocab | None = None) -> MaskedText:
    vocab = vocab or corpus.build_vocab()
    content = list(seq.content_range())
    if not content:
        raise ValueError("cannot mask a sequence without content words")
    input_ids = list(seq.ids)
    labels = [LABEL_NONE] * len(input_ids)
    selected = [p for p in content if rng.random() < SELECT_RATE]
    if not selected:
        selected = [content[int(rng.integers(len(content)))]]
    for p in selected:
        labels[p] = input_ids[p]
        r = rng.random()
        if r < MASK_SHARE:
            input_ids[p] = vocab.mask_id
        elif r < MASK_SHARE + RANDOM_SHARE:
            input_ids[p] = int(rng.integers(vocab.n_specials, len(vocab)))
        # else keep the original token
    return MaskedText(input_ids=input_ids, label_ids=labels, mask_positions=selected)


def mask_text_one(seq: TokenSequence, rng: np.random.Generator,
                  vocab: corpus.Vocab | None = None) -> MaskedText:
    """Exactly one position becomes [MASK], uniform over the content words
    plus the sentence terminator [SEP].

    The terminator plays the role punctuation plays in natural text: masking
    it teaches the model when a sentence is complete, which is what lets
    decoding stop instead of running to the length cap.
    """
    vocab = vocab or corpus.build_vocab()
    content = list(seq.content_range())
    if not content:
        raise ValueError("cannot mask a sequence without content words")
    eligible = content + [content[-1] + 1]  # the [SEP] slot
    m = eligible[int(rng.integers(len(eligible)))]
    input_ids = list(seq.ids)
    labels = [LABEL_NONE] * len(input_ids)
    labels[m] = input_ids[m]
    input_ids[m] = vocab.mask_id
    return MaskedText(input_ids=input_ids, label_ids=labels, mask_positions=[m])


def mask_regions(rs: corpus.RegionSet, rng: np.random.Generator,
                 feature_pool: np.ndarray | None = None) -> MaskedRegions:
    if len(rs) < 1:
        raise ValueError("cannot mask an empty region set")
    features = rs.features_matrix()
    pool = features if feature_pool is None else feature_pool
    masked = []
    for i in range(len(rs)):
        if rng.random() >= SELECT_RATE:
            continue
        masked.append(i)
        r = rng.random()
        if r < MASK_SHARE:
            features[i] = 0.0
        elif r < MASK_SHARE + RANDOM_SHARE:
            features[i] = pool[int(rng.integers(pool.shape[0]))]
    return MaskedRegions(
        features=features, masked_indices=masked,
        class_labels=[r.class_id for r in rs.regions],
        attr_labels=[r.attribute_id for r in rs.regions],
        clean_features=rs.clean_matrix(),
    )


def assemble_example(example: TrainingExample, dataset: SceneDataset,
                     rng: np.random.Generator, negative_rate: float = 0.5) -> TrainingExample:
    """50% negative pairing: keep the image, swap in a caption from another scene."""
    if rng.random() < negative_rate:
        neg = corpus.sample_negative_caption(example, dataset, rng)
        return replace(example, text=neg, matched=False, answer_id=None)
    return example


def _branch_region_losses(model: UCModel, vis_hidden: Tensor, mreg: MaskedRegions) -> tuple[Tensor, Tensor]:
    rows = gather_rows(vis_hidden, mreg.masked_indices)
    cls_logits = model.obj_class_logits(rows)
    attr_logits = model.obj_attr_logits(rows)
    labels_c = [mreg.class_labels[i] for i in mreg.masked_indices]
    labels_a = [mreg.attr_labels[i] for i in mreg.masked_indices]
    moam = add(softmax_cross_entropy(cls_logits, labels_c),
               softmax_cross_entropy(attr_logits, labels_a))
    pred = model.feat_regress(rows)
    target = Tensor(mreg.clean_features[mreg.masked_indices])
    diff = pred - target
    mfr = mul(tsum(mul(diff, diff)), 1.0 / len(mreg.masked_indices))
    return moam, mfr


def compute_losses(example: TrainingExample, masked_bi: MaskedText, masked_one: MaskedText,
                   masked_regions: MaskedRegions, model: UCModel,
                   weights: Mapping[str, float] | None = None) -> tuple[LossReport, dict[str, Tensor]]:
    """Run both branches once and assemble every loss term.

    Word prediction at the one-branch mask position m is read from hidden
    row m-1 (the deepest row allowed to see the image), so the prediction
    conditions on exactly the words before m plus the regions.
    """
    if example.text.flag == FLAG_QUESTION and example.matched and example.answer_id is None:
        raise ValueError("matched question example is missing its answer id")
    live = example.text.live_len
    rs = example.region_set
    spatial = rs.spatial_matrix()
    m = masked_one.mask_positions[0]

    bi_out = model.forward_arrays(masked_bi.input_ids[:live], masked_regions.features, spatial, BRANCH_BI)
    one_out = model.forward_arrays(masked_one.input_ids[:live], masked_regions.features, spatial, BRANCH_ONE, m)

    terms: dict[str, Tensor] = {}
    counts: dict[str, int] = {t: 0 for t in LOSS_TERMS}

    if example.matched and masked_bi.mask_positions:
        rows = gather_rows(bi_out.lang_hidden, masked_bi.mask_positions)
        labels = [masked_bi.label_ids[p] for p in masked_bi.mask_positions]
        terms["cmlm_bi"] = softmax_cross_entropy(model.mlm_logits(rows), labels)
        counts["cmlm_bi"] = len(labels)

    if example.matched:
        row = gather_rows(one_out.lang_hidden, [m - 1])
        terms["cmlm_one"] = softmax_cross_entropy(model.mlm_logits(row), [masked_one.label_ids[m]])
        counts["cmlm_one"] = 1

    terms["itm"] = softmax_cross_entropy(model.itm_logits(bi_out.cls_feature), [int(example.matched)])
    counts["itm"] = 1

    if example.text.flag == FLAG_QUESTION and example.matched:
        terms["qa"] = softmax_cross_entropy(model.qa_logits(bi_out.cls_feature), [example.answer_id])
        counts["qa"] = 1

    if masked_regions.masked_indices:
        moam_bi, mfr_bi = _branch_region_losses(model, bi_out.vis_hidden, masked_regions)
        moam_one, mfr_one = _branch_region_losses(model, one_out.vis_hidden, masked_regions)
        # losses from the two prediction branches are averaged
        terms["moam"] = mul(add(moam_bi, moam_one), 0.5)
        terms["mfr"] = mul(add(mfr_bi, mfr_one), 0.5)
        counts["moam"] = counts["mfr"] = len(masked_regions.masked_indices)

    total: Tensor | None = None
    for name, t in terms.items():
        w = 1.0 if weights is None else float(weights.get(name, 1.0))
        piece = t if w == 1.0 else mul(t, w)
        total = piece if total is None else add(total, piece)
    terms["total"] = total

    report = LossReport(
        **{name: (terms[name].item() if name in terms else 0.0) for name in LOSS_TERMS},
        total=total.item(), counts=counts,
    )
    return report, terms


# training loop -----------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    negative_rate: float = 0.5
    loss_weights: Mapping[str, float] | None = None
    log_path: str | None = None


@dataclass
class TrainResult:
    model: UCModel
    epoch_reports: list[LossReport]


def example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([_EXAMPLE_SALT, seed, epoch, index])


def _aggregate(reports: list[LossReport]) -> LossReport:
    agg = LossReport()
    totals = {t: 0.0 for t in LOSS_TERMS}
    counts = {t: 0 for t in LOSS_TERMS}
    for r in reports:
        for t in LOSS_TERMS:
            totals[t] += getattr(r, t) * r.counts.get(t, 0)
            counts[t] += r.counts.get(t, 0)
    for t in LOSS_TERMS:
        setattr(agg, t, totals[t] / counts[t] if counts[t] else 0.0)
    agg.total = float(np.mean([r.total for r in reports]))
    agg.counts = counts
    return agg


def train(dataset: SceneDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
          epochs: int, seed: int, init_values: Mapping[str, np.ndarray] | None = None,
          save_dir: str | None = None, resume: bool = False) -> TrainResult:
    """Shuffled mini-batch AdamW over the dataset; deterministic given seed."""
    from .model import save_checkpoint  # local to avoid cycle at import time

    n = len(dataset.examples)
    if n == 0:
        raise ValueError("dataset is empty")
    if train_cfg.batch_size > n:
        raise ValueError(f"batch size {train_cfg.batch_size} exceeds dataset size {n}")

    model = UCModel(model_cfg, seed=seed)
    if init_values is not None:
        model.copy_values_from(init_values)

    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    opt = AdamW(model.params, lr=train_cfg.lr, betas=train_cfg.betas, eps=train_cfg.eps,
                weight_decay=train_cfg.weight_decay, warmup_fraction=train_cfg.warmup_fraction,
                total_steps=epochs * steps_per_epoch)

    start_epoch = 0
    log_lines: list[str] = []
    if resume and save_dir:
        done = sorted(
            int(f[5:8]) for f in os.listdir(save_dir)
            if f.startswith("epoch") and f.endswith(".ckpt")
        )
        if done:
            start_epoch = done[-1] + 1
            # the .ckpt is the f32 interchange artifact; exact f64 training
            # state (params + moments) lives in the npz sidecar
            with np.load(os.path.join(save_dir, f"epoch{done[-1]:03d}.opt.npz")) as arrs:
                state = dict(arrs)
            model.copy_values_from({k[2:]: v for k, v in state.items() if k.startswith("p:")})
            opt.load_state_arrays({k: v for k, v in state.items() if not k.startswith("p:")})
            log = train_cfg.log_path
            if log and os.path.exists(log):
                log_lines = open(log, encoding="utf-8").read().splitlines()[:start_epoch]

    feature_pool = dataset.all_features()
    epoch_reports: list[LossReport] = []
    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng([_SHUFFLE_SALT, seed, epoch]).permutation(n)
        reports: list[LossReport] = []
        for b in range(0, n, train_cfg.batch_size):
            batch = order[b:b + train_cfg.batch_size]
            total: Tensor | None = None
            for idx in batch:
                rng = example_rng(seed, epoch, int(idx))
                ex = assemble_example(dataset.examples[int(idx)], dataset, rng, train_cfg.negative_rate)
                mtb = mask_text_bi(ex.text, rng, dataset.vocab)
                mto = mask_text_one(ex.text, rng, dataset.vocab)
                mreg = mask_regions(ex.region_set, rng, feature_pool)
                report, terms = compute_losses(ex, mtb, mto, mreg, model, train_cfg.loss_weights)
                reports.append(report)
                total = terms["total"] if total is None else add(total, terms["total"])
            mul(total, 1.0 / len(batch)).backward()
            opt.step()
            opt.zero_grad()
        agg = _aggregate(reports)
        epoch_reports.append(agg)
        log_lines.append(agg.line(epoch))
        if train_cfg.log_path:
            with open(train_cfg.log_path, "w", encoding="utf-8") as fh:
                fh.write("\n".join(log_lines) + "\n")
        if save_dir:
            save_checkpoint(model, os.path.join(save_dir, f"epoch{epoch:03d}.ckpt"))
            state = opt.state_arrays()
            state.update({f"p:{n}": p.data for n, p in model.params.items()})
            np.savez(os.path.join(save_dir, f"epoch{epoch:03d}.opt.npz"), **state)
    return TrainResult(model=model, epoch_reports=epoch_reports)
