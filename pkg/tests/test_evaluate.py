"""BLEU-4 oracle, grounding precision, lengths, QA finetune."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ucm import corpus
from ucm.corpus import FLAG_COCO, FLAG_DENSE, detokenize, generate_dataset
from ucm.evaluate import (
    bleu4,
    dataset_scene_pairs,
    finetune_vqa,
    grounding_chance_rate,
    grounding_precision,
    length_stats,
    mentioned_pairs,
    question_examples,
    vqa_accuracy,
)
from ucm.generate import PseudoCaption
from ucm.model import ModelConfig, UCModel
from ucm.pretrain import TrainConfig

TINY = ModelConfig.desk(n_lang_layers=2, n_obj_layers=1, n_cross_layers=1, d_model=32, n_heads=2)


def test_bleu_identity_is_one():
    hyp = "a red cube on a table".split()
    assert bleu4(hyp, [hyp]) == pytest.approx(1.0, abs=1e-12)


def test_bleu_disjoint_is_zero():
    hyp = ["gear", "lamp", "prism", "wedge", "bead"]
    ref = ["the", "blue", "cup", "sits", "here"]
    assert bleu4(hyp, [ref]) == pytest.approx(0.0, abs=1e-6)


def test_bleu_hand_computed_pair():
    hyp = "a red cube on a table".split()
    ref = "a red cube sits on the table".split()
    # independent hand evaluation of the standard formula:
    # p1 = 5/6, p2 = 2/5, p3 = 1/4, p4 = eps/3, bp = exp(1 - 7/6)
    p1, p2, p3, p4 = 5 / 6, 2 / 5, 1 / 4, 1e-9 / 3
    expected = math.exp(1 - 7 / 6) * (p1 * p2 * p3 * p4) ** 0.25
    assert bleu4(hyp, [ref]) == pytest.approx(expected, abs=1e-9)


def test_bleu_empty_hypothesis_scores_zero():
    assert bleu4([], [["a", "cube"]]) == 0.0


def test_bleu_needs_reference():
    with pytest.raises(ValueError, match="reference"):
        bleu4(["a"], [])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(["a", "red", "cube", "the", "blue", "ball"]), min_size=4, max_size=8), st.data())
def test_bleu_permutation_invariant_over_references(hyp, data):
    refs = data.draw(st.lists(
        st.lists(st.sampled_from(["a", "red", "cube", "on", "table"]), min_size=4, max_size=8),
        min_size=2, max_size=4,
    ))
    shuffled = list(reversed(refs))
    assert bleu4(hyp, refs) == pytest.approx(bleu4(hyp, shuffled), abs=1e-15)


def test_mentioned_pairs_adjacency():
    words = "the red cube sits near a wooden lamp".split()
    assert mentioned_pairs(words) == [("red", "cube"), ("wooden", "lamp")]
    assert mentioned_pairs(["red", "sits", "cube"]) == []


def test_grounding_of_ground_truth_is_one():
    ds = generate_dataset(seed=31, n_scenes=10, quality_mix=0.0)
    pairs = dataset_scene_pairs(ds.region_sets)
    records = [
        PseudoCaption(ex.region_set.scene_id, ex.text.flag, detokenize(ex.text.live_ids()), [], (0,))
        for ex in ds.examples if ex.text.flag in (FLAG_COCO, FLAG_DENSE)
    ]
    assert grounding_precision(records, pairs) == 1.0


def test_grounding_of_absent_categories_is_zero():
    ds = generate_dataset(seed=32, n_scenes=2, quality_mix=0.0)
    pairs = dataset_scene_pairs(ds.region_sets)
    present = pairs[0] | pairs[1]
    absent = next(
        (a, c) for a in corpus.ATTRIBUTES for c in corpus.CATEGORIES if (a, c) not in present
    )
    records = [PseudoCaption(0, FLAG_DENSE, ["a", absent[0], absent[1]], [], (0,))]
    assert grounding_precision(records, pairs) == 0.0


def test_untrained_grounding_matches_chance_rate():
    ds = generate_dataset(seed=33, n_scenes=60, quality_mix=0.0)
    pairs = dataset_scene_pairs(ds.region_sets)
    chance = grounding_chance_rate(ds.region_sets)
    assert chance < 0.15
    rng = np.random.default_rng(0)
    records = []
    for sid in ds.scene_ids():
        for _ in range(5):
            a = corpus.ATTRIBUTES[rng.integers(len(corpus.ATTRIBUTES))]
            c = corpus.CATEGORIES[rng.integers(len(corpus.CATEGORIES))]
            records.append(PseudoCaption(sid, FLAG_DENSE, ["a", a, c], [], (0,)))
    measured = grounding_precision(records, pairs)
    # binomial noise around the analytic chance rate
    sigma = math.sqrt(chance * (1 - chance) / len(records))
    assert abs(measured - chance) <= 4 * sigma


def test_length_stats():
    coco = [["w"] * 10, ["w"] * 11]
    dense = [["w"] * 3, ["w"] * 4]
    assert length_stats({FLAG_COCO: coco, FLAG_DENSE: dense}) == (10.5, 3.5)
    assert length_stats({FLAG_COCO: [["w"] * 7], FLAG_DENSE: [["w"] * 7]}) == (7.0, 7.0)


def test_length_stats_of_ground_truth_captions():
    ds = generate_dataset(seed=34, n_scenes=25, quality_mix=0.0)
    by_flag = {FLAG_COCO: [], FLAG_DENSE: []}
    for ex in ds.examples:
        if ex.text.flag in by_flag:
            by_flag[ex.text.flag].append(detokenize(ex.text.live_ids()))
    mean_coco, mean_dense = length_stats(by_flag)
    assert 9 <= mean_coco <= 12
    assert 3 <= mean_dense <= 5


def test_vqa_chance_level_at_random_init():
    ds = generate_dataset(seed=35, n_scenes=120, quality_mix=0.0)
    qa = question_examples(ds)
    model = UCModel(TINY, seed=9)
    acc = vqa_accuracy(model, qa)
    chance = 1 / TINY.n_answers
    sigma = math.sqrt(chance * (1 - chance) / len(qa))
    assert acc <= chance + 6 * sigma + 0.05


def test_vqa_overfit_train_equals_test():
    ds = generate_dataset(seed=36, n_scenes=12, quality_mix=0.0)
    qa = question_examples(ds)
    model = UCModel(TINY, seed=1)
    acc = finetune_vqa(model, qa, qa, epochs=250, seed=0,
                       train_cfg=TrainConfig(batch_size=24, lr=5e-3, weight_decay=0.0, warmup_fraction=0.05))
    assert acc >= 0.95


def test_vqa_finetune_deterministic():
    ds = generate_dataset(seed=37, n_scenes=8, quality_mix=0.0)
    qa = question_examples(ds)
    accs = []
    for _ in range(2):
        model = UCModel(TINY, seed=2)
        accs.append(finetune_vqa(model, qa, qa, epochs=2, seed=5))
    assert accs[0] == accs[1]


def test_vqa_supports_no_condition_flag_path():
    ds = generate_dataset(seed=38, n_scenes=6, quality_mix=0.0)
    qa = question_examples(ds)
    model = UCModel(TINY, seed=3)
    with_flag = vqa_accuracy(model, qa, use_condition_flag=True)
    without = vqa_accuracy(model, qa, use_condition_flag=False)
    assert 0.0 <= with_flag <= 1.0 and 0.0 <= without <= 1.0
