"""Synthetic corpus: determinism, counting rules, tokenizer, file formats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ucm import corpus
from ucm.corpus import (
    FLAG_COCO,
    FLAG_DENSE,
    FLAG_NONE,
    FLAG_QUESTION,
    build_vocab,
    detokenize,
    generate_dataset,
    read_dataset,
    sample_negative_caption,
    tokenize,
    write_dataset,
)


def test_one_scene_example_count():
    ds = generate_dataset(seed=1, n_scenes=1, quality_mix=0.0)
    k = len(ds.region_sets[0])
    assert len(ds.examples) == 4 + k
    flags = [ex.text.flag for ex in ds.examples]
    assert flags.count(FLAG_COCO) == 2
    assert flags.count(FLAG_DENSE) == k
    assert flags.count(FLAG_QUESTION) == 2


def test_same_seed_gives_byte_identical_files(tmp_path):
    for run in ("a", "b"):
        ds = generate_dataset(seed=5, n_scenes=8, quality_mix=0.25)
        write_dataset(ds, tmp_path / f"{run}.txt", tmp_path / f"{run}.reg")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert (tmp_path / "a.reg").read_bytes() == (tmp_path / "b.reg").read_bytes()


def test_quality_mix_controls_low_confidence_fraction():
    ds = generate_dataset(seed=1, n_scenes=200, quality_mix=0.3)
    low = sum(1 for sid in ds.scene_ids() if ds.region_sets[sid].mean_confidence() < 0.3)
    assert abs(low / 200 - 0.30) <= 0.07


def test_zero_scenes_rejected():
    with pytest.raises(ValueError, match="n_scenes"):
        generate_dataset(seed=1, n_scenes=0, quality_mix=0.0)


def test_scene_spec_reproducible():
    assert corpus.generate_scene(3, 17) == corpus.generate_scene(3, 17)
    assert corpus.generate_scene(3, 17) != corpus.generate_scene(4, 17)


def test_object_count_and_boxes_in_unit_square():
    for sid in range(50):
        scene = corpus.generate_scene(0, sid)
        assert 4 <= len(scene.objects) <= 8
        for obj in scene.objects:
            x1, y1, x2, y2 = obj.box
            assert 0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0


def test_tokenize_layout():
    v = build_vocab()
    seq = tokenize(["a", "red", "cube"], FLAG_DENSE)
    assert seq.ids[0] == v.cls_id
    assert seq.ids[1] == v.cnd_dense_id
    assert seq.ids[2:5] == [v.encode("a"), v.encode("red"), v.encode("cube")]
    assert seq.ids[5] == v.sep_id
    assert all(i == v.pad_id for i in seq.ids[6:])
    assert seq.length == 3 and seq.live_len == 6


def test_tokenize_flag_none_drops_condition_token():
    with_flag = tokenize(["a", "red", "cube"], FLAG_DENSE)
    without = tokenize(["a", "red", "cube"], FLAG_NONE)
    assert without.live_len == with_flag.live_len - 1
    assert build_vocab().cnd_dense_id not in without.live_ids()


def test_tokenize_rejects_oov():
    with pytest.raises(ValueError, match="zebra"):
        tokenize(["zebra"], FLAG_DENSE)


def test_roundtrip_every_corpus_sentence():
    ds = generate_dataset(seed=2, n_scenes=5, quality_mix=0.0)
    for ex in ds.examples:
        words = detokenize(ex.text.live_ids())
        assert tokenize(words, ex.text.flag).live_ids() == ex.text.live_ids()


def test_caption_length_contract():
    ds = generate_dataset(seed=3, n_scenes=40, quality_mix=0.0)
    for ex in ds.examples:
        if ex.text.flag == FLAG_COCO:
            assert 9 <= ex.text.length <= 12
        elif ex.text.flag == FLAG_DENSE:
            assert 3 <= ex.text.length <= 5


def test_dense_caption_pairs_exist_in_scene():
    ds = generate_dataset(seed=4, n_scenes=30, quality_mix=0.0)
    for ex in ds.examples:
        if ex.text.flag != FLAG_DENSE:
            continue
        words = detokenize(ex.text.live_ids())
        pairs = ex.region_set.word_pairs()
        mentioned = [
            (a, b) for a, b in zip(words, words[1:])
            if a in corpus.ATTRIBUTES and b in corpus.CATEGORIES
        ]
        assert mentioned and all(p in pairs for p in mentioned)


def test_question_answer_invariant():
    ds = generate_dataset(seed=5, n_scenes=20, quality_mix=0.0)
    for ex in ds.examples:
        assert (ex.answer_id is not None) == (ex.text.flag == FLAG_QUESTION and ex.matched)


def test_negative_caption_two_scene_dataset_forced():
    ds = generate_dataset(seed=6, n_scenes=2, quality_mix=0.0)
    example = next(ex for ex in ds.examples if ex.region_set.scene_id == 0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        neg = sample_negative_caption(example, ds, rng)
        assert neg.scene_id == 1
        assert neg.flag in (FLAG_COCO, FLAG_DENSE)


def test_negative_caption_uniform_over_scenes():
    ds = generate_dataset(seed=7, n_scenes=100, quality_mix=0.0)
    example = ds.examples[0]
    rng = np.random.default_rng(1)
    counts = np.zeros(100)
    draws = 10_000
    for _ in range(draws):
        counts[sample_negative_caption(example, ds, rng).scene_id] += 1
    assert counts[0] == 0
    p = 1 / 99
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts[1:] - draws * p) <= 3.5 * sigma)


def test_negative_caption_single_scene_errors():
    ds = generate_dataset(seed=8, n_scenes=1, quality_mix=0.0)
    with pytest.raises(ValueError, match="2 scenes"):
        sample_negative_caption(ds.examples[0], ds, np.random.default_rng(0))


def test_dataset_file_roundtrip(tmp_path):
    ds = generate_dataset(seed=9, n_scenes=6, quality_mix=0.5)
    write_dataset(ds, tmp_path / "d.txt", tmp_path / "d.reg")
    back = read_dataset(tmp_path / "d.txt", tmp_path / "d.reg")
    assert len(back.examples) == len(ds.examples)
    for a, b in zip(ds.examples, back.examples):
        assert a.text.live_ids() == b.text.live_ids()
        assert a.text.flag == b.text.flag
        assert (a.matched, a.answer_id, a.origin) == (b.matched, b.answer_id, b.origin)
        assert a.region_set.scene_id == b.region_set.scene_id
    for sid in ds.scene_ids():
        orig, loaded = ds.region_sets[sid], back.region_sets[sid]
        np.testing.assert_array_equal(
            orig.features_matrix().astype(np.float32), loaded.features_matrix().astype(np.float32)
        )
        for ro, rl in zip(orig.regions, loaded.regions):
            assert (ro.class_id, ro.attribute_id) == (rl.class_id, rl.attribute_id)
    # second write is byte-identical (round-trip stability through f32)
    write_dataset(back, tmp_path / "e.txt", tmp_path / "e.reg")
    assert (tmp_path / "d.reg").read_bytes() == (tmp_path / "e.reg").read_bytes()
    assert (tmp_path / "d.txt").read_bytes() == (tmp_path / "e.txt").read_bytes()


def test_region_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.reg"
    path.write_bytes(b"NOTAMAGIC" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        corpus.read_region_file(path)


def test_feature_basis_is_unit_norm_and_fixed():
    a = corpus._pair_basis(3, 2, 32)
    b = corpus._pair_basis(3, 2, 32)
    np.testing.assert_array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(sorted(corpus.ATTRIBUTES + corpus.CATEGORIES)), min_size=0, max_size=8))
def test_tokenize_roundtrip_property(words):
    for flag in (FLAG_COCO, FLAG_DENSE, FLAG_QUESTION, FLAG_NONE):
        seq = tokenize(words, flag, max_len=16)
        assert detokenize(seq.live_ids()) == words


def test_vocab_specials_occupy_lowest_ids():
    v = build_vocab()
    assert [v.decode(i) for i in range(7)] == list(v.SPECIALS)
    assert v.encode("[CND:DENSE]") == 5
