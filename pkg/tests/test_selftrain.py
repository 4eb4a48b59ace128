"""Confidence filtering, iteration records, resume-identical pipeline."""

import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ucm import corpus
from ucm.corpus import generate_dataset, write_dataset
from ucm.generate import GenerationConfig
from ucm.model import ModelConfig, load_checkpoint
from ucm.pretrain import TrainConfig
from ucm.selftrain import (
    IterationRecord,
    SelfTrainPlan,
    filter_unlabeled,
    self_train,
)

TINY = ModelConfig.desk(n_lang_layers=1, n_obj_layers=1, n_cross_layers=1, d_model=32, n_heads=2)


def _confidence_sets(confidences):
    sets = {}
    for sid, conf in enumerate(confidences):
        rs = generate_dataset(seed=50 + sid, n_scenes=1, quality_mix=0.0, first_scene_id=sid).region_sets[sid]
        for r in rs.regions:
            r.confidence = conf
        sets[sid] = rs
    return sets


def test_filter_boundary_is_kept():
    sets = _confidence_sets([0.3])
    kept, dropped = filter_unlabeled(sets, 0.3)
    assert len(kept) == 1 and not dropped


def test_filter_zero_threshold_keeps_all():
    sets = _confidence_sets([0.01, 0.5, 0.9])
    kept, dropped = filter_unlabeled(sets, 0.0)
    assert len(kept) == 3 and not dropped


def test_filter_drops_low_quality_fraction():
    ds = generate_dataset(seed=51, n_scenes=500, quality_mix=0.3)
    kept, dropped = filter_unlabeled(ds.region_sets, 0.3)
    assert abs(len(dropped) / 500 - 0.30) <= 0.06


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_filter_monotone_in_threshold(confs, t1, t2):
    lo, hi = sorted((t1, t2))
    sets = _confidence_sets(confs)
    kept_lo, _ = filter_unlabeled(sets, lo)
    kept_hi, _ = filter_unlabeled(sets, hi)
    assert {rs.scene_id for rs in kept_hi} <= {rs.scene_id for rs in kept_lo}


def _make_plan(tmp_path, iterations=1, epochs=2, n_labeled=3, n_unlabeled=3, quality_mix=0.0):
    os.makedirs(tmp_path, exist_ok=True)
    labeled = generate_dataset(seed=60, n_scenes=n_labeled, quality_mix=0.0)
    unlabeled = generate_dataset(seed=61, n_scenes=n_unlabeled, quality_mix=quality_mix,
                                 first_scene_id=1000)
    write_dataset(labeled, tmp_path / "lab.txt", tmp_path / "lab.reg")
    write_dataset(unlabeled, tmp_path / "unl.txt", tmp_path / "unl.reg")
    return SelfTrainPlan(
        labeled_path=str(tmp_path / "lab"), unlabeled_path=str(tmp_path / "unl"),
        workdir=str(tmp_path / "work"), iterations=iterations, epochs=epochs, seed=7,
        model_cfg=TINY, train_cfg=TrainConfig(batch_size=8),
        gen_cfg=GenerationConfig(max_len=6, n_coco=2, n_dense=3),
    )


def _workdir_bytes(workdir):
    out = {}
    for name in sorted(os.listdir(workdir)):
        with open(os.path.join(workdir, name), "rb") as fh:
            out[name] = fh.read()
    return out


def test_single_iteration_artifacts_and_counts(tmp_path):
    plan = _make_plan(tmp_path, iterations=1)
    records = self_train(plan)
    assert len(records) == 1
    rec = records[0]
    ckpts = [f for f in os.listdir(plan.workdir) if f.endswith(".ckpt")]
    assert sorted(ckpts) == ["iter1.student.ckpt", "teacher.ckpt"]
    assert rec.n_pseudo_records == rec.n_unlabeled_kept * 5  # n_coco=2 + n_dense=3
    assert rec.n_unlabeled_kept + rec.n_dropped == 3
    parsed = IterationRecord.parse(open(os.path.join(plan.workdir, "iter1.record.txt")).read())
    assert parsed == rec


def test_student_initialized_from_teacher(tmp_path):
    plan = _make_plan(tmp_path, iterations=1, epochs=0)
    self_train(plan)
    teacher = load_checkpoint(os.path.join(plan.workdir, "teacher.ckpt"))
    student = load_checkpoint(os.path.join(plan.workdir, "iter1.student.ckpt"))
    # epochs=0 students never step, so weights must equal the teacher bit-exactly
    for name in teacher.params:
        np.testing.assert_array_equal(teacher.params[name].data, student.params[name].data)


def test_chained_iterations_share_weights(tmp_path):
    plan = _make_plan(tmp_path, iterations=2, epochs=1)
    records = self_train(plan)
    assert [r.iteration for r in records] == [1, 2]
    assert records[1].teacher_path.endswith("iter1.student.ckpt")


def test_rerun_is_byte_identical(tmp_path):
    plan_a = _make_plan(tmp_path / "a", iterations=2, epochs=1)
    plan_b = _make_plan(tmp_path / "b", iterations=2, epochs=1)
    self_train(plan_a)
    self_train(plan_b)
    a = _workdir_bytes(plan_a.workdir)
    b = _workdir_bytes(plan_b.workdir)
    assert list(a) == list(b)
    for name in a:
        assert a[name] == b[name], name


def test_resume_at_stage_boundary_matches_uninterrupted(tmp_path):
    full = _make_plan(tmp_path / "full", iterations=2, epochs=1)
    self_train(full)

    resumed = _make_plan(tmp_path / "resumed", iterations=2, epochs=1)
    # simulate a kill after the first iteration completed
    first = SelfTrainPlan(**{**resumed.__dict__, "iterations": 1})
    self_train(first)
    self_train(resumed)
    a = _workdir_bytes(full.workdir)
    b = _workdir_bytes(resumed.workdir)
    assert list(a) == list(b)
    for name in a:
        assert a[name] == b[name], name


def test_corrupt_teacher_checkpoint_names_stage(tmp_path):
    plan = _make_plan(tmp_path, iterations=1, epochs=1)
    os.makedirs(plan.workdir, exist_ok=True)
    with open(os.path.join(plan.workdir, "teacher.ckpt"), "wb") as fh:
        fh.write(b"garbage")
    with pytest.raises(ValueError, match="teacher stage"):
        self_train(plan)


def test_overlapping_scene_ids_rejected(tmp_path):
    labeled = generate_dataset(seed=60, n_scenes=2, quality_mix=0.0)
    write_dataset(labeled, tmp_path / "lab.txt", tmp_path / "lab.reg")
    write_dataset(labeled, tmp_path / "unl.txt", tmp_path / "unl.reg")
    plan = SelfTrainPlan(
        labeled_path=str(tmp_path / "lab"), unlabeled_path=str(tmp_path / "unl"),
        workdir=str(tmp_path / "work"), iterations=1, epochs=1, model_cfg=TINY,
        train_cfg=TrainConfig(batch_size=4), gen_cfg=GenerationConfig(max_len=4),
    )
    with pytest.raises(ValueError, match="overlap"):
        self_train(plan)


def test_all_filtered_proceeds_with_warning(tmp_path):
    plan = _make_plan(tmp_path, iterations=1, epochs=1, quality_mix=1.0)
    plan = SelfTrainPlan(**{**plan.__dict__, "filter_threshold": 0.99})
    records = self_train(plan)
    assert records[0].n_unlabeled_kept == 0
    assert records[0].n_pseudo_records == 0
    assert "filter" in records[0].warning


def test_pseudo_records_roundtrip_through_files(tmp_path):
    plan = _make_plan(tmp_path, iterations=1, epochs=1)
    records = self_train(plan)
    ds = corpus.read_dataset(
        os.path.join(plan.workdir, "iter1.pseudo.txt"),
        os.path.join(plan.workdir, "iter1.pseudo.reg"),
        d_v=TINY.d_v,
    )
    assert len(ds.examples) == records[0].n_pseudo_records
    for ex in ds.examples:
        assert ex.origin == "pseudo" and ex.matched and ex.answer_id is None
        assert ex.text.flag in (corpus.FLAG_COCO, corpus.FLAG_DENSE)


def test_missing_paths_error(tmp_path):
    plan = SelfTrainPlan(labeled_path=str(tmp_path / "nope"), unlabeled_path=str(tmp_path / "nope"),
                         workdir=str(tmp_path / "w"), model_cfg=TINY)
    with pytest.raises(ValueError, match="missing dataset file"):
        self_train(plan)
