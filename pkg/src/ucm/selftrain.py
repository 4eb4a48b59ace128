"""Teacher-student self-training over labeled plus pseudo-labeled scenes.

The loop: train a teacher on the labeled pool, drop unlabeled scenes whose
mean region confidence falls below the filter threshold, annotate the
survivors with generated captions (questions are never generated), then
train a student on labeled + pseudo data starting from the teacher's
weights. The student becomes the next teacher; two iterations by default.

Every stage artifact is addressed by a fixed filename under the workdir
(teacher.ckpt, iterN.pseudo.txt/.reg, iterN.student.ckpt, iterN.record.txt),
so resuming is a pure filesystem check. Stages always round-trip their
outputs through disk before use - training consumes the reloaded f32
checkpoint values and the reparsed pseudo files, never in-memory state -
which is what makes an interrupted-and-resumed run byte-identical to an
uninterrupted one. All randomness derives from the plan seed and stage
indices.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import corpus
from .corpus import RegionSet, SceneDataset
from .evaluate import dataset_scene_pairs, grounding_precision
from .generate import GenerationConfig, PseudoCaption, pseudo_examples, pseudo_label_scene
from .model import ModelConfig, UCModel, load_checkpoint, save_checkpoint
from .pretrain import TrainConfig, train

_TEACHER_SALT = 601
_STUDENT_SALT = 602
_ANNOTATE_SALT = 603


def derive_seed(*keys: int) -> int:
    """Stable scalar sub-seed from a key path."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@dataclass
class SelfTrainPlan:
    labeled_path: str
    unlabeled_path: str
    workdir: str
    iterations: int = 2
    filter_threshold: float = 0.3
    epochs: int = 10  # teachers and students train for the same budget
    seed: int = 0
    workers: int = 1
    model_cfg: ModelConfig = field(default_factory=ModelConfig.desk)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    gen_cfg: GenerationConfig = field(default_factory=GenerationConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not 0.0 <= self.filter_threshold <= 1.0:
            raise ValueError("filter_threshold must lie in [0, 1]")


RECORD_FIELDS = (
    "iteration", "teacher_path", "n_unlabeled_kept", "n_dropped", "n_pseudo_records",
    "student_path", "grounding_precision", "mean_len_coco", "mean_len_dense", "warning",
)


@dataclass
class IterationRecord:
    iteration: int
    teacher_path: str
    n_unlabeled_kept: int
    n_dropped: int
    n_pseudo_records: int
    student_path: str
    grounding_precision: float
    mean_len_coco: float
    mean_len_dense: float
    warning: str = ""

    def line(self) -> str:
        return "\t".join([
            str(self.iteration), self.teacher_path, str(self.n_unlabeled_kept),
            str(self.n_dropped), str(self.n_pseudo_records), self.student_path,
            f"{self.grounding_precision:.6f}", f"{self.mean_len_coco:.6f}",
            f"{self.mean_len_dense:.6f}", self.warning,
        ])

    @classmethod
    def parse(cls, line: str) -> "IterationRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(RECORD_FIELDS):
            raise ValueError(f"iteration record has {len(parts)} fields, expected {len(RECORD_FIELDS)}")
        return cls(
            iteration=int(parts[0]), teacher_path=parts[1], n_unlabeled_kept=int(parts[2]),
            n_dropped=int(parts[3]), n_pseudo_records=int(parts[4]), student_path=parts[5],
            grounding_precision=float(parts[6]), mean_len_coco=float(parts[7]),
            mean_len_dense=float(parts[8]), warning=parts[9],
        )


def filter_unlabeled(region_sets: Mapping[int, RegionSet],
                     threshold: float) -> tuple[list[RegionSet], list[RegionSet]]:
    """Keep scenes whose mean region confidence is >= threshold (boundary kept)."""
    kept, dropped = [], []
    for sid in sorted(region_sets):
        rs = region_sets[sid]
        if len(rs) < 1:
            raise ValueError(f"scene {sid} has no regions")
        (kept if rs.mean_confidence() >= threshold else dropped).append(rs)
    return kept, dropped


def annotate_scenes(model: UCModel, kept: list[RegionSet], gen_cfg: GenerationConfig,
                    workers: int = 1) -> list[PseudoCaption]:
    """Pseudo captions for every kept scene; output order is (scene, flag,
    replica) regardless of worker scheduling because sampler seeds derive
    from those keys."""
    if workers > 1 and len(kept) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(lambda rs: pseudo_label_scene(model, rs, gen_cfg), kept))
    else:
        batches = [pseudo_label_scene(model, rs, gen_cfg) for rs in kept]
    records = [rec for batch in batches for rec in batch]
    records.sort(key=lambda r: (r.scene_id, 0 if r.flag == corpus.FLAG_COCO else 1))
    return records


def write_pseudo_dataset(records: list[PseudoCaption], region_sets: dict[int, RegionSet],
                         text_path, reg_path, d_v: int) -> None:
    examples = pseudo_examples(records, region_sets)
    corpus.write_dataset_text(examples, text_path)
    corpus.write_region_file(region_sets, reg_path, d_v=d_v)


def _merge_datasets(labeled: SceneDataset, pseudo: SceneDataset) -> SceneDataset:
    overlap = set(labeled.region_sets) & set(pseudo.region_sets)
    if overlap:
        raise ValueError(f"labeled and unlabeled scene ids overlap: {sorted(overlap)[:5]}")
    region_sets = dict(labeled.region_sets)
    region_sets.update(pseudo.region_sets)
    return SceneDataset(
        scenes=labeled.scenes + pseudo.scenes,
        region_sets=region_sets,
        examples=labeled.examples + pseudo.examples,
        vocab=labeled.vocab,
    )


def _pseudo_metrics(records: list[PseudoCaption], region_sets) -> tuple[float, float, float]:
    if not records:
        return 0.0, 0.0, 0.0
    pairs = dataset_scene_pairs(region_sets)
    grounding = grounding_precision(records, pairs)
    coco = [len(r.words) for r in records if r.flag == corpus.FLAG_COCO]
    dense = [len(r.words) for r in records if r.flag == corpus.FLAG_DENSE]
    return (grounding,
            float(np.mean(coco)) if coco else 0.0,
            float(np.mean(dense)) if dense else 0.0)


def run_iteration(teacher: UCModel, labeled: SceneDataset,
                  unlabeled_regions: dict[int, RegionSet], plan: SelfTrainPlan,
                  iteration: int) -> tuple[UCModel, IterationRecord]:
    """One annotate-and-retrain round; artifacts land under plan.workdir."""
    work = plan.workdir
    d_v = plan.model_cfg.d_v
    # record paths are workdir-relative so reruns elsewhere are byte-identical
    teacher_name = "teacher.ckpt" if iteration == 1 else f"iter{iteration - 1}.student.ckpt"
    student_name = f"iter{iteration}.student.ckpt"
    pseudo_txt = os.path.join(work, f"iter{iteration}.pseudo.txt")
    pseudo_reg = os.path.join(work, f"iter{iteration}.pseudo.reg")
    student_path = os.path.join(work, student_name)

    kept, dropped = filter_unlabeled(unlabeled_regions, plan.filter_threshold)
    warning = "" if kept else "no unlabeled scenes passed the confidence filter"

    if not (os.path.exists(pseudo_txt) and os.path.exists(pseudo_reg)):
        gen_cfg = replace(plan.gen_cfg, seed=derive_seed(_ANNOTATE_SALT, plan.seed, iteration))
        records = annotate_scenes(teacher, kept, gen_cfg, plan.workers)
        kept_sets = {rs.scene_id: rs for rs in kept}
        write_pseudo_dataset(records, kept_sets, pseudo_txt, pseudo_reg, d_v)
    # training always consumes the files on disk, never in-memory records
    pseudo_ds = corpus.read_dataset(pseudo_txt, pseudo_reg, d_v=d_v, max_len=plan.model_cfg.max_len)
    reloaded = [
        PseudoCaption(ex.region_set.scene_id, ex.text.flag, corpus.detokenize(ex.text.live_ids()), [], ())
        for ex in pseudo_ds.examples
    ]
    grounding, len_coco, len_dense = _pseudo_metrics(reloaded, pseudo_ds.region_sets)

    mixed = _merge_datasets(labeled, pseudo_ds) if pseudo_ds.examples else labeled
    result = train(mixed, plan.model_cfg, plan.train_cfg, plan.epochs,
                   seed=derive_seed(_STUDENT_SALT, plan.seed, iteration),
                   init_values=teacher.value_snapshot())
    save_checkpoint(result.model, student_path)
    student = load_checkpoint(student_path, expected_config=plan.model_cfg)

    record = IterationRecord(
        iteration=iteration, teacher_path=teacher_name,
        n_unlabeled_kept=len(kept), n_dropped=len(dropped),
        n_pseudo_records=len(pseudo_ds.examples), student_path=student_name,
        grounding_precision=grounding, mean_len_coco=len_coco,
        mean_len_dense=len_dense, warning=warning,
    )
    return student, record


def self_train(plan: SelfTrainPlan) -> list[IterationRecord]:
    """Full pipeline: teacher, then ``iterations`` annotate/retrain rounds.

    Completed stages (detected by their artifacts) are loaded, not recomputed,
    so the pipeline is resumable at any stage boundary.
    """
    for path in (plan.labeled_path, plan.unlabeled_path):
        for suffix in (".txt", ".reg"):
            if not os.path.exists(path + suffix):
                raise ValueError(f"missing dataset file: {path + suffix}")
    os.makedirs(plan.workdir, exist_ok=True)
    d_v = plan.model_cfg.d_v
    labeled = corpus.read_dataset(plan.labeled_path + ".txt", plan.labeled_path + ".reg",
                                  d_v=d_v, max_len=plan.model_cfg.max_len)
    # unlabeled pool: regions only, any caption lines are deliberately ignored
    unlabeled_regions = corpus.read_region_file(plan.unlabeled_path + ".reg", d_v=d_v)
    overlap = set(labeled.region_sets) & set(unlabeled_regions)
    if overlap:
        raise ValueError(f"labeled and unlabeled scene ids overlap: {sorted(overlap)[:5]}")

    teacher_path = os.path.join(plan.workdir, "teacher.ckpt")
    if not os.path.exists(teacher_path):
        result = train(labeled, plan.model_cfg, plan.train_cfg, plan.epochs,
                       seed=derive_seed(_TEACHER_SALT, plan.seed))
        save_checkpoint(result.model, teacher_path)
    try:
        teacher = load_checkpoint(teacher_path, expected_config=plan.model_cfg)
    except ValueError as exc:
        raise ValueError(f"teacher stage: {exc}") from None

    records: list[IterationRecord] = []
    for iteration in range(1, plan.iterations + 1):
        record_path = os.path.join(plan.workdir, f"iter{iteration}.record.txt")
        student_path = os.path.join(plan.workdir, f"iter{iteration}.student.ckpt")
        if os.path.exists(record_path) and os.path.exists(student_path):
            records.append(IterationRecord.parse(open(record_path, encoding="utf-8").read()))
            try:
                teacher = load_checkpoint(student_path, expected_config=plan.model_cfg)
            except ValueError as exc:
                raise ValueError(f"iteration {iteration} student stage: {exc}") from None
            continue
        student, record = run_iteration(teacher, labeled, unlabeled_regions, plan, iteration)
        with open(record_path, "w", encoding="utf-8") as fh:
            fh.write(record.line() + "\n")
        records.append(record)
        teacher = student
    return records
