#!/usr/bin/env python3
"""Desk-scale self-training experiment: teacher vs students on QA accuracy.

Generates a labeled pool and a noisier unlabeled pool, runs the full
teacher/student pipeline, then finetunes every stage checkpoint on the
labeled QA pairs and scores a held-out QA set. The directional question:
does mixing pseudo captions into student training move downstream accuracy?

Example:
    python3 scripts/desk_selftrain.py --workdir /tmp/selftrain \
        --labeled-scenes 120 --unlabeled-scenes 300 --epochs 8 --lr 1.5e-3
"""

import argparse
import os

from ucm.corpus import generate_dataset, write_dataset
from ucm.evaluate import finetune_vqa, question_examples
from ucm.generate import GenerationConfig
from ucm.model import ModelConfig, load_checkpoint
from ucm.pretrain import TrainConfig
from ucm.selftrain import SelfTrainPlan, self_train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--labeled-scenes", type=int, default=120)
    ap.add_argument("--unlabeled-scenes", type=int, default=300)
    ap.add_argument("--test-scenes", type=int, default=60)
    ap.add_argument("--quality-mix", type=float, default=0.3)
    ap.add_argument("--iterations", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1.5e-3)
    ap.add_argument("--vqa-epochs", type=int, default=10)
    ap.add_argument("--vqa-lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    os.makedirs(args.workdir, exist_ok=True)
    labeled = generate_dataset(seed=args.seed, n_scenes=args.labeled_scenes, quality_mix=0.0)
    unlabeled = generate_dataset(seed=args.seed + 1, n_scenes=args.unlabeled_scenes,
                                 quality_mix=args.quality_mix, first_scene_id=1_000_000)
    test = generate_dataset(seed=args.seed + 2, n_scenes=args.test_scenes, quality_mix=0.0,
                            first_scene_id=2_000_000)
    lab_prefix = os.path.join(args.workdir, "labeled")
    unl_prefix = os.path.join(args.workdir, "unlabeled")
    write_dataset(labeled, lab_prefix + ".txt", lab_prefix + ".reg")
    write_dataset(unlabeled, unl_prefix + ".txt", unl_prefix + ".reg")

    plan = SelfTrainPlan(
        labeled_path=lab_prefix, unlabeled_path=unl_prefix, workdir=args.workdir,
        iterations=args.iterations, epochs=args.epochs, seed=args.seed,
        model_cfg=ModelConfig.desk(),
        train_cfg=TrainConfig(batch_size=16, lr=args.lr),
        gen_cfg=GenerationConfig(seed=args.seed),
    )
    records = self_train(plan)
    for rec in records:
        print(f"iteration {rec.iteration}: kept {rec.n_unlabeled_kept}, dropped {rec.n_dropped}, "
              f"{rec.n_pseudo_records} pseudo records, dense grounding {rec.grounding_precision:.3f}")

    qa_train = question_examples(labeled)
    qa_test = question_examples(test)
    ft_cfg = TrainConfig(batch_size=16, lr=args.vqa_lr)
    stages = [("teacher", os.path.join(args.workdir, "teacher.ckpt"))]
    stages += [(f"student-{r.iteration}", os.path.join(args.workdir, r.student_path)) for r in records]
    print(f"\nQA finetune on {len(qa_train)} train / {len(qa_test)} held-out questions:")
    for name, path in stages:
        model = load_checkpoint(path)
        acc = finetune_vqa(model, qa_train, qa_test, epochs=args.vqa_epochs,
                           seed=args.seed, train_cfg=ft_cfg)
        print(f"  {name:10s} accuracy {acc:.3f}")


if __name__ == "__main__":
    main()
