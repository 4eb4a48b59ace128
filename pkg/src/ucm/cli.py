"""Command-line driver: datagen, pretrain, generate, selftrain, eval,
inspect-attention.

Configuration is a flat ``key = value`` text file (``#`` comments allowed);
unknown keys are rejected and every key has a documented default. Commands
merge defaults, the config file, and command-line overrides in that order,
then echo the effective configuration to the workdir for provenance. The
``UCM_WORKDIR`` environment variable supplies the default workdir.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from . import corpus
from .corpus import FLAG_COCO, FLAG_DENSE
from .evaluate import (
    EvalSummary,
    bleu4,
    dataset_scene_pairs,
    finetune_vqa,
    grounding_precision,
    question_examples,
)
from .generate import GenerationConfig, PseudoCaption, generate_caption, pseudo_label_scene
from .model import BRANCH_BI, BRANCH_ONE, ModelConfig, UCModel, load_checkpoint, save_checkpoint
from .pretrain import TrainConfig, train
from .selftrain import SelfTrainPlan, self_train

# key: (default, type, help)
CONFIG_SCHEMA: dict[str, tuple] = {
    "seed": (0, int, "global seed every derived stream hangs off"),
    "n_lang_layers": (3, int, "language encoder depth"),
    "n_obj_layers": (2, int, "object encoder depth"),
    "n_cross_layers": (2, int, "cross-attention stack depth"),
    "d_model": (64, int, "hidden width"),
    "n_heads": (4, int, "attention heads"),
    "d_v": (32, int, "region feature dimension"),
    "max_len": (24, int, "maximum token sequence length"),
    "batch_size": (16, int, "examples per optimizer step"),
    "lr": (5e-5, float, "peak learning rate"),
    "warmup_fraction": (0.1, float, "fraction of steps spent on linear warmup"),
    "weight_decay": (0.01, float, "decoupled weight decay"),
    "epochs": (10, int, "training epochs per stage"),
    "negative_rate": (0.5, float, "image-text matching negative pairing rate"),
    "top_k": (5, int, "sampler candidate pool size"),
    "region_mask_ratio": (0.5, float, "region drop rate during generation"),
    "gen_max_len": (16, int, "generated caption length cap"),
    "n_coco": (5, int, "scene-style captions per unlabeled scene"),
    "n_dense": (10, int, "region-style captions per unlabeled scene"),
    "iterations": (2, int, "self-training rounds"),
    "filter_threshold": (0.3, float, "minimum mean region confidence to keep a scene"),
    "labeled_path": ("", str, "labeled dataset path prefix (expects .txt/.reg)"),
    "unlabeled_path": ("", str, "unlabeled dataset path prefix (expects .reg)"),
    "workdir": ("", str, "artifact directory (default: UCM_WORKDIR or .)"),
    "workers": (1, int, "parallelism cap for scene annotation"),
}


class CliError(Exception):
    """Raised with a stage name; main() turns it into a nonzero exit."""


def load_config_file(path: str) -> dict:
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"config {path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_SCHEMA:
                raise CliError(f"config {path}:{lineno}: unknown key {key!r}")
            _, typ, _ = CONFIG_SCHEMA[key]
            try:
                out[key] = typ(value)
            except ValueError:
                raise CliError(f"config {path}:{lineno}: cannot parse {key} value {value!r}") from None
    return out


def effective_config(args: argparse.Namespace) -> dict:
    cfg = {key: default for key, (default, _, _) in CONFIG_SCHEMA.items()}
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in CONFIG_SCHEMA:
        override = getattr(args, key, None)
        if override is not None:
            cfg[key] = override
    if not cfg["workdir"]:
        cfg["workdir"] = os.environ.get("UCM_WORKDIR", ".")
    return cfg


def echo_config(cfg: dict, workdir: str) -> None:
    os.makedirs(workdir, exist_ok=True)
    lines = [f"{key} = {cfg[key]}" for key in sorted(cfg)]
    with open(os.path.join(workdir, "effective.cfg"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig.desk(
        n_lang_layers=cfg["n_lang_layers"], n_obj_layers=cfg["n_obj_layers"],
        n_cross_layers=cfg["n_cross_layers"], d_model=cfg["d_model"],
        n_heads=cfg["n_heads"], d_v=cfg["d_v"], max_len=cfg["max_len"],
    )


def train_config_from(cfg: dict, log_path: str | None = None) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["batch_size"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
        warmup_fraction=cfg["warmup_fraction"], negative_rate=cfg["negative_rate"],
        log_path=log_path,
    )


def gen_config_from(cfg: dict) -> GenerationConfig:
    return GenerationConfig(
        top_k=cfg["top_k"], region_mask_ratio=cfg["region_mask_ratio"],
        max_len=cfg["gen_max_len"], n_coco=cfg["n_coco"], n_dense=cfg["n_dense"],
        seed=cfg["seed"],
    )


def _dataset_pair(prefix: str) -> tuple[str, str]:
    return prefix + ".txt", prefix + ".reg"


def _load_dataset(prefix: str, cfg: dict) -> corpus.SceneDataset:
    text, reg = _dataset_pair(prefix)
    for path in (text, reg):
        if not os.path.exists(path):
            raise CliError(f"dataset: missing file {path}")
    return corpus.read_dataset(text, reg, d_v=cfg["d_v"], max_len=cfg["max_len"])


# commands -------------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = effective_config(args)
    if args.scenes < 1:
        raise CliError("datagen: --scenes must be at least 1")
    os.makedirs(args.out, exist_ok=True)
    text = os.path.join(args.out, "data.txt")
    reg = os.path.join(args.out, "data.reg")
    for path in (text, reg):
        if os.path.exists(path) and not args.force:
            raise CliError(f"datagen: {path} exists (use --force to overwrite)")
    ds = corpus.generate_dataset(cfg["seed"], args.scenes, args.quality_mix,
                                 d_v=cfg["d_v"], max_len=cfg["max_len"],
                                 first_scene_id=args.first_scene)
    corpus.write_dataset(ds, text, reg, d_v=cfg["d_v"])
    print(f"wrote {len(ds.examples)} examples over {args.scenes} scenes to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = effective_config(args)
    workdir = cfg["workdir"]
    echo_config(cfg, workdir)
    dataset = _load_dataset(args.data, cfg)
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg, log_path=os.path.join(workdir, "train.log"))
    try:
        result = train(dataset, model_cfg, train_cfg, cfg["epochs"], cfg["seed"],
                       save_dir=workdir, resume=args.resume)
    except ValueError as exc:
        raise CliError(f"pretrain: {exc}") from None
    final = os.path.join(workdir, "final.ckpt")
    save_checkpoint(result.model, final)
    if result.epoch_reports:
        print(result.epoch_reports[-1].line(cfg["epochs"] - 1))
    print(f"checkpoint: {final}")
    return 0


def cmd_generate(args) -> int:
    cfg = effective_config(args)
    try:
        model = load_checkpoint(args.ckpt)
    except (ValueError, OSError) as exc:
        raise CliError(f"generate: {exc}") from None
    dataset = _load_dataset(args.data, cfg)
    if args.scene not in dataset.region_sets:
        raise CliError(f"generate: scene {args.scene} not in dataset")
    flag = {"coco": FLAG_COCO, "dense": FLAG_DENSE}[args.flag]
    gen_cfg = gen_config_from(cfg)
    rng = np.random.default_rng([cfg["seed"], args.scene])
    words = generate_caption(model, dataset.region_sets[args.scene], flag, gen_cfg, rng)
    print(" ".join(words))
    return 0


def cmd_selftrain(args) -> int:
    cfg = effective_config(args)
    workdir = cfg["workdir"]
    echo_config(cfg, workdir)
    if not cfg["labeled_path"] or not cfg["unlabeled_path"]:
        raise CliError("selftrain: labeled_path and unlabeled_path are required")
    plan = SelfTrainPlan(
        labeled_path=cfg["labeled_path"], unlabeled_path=cfg["unlabeled_path"],
        workdir=workdir, iterations=cfg["iterations"],
        filter_threshold=cfg["filter_threshold"], epochs=cfg["epochs"],
        seed=cfg["seed"], workers=cfg["workers"], model_cfg=model_config_from(cfg),
        train_cfg=train_config_from(cfg), gen_cfg=gen_config_from(cfg),
    )
    try:
        records = self_train(plan)
    except ValueError as exc:
        raise CliError(f"selftrain: {exc}") from None
    for rec in records:
        print(rec.line())
    return 0


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    try:
        model = load_checkpoint(args.ckpt)
    except (ValueError, OSError) as exc:
        raise CliError(f"eval: {exc}") from None
    dataset = _load_dataset(args.data, cfg)
    gen_cfg = gen_config_from(cfg)
    scene_ids = dataset.scene_ids()[: args.eval_scenes] if args.eval_scenes else dataset.scene_ids()

    records: list[PseudoCaption] = []
    for sid in scene_ids:
        records.extend(pseudo_label_scene(model, dataset.region_sets[sid],
                                          replace(gen_cfg, n_coco=2, n_dense=2)))
    pairs = dataset_scene_pairs(dataset.region_sets)
    grounding = grounding_precision(records, pairs)

    refs = {sid: [] for sid in scene_ids}
    for ex in dataset.examples:
        if ex.text.flag == FLAG_COCO and ex.region_set.scene_id in refs:
            refs[ex.region_set.scene_id].append(corpus.detokenize(ex.text.live_ids()))
    bleu_scores = [
        bleu4(rec.words, refs[rec.scene_id])
        for rec in records if rec.flag == FLAG_COCO and refs.get(rec.scene_id)
    ]
    coco_lens = [len(r.words) for r in records if r.flag == FLAG_COCO]
    dense_lens = [len(r.words) for r in records if r.flag == FLAG_DENSE]

    vqa_acc = 0.0
    n_qa = 0
    if args.vqa_epochs is not None:
        test_ds = _load_dataset(args.test_data, cfg) if args.test_data else dataset
        qa_train = question_examples(dataset)
        qa_test = question_examples(test_ds)
        n_qa = len(qa_test)
        ft_cfg = train_config_from(cfg)
        vqa_acc = finetune_vqa(model, qa_train, qa_test, args.vqa_epochs, seed=cfg["seed"],
                               train_cfg=ft_cfg, use_condition_flag=not args.no_condition_flag)

    summary = EvalSummary(
        bleu4=float(np.mean(bleu_scores)) if bleu_scores else 0.0,
        grounding_precision=grounding,
        vqa_accuracy=vqa_acc,
        mean_len_coco=float(np.mean(coco_lens)) if coco_lens else 0.0,
        mean_len_dense=float(np.mean(dense_lens)) if dense_lens else 0.0,
        counts={"bleu4": len(bleu_scores), "grounding": len(records),
                "vqa": n_qa, "len_coco": len(coco_lens), "len_dense": len(dense_lens)},
    )
    print("\n".join(summary.lines()))
    return 0


def cmd_inspect_attention(args) -> int:
    cfg = effective_config(args)
    try:
        model = load_checkpoint(args.ckpt)
    except (ValueError, OSError) as exc:
        raise CliError(f"inspect-attention: {exc}") from None
    dataset = _load_dataset(args.data, cfg)
    if not 0 <= args.example < len(dataset.examples):
        raise CliError(f"inspect-attention: example must be in [0, {len(dataset.examples) - 1}]")
    n_layers = model.config.n_lang_layers
    if not 0 <= args.layer < n_layers:
        raise CliError(f"inspect-attention: layer must be in [0, {n_layers - 1}]")
    ex = dataset.examples[args.example]
    branch = BRANCH_BI if args.branch == "bi" else BRANCH_ONE
    mask_pos = args.mask_pos if args.mask_pos is not None else ex.text.live_len - 1
    out = model.forward(ex, branch, mask_pos if branch == BRANCH_ONE else None)
    attn = out.lang_attn[args.layer]  # [n_heads, T, T]
    tokens = [dataset.vocab.decode(i) for i in ex.text.live_ids()]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["head", "query_pos", "query_token"] + tokens)
        for head in range(attn.shape[0]):
            for q in range(attn.shape[1]):
                writer.writerow([head, q, tokens[q]] + [f"{w:.17g}" for w in attn[head, q]])
    print(f"wrote {attn.shape[0] * attn.shape[1]} rows to {args.out}")
    return 0


# argument parsing -----------------------------------------------------------


def _add_config_overrides(parser: argparse.ArgumentParser, keys: tuple[str, ...]) -> None:
    for key in keys:
        default, typ, help_text = CONFIG_SCHEMA[key]
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ,
                            default=None, help=f"{help_text} (default {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ucm",
        description="Dual-mask vision-language model: data, training, generation, self-training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="write a synthetic dataset file pair")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--quality-mix", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--first-scene", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.add_argument("--config")
    _add_config_overrides(p, ("seed", "d_v", "max_len"))
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("pretrain", help="train from a dataset file pair")
    p.add_argument("--data", required=True, help="dataset path prefix (.txt/.reg)")
    p.add_argument("--resume", action="store_true", help="continue from the last epoch checkpoint")
    p.add_argument("--config")
    _add_config_overrides(p, tuple(k for k in CONFIG_SCHEMA if k not in
                                   ("labeled_path", "unlabeled_path", "iterations", "filter_threshold")))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("generate", help="decode one caption for one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--flag", choices=("coco", "dense"), required=True)
    p.add_argument("--config")
    _add_config_overrides(p, ("seed", "top_k", "region_mask_ratio", "gen_max_len", "d_v", "max_len"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("selftrain", help="run the teacher/student pipeline")
    p.add_argument("--config")
    _add_config_overrides(p, tuple(CONFIG_SCHEMA))
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("eval", help="metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", help="held-out dataset prefix for QA accuracy")
    p.add_argument("--vqa-epochs", type=int, default=None, help="finetune epochs; omit to skip QA")
    p.add_argument("--eval-scenes", type=int, default=None, help="cap scenes scored")
    p.add_argument("--no-condition-flag", action="store_true",
                   help="finetune questions without the condition token")
    p.add_argument("--config")
    _add_config_overrides(p, ("seed", "top_k", "region_mask_ratio", "gen_max_len",
                              "d_v", "max_len", "batch_size", "lr", "warmup_fraction",
                              "weight_decay", "negative_rate"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-attention", help="dump per-head language attention to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--example", type=int, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--branch", choices=("bi", "one"), required=True)
    p.add_argument("--mask-pos", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_config_overrides(p, ("seed", "d_v", "max_len"))
    p.set_defaults(func=cmd_inspect_attention)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
