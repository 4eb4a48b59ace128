"""The dual-mask vision-language encoder.

One shared-weight language encoder is executed under two self-attention
masks: an empty mask (every token sees every token, the understanding
branch) and a triangular mask (token i sees tokens <= i, the generation
branch). Regions go through their own encoder, always fully visible to each
other. A stack of cross layers then lets the two streams exchange
information:

* bi branch: language attends vision and vision attends language, both
  unrestricted;
* one branch: only language positions strictly before the mask position m
  may attend vision (the rectangle rule); rows >= m pass through, and
  vision reads no language keys at all, so no token information can leak
  around the triangular mask through the vision stream.

Because rows >= m never touch vision, the prediction for position m is read
from hidden row m-1: that row conditions on exactly the tokens before m
plus the image, which is what makes causal decoding image-grounded. Cross
layers contain no language self-attention for the same reason.

Blocks are post-layer-norm with GELU feedforwards and learned absolute
positions. There are no token-type embeddings; the condition token at
position 1 carries the style signal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import corpus
from .tensor import (
    Tensor,
    add,
    gather_rows,
    gelu,
    embedding_lookup,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    mul,
    pad_rows,
    reshape,
    transpose,
)

BRANCH_BI = "bi"
BRANCH_ONE = "one"

_INIT_SALT = 211

CKPT_MAGIC = b"UCMCKPT1"
CKPT_VERSION = 1
# serialized config block: these fields in this order, one u32 each
CONFIG_FIELDS = (
    "n_lang_layers", "n_obj_layers", "n_cross_layers", "d_model", "n_heads",
    "d_v", "max_len", "vocab_size", "n_classes", "n_attrs", "n_answers",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_lang_layers: int = 3
    n_obj_layers: int = 2
    n_cross_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_v: int = corpus.DEFAULT_DV
    max_len: int = corpus.DEFAULT_MAX_LEN
    n_classes: int = len(corpus.CATEGORIES)
    n_attrs: int = len(corpus.ATTRIBUTES)
    n_answers: int = len(corpus.ANSWERS)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        overrides.setdefault("vocab_size", len(corpus.build_vocab()))
        return cls(**overrides)

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        """9/5/5 layers at BERT-base width; not desk-runnable, kept as a preset."""
        overrides.setdefault("vocab_size", len(corpus.build_vocab()))
        defaults = dict(n_lang_layers=9, n_obj_layers=5, n_cross_layers=5,
                        d_model=768, n_heads=12, d_v=2048, max_len=36)
        defaults.update(overrides)
        return cls(**defaults)


@dataclass
class BranchOutput:
    lang_hidden: Tensor  # [T, d_model]
    vis_hidden: Tensor   # [K, d_model]
    cls_feature: Tensor  # [d_model], row 0 of lang_hidden
    lang_attn: list      # per lang layer, [n_heads, T, T] numpy
    obj_attn: list       # per obj layer, [n_heads, K, K]
    cross_lang_attn: list  # per cross layer, [n_heads, Tq, K] (Tq = rows that attend)
    cross_vis_attn: list   # per cross layer, [n_heads, K, T] or None (one branch)


@dataclass
class HeadLogits:
    mlm: Tensor          # [T, vocab]
    itm: Tensor          # [2]
    qa: Tensor           # [n_answers]
    obj_class: Tensor    # [K, n_classes]
    obj_attr: Tensor     # [K, n_attrs]
    feat_regress: Tensor  # [K, d_v]


def causal_allow(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def full_allow(nq: int, nk: int | None = None) -> np.ndarray:
    return np.ones((nq, nk if nk is not None else nq), dtype=bool)


class UCModel:
    """Parameter container plus the forward pass; all state lives in
    ``self.params`` so both branches share one set of weights by identity."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng([_INIT_SALT, seed])
        c = config

        def normal(name, shape):
            self.params[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        def zeros(name, shape):
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            self.params[name] = Tensor(np.ones(shape), requires_grad=True)

        def ln(prefix):
            ones(f"{prefix}.g", (c.d_model,))
            zeros(f"{prefix}.b", (c.d_model,))

        def attn(prefix):
            for nm in ("wq", "wk", "wv", "wo"):
                normal(f"{prefix}.{nm}", (c.d_model, c.d_model))
            for nm in ("bq", "bk", "bv", "bo"):
                zeros(f"{prefix}.{nm}", (c.d_model,))

        def ffn(prefix):
            normal(f"{prefix}.w1", (c.d_model, c.d_ff))
            zeros(f"{prefix}.b1", (c.d_ff,))
            normal(f"{prefix}.w2", (c.d_ff, c.d_model))
            zeros(f"{prefix}.b2", (c.d_model,))

        normal("emb.word", (c.vocab_size, c.d_model))
        normal("emb.pos", (c.max_len, c.d_model))
        ln("emb.ln")
        normal("vis.proj.w", (c.d_v, c.d_model))
        zeros("vis.proj.b", (c.d_model,))
        normal("vis.spatial.w", (6, c.d_model))
        zeros("vis.spatial.b", (c.d_model,))
        ln("vis.ln")
        for i in range(c.n_lang_layers):
            attn(f"lang.{i}.attn")
            ln(f"lang.{i}.ln1")
            ffn(f"lang.{i}.ffn")
            ln(f"lang.{i}.ln2")
        for i in range(c.n_obj_layers):
            attn(f"obj.{i}.attn")
            ln(f"obj.{i}.ln1")
            ffn(f"obj.{i}.ffn")
            ln(f"obj.{i}.ln2")
        for i in range(c.n_cross_layers):
            attn(f"cross.{i}.l2v")   # language queries, vision keys
            ln(f"cross.{i}.lang_ln1")
            attn(f"cross.{i}.v2l")   # vision queries, language keys (bi branch only)
            ln(f"cross.{i}.vis_ln1")
            ffn(f"cross.{i}.lang_ffn")
            ln(f"cross.{i}.lang_ln2")
            ffn(f"cross.{i}.vis_ffn")
            ln(f"cross.{i}.vis_ln2")
        normal("head.mlm.w", (c.d_model, c.vocab_size))
        zeros("head.mlm.b", (c.vocab_size,))
        normal("head.itm.w", (c.d_model, 2))
        zeros("head.itm.b", (2,))
        normal("head.qa.w1", (c.d_model, c.d_model))
        zeros("head.qa.b1", (c.d_model,))
        normal("head.qa.w2", (c.d_model, c.n_answers))
        zeros("head.qa.b2", (c.n_answers,))
        normal("head.obj_cls.w", (c.d_model, c.n_classes))
        zeros("head.obj_cls.b", (c.n_classes,))
        normal("head.obj_attr.w", (c.d_model, c.n_attrs))
        zeros("head.obj_attr.b", (c.n_attrs,))
        normal("head.mfr.w", (c.d_model, c.d_v))
        zeros("head.mfr.b", (c.d_v,))

    # plumbing ---------------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def copy_values_from(self, other: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(other)
        if missing:
            raise ValueError(f"parameter name mismatch: {sorted(missing)[:4]}...")
        for name, t in self.params.items():
            src = np.asarray(other[name], dtype=np.float64)
            if src.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {src.shape} vs {t.shape}")
            t.data[...] = src

    def value_snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    # embeddings ---------------------------------------------------------------

    def embed_text(self, seq: corpus.TokenSequence) -> Tensor:
        """Word + learned absolute position embedding over the live tokens."""
        return self._embed_ids(seq.live_ids())

    def _embed_ids(self, ids: Sequence[int]) -> Tensor:
        t = len(ids)
        if t > self.config.max_len:
            raise ValueError(f"sequence of {t} tokens exceeds max_len {self.config.max_len}")
        words = embedding_lookup(self._p("emb.word"), ids)
        pos = gather_rows(self._p("emb.pos"), list(range(t)))
        return add(words, pos)

    def embed_regions(self, rs: corpus.RegionSet) -> Tensor:
        """Projected feature + spatial embedding of (box, width, height); added."""
        return self._embed_region_arrays(rs.features_matrix(), rs.spatial_matrix())

    def _embed_region_arrays(self, features: np.ndarray, spatial: np.ndarray) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.config.d_v:
            raise ValueError(f"region features {features.shape} do not match d_v {self.config.d_v}")
        proj = linear(Tensor(features), self._p("vis.proj.w"), self._p("vis.proj.b"))
        spat = linear(Tensor(spatial), self._p("vis.spatial.w"), self._p("vis.spatial.b"))
        return add(proj, spat)

    # transformer pieces ---------------------------------------------------------

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"))

    def _mha(self, prefix: str, q_in: Tensor, kv_in: Tensor, allow: np.ndarray, sink: list | None) -> Tensor:
        c = self.config
        tq, tk = q_in.shape[0], kv_in.shape[0]
        q = linear(q_in, self._p(f"{prefix}.wq"), self._p(f"{prefix}.bq"))
        k = linear(kv_in, self._p(f"{prefix}.wk"), self._p(f"{prefix}.bk"))
        v = linear(kv_in, self._p(f"{prefix}.wv"), self._p(f"{prefix}.bv"))
        q = transpose(reshape(q, (tq, c.n_heads, c.head_dim)), (1, 0, 2))
        k = transpose(reshape(k, (tk, c.n_heads, c.head_dim)), (1, 2, 0))
        v = transpose(reshape(v, (tk, c.n_heads, c.head_dim)), (1, 0, 2))
        scores = mul(matmul(q, k), 1.0 / np.sqrt(c.head_dim))
        probs = masked_softmax(scores, allow)
        if sink is not None:
            sink.append(probs.data)
        ctx = reshape(transpose(matmul(probs, v), (1, 0, 2)), (tq, c.d_model))
        return linear(ctx, self._p(f"{prefix}.wo"), self._p(f"{prefix}.bo"))

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        h = gelu(linear(x, self._p(f"{prefix}.w1"), self._p(f"{prefix}.b1")))
        return linear(h, self._p(f"{prefix}.w2"), self._p(f"{prefix}.b2"))

    def _encoder_block(self, prefix: str, x: Tensor, allow: np.ndarray, sink: list | None) -> Tensor:
        x = self._ln(f"{prefix}.ln1", add(x, self._mha(f"{prefix}.attn", x, x, allow, sink)))
        return self._ln(f"{prefix}.ln2", add(x, self._ffn(f"{prefix}.ffn", x)))

    # forward -----------------------------------------------------------------

    def forward_arrays(self, ids: Sequence[int], features: np.ndarray, spatial: np.ndarray,
                       branch: str, mask_pos: int | None = None) -> BranchOutput:
        if branch not in (BRANCH_BI, BRANCH_ONE):
            raise ValueError(f"unknown branch {branch!r}")
        if branch == BRANCH_ONE and mask_pos is None:
            raise ValueError("one branch requires a mask position")
        t = len(ids)
        k = features.shape[0]
        if branch == BRANCH_ONE and not 0 <= mask_pos <= t:
            raise ValueError(f"mask position {mask_pos} outside sequence of {t} tokens")

        lang = self._ln("emb.ln", self._embed_ids(ids))
        vis = self._ln("vis.ln", self._embed_region_arrays(features, spatial))

        lang_attn: list = []
        obj_attn: list = []
        cross_lang_attn: list = []
        cross_vis_attn: list = []

        lang_allow = causal_allow(t) if branch == BRANCH_ONE else full_allow(t)
        for i in range(self.config.n_lang_layers):
            lang = self._encoder_block(f"lang.{i}", lang, lang_allow, lang_attn)
        # object features are always bidirectionally visible to each other
        for i in range(self.config.n_obj_layers):
            vis = self._encoder_block(f"obj.{i}", vis, full_allow(k), obj_attn)

        for i in range(self.config.n_cross_layers):
            p = f"cross.{i}"
            if branch == BRANCH_BI:
                l_att = self._mha(f"{p}.l2v", lang, vis, full_allow(t, k), cross_lang_attn)
                v_att = self._mha(f"{p}.v2l", vis, lang, full_allow(k, t), cross_vis_attn)
                lang2 = self._ln(f"{p}.lang_ln1", add(lang, l_att))
                vis2 = self._ln(f"{p}.vis_ln1", add(vis, v_att))
            else:
                m = min(mask_pos, t)
                if m == 0:
                    # no row may see vision: whole cross-attention is skipped
                    lang2 = self._ln(f"{p}.lang_ln1", lang)
                    cross_lang_attn.append(None)
                elif m == t:
                    l_att = self._mha(f"{p}.l2v", lang, vis, full_allow(t, k), cross_lang_attn)
                    lang2 = self._ln(f"{p}.lang_ln1", add(lang, l_att))
                else:
                    # rectangle rule: only rows p < m attend vision, rest pass through
                    head = gather_rows(lang, list(range(m)))
                    l_att = self._mha(f"{p}.l2v", head, vis, full_allow(m, k), cross_lang_attn)
                    lang2 = self._ln(f"{p}.lang_ln1", add(lang, pad_rows(l_att, list(range(m)), t)))
                # vision reads no language keys in the one branch (no leak path)
                vis2 = self._ln(f"{p}.vis_ln1", vis)
                cross_vis_attn.append(None)
            lang = self._ln(f"{p}.lang_ln2", add(lang2, self._ffn(f"{p}.lang_ffn", lang2)))
            vis = self._ln(f"{p}.vis_ln2", add(vis2, self._ffn(f"{p}.vis_ffn", vis2)))

        cls_feature = reshape(gather_rows(lang, [0]), (self.config.d_model,))
        return BranchOutput(
            lang_hidden=lang, vis_hidden=vis, cls_feature=cls_feature,
            lang_attn=lang_attn, obj_attn=obj_attn,
            cross_lang_attn=cross_lang_attn, cross_vis_attn=cross_vis_attn,
        )

    def forward(self, example: corpus.TrainingExample, branch: str,
                mask_pos: int | None = None) -> BranchOutput:
        rs = example.region_set
        return self.forward_arrays(example.text.live_ids(), rs.features_matrix(),
                                   rs.spatial_matrix(), branch, mask_pos)

    # heads ---------------------------------------------------------------------

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        return linear(hidden, self._p("head.mlm.w"), self._p("head.mlm.b"))

    def itm_logits(self, cls_feature: Tensor) -> Tensor:
        return linear(cls_feature, self._p("head.itm.w"), self._p("head.itm.b"))

    def qa_logits(self, cls_feature: Tensor) -> Tensor:
        h = gelu(linear(cls_feature, self._p("head.qa.w1"), self._p("head.qa.b1")))
        return linear(h, self._p("head.qa.w2"), self._p("head.qa.b2"))

    def obj_class_logits(self, vis_hidden: Tensor) -> Tensor:
        return linear(vis_hidden, self._p("head.obj_cls.w"), self._p("head.obj_cls.b"))

    def obj_attr_logits(self, vis_hidden: Tensor) -> Tensor:
        return linear(vis_hidden, self._p("head.obj_attr.w"), self._p("head.obj_attr.b"))

    def feat_regress(self, vis_hidden: Tensor) -> Tensor:
        return linear(vis_hidden, self._p("head.mfr.w"), self._p("head.mfr.b"))

    def heads_apply(self, out: BranchOutput) -> HeadLogits:
        """All head logits; no softmax applied, losses own normalization."""
        return HeadLogits(
            mlm=self.mlm_logits(out.lang_hidden),
            itm=self.itm_logits(out.cls_feature),
            qa=self.qa_logits(out.cls_feature),
            obj_class=self.obj_class_logits(out.vis_hidden),
            obj_attr=self.obj_attr_logits(out.vis_hidden),
            feat_regress=self.feat_regress(out.vis_hidden),
        )


# checkpoints -------------------------------------------------------------------
#
# magic UCMCKPT1, u32 version, 11 u32 config fields (CONFIG_FIELDS order),
# u32 parameter count, then per parameter: u16 name length + UTF-8 name,
# u8 rank, u32 extents, f32 values. Little-endian throughout.


def save_checkpoint(model: UCModel, path) -> None:
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack(f"<{len(CONFIG_FIELDS)}I", *(getattr(cfg, f) for f in CONFIG_FIELDS)))
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.asarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> UCModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    values = struct.unpack_from(f"<{len(CONFIG_FIELDS)}I", blob, off)
    off += 4 * len(CONFIG_FIELDS)
    config = ModelConfig(**dict(zip(CONFIG_FIELDS, (int(v) for v in values))))
    if expected_config is not None and config != expected_config:
        raise ValueError(f"{path}: checkpoint config {config} does not match expected {expected_config}")
    (n_params,) = struct.unpack_from("<I", blob, off)
    off += 4
    model = UCModel(config, seed=0)
    loaded: dict[str, np.ndarray] = {}
    try:
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float64)
            off += 4 * count
            loaded[name] = arr.reshape(shape)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint: {exc}") from None
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after parameters")
    model.copy_values_from(loaded)
    return model
