"""Attention encoder, prediction head, and the pooled-global ablation.

Two variants share the same token frontend:

  hgt: a stack of self-attention blocks. Each block projects tokens to
       Q/K/V, forms row-normalized affinities A from scaled Q K^T, mixes
       values as A V, then applies a linear layer, batchnorm over the token
       dimension, and a residual connection back to the block input.
  hgn: no attention; a shared MLP plus max pooling produces one global
       feature that is concatenated to every token.

Either path ends in an MLP head mapping each token to a 3-vector that is
normalized to unit length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .errors import ContractError, DatasetFormatError
from .frontend import (
    FrameContext,
    ModelConfig,
    build_tokens,
    init_frontend_params,
    prepare_frame,
)
from .tensor import BNState, Tensor

VARIANTS = ("hgt", "hgn")
HEAD_NORM_FLOOR = 1e-8


class AttentionStats:
    """Tracks the largest affinity matrix materialized since the last reset."""

    def __init__(self):
        self.peak_entries = 0

    def observe(self, n_tokens: int) -> None:
        self.peak_entries = max(self.peak_entries, n_tokens * n_tokens)

    def reset(self) -> None:
        self.peak_entries = 0


ATTENTION_STATS = AttentionStats()


@dataclass
class AttentionTrace:
    """Per-block affinity matrices captured during one forward pass."""

    blocks: list[np.ndarray] = field(default_factory=list)

    def record(self, a: np.ndarray) -> None:
        self.blocks.append(a.copy())


@dataclass
class NormalPrediction:
    """Unit normal per point plus a mask of numerically suspect rows."""

    vectors: np.ndarray
    quality_mask: np.ndarray  # True where the epsilon guard or a fallback fired


class ModelParams:
    """Named parameter tensors, batchnorm state, and the variant/config tag."""

    def __init__(self, config: ModelConfig, variant: str,
                 tensors: dict[str, Tensor], bn_states: dict[str, BNState]):
        if variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.config = config
        self.variant = variant
        self.tensors = tensors
        self.bn_states = bn_states

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def tensor_list(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def save(self, path: str, extra_meta: dict | None = None) -> None:
        arrays: dict[str, np.ndarray] = {k: v.data for k, v in self.tensors.items()}
        for name, st in self.bn_states.items():
            arrays[f"{name}.running_mean"] = st.mean
            arrays[f"{name}.running_var"] = st.var
        meta = {
            "variant": self.variant,
            "model_config": self.config.to_dict(),
            "bn_layers": list(self.bn_states.keys()),
        }
        meta.update(extra_meta or {})
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path: str) -> "ModelParams":
        arrays, meta = load_arrays(path)
        if "variant" not in meta or "model_config" not in meta:
            raise DatasetFormatError(f"{path}: missing model metadata")
        config = ModelConfig.from_dict(meta["model_config"])
        bn_states: dict[str, BNState] = {}
        for name in meta.get("bn_layers", []):
            st = BNState(arrays[f"{name}.running_mean"].shape[0])
            st.mean = arrays.pop(f"{name}.running_mean")
            st.var = arrays.pop(f"{name}.running_var")
            bn_states[name] = st
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(config=config, variant=meta["variant"], tensors=tensors, bn_states=bn_states)


def init_model_params(config: ModelConfig, seed: int, variant: str = "hgt") -> ModelParams:
    """Deterministic fan-in-scaled initialization.

    The frontend draws from its own seed stream, so hgt and hgn built from
    the same seed share bit-identical frontend weights (and therefore
    identical token matrices).
    """
    if variant not in VARIANTS:
        raise ContractError(f"variant must be one of {VARIANTS}, got {variant!r}")
    ss = np.random.SeedSequence(entropy=(seed, 4242))
    front_ss, enc_ss, head_ss, hgn_ss = ss.spawn(4)
    tensors = init_frontend_params(config, np.random.default_rng(front_ss))
    bn_states: dict[str, BNState] = {}
    d = config.d_token

    def uniform(rng, shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)

    if variant == "hgt":
        rng = np.random.default_rng(enc_ss)
        for k in range(config.attention_blocks):
            for w in ("wq", "wk", "wv", "wo"):
                tensors[f"enc{k}.{w}"] = uniform(rng, (d, d), d)
            tensors[f"enc{k}.bn.gamma"] = Tensor(np.ones(d), requires_grad=True)
            tensors[f"enc{k}.bn.beta"] = Tensor(np.zeros(d), requires_grad=True)
            bn_states[f"enc{k}.bn"] = BNState(d)
        head_in = d
    else:
        rng = np.random.default_rng(hgn_ss)
        tensors["hgn.l1.w"] = uniform(rng, (d, config.hgn_hidden), d)
        tensors["hgn.l1.b"] = uniform(rng, (config.hgn_hidden,), d)
        head_in = d + config.hgn_hidden

    rng = np.random.default_rng(head_ss)
    tensors["head.l1.w"] = uniform(rng, (head_in, config.head_width), head_in)
    tensors["head.l1.b"] = uniform(rng, (config.head_width,), head_in)
    tensors["head.l2.w"] = uniform(rng, (config.head_width, 3), config.head_width)
    tensors["head.l2.b"] = uniform(rng, (3,), config.head_width)
    return ModelParams(config=config, variant=variant, tensors=tensors, bn_states=bn_states)


# ---------------------------------------------------------------------------
# encoder paths
# ---------------------------------------------------------------------------

def _attention_mix(
    tokens: Tensor,
    params: ModelParams,
    block: int,
    trace: AttentionTrace | None = None,
) -> Tensor:
    """Affinity mixing and output projection, before normalization."""
    cfg = params.config
    p = params.tensors
    q = T.matmul(tokens, p[f"enc{block}.wq"])
    k = T.matmul(tokens, p[f"enc{block}.wk"])
    v = T.matmul(tokens, p[f"enc{block}.wv"])
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(cfg.d_token))
    if cfg.attention_norm == "softmax":
        a = T.row_softmax(scores)
    else:
        # column softmax followed by row L1 normalization
        col = T.transpose(T.row_softmax(T.transpose(scores)))
        a = T.div(col, T.tsum(col, axis=1, keepdims=True))
    ATTENTION_STATS.observe(tokens.data.shape[0])
    if trace is not None:
        trace.record(a.data)
    combined = T.matmul(a, v if cfg.attention_combine == "av" else q)
    return T.matmul(combined, p[f"enc{block}.wo"])


def attention_block(
    tokens: Tensor,
    params: ModelParams,
    block: int,
    mode: str,
    trace: AttentionTrace | None = None,
) -> Tensor:
    mixed = _attention_mix(tokens, params, block, trace)
    normed = T.batchnorm(mixed, params.tensors[f"enc{block}.bn.gamma"],
                         params.tensors[f"enc{block}.bn.beta"],
                         params.bn_states[f"enc{block}.bn"], mode)
    return T.add(normed, tokens)


def encode(tokens: Tensor, params: ModelParams, mode: str,
           trace: AttentionTrace | None = None) -> Tensor:
    for b in range(params.config.attention_blocks):
        tokens = attention_block(tokens, params, b, mode, trace)
    return tokens


def encode_batch(
    tokens_list: list[Tensor],
    params: ModelParams,
    mode: str,
) -> list[Tensor]:
    """Encode several samples with batch-pooled normalization statistics.

    Attention stays per sample (each pane only attends within itself), but
    train-mode batchnorm standardizes the pooled tokens of the whole batch.
    That is what makes small panes viable: per-pane statistics over a
    handful of points are noise, pooled statistics are stable and match what
    eval-mode running statistics converge to. For a single sample this
    reduces exactly to attention_block, and in eval mode pooling is a no-op
    since normalization is a pointwise affine map.
    """
    cfg = params.config
    for b in range(cfg.attention_blocks):
        mixed = [_attention_mix(t, params, b) for t in tokens_list]
        pooled = T.concat(mixed, axis=0) if len(mixed) > 1 else mixed[0]
        normed = T.batchnorm(pooled, params.tensors[f"enc{b}.bn.gamma"],
                             params.tensors[f"enc{b}.bn.beta"],
                             params.bn_states[f"enc{b}.bn"], mode)
        out = []
        start = 0
        for t in tokens_list:
            n = t.data.shape[0]
            piece = T.slice_rows(normed, start, start + n) if len(mixed) > 1 else normed
            out.append(T.add(piece, t))
            start += n
        tokens_list = out
    return tokens_list


def hgn_encode(tokens: Tensor, params: ModelParams) -> Tensor:
    """Ablation: concat a max-pooled global feature to every token."""
    p = params.tensors
    h = T.relu(T.add(T.matmul(tokens, p["hgn.l1.w"]), p["hgn.l1.b"]))
    pooled = T.amax(h, axis=0, keepdims=True)
    tiled = T.repeat_rows(pooled, tokens.data.shape[0])
    return T.concat([tokens, tiled], axis=1)


def predict_head(tokens: Tensor, params: ModelParams) -> tuple[Tensor, np.ndarray]:
    """Per-token MLP to a 3-vector, normalized to unit length.

    Returns the normalized tensor (still on the tape) and a boolean mask of
    rows whose raw norm fell below the epsilon floor; those rows are
    numerically meaningless and flagged for the quality mask. The floor is
    applied to the squared norm before the root so the gradient stays finite
    even for an exactly-zero raw output.
    """
    p = params.tensors
    h = T.relu(T.add(T.matmul(tokens, p["head.l1.w"]), p["head.l1.b"]))
    raw = T.add(T.matmul(h, p["head.l2.w"]), p["head.l2.b"])
    sq_norms = T.tsum(T.square(raw), axis=1, keepdims=True)
    norms = T.sqrt(T.clamp_min(sq_norms, HEAD_NORM_FLOOR**2))
    unit = T.div(raw, norms)
    mask = (sq_norms.data.ravel() < HEAD_NORM_FLOOR**2).copy()
    return unit, mask


def forward(
    params: ModelParams,
    ctx: FrameContext,
    subset: np.ndarray,
    mode: str,
    trace: AttentionTrace | None = None,
    fmap: Tensor | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Full variant forward for one pane: tokens -> encoder -> head."""
    tokens = build_tokens(ctx, subset, params.tensors, params.config, fmap=fmap)
    if params.variant == "hgt":
        encoded = encode(tokens, params, mode, trace)
    else:
        encoded = hgn_encode(tokens, params)
    return predict_head(encoded, params)


def forward_batch(
    params: ModelParams,
    items: list[tuple[FrameContext, np.ndarray, Tensor | None]],
    mode: str,
) -> list[tuple[Tensor, np.ndarray]]:
    """Forward a batch of (context, subset, shared fmap) samples.

    The attention variant pools batchnorm statistics across the batch; the
    ablation has no normalization, so its samples are independent.
    """
    tokens_list = [
        build_tokens(ctx, subset, params.tensors, params.config, fmap=fmap)
        for ctx, subset, fmap in items
    ]
    if params.variant == "hgt":
        encoded = encode_batch(tokens_list, params, mode)
    else:
        encoded = [hgn_encode(t, params) for t in tokens_list]
    return [predict_head(t, params) for t in encoded]


def prediction_from(unit: Tensor, mask: np.ndarray) -> NormalPrediction:
    """Materialize a NormalPrediction; guarded rows become the +z axis."""
    vectors = unit.data.copy()
    if mask.any():
        vectors[mask] = np.array([0.0, 0.0, 1.0])
    return NormalPrediction(vectors=vectors, quality_mask=mask)


def predict_frame(
    params: ModelParams,
    ctx: FrameContext,
    pane_subsets: list[np.ndarray] | None = None,
    trace: AttentionTrace | None = None,
) -> NormalPrediction:
    """Eval-mode prediction for a whole frame.

    By default attention spans the full frame; pass pane subsets to shrink
    the attention scope the same way training does.
    """
    n = len(ctx.frame.points)
    if pane_subsets is None:
        pane_subsets = [np.arange(n, dtype=np.int64)]
    vectors = np.zeros((n, 3))
    quality = np.zeros(n, dtype=bool)
    covered = np.zeros(n, dtype=bool)
    for subset in pane_subsets:
        unit, mask = forward(params, ctx, subset, mode="eval", trace=trace)
        pred = prediction_from(unit, mask)
        vectors[subset] = pred.vectors
        quality[subset] = pred.quality_mask
        covered[subset] = True
    if not covered.all():
        raise ContractError("pane subsets do not cover the frame")
    return NormalPrediction(vectors=vectors, quality_mask=quality)


def context_for_frame(frame, config: ModelConfig, seed: int, frame_index: int) -> FrameContext:
    """Deterministic per-frame context: neighborhoods depend only on
    (seed, frame_index), never on how many frames were prepared before."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 777, frame_index)))
    return prepare_frame(frame, config, rng)
