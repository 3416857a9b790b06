"""Low-level feature extraction and fusion into per-point tokens.

Each 3D point gets a descriptor built from its spatial neighborhood: image
features sampled at every neighbor's projected pixel (one shared U-Net pass
over the full image), geometric features from a shared point MLP over
center-relative neighbor coordinates, and a positional embedding of each
neighbor's absolute position. The three are concatenated, fused by a linear
layer, and reduced over the neighborhood (elementwise max by default) into
one token per point.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .dataset import Frame
from .errors import ConfigurationError, ContractError
from .geometry import NeighborIndex
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Widths and hyperparameters of the whole network stack.

    The defaults are this package's reference configuration; smaller desk
    presets shrink widths for CPU runs.
    """

    d_img: int = 32
    d_geo: int = 64
    d_pos: int = 32
    d_token: int = 128
    neighbor_count: int = 60
    query_radius: float = 0.75
    unet_channels: tuple[int, ...] = (16, 32, 64)
    attention_blocks: int = 3
    head_width: int = 64
    point_hidden: int = 32
    hgn_hidden: int = 64
    reduce: str = "max"  # "max" or "mean" over the neighborhood
    attention_norm: str = "softmax"  # "softmax" or "pct"
    attention_combine: str = "av"  # "av" or "aq"

    def __post_init__(self):
        if self.neighbor_count < 1:
            raise ConfigurationError(f"neighbor_count must be >= 1, got {self.neighbor_count}")
        if self.attention_blocks < 1:
            raise ConfigurationError(f"attention_blocks must be >= 1, got {self.attention_blocks}")
        if self.reduce not in ("max", "mean"):
            raise ConfigurationError(f"reduce must be 'max' or 'mean', got {self.reduce!r}")
        if self.attention_norm not in ("softmax", "pct"):
            raise ConfigurationError(f"attention_norm must be 'softmax' or 'pct', got {self.attention_norm!r}")
        if self.attention_combine not in ("av", "aq"):
            raise ConfigurationError(f"attention_combine must be 'av' or 'aq', got {self.attention_combine!r}")
        self.unet_channels = tuple(int(c) for c in self.unet_channels)

    @property
    def fused_width(self) -> int:
        return self.d_img + self.d_geo + self.d_pos

    @property
    def unet_divisor(self) -> int:
        return 2 ** (len(self.unet_channels) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_channels"] = list(self.unet_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["unet_channels"] = tuple(d.get("unet_channels", (16, 32, 64)))
        return cls(**d)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_frontend_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fan-in-scaled uniform initialization of all frontend weights."""
    p: dict[str, Tensor] = {}

    def tensor(name, arr):
        p[name] = Tensor(arr, requires_grad=True)

    chans = config.unet_channels
    prev = 3
    for i, c in enumerate(chans):
        tensor(f"unet.enc{i}.c1.w", _uniform(rng, (c, prev, 3, 3), prev * 9))
        tensor(f"unet.enc{i}.c1.b", _uniform(rng, (c, 1, 1), prev * 9))
        tensor(f"unet.enc{i}.c2.w", _uniform(rng, (c, c, 3, 3), c * 9))
        tensor(f"unet.enc{i}.c2.b", _uniform(rng, (c, 1, 1), c * 9))
        prev = c
    for i in reversed(range(len(chans) - 1)):
        cin = chans[i] + chans[i + 1]  # skip + upsampled
        c = chans[i]
        tensor(f"unet.dec{i}.c1.w", _uniform(rng, (c, cin, 3, 3), cin * 9))
        tensor(f"unet.dec{i}.c1.b", _uniform(rng, (c, 1, 1), cin * 9))
        tensor(f"unet.dec{i}.c2.w", _uniform(rng, (c, c, 3, 3), c * 9))
        tensor(f"unet.dec{i}.c2.b", _uniform(rng, (c, 1, 1), c * 9))
    tensor("unet.out.w", _uniform(rng, (config.d_img, chans[0], 1, 1), chans[0]))
    tensor("unet.out.b", _uniform(rng, (config.d_img, 1, 1), chans[0]))

    tensor("point.l1.w", _uniform(rng, (3, config.point_hidden), 3))
    tensor("point.l1.b", _uniform(rng, (config.point_hidden,), 3))
    tensor("point.l2.w", _uniform(rng, (config.point_hidden, config.d_geo), config.point_hidden))
    tensor("point.l2.b", _uniform(rng, (config.d_geo,), config.point_hidden))

    tensor("pos.l1.w", _uniform(rng, (3, config.d_pos), 3))
    tensor("pos.l1.b", _uniform(rng, (config.d_pos,), 3))

    tensor("fuse.w", _uniform(rng, (config.fused_width, config.d_token), config.fused_width))
    tensor("fuse.b", _uniform(rng, (config.d_token,), config.fused_width))
    return p


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def unet_features(image: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Per-pixel features at input resolution from an encoder-decoder with
    skip connections. Requires H and W divisible by 2^(levels-1)."""
    _, h, w = image.data.shape
    div = config.unet_divisor
    if h % div or w % div:
        raise ConfigurationError(
            f"unet needs spatial dims divisible by {div}, got {h}x{w}"
        )
    chans = config.unet_channels
    skips = []
    x = image
    for i in range(len(chans)):
        if i > 0:
            x = T.maxpool2(x)
        x = T.relu(T.add(T.conv2d(x, params[f"unet.enc{i}.c1.w"], padding=1),
                         params[f"unet.enc{i}.c1.b"]))
        x = T.relu(T.add(T.conv2d(x, params[f"unet.enc{i}.c2.w"], padding=1),
                         params[f"unet.enc{i}.c2.b"]))
        if i < len(chans) - 1:
            skips.append(x)
    for i in reversed(range(len(chans) - 1)):
        x = T.upsample2(x)
        x = T.concat([skips[i], x], axis=0)
        x = T.relu(T.add(T.conv2d(x, params[f"unet.dec{i}.c1.w"], padding=1),
                         params[f"unet.dec{i}.c1.b"]))
        x = T.relu(T.add(T.conv2d(x, params[f"unet.dec{i}.c2.w"], padding=1),
                         params[f"unet.dec{i}.c2.b"]))
    return T.add(T.conv2d(x, params["unet.out.w"]), params["unet.out.b"])


def point_mlp(centered: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Shared MLP over center-relative neighbor coordinates [n x 3]."""
    h = T.relu(T.add(T.matmul(centered, params["point.l1.w"]), params["point.l1.b"]))
    return T.relu(T.add(T.matmul(h, params["point.l2.w"]), params["point.l2.b"]))


def positional_embedding(points: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Embedding of absolute positions [n x 3] -> [n x d_pos]."""
    return T.relu(T.add(T.matmul(points, params["pos.l1.w"]), params["pos.l1.b"]))


def _fuse(f_img: Tensor, f_geo: Tensor, f_pos: Tensor, params: dict[str, Tensor]) -> Tensor:
    fused = T.concat([f_img, f_geo, f_pos], axis=1)
    return T.relu(T.add(T.matmul(fused, params["fuse.w"]), params["fuse.b"]))


def fuse_and_reduce(
    f_img: Tensor,
    f_geo: Tensor,
    f_pos: Tensor,
    params: dict[str, Tensor],
    config: ModelConfig,
) -> Tensor:
    """Fuse one point's per-neighbor features [k x d_*] into its token [d]."""
    per_neighbor = _fuse(f_img, f_geo, f_pos, params)
    if config.reduce == "max":
        return amax_rows(per_neighbor)
    return T.tmean(per_neighbor, axis=0)


def amax_rows(x: Tensor) -> Tensor:
    return T.amax(x, axis=0)


@dataclass
class FrameContext:
    """Per-frame state reused across panes and epochs: fixed neighborhoods
    and integer feature-lookup pixels. Neighbor sampling happens once per
    context, driven by the provided generator."""

    frame: Frame
    neighborhoods: np.ndarray  # [N, k] indices into the frame cloud
    pix_rows: np.ndarray
    pix_cols: np.ndarray


def prepare_frame(frame: Frame, config: ModelConfig, rng: np.random.Generator) -> FrameContext:
    index = NeighborIndex(frame.points, config.query_radius)
    n = len(frame.points)
    hoods = np.empty((n, config.neighbor_count), dtype=np.int64)
    for i in range(n):
        hoods[i] = index.query(i, config.neighbor_count, rng).indices
    rows, cols = frame.pixel_indices()
    h, w = frame.intrinsics.height, frame.intrinsics.width
    if np.any(rows < 0) or np.any(rows >= h) or np.any(cols < 0) or np.any(cols >= w):
        raise ContractError("frame has projections outside the image")
    return FrameContext(frame=frame, neighborhoods=hoods, pix_rows=rows, pix_cols=cols)


def build_tokens(
    ctx: FrameContext,
    subset: np.ndarray,
    params: dict[str, Tensor],
    config: ModelConfig,
    fmap: Tensor | None = None,
) -> Tensor:
    """Tokens [len(subset) x d_token] for a pane of points.

    Neighborhoods span the full frame cloud regardless of the pane, and the
    image feature map covers the full image; only the token set shrinks.
    Pass `fmap` to share one U-Net pass across panes of the same frame.
    """
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ContractError("build_tokens needs a non-empty point subset")
    if fmap is None:
        image = np.ascontiguousarray(ctx.frame.image.transpose(2, 0, 1))
        fmap = unet_features(Tensor(image), params, config)
    pts = ctx.frame.points.points
    k = config.neighbor_count
    flat = ctx.neighborhoods[subset].reshape(-1)
    centers = np.repeat(pts[subset], k, axis=0)
    f_geo = point_mlp(Tensor(pts[flat] - centers), params)
    f_pos = positional_embedding(Tensor(pts[flat]), params)
    f_img = T.gather_pixels(fmap, ctx.pix_rows[flat], ctx.pix_cols[flat])
    per_neighbor = _fuse(f_img, f_geo, f_pos, params)
    cube = T.reshape(per_neighbor, (subset.size, k, config.d_token))
    if config.reduce == "max":
        return T.amax(cube, axis=1)
    return T.tmean(cube, axis=1)
