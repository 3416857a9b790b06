"""Evaluation harness: per-point error distributions, quantile curves,
method runners (PCA baseline and trained models), summary tables, and
attention-map export.

All angles are radians internally; every report and CSV is in degrees.
CSV artifacts are byte-identical across runs with the same flags and seed.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset import FrameStore, write_f64
from .errors import ContractError, DegenerateNeighborhoodError
from .frontend import ModelConfig
from .geometry import (
    NeighborIndex,
    angle_errors,
    fit_plane,
    orient_toward,
    view_direction,
)
from .model import (
    AttentionTrace,
    ModelParams,
    NormalPrediction,
    context_for_frame,
    predict_frame,
)
from .training import make_panes

# Reference mean angle errors (degrees) for the full-scale protocol
# (Unity-rendered scenes, 121/30 frames at 400x400). Shown in summary
# tables for context only; desk-scale runs are not expected to match them.
REFERENCE_RESULTS = {
    "pca": {0.0: 39.27, 0.0025: 40.10, 0.012: 42.80, 0.024: 44.06},
    "hgn": {0.0: 8.49, 0.0025: 10.42, 0.012: 11.31, 0.024: 11.41},
    "hgt": {0.0: 8.18, 0.0025: 9.61, 0.012: 10.36, 0.024: 11.38},
}

QUANTILE_RESOLUTION = 512


@dataclass
class ErrorDistribution:
    """Sorted per-point angle errors with interpolated quantiles."""

    errors: np.ndarray  # radians, ascending

    @classmethod
    def from_errors(cls, errors: np.ndarray) -> "ErrorDistribution":
        errors = np.asarray(errors, dtype=np.float64).ravel()
        if errors.size == 0:
            raise ContractError("error distribution needs at least one value")
        return cls(errors=np.sort(errors))

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    def quantile(self, q) -> np.ndarray:
        return np.quantile(self.errors, q, method="linear")


def quantile_curve(dist: ErrorDistribution, resolution: int = QUANTILE_RESOLUTION) -> np.ndarray:
    """[(q, angle_rad)] at `resolution` evenly spaced quantiles in [0, 1]."""
    if resolution < 2:
        raise ContractError(f"resolution must be >= 2, got {resolution}")
    qs = np.linspace(0.0, 1.0, resolution)
    return np.stack([qs, dist.quantile(qs)], axis=1)


@dataclass
class EvalReport:
    method: str
    noise_level: float
    distribution: ErrorDistribution
    per_frame: list[tuple[str, float, int]]  # (frame_id, mean deg, points)
    per_point: list[tuple[str, np.ndarray]]  # (frame_id, angles rad)

    @property
    def mean_angle_deg(self) -> float:
        return float(np.degrees(self.distribution.mean))


# ---------------------------------------------------------------------------
# method runners
# ---------------------------------------------------------------------------

def pca_predict_frame(
    frame,
    radius: float,
    count: int,
    rng: np.random.Generator,
) -> NormalPrediction:
    """Classical baseline: neighborhood plane fit per point.

    Degenerate neighborhoods (fewer than three distinct points) fall back to
    the view direction; those and fits whose two smallest covariance
    eigenvalues tie are flagged in the quality mask.
    """
    cloud = frame.points
    index = NeighborIndex(cloud, radius)
    n = len(cloud)
    vectors = np.zeros((n, 3))
    quality = np.zeros(n, dtype=bool)
    for i in range(n):
        nbr = index.query(i, count, rng)
        try:
            fit = fit_plane(cloud.points[nbr.indices])
            vectors[i] = orient_toward(fit.normal, cloud.points[i])
            quality[i] = fit.ambiguous
        except DegenerateNeighborhoodError:
            vectors[i] = view_direction(cloud.points[i])
            quality[i] = True
    return NormalPrediction(vectors=vectors, quality_mask=quality)


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("HGT_THREADS", "1")))
    except ValueError:
        return 1


def report_from_predictions(
    method: str,
    noise_level: float,
    store: FrameStore,
    ids: list[str],
    predictions: dict[str, np.ndarray],
) -> EvalReport:
    per_frame = []
    per_point = []
    all_errors = []
    for fid in ids:
        frame = store.load(fid)
        errs = angle_errors(predictions[fid], frame.normals_gt)
        per_frame.append((fid, float(np.degrees(errs.mean())), len(errs)))
        per_point.append((fid, errs))
        all_errors.append(errs)
    dist = ErrorDistribution.from_errors(np.concatenate(all_errors))
    return EvalReport(method=method, noise_level=noise_level, distribution=dist,
                      per_frame=per_frame, per_point=per_point)


def evaluate_method(
    store: FrameStore,
    split: str,
    method: str,
    params: ModelParams | None = None,
    seed: int = 0,
    radius: float | None = None,
    count: int | None = None,
    pane_grid: tuple[int, int] | None = None,
) -> EvalReport:
    """Run one method over a split and collect its error report.

    Frames are processed independently (parallel up to HGT_THREADS) and
    assembled in manifest order.
    """
    ids = store.ids(split)
    order = {fid: i for i, fid in enumerate(store.ids())}
    if method == "pca":
        cfg = ModelConfig()
        radius = cfg.query_radius if radius is None else radius
        count = cfg.neighbor_count if count is None else count

        def run(fid: str) -> np.ndarray:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 777, order[fid])))
            return pca_predict_frame(store.load(fid), radius, count, rng).vectors
    elif method in ("hgt", "hgn"):
        if params is None:
            raise ContractError(f"method {method!r} needs model parameters")
        if params.variant != method:
            raise ContractError(
                f"checkpoint variant {params.variant!r} does not match method {method!r}"
            )

        def run(fid: str) -> np.ndarray:
            frame = store.load(fid)
            ctx = context_for_frame(frame, params.config, seed, order[fid])
            subsets = None if pane_grid is None else make_panes(frame, pane_grid)
            return predict_frame(params, ctx, pane_subsets=subsets).vectors
    else:
        raise ContractError(f"unknown method {method!r}")

    workers = _max_workers()
    if workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vectors = list(pool.map(run, ids))
    else:
        vectors = [run(fid) for fid in ids]
    predictions = dict(zip(ids, vectors))
    return report_from_predictions(method, store.manifest.noise_level, store, ids, predictions)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def write_per_point_csv(path: str, report: EvalReport) -> None:
    with open(path, "w") as f:
        f.write("frame_id,point_id,angle_deg\n")
        for fid, errs in report.per_point:
            for pid, e in enumerate(np.degrees(errs)):
                f.write(f"{fid},{pid},{float(e)!r}\n")


def write_quantile_csv(path: str, report: EvalReport, resolution: int = QUANTILE_RESOLUTION) -> None:
    curve = quantile_curve(report.distribution, resolution)
    with open(path, "w") as f:
        f.write("q,angle_deg\n")
        for q, a in curve:
            f.write(f"{float(q)!r},{float(np.degrees(a))!r}\n")


def write_summary_csv(path: str, rows: list[tuple[str, float, float]]) -> None:
    """rows: (method, noise_level, mean_angle_deg)."""
    with open(path, "w") as f:
        f.write("method,noise,mean_angle_deg\n")
        for method, noise, mean_deg in rows:
            f.write(f"{method},{float(noise)!r},{float(mean_deg)!r}\n")


def summarize(reports: list[EvalReport], include_reference: bool = True) -> str:
    """Aligned text table of mean angle error per method and noise level.

    Reference rows for the full-scale protocol are appended for context;
    they are informational and never asserted against.
    """
    if not reports:
        raise ContractError("summarize needs at least one report")
    noises = sorted({r.noise_level for r in reports})
    methods = []
    for r in reports:
        if r.method not in methods:
            methods.append(r.method)
    cells = {(r.method, r.noise_level): r.mean_angle_deg for r in reports}

    header = ["method"] + [f"noise {n:g}" for n in noises]
    lines = [header]
    for m in methods:
        row = [m]
        for n in noises:
            v = cells.get((m, n))
            row.append("-" if v is None else f"{v:.2f}")
        lines.append(row)
    if include_reference:
        lines.append(["(reference, full-scale protocol)"] + [""] * len(noises))
        for m, vals in REFERENCE_RESULTS.items():
            row = [f"  {m}"]
            for n in noises:
                row.append("-" if n not in vals else f"{vals[n]:.2f}")
            lines.append(row)
    widths = [max(len(str(line[i])) for line in lines) for i in range(len(header))]
    out = []
    for line in lines:
        out.append("  ".join(str(c).ljust(w) for c, w in zip(line, widths)).rstrip())
    return "\n".join(out) + "\n"


def summary_rows(reports: list[EvalReport]) -> list[tuple[str, float, float]]:
    return [(r.method, r.noise_level, r.mean_angle_deg) for r in reports]


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

def export_frame_attention(
    params: ModelParams,
    store: FrameStore,
    frame_id: str,
    out_dir: str,
    seed: int = 0,
) -> dict:
    """Trace a full-frame forward pass and export its affinity matrices.

    Writes one N x N float blob per block plus a JSON index mapping matrix
    rows/columns to point ids and projected pixels. Returns the paths and
    the in-memory trace.
    """
    import json

    frame = store.load(frame_id)
    n = len(frame.points)
    order = {fid: i for i, fid in enumerate(store.ids())}
    ctx = context_for_frame(frame, params.config, seed, order[frame_id])
    trace = AttentionTrace()
    predict_frame(params, ctx, trace=trace)

    os.makedirs(out_dir, exist_ok=True)
    paths = {"blocks": [], "trace": trace}
    for b, a in enumerate(trace.blocks):
        path = os.path.join(out_dir, f"attn_block{b}.f64")
        write_f64(path, a)
        paths["blocks"].append(path)

    index = {
        "frame_id": frame_id,
        "n": n,
        "points": [
            {"id": i, "u": float(frame.proj_map[i, 0]), "v": float(frame.proj_map[i, 1])}
            for i in range(n)
        ],
    }
    index_path = os.path.join(out_dir, "attn_index.json")
    with open(index_path, "w") as f:
        json.dump(index, f)
    paths["index"] = index_path
    return paths


def dump_attention(
    params: ModelParams,
    store: FrameStore,
    frame_id: str,
    point_index: int,
    out_dir: str,
    seed: int = 0,
) -> dict:
    """Full attention export for one frame plus a query-point view.

    On top of the per-block blobs and index, writes the query point's
    first-block row as CSV and a grayscale heatmap of that row splatted at
    the projected pixels.
    """
    frame = store.load(frame_id)
    n = len(frame.points)
    if not (0 <= point_index < n):
        raise ContractError(f"point index {point_index} out of range [0, {n})")
    paths = export_frame_attention(params, store, frame_id, out_dir, seed=seed)
    trace = paths["trace"]

    row = trace.blocks[0][point_index]
    row_path = os.path.join(out_dir, "query_row.csv")
    with open(row_path, "w") as f:
        f.write("point_id,pixel_u,pixel_v,weight\n")
        for i, w in enumerate(row):
            f.write(f"{i},{float(frame.proj_map[i, 0])!r},"
                    f"{float(frame.proj_map[i, 1])!r},{float(w)!r}\n")
    paths["query_row"] = row_path

    paths["heatmap"] = _write_heatmap(frame, row, os.path.join(out_dir, "heatmap.ppm"))
    paths["row"] = row
    return paths


def _write_heatmap(frame, weights: np.ndarray, path: str) -> str:
    from .dataset import write_ppm

    lum = frame.image.mean(axis=2)
    img = np.repeat((0.25 * lum)[:, :, None], 3, axis=2)
    wmax = float(weights.max())
    scaled = weights / wmax if wmax > 0 else weights
    rows, cols = frame.pixel_indices()
    h, w = lum.shape
    for i, s in enumerate(scaled):
        r, c = rows[i], cols[i]
        r0, r1 = max(0, r - 1), min(h, r + 2)
        c0, c1 = max(0, c - 1), min(w, c + 2)
        img[r0:r1, c0:c1] = np.maximum(img[r0:r1, c0:c1], 0.25 + 0.75 * s)
    write_ppm(path, img)
    return path
