"""Frames and their on-disk dataset format.

Layout under a dataset root:

    manifest.json
    frames/<id>/image.ppm        binary P6, 8-bit
    frames/<id>/points.f64       [N,3] camera-frame points
    frames/<id>/normals.f64      [N,3] unit ground-truth normals
    frames/<id>/projmap.f64      [N,2] (u, v) pixel coordinates
    frames/<id>/intrinsics.json

Float blobs are little-endian float64, row-major, prefixed by an 8-byte
little-endian value count. Images are quantized to 8-bit at render time, so
a write/read round trip reproduces every array bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DatasetFormatError
from .geometry import CameraIntrinsics, PointCloud
from . import scene as scn

FORMAT_VERSION = 1

# defaults mirroring the full-scale synthetic collection protocol
DEFAULT_TRAIN_FRAMES = 121
DEFAULT_TEST_FRAMES = 30
DEFAULT_IMAGE_SIZE = 400
NOISE_LEVELS = (0.0, 0.0025, 0.012, 0.024)


@dataclass
class Frame:
    """One observation: image, sparse points, projections, labels."""

    image: np.ndarray  # [H,W,3] in [0,1], 8-bit quantized
    points: PointCloud  # camera frame; noisy when noise_level > 0
    proj_map: np.ndarray  # [N,2] (u,v), recorded before noise
    normals_gt: np.ndarray  # [N,3] unit, camera frame, facing the sensor
    intrinsics: CameraIntrinsics
    noise_level: float = 0.0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.proj_map = np.asarray(self.proj_map, dtype=np.float64).reshape(-1, 2)
        self.normals_gt = np.asarray(self.normals_gt, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if self.proj_map.shape[0] != n or self.normals_gt.shape[0] != n:
            raise ContractError(
                f"frame arrays disagree: {n} points, {self.proj_map.shape[0]} projections, "
                f"{self.normals_gt.shape[0]} normals"
            )

    def __len__(self) -> int:
        return len(self.points)

    def pixel_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer (row, col) pixel indices for feature lookup."""
        cols = np.clip(np.rint(self.proj_map[:, 0]).astype(np.intp), 0, self.intrinsics.width - 1)
        rows = np.clip(np.rint(self.proj_map[:, 1]).astype(np.intp), 0, self.intrinsics.height - 1)
        return rows, cols


@dataclass
class FrameEntry:
    frame_id: str
    path: str
    point_count: int


@dataclass
class DatasetManifest:
    frames: list[FrameEntry]
    train_ids: list[str]
    test_ids: list[str]
    noise_level: float
    image_width: int
    image_height: int
    format_version: int = FORMAT_VERSION

    def split_ids(self, split: str) -> list[str]:
        if split == "train":
            return list(self.train_ids)
        if split == "test":
            return list(self.test_ids)
        raise ContractError(f"unknown split {split!r}")


# ---------------------------------------------------------------------------
# low-level file formats
# ---------------------------------------------------------------------------

def write_f64(path: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as f:
        f.write(np.uint64(arr.size).tobytes())
        f.write(arr.tobytes())


def read_f64(path: str, shape: tuple[int, ...] | None = None) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise DatasetFormatError(f"{path}: missing count prefix")
    count = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    if len(raw) != 8 + count * 8:
        raise DatasetFormatError(
            f"{path}: payload holds {(len(raw) - 8) // 8} values, header says {count}"
        )
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=8).copy()
    if shape is not None:
        try:
            arr = arr.reshape(shape)
        except ValueError as e:
            raise DatasetFormatError(f"{path}: cannot reshape {count} values to {shape}") from e
    return arr


def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary P6 from a [H,W,3] float image in [0,1]."""
    h, w, _ = image.shape
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise DatasetFormatError(f"{path}: not a binary PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = int(fields[0]), int(fields[1]), int(fields[2])
    if maxval != 255:
        raise DatasetFormatError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    if pixels.size != w * h * 3:
        raise DatasetFormatError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset read/write
# ---------------------------------------------------------------------------

def write_frame(root: str, frame_id: str, frame: Frame) -> FrameEntry:
    d = os.path.join(root, "frames", frame_id)
    os.makedirs(d, exist_ok=True)
    write_ppm(os.path.join(d, "image.ppm"), frame.image)
    write_f64(os.path.join(d, "points.f64"), frame.points.points)
    write_f64(os.path.join(d, "normals.f64"), frame.normals_gt)
    write_f64(os.path.join(d, "projmap.f64"), frame.proj_map)
    with open(os.path.join(d, "intrinsics.json"), "w") as f:
        json.dump(frame.intrinsics.to_dict(), f, indent=1)
    return FrameEntry(frame_id=frame_id, path=os.path.join("frames", frame_id),
                      point_count=len(frame))


def read_frame(root: str, entry: FrameEntry, noise_level: float) -> Frame:
    d = os.path.join(root, entry.path)
    try:
        with open(os.path.join(d, "intrinsics.json")) as f:
            intr = CameraIntrinsics.from_dict(json.load(f))
        image = read_ppm(os.path.join(d, "image.ppm"))
        points = read_f64(os.path.join(d, "points.f64"), (entry.point_count, 3))
        normals = read_f64(os.path.join(d, "normals.f64"), (entry.point_count, 3))
        projmap = read_f64(os.path.join(d, "projmap.f64"), (entry.point_count, 2))
    except (OSError, DatasetFormatError) as e:
        raise DatasetFormatError(f"frame {entry.frame_id!r}: {e}") from e
    return Frame(image=image, points=PointCloud(points), proj_map=projmap,
                 normals_gt=normals, intrinsics=intr, noise_level=noise_level)


def write_dataset(
    root: str,
    frames: dict[str, Frame],
    train_ids: list[str],
    test_ids: list[str],
    noise_level: float,
) -> DatasetManifest:
    os.makedirs(root, exist_ok=True)
    entries = [write_frame(root, fid, frames[fid]) for fid in frames]
    any_frame = next(iter(frames.values()))
    manifest = DatasetManifest(
        frames=entries,
        train_ids=list(train_ids),
        test_ids=list(test_ids),
        noise_level=noise_level,
        image_width=any_frame.intrinsics.width,
        image_height=any_frame.intrinsics.height,
    )
    doc = {
        "format_version": manifest.format_version,
        "image": {"w": manifest.image_width, "h": manifest.image_height},
        "noise_level": manifest.noise_level,
        "splits": {"train": manifest.train_ids, "test": manifest.test_ids},
        "frames": [
            {"id": e.frame_id, "path": e.path, "point_count": e.point_count}
            for e in entries
        ],
    }
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(doc, f, indent=1)
    return manifest


def read_manifest(root: str) -> DatasetManifest:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise DatasetFormatError(f"cannot read manifest at {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: invalid JSON: {e}") from e
    if doc.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: format version {doc.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    entries = [
        FrameEntry(frame_id=e["id"], path=e["path"], point_count=int(e["point_count"]))
        for e in doc["frames"]
    ]
    return DatasetManifest(
        frames=entries,
        train_ids=[str(x) for x in doc["splits"]["train"]],
        test_ids=[str(x) for x in doc["splits"]["test"]],
        noise_level=float(doc["noise_level"]),
        image_width=int(doc["image"]["w"]),
        image_height=int(doc["image"]["h"]),
    )


class FrameStore:
    """Lazy frame loader over a dataset directory, with caching."""

    def __init__(self, root: str):
        self.root = root
        self.manifest = read_manifest(root)
        self._entries = {e.frame_id: e for e in self.manifest.frames}
        self._cache: dict[str, Frame] = {}

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return [e.frame_id for e in self.manifest.frames]
        return self.manifest.split_ids(split)

    def load(self, frame_id: str) -> Frame:
        if frame_id not in self._cache:
            if frame_id not in self._entries:
                raise DatasetFormatError(f"frame {frame_id!r} not in manifest")
            self._cache[frame_id] = read_frame(
                self.root, self._entries[frame_id], self.manifest.noise_level
            )
        return self._cache[frame_id]


def read_dataset(root: str) -> tuple[DatasetManifest, FrameStore]:
    store = FrameStore(root)
    return store.manifest, store


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def default_intrinsics(size: int) -> CameraIntrinsics:
    # roughly 60 degree horizontal field of view
    f = size / (2.0 * np.tan(np.deg2rad(30.0)))
    return CameraIntrinsics(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0, width=size, height=size)


def lidar_layout(size: int, target_points: int, full_cover: bool) -> tuple[scn.PixelRect, int, int]:
    """Mask rectangle and strides that yield roughly target_points rays."""
    v0 = 0 if full_cover else int(round(0.4 * size))
    rect = scn.PixelRect(u0=0, v0=v0, u1=size, v1=size)
    pixels = (rect.u1 - rect.u0) * (rect.v1 - rect.v0)
    stride = max(1, int(round(np.sqrt(pixels / max(target_points, 1)))))
    return rect, stride, stride


def generate_frame(
    seed_seq: np.random.SeedSequence,
    size: int,
    noise_level: float,
    target_points: int,
    forward_offset: float = 0.0,
    full_cover: bool = False,
) -> Frame:
    """Deterministic frame from a seed: scene, render, sample, noise."""
    scene_rng, noise_rng = [np.random.default_rng(s) for s in seed_seq.spawn(2)]
    scene = scn.make_random_scene(scene_rng, forward_offset=forward_offset, enclosed=full_cover)
    intr = default_intrinsics(size)
    image = scn.render_image(scene, intr)
    rect, su, sv = lidar_layout(size, target_points, full_cover)
    cloud, proj_map, normals = scn.sample_lidar(scene, intr, rect, su, sv)
    noisy = scn.add_noise(cloud, noise_level, noise_rng)
    return Frame(image=image, points=noisy, proj_map=proj_map, normals_gt=normals,
                 intrinsics=intr, noise_level=noise_level)


def generate_dataset(
    root: str,
    n_train: int = DEFAULT_TRAIN_FRAMES,
    n_test: int = DEFAULT_TEST_FRAMES,
    size: int = DEFAULT_IMAGE_SIZE,
    noise_level: float = 0.0,
    seed: int = 0,
    target_points: int | None = None,
    full_cover: bool = False,
) -> DatasetManifest:
    """Generate and write a dataset; scene content depends only on `seed`,
    so datasets at different noise levels share identical geometry."""
    if target_points is None:
        # ~10k points at size 400 and proportionally fewer on smaller images
        target_points = max(1, int(round(10000 * (size / 400.0) ** 2)))
    total = n_train + n_test
    frames: dict[str, Frame] = {}
    train_ids, test_ids = [], []
    for i in range(total):
        fid = f"{i:04d}"
        frame = generate_frame(
            np.random.SeedSequence(entropy=(seed, 1009, i)),
            size=size,
            noise_level=noise_level,
            target_points=target_points,
            forward_offset=1.5 * i,
            full_cover=full_cover,
        )
        frames[fid] = frame
        (train_ids if i < n_train else test_ids).append(fid)
    return write_dataset(root, frames, train_ids, test_ids, noise_level)
