"""Multi-view pick-and-place demonstration datasets: generation, storage, loading and sampling.

Directory layout::

    manifest.json
    frames/demo_{d}/view_{v}.bin   header + uint8 frames, t-major, little-endian
    labels/demo_{d}.csv            t, stage, joint_0..3, velocity_0..3, gripper_closed

External multi-view datasets can be re-encoded with DatasetWriter and are then
loaded exactly like generated ones.
"""
import hashlib
import logging
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from CLfD.exceptions import ConfigError, DatasetError
from CLfD.scene import NUM_JOINTS, CameraRig, render_view, sample_placement, scripted_trajectory
from CLfD.utils import load_json, rng_for, save_to_json

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FRAME_MAGIC = b"CLFDFRMS"
FRAME_VERSION = 1
# magic, version, T, H, W, C, dtype code
FRAME_HEADER = struct.Struct("<8sHIHHHB")
DTYPE_CODES = {1: np.dtype("u1"), 4: np.dtype("<f4")}
SPLITS = ("train", "val", "test")

LABEL_COLUMNS = (
    ["t", "stage"]
    + [f"joint_{i}" for i in range(NUM_JOINTS)]
    + [f"velocity_{i}" for i in range(NUM_JOINTS)]
    + ["gripper_closed"]
)


@dataclass
class GeneratorConfig:
    demos: int = 150
    frames_per_demo: int = 40
    image_size: int = 64
    workers: int = 1
    placement_range: float = 0.35
    rig: CameraRig = field(default_factory=CameraRig)

    def validate(self) -> None:
        if self.demos < 1:
            raise ConfigError(f"demos must be >= 1, got {self.demos}")
        if self.frames_per_demo < 4:
            raise ConfigError(f"frames_per_demo must be >= 4, got {self.frames_per_demo}")
        if len(self.rig) != 5:
            raise ConfigError(f"camera rig must have 5 cameras, got {len(self.rig)}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["rig"] = self.rig.to_dict()
        return data


def split_counts(demos: int) -> Tuple[int, int, int]:
    """(train, val, test): 100/25/25 for 150 demos, one sixth each for val and test in general."""
    held_out = demos // 6
    return demos - 2 * held_out, held_out, held_out


@dataclass
class DatasetManifest:
    seed: int
    rig: List[dict]
    demo_count: int
    frames: List[int]
    splits: Dict[str, List[int]]
    image_size: int = 64
    content_hash: str = ""
    generator: Dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def camera_rig(self) -> CameraRig:
        return CameraRig.from_dict(self.rig)

    @property
    def view_count(self) -> int:
        return len(self.rig)

    def split(self, name: str) -> List[int]:
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}; available: {sorted(self.splits)}")
        return list(self.splits[name])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        try:
            return cls(**data)
        except TypeError as e:
            raise DatasetError(f"malformed manifest: {e}") from e


@dataclass
class Demonstration:
    id: int
    views: List[np.ndarray]  # each [T, H, W, 3] in [0, 1]
    labels: pd.DataFrame

    @property
    def frame_count(self) -> int:
        return len(self.labels)


@dataclass
class ContrastiveBatch:
    """N anchor/positive pairs; images interleaved as [a_0, p_0, a_1, p_1, ...]."""

    images: np.ndarray
    demos: np.ndarray
    timesteps: np.ndarray
    views: np.ndarray  # [N, 2] anchor view, positive view

    @property
    def size(self) -> int:
        return len(self.demos)


def frame_path(root: Path, demo: int, view: int) -> Path:
    return root / "frames" / f"demo_{demo}" / f"view_{view}.bin"


def label_path(root: Path, demo: int) -> Path:
    return root / "labels" / f"demo_{demo}.csv"


def write_frames(path: Path, frames: np.ndarray) -> None:
    """[T, H, W, C] frames in [0, 1] -> quantized uint8 frame file."""
    frames = np.asarray(frames)
    quantized = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    t, h, w, c = quantized.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, t, h, w, c, 1))
        f.write(quantized.tobytes())


def open_frames(path: Path) -> np.ndarray:
    """Memory-mapped [T, H, W, C] view of a frame file, validated against its header."""
    try:
        with open(path, "rb") as f:
            header = f.read(FRAME_HEADER.size)
    except OSError as e:
        raise DatasetError(f"cannot open frame file {path}: {e}") from e
    if len(header) < FRAME_HEADER.size:
        raise DatasetError(f"{path}: truncated frame header")
    magic, version, t, h, w, c, code = FRAME_HEADER.unpack(header)
    if magic != FRAME_MAGIC or version != FRAME_VERSION or code not in DTYPE_CODES:
        raise DatasetError(f"{path}: not a supported frame file")
    dtype = DTYPE_CODES[code]
    expected = FRAME_HEADER.size + t * h * w * c * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {actual} (truncated or corrupted)")
    return np.memmap(path, dtype=dtype, mode="r", offset=FRAME_HEADER.size, shape=(t, h, w, c))


def content_hash(root: Path) -> str:
    """sha256 over relative path and bytes of every frame and label file, in sorted order."""
    digest = hashlib.sha256()
    files = sorted(p for sub in ("frames", "labels") for p in (root / sub).rglob("*") if p.is_file())
    for path in files:
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


class DatasetWriter:
    """Writes demonstrations in the dataset layout and seals them with a manifest."""

    def __init__(self, root: Path, rig: CameraRig, image_size: int = 64):
        self.root = Path(root)
        self.rig = rig
        self.image_size = image_size
        self._frames: Dict[int, int] = {}
        self._lock = threading.Lock()

    def write_demo(self, demo: Demonstration) -> None:
        if len(demo.views) != len(self.rig):
            raise DatasetError(f"demo {demo.id}: {len(demo.views)} views, rig has {len(self.rig)}")
        lengths = {len(v) for v in demo.views}
        if lengths != {demo.frame_count}:
            raise DatasetError(f"demo {demo.id}: views are not synchronized (frame counts {sorted(lengths)})")
        for view, frames in enumerate(demo.views):
            write_frames(frame_path(self.root, demo.id, view), frames)
        labels_file = label_path(self.root, demo.id)
        labels_file.parent.mkdir(parents=True, exist_ok=True)
        demo.labels.to_csv(labels_file, index=False, columns=LABEL_COLUMNS)
        with self._lock:
            self._frames[demo.id] = demo.frame_count

    def finalize(self, seed: int, splits: Dict[str, List[int]], generator: Optional[dict] = None) -> DatasetManifest:
        demo_ids = sorted(self._frames)
        if demo_ids != list(range(len(demo_ids))):
            raise DatasetError("demonstration ids must be 0..n-1 without gaps")
        manifest = DatasetManifest(
            seed=seed,
            rig=self.rig.to_dict(),
            demo_count=len(demo_ids),
            frames=[self._frames[d] for d in demo_ids],
            splits={name: list(ids) for name, ids in splits.items()},
            image_size=self.image_size,
            content_hash=content_hash(self.root),
            generator=generator or {},
        )
        save_to_json(manifest.to_dict(), self.root / "manifest.json")
        return manifest


def labels_frame(states) -> pd.DataFrame:
    joints = np.stack([s.joints() for s in states])
    velocities = np.vstack([np.zeros((1, NUM_JOINTS)), np.diff(joints, axis=0)])
    data = {"t": np.arange(len(states)), "stage": [s.stage for s in states]}
    for i in range(NUM_JOINTS):
        data[f"joint_{i}"] = joints[:, i]
    for i in range(NUM_JOINTS):
        data[f"velocity_{i}"] = velocities[:, i]
    data["gripper_closed"] = [int(s.gripper_closed) for s in states]
    return pd.DataFrame(data, columns=LABEL_COLUMNS)


def generate_demo(seed: int, demo_id: int, config: GeneratorConfig) -> Demonstration:
    rng = rng_for(seed, "data", demo_id)
    start = sample_placement(rng, placement_range=config.placement_range)
    states = scripted_trajectory(start, config.frames_per_demo)
    views = [
        np.stack([render_view(state, camera, config.image_size) for state in states])
        for camera in config.rig.cameras
    ]
    return Demonstration(id=demo_id, views=views, labels=labels_frame(states))


def generate_dataset(seed: int, out_dir: Path, config: Optional[GeneratorConfig] = None) -> DatasetManifest:
    """Deterministic dataset: the same (seed, config) yields byte-identical files and hash."""
    config = config or GeneratorConfig()
    config.validate()
    out_dir = Path(out_dir)
    writer = DatasetWriter(out_dir, config.rig, config.image_size)
    logger.info(f"Generating {config.demos} demonstrations into {out_dir}")

    def build(demo_id: int) -> int:
        writer.write_demo(generate_demo(seed, demo_id, config))
        if (demo_id + 1) % 25 == 0:
            logger.info(f"Generated demo {demo_id + 1}/{config.demos}")
        return demo_id

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        list(pool.map(build, range(config.demos)))

    n_train, n_val, _ = split_counts(config.demos)
    ids = list(range(config.demos))
    splits = {"train": ids[:n_train], "val": ids[n_train : n_train + n_val], "test": ids[n_train + n_val :]}  # noqa
    # worker count does not change the data
    generator = {k: v for k, v in config.to_dict().items() if k != "workers"}
    manifest = writer.finalize(seed, splits, generator=generator)
    logger.info(f"Dataset written, content hash {manifest.content_hash}")
    return manifest


class Dataset:
    """Lazy random access to (demo, view, t) frames of a dataset directory."""

    def __init__(self, root: Path, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._videos: Dict[Tuple[int, int], np.ndarray] = {}
        self._labels: Dict[int, pd.DataFrame] = {}
        self._lock = threading.Lock()

    def _check_index(self, demo: int, view: int, t: Optional[int] = None) -> None:
        if not (0 <= demo < self.manifest.demo_count and 0 <= view < self.manifest.view_count):
            raise DatasetError(f"missing frame (demo={demo}, view={view}, t={t})")
        if t is not None and not 0 <= t < self.manifest.frames[demo]:
            raise DatasetError(f"missing frame (demo={demo}, view={view}, t={t})")

    def raw_video(self, demo: int, view: int) -> np.ndarray:
        self._check_index(demo, view)
        key = (demo, view)
        with self._lock:
            if key not in self._videos:
                path = frame_path(self.root, demo, view)
                if not path.exists():
                    raise DatasetError(f"missing frame (demo={demo}, view={view}, t=*): {path} not found")
                video = open_frames(path)
                if len(video) != self.manifest.frames[demo]:
                    raise DatasetError(
                        f"demo {demo} view {view}: {len(video)} frames, manifest says {self.manifest.frames[demo]}"
                    )
                self._videos[key] = video
            return self._videos[key]

    def frame(self, demo: int, view: int, t: int) -> np.ndarray:
        """[H, W, 3] float32 frame in [0, 1]."""
        self._check_index(demo, view, t)
        return np.asarray(self.raw_video(demo, view)[t], dtype=np.float32) / 255.0

    def video(self, demo: int, view: int) -> np.ndarray:
        """[T, H, W, 3] float32 frames in [0, 1]."""
        return np.asarray(self.raw_video(demo, view), dtype=np.float32) / 255.0

    def labels(self, demo: int) -> pd.DataFrame:
        self._check_index(demo, 0)
        with self._lock:
            if demo not in self._labels:
                path = label_path(self.root, demo)
                try:
                    self._labels[demo] = pd.read_csv(path)
                except (OSError, pd.errors.ParserError) as e:
                    raise DatasetError(f"cannot read labels of demo {demo}: {e}") from e
            return self._labels[demo]

    def stages(self, demo: int) -> np.ndarray:
        return self.labels(demo)["stage"].to_numpy()

    def split(self, name: str) -> List[int]:
        return self.manifest.split(name)


def load_dataset(path: Path, verify: bool = True) -> Dataset:
    """Open a dataset directory; with `verify` the content hash is recomputed and checked."""
    root = Path(path)
    manifest_file = root / "manifest.json"
    if not manifest_file.exists():
        raise DatasetError(f"no manifest.json in {root}")
    try:
        manifest = DatasetManifest.from_dict(load_json(manifest_file))
    except ValueError as e:
        raise DatasetError(f"{manifest_file}: {e}") from e
    if manifest.format_version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {manifest.format_version}")
    if verify:
        actual = content_hash(root)
        if actual != manifest.content_hash:
            logger.error(f"Content hash mismatch for {root}")
            raise DatasetError(f"content hash mismatch: manifest {manifest.content_hash}, files {actual}")
    return Dataset(root, manifest)


def sample_pair_indices(
    dataset: Dataset,
    split: str,
    batch_size: int,
    rng: np.random.Generator,
    views: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(demos, timesteps, views[N, 2]) for N pairs with distinct (demo, t) and two distinct views each."""
    demo_ids = dataset.split(split)
    if not demo_ids:
        raise DatasetError(f"split {split!r} is empty")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    views = list(range(dataset.manifest.view_count)) if views is None else list(views)
    if len(views) < 2:
        raise ConfigError(f"need at least two viewpoints to form pairs, got {views}")
    frames = np.array([dataset.manifest.frames[d] for d in demo_ids])
    offsets = np.concatenate([[0], np.cumsum(frames)])
    total = int(offsets[-1])
    if batch_size > total:
        raise DatasetError(f"batch_size {batch_size} exceeds the {total} distinct (demo, t) pairs of split {split!r}")
    combos = rng.choice(total, size=batch_size, replace=False)
    positions = np.searchsorted(offsets, combos, side="right") - 1
    demos = np.asarray(demo_ids)[positions]
    timesteps = combos - offsets[positions]
    view_pairs = np.stack([rng.choice(views, size=2, replace=False) for _ in range(batch_size)])
    return demos, timesteps, view_pairs


def sample_contrastive_batch(
    dataset: Dataset,
    split: str,
    batch_size: int,
    rng: np.random.Generator,
    views: Optional[Sequence[int]] = None,
) -> ContrastiveBatch:
    demos, timesteps, view_pairs = sample_pair_indices(dataset, split, batch_size, rng, views)
    images = []
    for demo, t, (anchor_view, positive_view) in zip(demos, timesteps, view_pairs):
        images.append(dataset.frame(int(demo), int(anchor_view), int(t)))
        images.append(dataset.frame(int(demo), int(positive_view), int(t)))
    return ContrastiveBatch(images=np.stack(images), demos=demos, timesteps=timesteps, views=view_pairs)
