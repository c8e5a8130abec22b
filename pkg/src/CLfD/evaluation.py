"""Alignment error between synchronized videos and the stage-classification probe."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from CLfD.backbone import AdamOptimizer, ParameterSet, adam_step, backward, forward_op
from CLfD.exceptions import ConfigError, DatasetError, ShapeError
from CLfD.models import EMBEDDING_DIM, CLfDModel, embed_frames
from CLfD.scene import ALL_VIEWS, SEEN_VIEWS, UNSEEN_VIEWS, STAGES
from CLfD.utils import rng_for, torch_generator_for

logger = logging.getLogger(__name__)

VIEW_GROUPS = {"seen": SEEN_VIEWS, "unseen": UNSEEN_VIEWS, "all": ALL_VIEWS}


def _check_pair(emb_a: np.ndarray, emb_b: np.ndarray) -> None:
    if len(emb_a) != len(emb_b):
        raise ShapeError(f"alignment_error: videos have {len(emb_a)} and {len(emb_b)} frames")
    if len(emb_a) == 0:
        raise ShapeError("alignment_error: videos have no frames")


def pairwise_distances(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(emb_a[:, None, :] - emb_b[None, :, :], axis=-1)


def alignment_error_from_embeddings(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """Mean |i - j*(i)| / T where j*(i) is frame i's nearest neighbour in video b (ties -> smallest j)."""
    emb_a, emb_b = np.asarray(emb_a), np.asarray(emb_b)
    _check_pair(emb_a, emb_b)
    frames = len(emb_a)
    nearest = np.argmin(pairwise_distances(emb_a, emb_b), axis=1)
    return float(np.mean(np.abs(np.arange(frames) - nearest)) / frames)


def nearest_distance(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """(1/T) sum_i min_j ||a_i - b_j||, the raw-distance form of the alignment metric."""
    emb_a, emb_b = np.asarray(emb_a), np.asarray(emb_b)
    _check_pair(emb_a, emb_b)
    return float(np.mean(pairwise_distances(emb_a, emb_b).min(axis=1)))


def synchronized_distance(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    emb_a, emb_b = np.asarray(emb_a), np.asarray(emb_b)
    _check_pair(emb_a, emb_b)
    return float(np.mean(np.linalg.norm(emb_a - emb_b, axis=1)))


def alignment_error(encoder: CLfDModel, video_a: np.ndarray, video_b: np.ndarray) -> float:
    if len(video_a) != len(video_b):
        raise ShapeError(f"alignment_error: videos have {len(video_a)} and {len(video_b)} frames")
    return alignment_error_from_embeddings(embed_frames(encoder, video_a), embed_frames(encoder, video_b))


PAIR_COLUMNS = ["demo", "view_a", "view_b", "alignment_error", "nearest_distance", "synchronized_distance"]


@dataclass
class AlignmentReport:
    per_demo: Dict[int, float]
    pairs: List[Dict[str, float]] = field(default_factory=list)
    nearest_distance: float = float("nan")
    synchronized_distance: float = float("nan")

    @property
    def count(self) -> int:
        return len(self.per_demo)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_demo.values())))

    @property
    def percent(self) -> float:
        return self.mean * 100

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.pairs, columns=PAIR_COLUMNS)

    def summary(self) -> dict:
        return {
            "mean": self.mean,
            "percent": round(self.percent, 2),
            "count": self.count,
            "per_demo": {str(d): v for d, v in sorted(self.per_demo.items())},
            "nearest_distance": self.nearest_distance,
            "synchronized_distance": self.synchronized_distance,
        }


def alignment_suite(
    encoder: CLfDModel,
    dataset,
    split: str,
    views: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> AlignmentReport:
    """Per-demo alignment error averaged over all ordered viewpoint pairs (v_a != v_b)."""
    demos = dataset.split(split)
    if not demos:
        raise DatasetError(f"split {split!r} is empty")
    views = list(range(dataset.manifest.view_count)) if views is None else list(views)

    def embed_demo(demo: int) -> Tuple[int, List[np.ndarray]]:
        return demo, [embed_frames(encoder, dataset.video(demo, v)) for v in views]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        embedded = list(pool.map(embed_demo, demos))

    per_demo: Dict[int, float] = {}
    pairs: List[Dict[str, float]] = []
    for demo, embeddings in embedded:
        values = []
        for i, view_a in enumerate(views):
            for j, view_b in enumerate(views):
                if view_a == view_b:
                    continue
                error = alignment_error_from_embeddings(embeddings[i], embeddings[j])
                distance = nearest_distance(embeddings[i], embeddings[j])
                values.append(error)
                pairs.append(
                    {
                        "demo": demo,
                        "view_a": view_a,
                        "view_b": view_b,
                        "alignment_error": error,
                        "nearest_distance": distance,
                        "synchronized_distance": synchronized_distance(embeddings[i], embeddings[j]),
                    }
                )
        per_demo[demo] = float(np.mean(values))
    report = AlignmentReport(
        per_demo=per_demo,
        pairs=pairs,
        nearest_distance=float(np.mean([p["nearest_distance"] for p in pairs])),
        synchronized_distance=float(np.mean([p["synchronized_distance"] for p in pairs])),
    )
    logger.info(f"Alignment error on {split} ({report.count} demos): {report.percent:.2f}%")
    return report


def resolve_views(views: Union[str, Sequence[int]]) -> Tuple[int, ...]:
    if isinstance(views, str):
        if views not in VIEW_GROUPS:
            raise ConfigError(f"views must be one of {sorted(VIEW_GROUPS)} or a list of cameras, got {views!r}")
        return tuple(VIEW_GROUPS[views])
    return tuple(int(v) for v in views)


@dataclass
class StageExamples:
    keys: np.ndarray  # [M, 3] demo, view, t
    labels: np.ndarray  # [M] 0 = pick, 1 = place

    def key_set(self) -> Set[Tuple[int, int, int]]:
        return {tuple(int(x) for x in k) for k in self.keys}

    def __len__(self) -> int:
        return len(self.labels)


def build_stage_dataset(
    dataset,
    views: Union[str, Sequence[int]],
    per_class: int,
    split: str = "train",
    rng: Optional[np.random.Generator] = None,
    exclude: Optional[Set[Tuple[int, int, int]]] = None,
) -> StageExamples:
    """Class-balanced (pick/place) frame sample spread evenly over the requested cameras."""
    views = resolve_views(views)
    rng = rng if rng is not None else np.random.default_rng(0)
    exclude = exclude or set()
    demos = dataset.split(split)
    candidates: Dict[str, List[Tuple[int, int]]] = {stage: [] for stage in STAGES}
    for demo in demos:
        for t, stage in enumerate(dataset.stages(demo)):
            candidates[stage].append((demo, t))

    keys: List[Tuple[int, int, int]] = []
    labels: List[int] = []
    for label, stage in enumerate(STAGES):
        quotas = [per_class // len(views) + (1 if i < per_class % len(views) else 0) for i in range(len(views))]
        for view, quota in zip(views, quotas):
            pool = [(d, view, t) for d, t in candidates[stage] if (d, view, t) not in exclude]
            if quota > len(pool):
                raise DatasetError(
                    f"stage dataset: need {quota} {stage} frames from camera {view} in split {split!r}, "
                    f"only {len(pool)} available"
                )
            chosen = rng.choice(len(pool), size=quota, replace=False)
            keys.extend(pool[i] for i in sorted(chosen))
            labels.extend([label] * quota)
    return StageExamples(keys=np.array(keys, dtype=np.int64).reshape(-1, 3), labels=np.array(labels, dtype=np.int64))


def embed_examples(encoder: CLfDModel, dataset, examples: StageExamples) -> np.ndarray:
    frames = np.stack([dataset.frame(int(d), int(v), int(t)) for d, v, t in examples.keys])
    return embed_frames(encoder, frames)


class StageProbe(nn.Module):
    """Two fully connected layers over frozen 32-d embeddings: 32 -> hidden -> 2."""

    def __init__(self, input_dim: int = EMBEDDING_DIM, hidden: int = 64, classes: int = len(STAGES)):
        super().__init__()
        self.fc1 = nn.Linear(input_dim, hidden)
        self.fc2 = nn.Linear(hidden, classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = forward_op("relu", forward_op("linear", features, self.fc1.weight, self.fc1.bias))
        return forward_op("linear", x, self.fc2.weight, self.fc2.bias)


@dataclass
class ProbeConfig:
    hidden: int = 64
    epochs: int = 500
    lr: float = 1e-3
    train_per_class: int = 500
    test_per_class: int = 100
    train_split: str = "train"
    test_split: str = "test"
    shuffle_labels: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.hidden < 1 or self.epochs < 1:
            raise ConfigError("probe hidden width and epochs must be >= 1")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("probe example counts must be >= 1")


@dataclass
class ProbeReport:
    accuracy: float
    train_views: List[int]
    test_views: List[int]
    n_train: int
    n_test: int
    shuffled_labels: bool
    final_train_loss: float

    def summary(self) -> dict:
        data = asdict(self)
        data["accuracy_percent"] = round(self.accuracy * 100, 2)
        return data


def train_probe(features: np.ndarray, labels: np.ndarray, config: ProbeConfig) -> Tuple[StageProbe, float]:
    """Full-batch Adam on cross-entropy for config.epochs epochs."""
    generator = torch_generator_for(config.seed, "probe")
    probe = StageProbe(features.shape[1], config.hidden)
    with torch.no_grad():
        for name, param in probe.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                bound = 1.0 / np.sqrt(param.shape[1])
                param.uniform_(-bound, bound, generator=generator)
    params = ParameterSet.from_module(probe)
    optimizer = AdamOptimizer(params, lr=config.lr)
    x = torch.as_tensor(features, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    loss_value = float("nan")
    for epoch in range(config.epochs):
        loss = F.cross_entropy(probe(x), y)
        loss_value = float(loss.item())
        adam_step(optimizer, backward(loss, params))
        if (epoch + 1) % 100 == 0:
            logger.debug(f"probe epoch {epoch + 1}/{config.epochs}: loss {loss_value:.4f}")
    return probe, loss_value


def stage_probe_eval(
    encoder: CLfDModel,
    dataset,
    probe_config: ProbeConfig,
    views_train: Union[str, Sequence[int]] = "seen",
    views_test: Union[str, Sequence[int]] = "unseen",
) -> ProbeReport:
    """Train the probe on frozen embeddings of views_train frames and report accuracy on views_test."""
    probe_config.validate()
    rng = rng_for(probe_config.seed, "probe")
    train_set = build_stage_dataset(
        dataset, views_train, probe_config.train_per_class, probe_config.train_split, rng
    )
    test_set = build_stage_dataset(
        dataset, views_test, probe_config.test_per_class, probe_config.test_split, rng, exclude=train_set.key_set()
    )
    encoder.eval()
    train_features = embed_examples(encoder, dataset, train_set)
    test_features = embed_examples(encoder, dataset, test_set)
    train_labels = train_set.labels.copy()
    if probe_config.shuffle_labels:
        rng.shuffle(train_labels)

    probe, final_loss = train_probe(train_features, train_labels, probe_config)
    with torch.no_grad():
        predictions = probe(torch.as_tensor(test_features, dtype=torch.float32)).argmax(dim=1).numpy()
    accuracy = float(np.mean(predictions == test_set.labels))
    report = ProbeReport(
        accuracy=accuracy,
        train_views=list(resolve_views(views_train)),
        test_views=list(resolve_views(views_test)),
        n_train=len(train_set),
        n_test=len(test_set),
        shuffled_labels=probe_config.shuffle_labels,
        final_train_loss=final_loss,
    )
    logger.info(f"Stage probe accuracy {accuracy * 100:.2f}% on cameras {report.test_views}")
    return report
