import logging
import math
from typing import Dict, Optional, Type

import numpy as np
import torch
import torch.nn as nn

from CLfD.backbone import ParameterSet, forward_op
from CLfD.exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

IMAGE_SIZE = 64
IMAGE_CHANNELS = 3
EMBEDDING_DIM = 32
PROJECTION_DIM = 64


class DeskCNN(nn.Module):
    """Encoder f: three stride-2 3x3 convolutions, global average pool, linear to 32 features."""

    def __init__(self, embedding_dim: int = EMBEDDING_DIM):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.conv1 = nn.Conv2d(IMAGE_CHANNELS, 16, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1)
        self.fc = nn.Linear(64, embedding_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or list(images.shape[1:]) != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE]:
            raise ShapeError(
                f"encode: images must be [B, {IMAGE_CHANNELS}, {IMAGE_SIZE}, {IMAGE_SIZE}], got {list(images.shape)}"
            )
        x = images
        for conv in (self.conv1, self.conv2, self.conv3):
            x = forward_op("conv2d", x, conv.weight, conv.bias, stride=2, padding=1)
            x = forward_op("relu", x)
        x = forward_op("global_avg_pool", x)
        return forward_op("linear", x, self.fc.weight, self.fc.bias)


class ProjectionHead(nn.Module):
    """Projection g: one hidden layer with as many units as the embedding, then 64 outputs."""

    def __init__(self, embedding_dim: int = EMBEDDING_DIM, projection_dim: int = PROJECTION_DIM):
        super().__init__()
        self.fc1 = nn.Linear(embedding_dim, embedding_dim)
        self.fc2 = nn.Linear(embedding_dim, projection_dim)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        if embeddings.dim() != 2 or embeddings.shape[1] != self.fc1.in_features:
            raise ShapeError(f"project: embeddings must be [B, {self.fc1.in_features}], got {list(embeddings.shape)}")
        x = forward_op("relu", forward_op("linear", embeddings, self.fc1.weight, self.fc1.bias))
        return forward_op("linear", x, self.fc2.weight, self.fc2.bias)


ENCODERS: Dict[str, Type[nn.Module]] = {"desk_cnn": DeskCNN}


class CLfDModel(nn.Module):
    """Encoder f plus optional projection head g. Downstream consumers only use f."""

    def __init__(self, encoder: str = "desk_cnn", use_projection_head: bool = True):
        super().__init__()
        if encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {encoder!r}; available: {sorted(ENCODERS)}")
        self.encoder_name = encoder
        self.encoder = ENCODERS[encoder]()
        self.head: Optional[ProjectionHead] = ProjectionHead() if use_projection_head else None

    @property
    def use_projection_head(self) -> bool:
        return self.head is not None

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def project(self, embeddings: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            return embeddings
        return self.head(embeddings)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.project(self.encode(images))


def init_bound(weight: torch.Tensor) -> float:
    """Uniform fan-in scale sqrt(6 / fan_in) for a weight tensor."""
    fan_in = weight[0].numel()
    return math.sqrt(6.0 / fan_in)


def reset_parameters(module: nn.Module, seed: int) -> None:
    """Weights ~ U(-b, b) with b = sqrt(6 / fan_in), biases zero, in parameter-path order."""
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                bound = init_bound(param)
                param.uniform_(-bound, bound, generator=generator)


def build_model(seed: int, encoder: str = "desk_cnn", use_projection_head: bool = True) -> CLfDModel:
    model = CLfDModel(encoder=encoder, use_projection_head=use_projection_head)
    reset_parameters(model, seed)
    return model


def init_params(seed: int, encoder: str = "desk_cnn", use_projection_head: bool = True) -> ParameterSet:
    return ParameterSet.from_module(build_model(seed, encoder, use_projection_head))


def encode(model: CLfDModel, images: torch.Tensor) -> torch.Tensor:
    return model.encode(images)


def project(model: CLfDModel, embeddings: torch.Tensor) -> torch.Tensor:
    if model.head is None:
        raise ConfigError("project: model was built without a projection head")
    return model.project(embeddings)


def frames_to_tensor(frames: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """[B, H, W, C] frames in [0, 1] -> [B, C, H, W] tensor."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    return torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 3, 1, 2))).to(dtype)


def embed_frames(model: CLfDModel, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Embed [T, H, W, C] frames with f in inference mode; returns [T, 32] float64."""
    outputs = []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            batch = frames_to_tensor(frames[start : start + batch_size], dtype=dtype)  # noqa
            outputs.append(model.encode(batch).to(torch.float64).numpy())
    if not outputs:
        return np.zeros((0, EMBEDDING_DIM))
    return np.concatenate(outputs, axis=0)
