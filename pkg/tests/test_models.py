import numpy as np
import pytest
import torch

from CLfD.exceptions import ConfigError, ShapeError
from CLfD.models import (
    EMBEDDING_DIM,
    PROJECTION_DIM,
    CLfDModel,
    build_model,
    embed_frames,
    encode,
    init_bound,
    init_params,
    project,
)


def test_encoder_and_head_shapes():
    model = build_model(seed=0)
    emb = encode(model, torch.rand(5, 3, 64, 64))
    assert list(emb.shape) == [5, EMBEDDING_DIM]
    assert list(project(model, emb).shape) == [5, PROJECTION_DIM]


def test_encode_rejects_wrong_image_size():
    model = build_model(seed=0)
    with pytest.raises(ShapeError, match="encode"):
        encode(model, torch.rand(2, 3, 32, 32))


def test_init_is_deterministic_per_seed():
    assert init_params(7).digest() == init_params(7).digest()
    assert init_params(7).digest() != init_params(8).digest()


def test_init_respects_fan_in_bound_and_zero_bias():
    params = init_params(0)
    for name, p in params.items():
        if name.endswith("bias"):
            assert torch.count_nonzero(p) == 0
        else:
            assert p.abs().max() <= init_bound(p)


def test_parameter_paths():
    names = init_params(0).names()
    assert "encoder.conv1.weight" in names
    assert "head.fc2.bias" in names


def test_model_without_head():
    model = CLfDModel(use_projection_head=False)
    assert model.head is None
    with pytest.raises(ConfigError):
        project(model, torch.zeros(1, EMBEDDING_DIM))


def test_unknown_encoder():
    with pytest.raises(ConfigError, match="unknown encoder"):
        CLfDModel(encoder="resnet18")


def test_embed_frames_matches_batched_encode():
    model = build_model(seed=1)
    frames = np.random.default_rng(0).random((7, 64, 64, 3)).astype(np.float32)
    small_batches = embed_frames(model, frames, batch_size=3)
    one_batch = embed_frames(model, frames, batch_size=16)
    assert small_batches.shape == (7, EMBEDDING_DIM)
    assert np.allclose(small_batches, one_batch, atol=1e-5)


def test_rows_are_encoded_independently():
    model = build_model(seed=2)
    images = torch.rand(4, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        batch = encode(model, images)
        for i in range(4):
            assert torch.allclose(batch[i], encode(model, images[i : i + 1])[0], atol=1e-6)  # noqa
        repeated = encode(model, torch.cat([images[:1], images[:1], images[1:2]]))
    assert torch.allclose(repeated[0], repeated[1], atol=1e-6)
    assert torch.allclose(repeated[2], batch[1], atol=1e-6)


def test_blank_image_embeds_to_output_bias():
    model = build_model(seed=0)
    with torch.no_grad():
        model.encoder.fc.bias.copy_(torch.linspace(-1.0, 1.0, EMBEDDING_DIM))
        emb = encode(model, torch.zeros(2, 3, 64, 64))
    assert torch.equal(emb[0], model.encoder.fc.bias.detach())
    assert torch.equal(emb[1], emb[0])
