"""NT-Xent over interleaved anchor/positive projections, and the triplet baseline.

Rows of a contrastive batch are laid out as ``[a_0, p_0, a_1, p_1, ...]``; the
positive of row i is row ``i ^ 1``.
"""
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from CLfD.backbone import forward_op
from CLfD.exceptions import ConfigError, NonFiniteError, ShapeError

DEFAULT_TAU = 0.5
DEFAULT_MARGIN = 0.2

ArrayLike = Union[torch.Tensor, np.ndarray, list, tuple]


def _as_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")


def cosine_sim(a: ArrayLike, b: ArrayLike) -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim: shapes differ {list(a.shape)} vs {list(b.shape)}")
    norm_a = torch.linalg.vector_norm(a)
    norm_b = torch.linalg.vector_norm(b)
    if norm_a == 0 or norm_b == 0:
        raise NonFiniteError("cosine_sim: zero-norm vector has no direction")
    return torch.clamp(torch.dot(a, b) / (norm_a * norm_b), -1.0, 1.0)


def similarity_matrix(z: torch.Tensor) -> torch.Tensor:
    """s[i][j] = cosine similarity of rows i and j."""
    if z.dim() != 2:
        raise ShapeError(f"similarity_matrix: expected [2N, D], got {list(z.shape)}")
    unit = forward_op("l2_normalize", z)
    return unit @ unit.T


def _check_layout(z: torch.Tensor) -> None:
    if z.dim() != 2 or z.shape[0] == 0 or z.shape[0] % 2 != 0:
        raise ShapeError(f"nt_xent: expected an even number of rows [2N, D], got {list(z.shape)}")


def nt_xent_pair(a: int, p: int, z: ArrayLike, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """-log( exp(s[a,p]/tau) / sum_{k != a} exp(s[a,k]/tau) ), indices 0-based."""
    _check_tau(tau)
    z = _as_tensor(z)
    if a == p:
        raise ShapeError(f"nt_xent_pair: anchor and positive index are both {a}")
    logits = similarity_matrix(z)[a] / tau
    others = torch.cat([logits[:a], logits[a + 1 :]])  # noqa
    return torch.logsumexp(others, dim=0) - logits[p]


def nt_xent_batch(z: ArrayLike, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Mean of the 2N directed pair losses of an interleaved layout."""
    _check_tau(tau)
    z = _as_tensor(z)
    _check_layout(z)
    n_rows = z.shape[0]
    logits = similarity_matrix(z) / tau
    self_mask = torch.eye(n_rows, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    targets = torch.arange(n_rows, device=z.device) ^ 1
    # cross_entropy subtracts the row max before exponentiating
    return F.cross_entropy(logits, targets, reduction="mean")


def triplet_loss(
    anchor: ArrayLike, positive: ArrayLike, negative: ArrayLike, margin: float = DEFAULT_MARGIN
) -> torch.Tensor:
    """mean over rows of max(0, ||a - p||^2 - ||a - n||^2 + margin)."""
    anchor, positive, negative = _as_tensor(anchor), _as_tensor(positive), _as_tensor(negative)
    if not (anchor.shape == positive.shape == negative.shape):
        raise ShapeError(
            f"triplet_loss: shapes differ {list(anchor.shape)}, {list(positive.shape)}, {list(negative.shape)}"
        )
    if margin < 0:
        raise ConfigError(f"triplet margin must be >= 0, got {margin}")
    d_pos = ((anchor - positive) ** 2).sum(dim=-1)
    d_neg = ((anchor - negative) ** 2).sum(dim=-1)
    return F.relu(d_pos - d_neg + margin).mean()


def sample_negatives(n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """For pair k, a uniformly random row of the 2N-row batch outside rows 2k and 2k + 1."""
    if n_pairs < 2:
        raise ConfigError("triplet objective needs batch_size >= 2 to draw in-batch negatives")
    draws = rng.integers(0, 2 * n_pairs - 2, size=n_pairs)
    pair_start = 2 * np.arange(n_pairs)
    # skip over the two rows of the pair itself
    return np.where(draws >= pair_start, draws + 2, draws)


def triplet_batch_loss(h: torch.Tensor, negatives: np.ndarray, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Triplet loss on an interleaved [2N, D] batch with precomputed negative rows."""
    _check_layout(h)
    negatives_idx = torch.as_tensor(negatives, dtype=torch.long)
    return triplet_loss(h[0::2], h[1::2], h[negatives_idx], margin=margin)
