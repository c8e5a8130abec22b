"""Differentiable-computation substrate shared by every model in the package.

torch is the tensor and reverse-mode engine. This module narrows it to the ops
the models need, adds descriptive shape checking, wraps Adam with a finiteness
guard, provides a finite-difference gradient checker and reads/writes the
checkpoint archive.
"""
import copy
import hashlib
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from CLfD.exceptions import CheckpointError, GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}
_NUMPY_DTYPES = {"float32": "<f4", "float64": "<f8"}
_PRECISION_BYTES = {"float32": 4, "float64": 8}

ARCHIVE_MAGIC = b"CLFDCKPT"
ARCHIVE_VERSION = 1
# magic, version, precision byte width, 3 reserved bytes, header length
_ARCHIVE_PREFIX = struct.Struct("<8sIB3xQ")

FD_STEP = 1e-5


def _fail(op: str, message: str) -> None:
    raise ShapeError(f"{op}: {message}")


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """[B, C, H, W] * [O, C, k, k] -> [B, O, (H + 2p - k) // s + 1, (W + 2p - k) // s + 1]"""
    if x.dim() != 4:
        _fail("conv2d", f"input must be [B, C, H, W], got {list(x.shape)}")
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3]:
        _fail("conv2d", f"weight must be [O, C, k, k], got {list(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        _fail("conv2d", f"input channels {x.shape[1]} != weight input channels {weight.shape[1]}")
    if bias is not None and list(bias.shape) != [weight.shape[0]]:
        _fail("conv2d", f"bias must be [{weight.shape[0]}], got {list(bias.shape)}")
    kernel = weight.shape[2]
    if x.shape[2] + 2 * padding < kernel or x.shape[3] + 2 * padding < kernel:
        _fail("conv2d", f"spatial size {list(x.shape[2:])} smaller than kernel {kernel} with padding {padding}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """[..., I] @ [O, I]^T + [O] -> [..., O]"""
    if weight.dim() != 2:
        _fail("linear", f"weight must be [O, I], got {list(weight.shape)}")
    if x.dim() < 1 or x.shape[-1] != weight.shape[1]:
        _fail("linear", f"input features {list(x.shape)[-1:]} != weight input features {weight.shape[1]}")
    if bias is not None and list(bias.shape) != [weight.shape[0]]:
        _fail("linear", f"bias must be [{weight.shape[0]}], got {list(bias.shape)}")
    return F.linear(x, weight, bias)


def relu(x: torch.Tensor) -> torch.Tensor:
    # subgradient at 0 is 0
    return F.relu(x)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    """[B, C, H, W] -> [B, C]"""
    if x.dim() != 4:
        _fail("global_avg_pool", f"input must be [B, C, H, W], got {list(x.shape)}")
    return x.mean(dim=(2, 3))


def batch_mean(x: torch.Tensor) -> torch.Tensor:
    """[B, ...] -> [...]"""
    if x.dim() < 1 or x.shape[0] < 1:
        _fail("batch_mean", f"input needs a non-empty leading batch dimension, got {list(x.shape)}")
    return x.mean(dim=0)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    """Row-wise unit norm over the last dimension; zero rows are rejected."""
    if x.dim() < 1:
        _fail("l2_normalize", "input must have at least one dimension")
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NonFiniteError("l2_normalize: zero-norm vector cannot be normalized")
    return x / norms


OPS: Dict[str, Callable[..., torch.Tensor]] = {
    "conv2d": conv2d,
    "linear": linear,
    "relu": relu,
    "global_avg_pool": global_avg_pool,
    "batch_mean": batch_mean,
    "l2_normalize": l2_normalize,
}


def forward_op(op: str, *inputs: torch.Tensor, **options: Any) -> torch.Tensor:
    """Apply one registered op; the result is recorded for backward when any input requires grad."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ShapeError(f"unknown op {op!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **options)


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Parameters the loss does not depend on get a zero gradient. The graph is
    released afterwards; a second call on the same loss raises GraphError.
    """
    if loss.numel() != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {list(loss.shape)}")
    if getattr(loss, "_clfd_released", False):
        raise GraphError("backward: graph of this loss was already released by a previous backward")

    names = [name for name, p in params.items() if p.requires_grad]
    grads: Dict[str, torch.Tensor] = {name: torch.zeros_like(p) for name, p in params.items()}
    if loss.requires_grad and names:
        try:
            computed = torch.autograd.grad(
                loss.reshape(()), [params[n] for n in names], allow_unused=True
            )
        except RuntimeError as e:
            raise GraphError(f"backward: {e}") from e
        for name, grad in zip(names, computed):
            if grad is not None:
                grads[name] = grad
    loss._clfd_released = True  # type: ignore[attr-defined]
    return grads


class ParameterSet:
    """Ordered map from parameter path to tensor, e.g. ``encoder.conv1.weight``."""

    def __init__(self, params: Mapping[str, torch.Tensor]):
        self._params: "OrderedDict[str, torch.Tensor]" = OrderedDict(params)

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParameterSet":
        return cls(OrderedDict(module.named_parameters()))

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def shapes(self) -> Dict[str, List[int]]:
        return {name: list(p.shape) for name, p in self._params.items()}

    def digest(self) -> str:
        """sha256 over names, shapes and little-endian values in path order."""
        h = hashlib.sha256()
        for name, p in self._params.items():
            array = p.detach().cpu().numpy()
            h.update(name.encode("utf-8"))
            h.update(str(list(array.shape)).encode("utf-8"))
            h.update(array.astype(array.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()


class AdamOptimizer:
    """Adam with bias correction over a ParameterSet.

    Every step touches every parameter (missing gradients count as zero) so
    the step count is shared by all parameters.
    """

    def __init__(
        self,
        params: ParameterSet,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._optimizer = torch.optim.Adam(
            [p for _, p in params.items()], lr=lr, betas=(beta1, beta2), eps=eps, foreach=False
        )

    def step(self, grads: Mapping[str, torch.Tensor]) -> None:
        for name, grad in grads.items():
            if name not in self.params._params:
                raise ShapeError(f"adam_step: gradient for unknown parameter {name}")
            if not bool(torch.isfinite(grad).all()):
                raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name}")
        for name, p in self.params.items():
            grad = grads.get(name)
            if grad is None:
                grad = torch.zeros_like(p)
            elif grad.shape != p.shape:
                raise ShapeError(
                    f"adam_step: gradient shape {list(grad.shape)} != parameter {name} shape {list(p.shape)}"
                )
            p.grad = grad.detach().to(p.dtype)
        self._optimizer.step()
        for _, p in self.params.items():
            p.grad = None
        self.step_count += 1

    def moments(self) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
        """First and second moment per parameter path (zeros before the first step)."""
        result = {}
        for name, p in self.params.items():
            state = self._optimizer.state.get(p, {})
            result[name] = (
                state.get("exp_avg", torch.zeros_like(p)).detach(),
                state.get("exp_avg_sq", torch.zeros_like(p)).detach(),
            )
        return result

    def state_tensors(self) -> "OrderedDict[str, torch.Tensor]":
        tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for name, (m, v) in self.moments().items():
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = v
        return tensors

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor], step_count: int) -> None:
        self.step_count = int(step_count)
        if step_count == 0:
            return
        for name, p in self.params.items():
            try:
                m = tensors[f"adam.m.{name}"]
                v = tensors[f"adam.v.{name}"]
            except KeyError:
                raise CheckpointError(f"optimizer state missing for parameter {name}") from None
            self._optimizer.state[p] = {
                "step": torch.tensor(float(step_count)),
                "exp_avg": m.clone().to(p.dtype),
                "exp_avg_sq": v.clone().to(p.dtype),
            }


def adam_step(optimizer: AdamOptimizer, grads: Mapping[str, torch.Tensor]) -> ParameterSet:
    optimizer.step(grads)
    return optimizer.params


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    kinks: int = 0
    worst: Optional[str] = None
    failures: List[str] = field(default_factory=list)


def _relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Union[Sequence[torch.Tensor], Mapping[str, torch.Tensor]],
    tolerance: float = 1e-4,
    h: float = FD_STEP,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences at 64-bit.

    Non-scalar outputs are reduced with fixed random weights. An entry whose
    central difference disagrees between steps h and h/2 sits on a relu kink
    and is skipped (counted in ``kinks``); at most a tenth of the checked
    entries may be skipped for the check to pass.
    """
    if isinstance(inputs, Mapping):
        named = list(inputs.items())
    else:
        named = [(f"input{i}", t) for i, t in enumerate(inputs)]
    leaves = [(name, t.detach().clone().to(torch.float64).requires_grad_(True)) for name, t in named]
    tensors = [t for _, t in leaves]
    generator = torch.Generator().manual_seed(seed)

    with torch.no_grad():
        probe = fn(*tensors)
    reduce_weights = None
    if probe.numel() != 1:
        reduce_weights = torch.randn(probe.shape, generator=generator, dtype=torch.float64)

    def objective() -> torch.Tensor:
        out = fn(*tensors)
        if reduce_weights is not None:
            out = (out.to(torch.float64) * reduce_weights).sum()
        return out.reshape(())

    analytic = torch.autograd.grad(objective(), tensors, allow_unused=True)

    worst = 0.0
    worst_name: Optional[str] = None
    checked = 0
    kinks = 0
    failures: List[str] = []
    for (name, tensor), grad in zip(leaves, analytic):
        grad = torch.zeros_like(tensor) if grad is None else grad
        flat = tensor.data.view(-1)
        indices = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            perm = torch.randperm(flat.numel(), generator=generator)[:max_entries]
            indices = np.sort(perm.numpy())
        for idx in indices:
            original = flat[idx].item()
            values = {}
            with torch.no_grad():
                for step in (h, -h, h / 2, -h / 2):
                    flat[idx] = original + step
                    values[step] = objective().item()
                flat[idx] = original
            numeric = (values[h] - values[-h]) / (2 * h)
            numeric_half = (values[h / 2] - values[-h / 2]) / h
            if _relative_error(numeric, numeric_half) > tolerance:
                kinks += 1
                continue
            checked += 1
            err = _relative_error(grad.view(-1)[idx].item(), numeric)
            if err > worst:
                worst, worst_name = err, f"{name}[{idx}]"
            if err >= tolerance:
                failures.append(f"{name}[{idx}]: analytic={grad.view(-1)[idx].item():.6e} numeric={numeric:.6e}")

    passed = checked > 0 and worst < tolerance and kinks <= max(1, (checked + kinks) // 10)
    report = GradCheckReport(
        max_rel_error=worst, passed=passed, checked=checked, kinks=kinks, worst=worst_name, failures=failures
    )
    logger.debug(f"grad_check: {report}")
    return report


def grad_check_module(
    module: torch.nn.Module,
    inputs: Sequence[torch.Tensor],
    tolerance: float = 1e-4,
    loss_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """grad_check over a module's parameters and inputs on a 64-bit copy of the module."""
    module64 = copy.deepcopy(module).to(torch.float64)
    param_names = [name for name, _ in module64.named_parameters()]
    named: "OrderedDict[str, torch.Tensor]" = OrderedDict(module64.named_parameters())
    for i, x in enumerate(inputs):
        named[f"input{i}"] = x

    def fragment(*tensors: torch.Tensor) -> torch.Tensor:
        params = dict(zip(param_names, tensors[: len(param_names)]))
        out = torch.func.functional_call(module64, params, tuple(tensors[len(param_names):]))
        return loss_fn(out) if loss_fn is not None else out

    return grad_check(fragment, named, tolerance=tolerance, max_entries=max_entries, seed=seed)


def save_archive(
    path: Union[str, Path],
    tensors: Mapping[str, torch.Tensor],
    metadata: Optional[Dict[str, Any]] = None,
    precision: str = "float32",
) -> str:
    """Write tensors and metadata to a checkpoint archive; returns the file's sha256.

    The byte layout is documented in docs/reference.md.
    """
    if precision not in PRECISIONS:
        raise CheckpointError(f"unsupported precision {precision!r}")
    np_dtype = _NUMPY_DTYPES[precision]
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        raw = np.ascontiguousarray(tensor.detach().cpu().numpy().astype(np_dtype)).tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    body = b"".join(chunks)
    header = {
        "format_version": ARCHIVE_VERSION,
        "precision": precision,
        "tensors": manifest,
        "body_sha256": hashlib.sha256(body).hexdigest(),
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    prefix = _ARCHIVE_PREFIX.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, _PRECISION_BYTES[precision], len(header_bytes))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        with open(tmp_path, "wb") as f:
            f.write(prefix)
            f.write(header_bytes)
            f.write(body)
        os.replace(tmp_path, path)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise
    return hashlib.sha256(prefix + header_bytes + body).hexdigest()


def load_archive(path: Union[str, Path]) -> Tuple["OrderedDict[str, torch.Tensor]", Dict[str, Any]]:
    """Read a checkpoint archive; any truncation or corruption raises CheckpointError."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < _ARCHIVE_PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, width, header_len = _ARCHIVE_PREFIX.unpack_from(data)
    if magic != ARCHIVE_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive (bad magic)")
    if version != ARCHIVE_VERSION:
        raise CheckpointError(f"{path}: unsupported archive version {version}")
    start = _ARCHIVE_PREFIX.size
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))  # noqa
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted header: {e}") from e
    precision = header.get("precision")
    if precision not in PRECISIONS or _PRECISION_BYTES[precision] != width:
        raise CheckpointError(f"{path}: inconsistent precision {precision!r} / {width} bytes")
    body = data[start + header_len :]  # noqa
    if hashlib.sha256(body).hexdigest() != header.get("body_sha256"):
        raise CheckpointError(f"{path}: parameter data is truncated or corrupted")

    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    np_dtype = _NUMPY_DTYPES[precision]
    for entry in header["tensors"]:
        raw = body[entry["offset"] : entry["offset"] + entry["nbytes"]]  # noqa
        array = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(array.dtype.newbyteorder("=")))
    return tensors, header["metadata"]
