import json
import logging
import os
import zlib
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

THREADS_ENV = "CLFD_THREADS"


def setup_logging(debug: bool = False) -> None:
    """Configure the root logger once for command line entry points."""
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def rng_for(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Named random sub-stream: independent generators from one user seed.

    `extra` further splits a stream (per demo, per epoch, per episode).
    """
    return np.random.default_rng([int(seed), stream_id(name), *(int(e) for e in extra)])


def torch_generator_for(seed: int, name: str, *extra: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(rng_for(seed, name, *extra).integers(0, 2**62)))
    return generator


def save_to_json(data: Any, output_file: Path, indent: int = 4) -> None:
    with open(output_file, "w", encoding="utf-8") as json_file:
        json.dump(data, json_file, ensure_ascii=False, indent=indent, sort_keys=True)
        json_file.write("\n")


def load_json(path: Path) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def resolve_threads(threads: Optional[int] = None) -> int:
    """`--threads` value, falling back to $CLFD_THREADS, then 1."""
    if threads is None:
        env_value = os.environ.get(THREADS_ENV)
        threads = int(env_value) if env_value else 1
    return max(1, int(threads))
