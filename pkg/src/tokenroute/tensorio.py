"""Self-describing tensor container used for weights and datasets.

The container is an ``.npz`` archive (a zip of NumPy ``.npy`` members, each
carrying its own dtype and shape in row-major order) plus one reserved
``__meta__`` member holding a JSON metadata document. Loading is bit-exact:
arrays round-trip with identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .types import TokenRouteError

META_KEY = "__meta__"
FORMAT_VERSION = 1


class ContainerError(TokenRouteError):
    """The file is not a valid tensor container."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write arrays plus a JSON metadata entry to ``path``.

    Tensor names must not collide with the reserved metadata key.
    """
    if META_KEY in tensors:
        raise ContainerError(f"tensor name {META_KEY!r} is reserved")
    doc = dict(meta)
    doc.setdefault("format_version", FORMAT_VERSION)
    payload = {META_KEY: np.frombuffer(json.dumps(doc, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    payload.update(tensors)
    # np.savez appends ".npz" to bare paths; writing through a handle keeps
    # the caller's exact filename.
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back as ``(tensors, meta)``."""
    try:
        with np.load(path) as data:
            if META_KEY not in data:
                raise ContainerError(f"{path}: missing {META_KEY} entry; not a tensor container")
            meta = json.loads(bytes(data[META_KEY]).decode("utf-8"))
            tensors = {name: data[name] for name in data.files if name != META_KEY}
    except (OSError, ValueError) as exc:
        raise ContainerError(f"{path}: {exc}") from exc
    return tensors, meta
