"""Differentiable tensor substrate for the embeddings and the flow.

Reverse-mode differentiation, the standard layers and Adam come from
``torch`` (float64 throughout). This module adds the pieces the models need
on top: shape-checked helpers, ``scatter_mean`` for graph pooling, a
finite-difference gradient checker, deterministic seeding, and a flat
binary checkpoint container.

Checkpoint layout (all integers little-endian)::

    b"ILMNPE\\x00\\x01"            magic
    uint32 version
    uint64 n_meta, n_meta bytes   UTF-8 JSON metadata
    uint32 n_arrays
    per array:
        uint16 n_name, name bytes (UTF-8)
        uint32 ndim, ndim x uint64 shape
        prod(shape) x float64     C order, little-endian
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

__all__ = [
    "DTYPE",
    "ShapeError",
    "as_tensor",
    "check_same_shape",
    "scatter_mean",
    "gather_rows",
    "make_adam",
    "adam_step",
    "finite_difference_check",
    "seed_torch",
    "state_arrays",
    "load_state_arrays",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"ILMNPE\x00\x01"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "operands") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shape {tuple(a.shape)} vs {tuple(b.shape)}")


def scatter_mean(src: torch.Tensor, index: torch.Tensor, n_buckets: int) -> torch.Tensor:
    """Average rows of ``src`` (n, F) into ``n_buckets`` groups given by ``index`` (n,).

    Empty buckets give zero rows. Indices are treated as constants.
    """
    if src.ndim != 2:
        raise ShapeError(f"scatter_mean: src must be 2-D, got shape {tuple(src.shape)}")
    index = torch.as_tensor(index, dtype=torch.long)
    if index.shape != (src.shape[0],):
        raise ShapeError(f"scatter_mean: index shape {tuple(index.shape)} vs src rows {src.shape[0]}")
    out = torch.zeros(n_buckets, src.shape[1], dtype=src.dtype)
    out = out.index_add(0, index, src)
    count = torch.bincount(index, minlength=n_buckets).to(src.dtype).clamp_min(1.0)
    return out / count[:, None]


def gather_rows(src: torch.Tensor, index) -> torch.Tensor:
    index = torch.as_tensor(index, dtype=torch.long)
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= src.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {src.shape[0]} rows")
    return src.index_select(0, index.reshape(-1)).reshape(*index.shape, *src.shape[1:])


def make_adam(params, lr: float = 5e-4, weight_decay: float = 0.0) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)


def adam_step(optimizer: torch.optim.Optimizer, loss: torch.Tensor | None = None) -> None:
    """Backpropagate ``loss`` (if given) and apply one optimiser step."""
    if loss is not None:
        optimizer.zero_grad(set_to_none=False)
        loss.backward()
    optimizer.step()


def finite_difference_check(loss_fn, params, h: float = 1e-4, n_probe: int | None = None,
                            generator: np.random.Generator | None = None, one_sided: bool = True,
                            per_tensor: bool = False) -> float:
    """Largest relative error between autograd and central differences.

    ``loss_fn()`` must return a scalar tensor built from ``params``. With
    ``n_probe`` set, only that many randomly chosen entries per parameter
    are probed. The relative error of an entry is
    ``|g_ad - g_fd| / max(|g_ad| + |g_fd|, 1e-6)`` (symmetric, with a floor
    so that exactly-zero gradients are compared absolutely).

    ReLU networks are piecewise smooth: a step of ``h`` can cross a kink, and
    the central difference then averages two different slopes. With
    ``one_sided`` (default) an entry's error is the smallest of the central
    and the two one-sided comparisons; the side without the kink still
    recovers the local derivative, while a wrong gradient disagrees with all
    three.

    With ``per_tensor`` the error is measured norm-wise over each tensor's
    probed entries, ``||g_ad - g_fd|| / max(||g_ad|| + ||g_fd||, 1e-6)``.
    Entry-wise relative error is unstable for entries whose gradient is
    numerically zero: there the difference quotient is all truncation error.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    f0 = loss.item()
    worst = 0.0
    gen = generator or np.random.default_rng(0)
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if n_probe is not None and idx.size > n_probe:
                idx = gen.choice(idx, size=n_probe, replace=False)
            ads, fds, errs = [], [], []
            for i in idx:
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                ad = g.view(-1)[i].item()
                estimates = [(up - down) / (2 * h)]
                if one_sided:
                    estimates += [(up - f0) / h, (f0 - down) / h]
                k = min(range(len(estimates)), key=lambda j: abs(ad - estimates[j]))
                ads.append(ad)
                fds.append(estimates[k])
                errs.append(abs(ad - estimates[k]))
            ads, fds, errs = map(np.array, (ads, fds, errs))
            if per_tensor:
                rel = np.linalg.norm(errs) / max(np.linalg.norm(ads) + np.linalg.norm(fds), 1e-6)
            else:
                rel = np.max(errs / np.maximum(np.abs(ads) + np.abs(fds), 1e-6), initial=0.0)
            worst = max(worst, float(rel))
    return worst


def seed_torch(seed: int) -> torch.Generator:
    """Deterministic torch state for one run; returns a dedicated generator."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def state_arrays(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy().astype(np.float64) for k, v in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, arrays: dict, prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


def _write(fh, arrays: dict, meta: dict) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", CHECKPOINT_VERSION))
    blob = json.dumps(meta, sort_keys=True).encode()
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)
    fh.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8", order="C")  # keeps 0-d shapes
        nb = name.encode()
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(a.tobytes())


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named float64 arrays plus JSON metadata (see module docstring)."""
    buf = io.BytesIO()
    _write(buf, arrays, meta or {})
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple:
    """Read a container written by ``save_checkpoint``; returns ``(arrays, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n_meta,) = take("<Q")
    meta = json.loads(data[pos:pos + n_meta].decode())
    pos += n_meta
    (n_arrays,) = take("<I")
    arrays = {}
    for _ in range(n_arrays):
        (n_name,) = take("<H")
        name = data[pos:pos + n_name].decode()
        pos += n_name
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return arrays, meta
