"""Numeric substrate: parameter blocks, differentiable layers, Adam, gradient checks.

Arrays are ``torch.Tensor`` objects and reverse-mode gradients come from torch's
autograd graph; this module owns the parameter bookkeeping, the layer
definitions, the optimizer and the finite-difference harness that everything
else is verified against.
"""
from __future__ import annotations

import contextlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np
import torch

LOG_CLAMP = 1e-12

__all__ = [
    "ParamBlock",
    "ParamStore",
    "Tape",
    "Adam",
    "FDReport",
    "affine_forward",
    "mlp_forward",
    "gru_cell",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "mse",
    "backward",
    "adam_step",
    "finite_diff_check",
    "float64_mode",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class TapeError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class ParamBlock:
    """A named learnable array with its gradient and Adam moments."""

    def __init__(self, name: str, value):
        self.name = name
        value = torch.as_tensor(value).detach().clone()
        self.value = value.requires_grad_(True)
        self.m = torch.zeros_like(value)
        self.v = torch.zeros_like(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    @property
    def grad(self) -> torch.Tensor:
        g = self.value.grad
        return torch.zeros_like(self.value) if g is None else g

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self) -> str:
        return f"ParamBlock({self.name!r}, shape={self.shape})"


class ParamStore:
    """Ordered collection of ParamBlocks addressed by dotted names."""

    def __init__(self, blocks: Iterable[ParamBlock] = ()):
        self._blocks: OrderedDict[str, ParamBlock] = OrderedDict()
        for b in blocks:
            self._blocks[b.name] = b

    def add(self, name: str, value) -> ParamBlock:
        if name in self._blocks:
            raise KeyError(f"duplicate parameter block {name!r}")
        block = ParamBlock(name, value)
        self._blocks[name] = block
        return block

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._blocks[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __iter__(self) -> Iterator[ParamBlock]:
        return iter(self._blocks.values())

    def __len__(self) -> int:
        return len(self._blocks)

    def block(self, name: str) -> ParamBlock:
        return self._blocks[name]

    def names(self) -> list[str]:
        return list(self._blocks)

    def zero_grad(self) -> None:
        for b in self:
            b.zero_grad()

    def requires_grad_(self, flag: bool) -> "ParamStore":
        for b in self:
            b.value.requires_grad_(flag)
        return self

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop gradient accumulation into every block."""
        prev = [b.value.requires_grad for b in self]
        self.requires_grad_(False)
        try:
            yield self
        finally:
            for b, flag in zip(self, prev):
                b.value.requires_grad_(flag)

    def to_numpy(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((b.name, b.value.detach().cpu().numpy().copy()) for b in self)

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
        for b in self:
            key = prefix + b.name
            if key not in arrays:
                raise CheckpointError(f"checkpoint has no block {key!r}")
            arr = np.asarray(arrays[key])
            if tuple(arr.shape) != b.shape:
                raise CheckpointError(f"block {key!r}: checkpoint shape {arr.shape} != {b.shape}")
            with torch.no_grad():
                b.value.copy_(torch.from_numpy(arr).to(b.value.dtype))

    def astype(self, dtype: torch.dtype) -> "ParamStore":
        return ParamStore(ParamBlock(b.name, b.value.detach().to(dtype)) for b in self)

    def clone(self) -> "ParamStore":
        return self.astype(next(iter(self)).value.dtype) if len(self) else ParamStore()

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self)).value.dtype


class Tape:
    """Record of differentiable ops between two optimizer steps.

    The autograd graph carries the saved inputs; the tape tracks op order and
    guards against a second backward pass over the same records.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.ops: list[str] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def clear(self) -> None:
        self.ops.clear()
        self.consumed = False

    @classmethod
    def record(cls, op: str) -> None:
        for tape in cls._active:
            tape.ops.append(op)


def _val(p) -> torch.Tensor:
    return p.value if isinstance(p, ParamBlock) else p


def affine_forward(x: torch.Tensor, w, b) -> torch.Tensor:
    w, b = _val(w), _val(b)
    if x.shape[-1] != w.shape[0] or w.dim() != 2 or b.shape != (w.shape[1],):
        raise ValueError(
            f"affine shape mismatch: x{tuple(x.shape)} w{tuple(w.shape)} b{tuple(b.shape)}"
        )
    Tape.record("affine")
    return x @ w + b


def mlp_forward(x: torch.Tensor, params: ParamStore, prefix: str, n_layers: int) -> torch.Tensor:
    """ReLU MLP with blocks ``{prefix}.w{i}`` / ``{prefix}.b{i}``; no activation on the last layer."""
    for i in range(n_layers):
        x = affine_forward(x, params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            x = torch.relu(x)
    return x


def gru_cell(e: torch.Tensor, h: torch.Tensor, params: ParamStore, prefix: str) -> torch.Tensor:
    """Gated recurrent update.

    Blocks ``{prefix}.w`` [I, 3H], ``{prefix}.u`` [H, 3H] and ``{prefix}.b`` [3H]
    hold the update (z), reset (r) and candidate columns in that order::

        z = sigmoid(e Wz + h Uz + bz)
        r = sigmoid(e Wr + h Ur + br)
        c = tanh(e Wc + (r * h) Uc + bc)
        h' = (1 - z) * h + z * c
    """
    if not (torch.isfinite(e).all() and torch.isfinite(h).all()):
        raise FloatingPointError("gru_cell received non-finite input")
    w, u, b = params[f"{prefix}.w"], params[f"{prefix}.u"], params[f"{prefix}.b"]
    hidden = h.shape[-1]
    if w.shape != (e.shape[-1], 3 * hidden) or u.shape != (hidden, 3 * hidden):
        raise ValueError(
            f"gru shape mismatch: e{tuple(e.shape)} h{tuple(h.shape)} w{tuple(w.shape)} u{tuple(u.shape)}"
        )
    Tape.record("gru")
    gx = e @ w + b
    uz, ur, uc = u[:, :hidden], u[:, hidden : 2 * hidden], u[:, 2 * hidden :]
    z = torch.sigmoid(gx[..., :hidden] + h @ uz)
    r = torch.sigmoid(gx[..., hidden : 2 * hidden] + h @ ur)
    c = torch.tanh(gx[..., 2 * hidden :] + (r * h) @ uc)
    return (1 - z) * h + z * c


def softmax(logits: torch.Tensor, dim: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Max-shifted softmax; entries where ``mask`` is False get probability 0."""
    Tape.record("softmax")
    if mask is not None:
        logits = logits.masked_fill(~mask, -math.inf)
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    ex = torch.exp(shifted)
    return ex / ex.sum(dim=dim, keepdim=True)


def log_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def cross_entropy(probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-probability of the true class; inputs clamped at 1e-12."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = probs.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes: {labels.tolist()}")
    Tape.record("cross_entropy")
    picked = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(LOG_CLAMP)).mean()


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).mean()


def backward(loss: torch.Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(block) into every reachable block's ``grad``."""
    if loss.dim() != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if tape is not None:
        if tape.consumed:
            raise TapeError("backward called twice on the same tape without clearing it")
        tape.consumed = True
    if loss.requires_grad:
        loss.backward()


def adam_step(
    blocks: Iterable[ParamBlock],
    lr: float,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update (1-based ``t``); gradients are zeroed afterwards."""
    if t < 1:
        raise ValueError(f"Adam step count is 1-based, got t={t}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for b in blocks:
            g = b.value.grad
            if g is not None:
                b.m.mul_(beta1).add_(g, alpha=1 - beta1)
                b.v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            else:
                b.m.mul_(beta1)
                b.v.mul_(beta2)
            m_hat = b.m / c1
            v_hat = b.v / c2
            b.value.sub_(lr * m_hat / (v_hat.sqrt() + eps))
            b.value.grad = None


class Adam:
    """Step counter plus ``adam_step`` over a fixed set of blocks."""

    def __init__(self, blocks: Iterable[ParamBlock], lr: float, **kw):
        self.blocks = list(blocks)
        self.lr = lr
        self.kw = kw
        self.t = 0

    def step(self, tape: Tape | None = None) -> None:
        self.t += 1
        adam_step(self.blocks, self.lr, self.t, **self.kw)
        if tape is not None:
            tape.clear()

    def zero_grad(self) -> None:
        for b in self.blocks:
            b.zero_grad()


@dataclass
class FDReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def finite_diff_check(
    f: Callable[[], torch.Tensor],
    blocks: Iterable[ParamBlock],
    step: float = 1e-3,
    tolerance: float = 1e-4,
) -> FDReport:
    """Compare autograd gradients of scalar ``f()`` with central differences.

    Error per block is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``;
    blocks whose gradients are both below 1e-10 everywhere report the absolute gap.
    """
    blocks = list(blocks)
    for b in blocks:
        b.zero_grad()
    loss = f()
    if loss.requires_grad:
        loss.backward()
    report = FDReport(tolerance=tolerance)
    for b in blocks:
        analytic = b.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = b.value.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
        gap = (analytic - numeric).abs().max().item() if analytic.numel() else 0.0
        scale = max(analytic.abs().max().item(), numeric.abs().max().item()) if analytic.numel() else 0.0
        report.max_rel_error[b.name] = gap if scale < 1e-10 else gap / scale
        b.zero_grad()
    return report


@contextlib.contextmanager
def float64_mode():
    """Switch torch's default dtype to float64 for the duration (gradient checks)."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


# -- checkpoint container ---------------------------------------------------

CKPT_MAGIC = b"OCKP"
CKPT_VERSION = 1


def save_checkpoint(path, stores: Mapping[str, ParamStore], meta: dict | None = None) -> None:
    """Write stores as one "OCKP" file; block names are prefixed ``{key}/``."""
    entries, chunks, offset = [], [], 0
    for key, store in stores.items():
        for name, arr in store.to_numpy().items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": f"{key}/{name}", "shape": list(arr.shape), "offset": offset})
            chunks.append(data)
            offset += len(data)
    manifest = json.dumps({"blocks": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``({"key/name": array}, meta)`` from an "OCKP" file."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(raw[12 : 12 + mlen])
    base = 12 + mlen
    arrays = {}
    for e in manifest["blocks"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 4 * n > len(raw):
            raise CheckpointError(f"{path}: truncated payload at block {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(e["shape"]).copy()
    return arrays, manifest.get("meta", {})
