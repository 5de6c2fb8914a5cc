"""Named model parameters, the Adam update, and binary checkpoints.

A :class:`ParamStore` owns the trainable tensors of one network plus the
optimizer's per-parameter moment estimates. Checkpoints use a fixed binary
layout (magic ``DSLP``) that round-trips float32 values bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, ParameterError, StateError
from .tensor import TensorNode

__all__ = ["ParamStore", "adam_step", "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC"]

CHECKPOINT_MAGIC = b"DSLP"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered map of parameter name -> TensorNode plus Adam state.

    Names are unique, path-like strings ("blocks.0.attn.q.weight"). Optimizer
    moments are allocated lazily on the first :func:`adam_step` and always
    match their parameter's shape.
    """

    def __init__(self):
        self.params: dict[str, TensorNode] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step: int = 0

    def add(self, name: str, values: np.ndarray, requires_grad: bool = True) -> TensorNode:
        if name in self.params:
            raise StateError(f"duplicate parameter name: {name}")
        node = TensorNode(np.asarray(values), requires_grad=requires_grad)
        self.params[name] = node
        return node

    def __getitem__(self, name: str) -> TensorNode:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def items(self):
        return self.params.items()

    def zero_grads(self) -> None:
        for node in self.params.values():
            node.zero_grad()

    def n_coords(self) -> int:
        return sum(p.values.size for p in self.params.values())

    def copy(self) -> "ParamStore":
        """Deep copy of values and optimizer state; gradients start at zero."""
        out = ParamStore()
        for name, node in self.params.items():
            out.add(name, node.values.copy(), requires_grad=node.requires_grad)
        out.moment1 = {k: v.copy() for k, v in self.moment1.items()}
        out.moment2 = {k: v.copy() for k, v in self.moment2.items()}
        out.step = self.step
        return out

    def detached(self) -> "ParamStore":
        """Gradient-free view sharing the same value arrays (for inference)."""
        out = ParamStore()
        for name, node in self.params.items():
            shadow = TensorNode.__new__(TensorNode)
            shadow.values = node.values
            shadow.grad = None
            shadow.requires_grad = False
            shadow._parents = ()
            shadow._backward_fn = None
            out.params[name] = shadow
        return out

    def values_equal(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(self.params[n].values, other.params[n].values) for n in self.params
        )


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Bias-corrected Adam update on every parameter of ``store``.

    Increments the step counter and zeroes gradients afterward. Parameters
    whose ``requires_grad`` is False are skipped.
    """
    if lr <= 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    t = store.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, node in store.params.items():
        if not node.requires_grad:
            continue
        g = node.grad
        if name not in store.moment1:
            store.moment1[name] = np.zeros_like(node.values)
            store.moment2[name] = np.zeros_like(node.values)
        m = store.moment1[name]
        v = store.moment2[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        node.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        node.zero_grad()
    store.step = t
    return store


def save_checkpoint(store: ParamStore, path) -> None:
    """Write parameter values as float32 in the DSLP binary layout.

    Per parameter: u16 name length + UTF-8 name, u8 rank, u32 dims,
    float32 little-endian values (row-major). Insertion order is preserved,
    so identical stores produce identical bytes.
    """
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(store.params))]
    for name, node in store.params.items():
        raw = name.encode("utf-8")
        vals = np.asarray(node.values, dtype="<f4")  # tobytes() copies into C order
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", vals.ndim))
        chunks.append(struct.pack(f"<{vals.ndim}I", *vals.shape))
        chunks.append(vals.tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ParamStore:
    """Read a DSLP checkpoint back into a fresh ParamStore."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a DSLP checkpoint (bad magic {blob[:4]!r})")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        store.add(name, vals.copy())
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes after {count} parameters")
    return store


def ema_blend(teacher: ParamStore, student: ParamStore, momentum: float) -> None:
    """theta_t <- momentum * theta_t + (1 - momentum) * theta_s, in place.

    Lives here (rather than the DINO module) because it is a pure parameter
    operation; the trainer re-exports it.
    """
    t_names, s_names = teacher.names(), student.names()
    if t_names != s_names:
        raise StateError(
            f"parameter name sets differ: {sorted(set(t_names) ^ set(s_names))[:4]} ..."
        )
    for name in t_names:
        tv = teacher.params[name].values
        sv = student.params[name].values
        if tv.shape != sv.shape:
            raise DimensionError(f"shape mismatch for {name}: {tv.shape} vs {sv.shape}")
        tv *= momentum
        tv += (1.0 - momentum) * sv
