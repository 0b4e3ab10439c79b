"""Differentiable-computation substrate.

Everything learned in this package runs on torch autograd; this module owns the
surrounding contract: deterministic seed fan-out, finite-difference gradient
validation, optimizer construction, and the on-disk parameter archive. Other
modules treat these as the only way to touch optimizer state or persistence.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import CheckpointError

TRAIN_DTYPE = torch.float32
TEST_DTYPE = torch.float64
GRAD_CHECK_TOL = 1e-4
DEFAULT_LR = 1e-4

ARCHIVE_MAGIC = b"PRM1"
ARCHIVE_VERSION = 1

_DTYPE_CODES = {
    "float32": "<f4",
    "float64": "<f8",
    "int32": "<i4",
    "int64": "<i8",
}


class GradientError(RuntimeError):
    """Raised when an analytic gradient is non-finite; names the parameter."""


class SeedBank:
    """Fans a single root seed out into independent named streams.

    The same (root_seed, name) pair always yields the same stream, so a
    single-threaded run is bit-reproducible from the root seed alone.
    """

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)

    def _seed_sequence(self, name: str) -> np.random.SeedSequence:
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
        return np.random.SeedSequence([self.root_seed & 0xFFFFFFFF] + words)

    def numpy_rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self._seed_sequence(name))

    def torch_generator(self, name: str) -> torch.Generator:
        gen = torch.Generator()
        seed = int(self.numpy_rng(name + "/torch").integers(0, 2**63 - 1))
        gen.manual_seed(seed)
        return gen

    def seed_torch_global(self, name: str = "torch-global") -> None:
        torch.manual_seed(int(self.numpy_rng(name).integers(0, 2**63 - 1)))


def _named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    out = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            out.append(p)
        else:
            out.append((f"param{i}", p))
    return out


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Iterable[torch.Tensor],
    eps: float = 1e-4,
) -> float:
    """Compare autograd gradients of a deterministic scalar function against
    central finite differences, elementwise over every parameter.

    Returns max over parameter entries of |analytic - fd| / (|analytic| + eps).
    Parameters are restored to their original values.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = _named(params)
    for _, p in named:
        p.grad = None
    value = f()
    if value.dim() != 0:
        raise ValueError("grad_check expects a scalar-valued function")
    value.backward()

    worst = 0.0
    for name, p in named:
        grad = p.grad
        if grad is None:
            grad = torch.zeros_like(p)
        if not torch.isfinite(grad).all():
            raise GradientError(f"non-finite gradient in parameter '{name}'")
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(f())
                flat[i] = orig - eps
                lo = float(f())
                flat[i] = orig
                fd = (hi - lo) / (2.0 * eps)
                ana = float(gflat[i])
                err = abs(ana - fd) / (abs(ana) + eps)
                worst = max(worst, err)
    for _, p in named:
        p.grad = None
    return worst


def make_adam(params, lr: float = DEFAULT_LR) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))


# ---------------------------------------------------------------------------
# Parameter archive: magic | u32 header length | JSON manifest | raw payload.
# Arrays are little-endian and contiguous; the manifest records name, shape,
# dtype, and byte offset per entry plus a required version field.
# ---------------------------------------------------------------------------


def save_arrays(path, arrays: Mapping[str, np.ndarray], extra: dict | None = None) -> None:
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {dtype} for array '{name}'")
        data = arr.astype(_DTYPE_CODES[dtype], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": len(payload),
                "nbytes": len(data),
            }
        )
        payload.extend(data)
    header = {"version": ARCHIVE_VERSION, "entries": entries}
    if extra is not None:
        header["extra"] = extra
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive back; returns (arrays, extra)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ARCHIVE_MAGIC:
            raise CheckpointError(f"bad archive magic in {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != ARCHIVE_VERSION:
            raise CheckpointError(
                f"archive version {header.get('version')!r} unsupported (want {ARCHIVE_VERSION})"
            )
        payload = fh.read()
    arrays = {}
    for ent in header["entries"]:
        code = _DTYPE_CODES[ent["dtype"]]
        raw = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=code).reshape(ent["shape"]).astype(ent["dtype"])
        arrays[ent["name"]] = arr
    return arrays, header.get("extra", {})


def save_module_params(path, module: torch.nn.Module, extra: dict | None = None) -> None:
    arrays = {name: p.detach().cpu().numpy() for name, p in module.named_parameters()}
    save_arrays(path, arrays, extra=extra)


def load_module_params(path, module: torch.nn.Module) -> dict:
    arrays, extra = load_arrays(path)
    own = dict(module.named_parameters())
    missing = set(own) - set(arrays)
    unexpected = set(arrays) - set(own)
    if missing or unexpected:
        raise CheckpointError(
            f"parameter name mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
        )
    with torch.no_grad():
        for name, p in own.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for '{name}': archive {arr.shape} vs model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    return extra


def save_optimizer(path, opt: torch.optim.Optimizer, named_params: Mapping[str, torch.Tensor]) -> None:
    """Persist Adam moment accumulators and step counters in archive format."""
    arrays: dict[str, np.ndarray] = {}
    scalars: dict[str, float] = {}
    for name, p in named_params.items():
        state = opt.state.get(p)
        if not state:
            continue
        arrays[name + ".exp_avg"] = state["exp_avg"].detach().cpu().numpy()
        arrays[name + ".exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
        step = state["step"]
        scalars[name + ".step"] = float(step.item() if torch.is_tensor(step) else step)
    save_arrays(path, arrays, extra={"kind": "adam-state", "steps": scalars})


def load_optimizer(path, opt: torch.optim.Optimizer, named_params: Mapping[str, torch.Tensor]) -> None:
    arrays, extra = load_arrays(path)
    if extra.get("kind") != "adam-state":
        raise CheckpointError("archive does not hold optimizer state")
    steps = extra.get("steps", {})
    for name, p in named_params.items():
        key = name + ".exp_avg"
        if key not in arrays:
            continue
        state = opt.state[p]
        state["exp_avg"] = torch.from_numpy(arrays[key]).to(p.dtype)
        state["exp_avg_sq"] = torch.from_numpy(arrays[name + ".exp_avg_sq"]).to(p.dtype)
        state["step"] = torch.tensor(steps.get(name + ".step", 0.0))
