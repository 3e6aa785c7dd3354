"""Exact i.i.d. DPP sampling and sample-matrix files.

Random numbers come from numpy's Philox4x64-10 counter-based bit generator
keyed by ``(seed, stream)``; only ``Generator.random`` (uniform doubles) is
used, which is stable across numpy releases and platforms. That combination
is what the ``GENERATOR`` string records.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import RefuseLargeD, ValidationError
from .kernel import ENUM_LIMIT, validate_kernel

GENERATOR = "philox4x64-10/uniform-double/v1"
CLAMP_TOL = 1e-9

MAGIC = b"DPPX"
BIN_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, T, d -> 16 bytes


@dataclass(frozen=True)
class SeedSpec:
    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, stream: int) -> SeedSpec:
        return SeedSpec(self.seed, stream)


def as_seed(seed) -> SeedSpec:
    if isinstance(seed, SeedSpec):
        return seed
    if isinstance(seed, tuple):
        return SeedSpec(*seed)
    return SeedSpec(int(seed))


@dataclass
class SamplerStats:
    clamp_events: int = 0
    min_conditional: float = 0.0


def _projection_draws(P: np.ndarray, k: int, u: np.ndarray, stats: SamplerStats) -> np.ndarray:
    """Sequential draws from the rank-k projection DPP with kernel P, one row per uniform row.

    ``u`` has shape (n, >=k); column m drives the m-th selected item. Residual
    diagonals are the conditional inclusion probabilities times (k - m).
    """
    n = u.shape[0]
    d = P.shape[0]
    out = np.zeros((n, d), dtype=np.uint8)
    resid = np.repeat(np.diag(P)[None, :], n, axis=0).copy()
    C = np.zeros((n, k, d))
    rows = np.arange(n)
    for m in range(k):
        total = resid.sum(axis=1, keepdims=True)
        cdf = np.cumsum(resid, axis=1) / total
        j = (cdf <= u[:, [m]]).sum(axis=1)
        # roundoff can leave the last cdf entry a hair under u
        last_pos = d - 1 - np.argmax((resid > 0)[:, ::-1], axis=1)
        j = np.minimum(j, last_pos)
        v = P[j].copy()
        if m:
            coef = C[rows, :m, j]  # (n, m)
            v -= np.einsum("nm,nmd->nd", coef, C[:, :m, :])
        v /= np.sqrt(resid[rows, j])[:, None]
        C[:, m, :] = v
        resid -= v * v
        resid[rows, j] = 0.0
        out[rows, j] = 1
        low = resid < 0
        if low.any():
            worst = float(resid[low].min())
            stats.min_conditional = min(stats.min_conditional, worst)
            if worst < -CLAMP_TOL:
                raise ValidationError(f"conditional probability {worst:.3g} below zero beyond clamp tolerance")
            stats.clamp_events += int(low.sum())
            resid[low] = 0.0
    return out


def sample_dpp_with_stats(K, T: int, seed=0) -> tuple[np.ndarray, SamplerStats]:
    """Spectral sampler; returns the T x d uint8 sample and clamp statistics."""
    K = validate_kernel(K)
    if T < 1:
        raise ValidationError("T must be at least 1")
    rng = as_seed(seed).generator()
    lam, V = np.linalg.eigh(K.matrix)
    d = K.d
    # both uniform blocks are drawn up front so every row's bits depend only on its own uniforms
    u_select = rng.random((T, d))
    u_items = rng.random((T, d))
    chosen = u_select < lam[None, :]
    codes = chosen.astype(np.int64) @ (1 << np.arange(d, dtype=np.int64))
    X = np.zeros((T, d), dtype=np.uint8)
    stats = SamplerStats()
    for code in np.unique(codes):
        idx = np.flatnonzero(codes == code)
        cols = [c for c in range(d) if code >> c & 1]
        if not cols:
            continue
        Vk = V[:, cols]
        P = Vk @ Vk.T
        X[idx] = _projection_draws(P, len(cols), u_items[idx], stats)
    return X, stats


def sample_dpp(K, T: int, seed=0) -> np.ndarray:
    return sample_dpp_with_stats(K, T, seed)[0]


def sample_from_exact(dist, T: int, seed=0, enum_limit: int = ENUM_LIMIT) -> np.ndarray:
    """Inverse-CDF draws from a full pmf table (an ``ExactDistribution``)."""
    if dist.d > enum_limit:
        raise RefuseLargeD(dist.d, enum_limit)
    if T < 1:
        raise ValidationError("T must be at least 1")
    rng = as_seed(seed).generator()
    cdf = np.cumsum(dist.probs)
    u = rng.random(T) * cdf[-1]
    codes = np.searchsorted(cdf, u, side="right")
    codes = np.minimum(codes, np.flatnonzero(dist.probs > 0)[-1])
    return ((codes[:, None] >> np.arange(dist.d)[None, :]) & 1).astype(np.uint8)


# --- files ------------------------------------------------------------------------

def write_sample(path, X, fmt: str | None = None, header: bool = True) -> None:
    """CSV (optional ``x1,...,xd`` header) or bit-packed binary with a 16-byte header."""
    X = np.asarray(X, dtype=np.uint8)
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix.lower() in (".bin", ".dppx") else "csv")
    T, d = X.shape
    if fmt == "bin":
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, BIN_VERSION, T, d))
            f.write(np.packbits(X.reshape(-1)).tobytes())
    elif fmt == "csv":
        buf = io.StringIO()
        if header:
            buf.write(",".join(f"x{i + 1}" for i in range(d)) + "\n")
        np.savetxt(buf, X, fmt="%d", delimiter=",")
        path.write_text(buf.getvalue())
    else:
        raise ValueError(f"unknown sample format {fmt!r}")


def read_sample(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == MAGIC:
        if len(raw) < _HEADER.size:
            raise ValidationError(f"{path}: truncated header")
        _, version, T, d = _HEADER.unpack_from(raw)
        if version != BIN_VERSION:
            raise ValidationError(f"{path}: unsupported binary version {version}")
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size))
        if bits.size < T * d:
            raise ValidationError(f"{path}: payload shorter than T*d bits")
        return bits[: T * d].reshape(T, d)
    lines = raw.decode().splitlines()
    rows = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        if lineno == 1 and line.startswith("x"):
            continue
        try:
            vals = [int(v) for v in line.split(",")]
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        if any(v not in (0, 1) for v in vals):
            raise ValidationError(f"{path}:{lineno}: entries must be 0 or 1")
        rows.append(vals)
    if not rows:
        raise ValidationError(f"{path}: no observations")
    if len({len(r) for r in rows}) > 1:
        raise ValidationError(f"{path}: ragged rows")
    return np.array(rows, dtype=np.uint8)
