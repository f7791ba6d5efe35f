"""Frozen desk-scale stand-ins for the vision encoder, text embedder and LLM head."""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass

import numpy as np

from .numkit import DimensionError

N_FEATURES = 6
GRID = 7
HASH_DIM = 512
EMBED_DIM = 48
LORA_RANK = 4
LORA_SCALE = 2.0  # alpha / r with alpha = 8


class InputError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PatchEncoder:
    grid: int
    proj: np.ndarray  # (N_FEATURES, d_in), read-only

    @classmethod
    def build(cls, d_in: int = 32, grid: int = GRID, seed: int = 0) -> PatchEncoder:
        rng = np.random.default_rng([seed, 0xE7C])
        return cls(grid, _frozen(rng.normal(0.0, 1.0, (N_FEATURES, d_in))))

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid


def patch_features(raster: np.ndarray, grid: int) -> np.ndarray:
    """Six statistics per patch, row-major patch order.

    mean R, mean G, mean B (pixels in [0, 1]), luminance variance, and mean
    squared horizontal / vertical luminance differences.  Statistics 3-5 are
    scaled by 4 so all six live on comparable ranges.
    """
    img = np.asarray(raster)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"expected an RGB image, got shape {img.shape}")
    H, W = img.shape[:2]
    if H < grid or W < grid:
        raise InputError(f"image {W}x{H} smaller than a {grid}x{grid} grid")
    x = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
    lum = 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
    ys = np.linspace(0, H, grid + 1).astype(int)
    xs = np.linspace(0, W, grid + 1).astype(int)
    feats = np.empty((grid * grid, N_FEATURES))
    for r in range(grid):
        for c in range(grid):
            patch = x[ys[r] : ys[r + 1], xs[c] : xs[c + 1]]
            pl = lum[ys[r] : ys[r + 1], xs[c] : xs[c + 1]]
            dh = np.diff(pl, axis=1)
            dv = np.diff(pl, axis=0)
            feats[r * grid + c] = (
                *patch.reshape(-1, 3).mean(axis=0),
                4.0 * pl.var(),
                4.0 * (np.mean(dh * dh) if dh.size else 0.0),
                4.0 * (np.mean(dv * dv) if dv.size else 0.0),
            )
    return feats


def encode_chart(enc: PatchEncoder, raster: np.ndarray) -> np.ndarray:
    """Raster -> (grid^2, d_in) visual tokens."""
    return patch_features(raster, enc.grid) @ enc.proj


_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return [t.lower() for t in _TOKEN_RE.findall(text)]


@dataclass(frozen=True)
class TextEmbedder:
    hash_dim: int
    proj: np.ndarray  # (hash_dim, E), read-only

    @classmethod
    def build(cls, dim: int = EMBED_DIM, hash_dim: int = HASH_DIM, seed: int = 0) -> TextEmbedder:
        rng = np.random.default_rng([seed, 0x7E7])
        return cls(hash_dim, _frozen(rng.normal(0.0, 1.0 / math.sqrt(dim), (hash_dim, dim))))

    @property
    def dim(self) -> int:
        return self.proj.shape[1]


def embed_text(emb: TextEmbedder, text: str) -> np.ndarray:
    """Hashed bag-of-tokens -> frozen projection -> unit L2 norm.

    Text without tokens maps to the zero vector.
    """
    counts = np.zeros(emb.hash_dim)
    for tok in tokenize(text):
        counts[zlib.crc32(tok.encode("utf-8")) % emb.hash_dim] += 1.0
    v = counts @ emb.proj
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


@dataclass
class DecoderHead:
    """Frozen weight plus a trainable low-rank adapter: ``W + scale * A @ B``."""

    W: np.ndarray  # (d_out, E), read-only
    lora_A: np.ndarray  # (d_out, r)
    lora_B: np.ndarray  # (r, E)
    scale: float = LORA_SCALE

    @classmethod
    def build(cls, d_out: int = 48, dim: int = EMBED_DIM, rank: int = LORA_RANK, seed: int = 0, lora_seed: int | None = None):
        rng = np.random.default_rng([seed, 0xDEC])
        W = _frozen(rng.normal(0.0, 1.0 / math.sqrt(d_out), (d_out, dim)))
        lrng = np.random.default_rng([seed if lora_seed is None else lora_seed, 0x10A])
        A = lrng.normal(0.0, 1.0 / math.sqrt(d_out), (d_out, rank))
        return cls(W, A, np.zeros((rank, dim)), LORA_SCALE)

    def lora_params(self) -> dict[str, np.ndarray]:
        return {"lora.A": self.lora_A, "lora.B": self.lora_B}

    def copy(self) -> DecoderHead:
        return DecoderHead(self.W, self.lora_A.copy(), self.lora_B.copy(), self.scale)


def decode_with_lora(head: DecoderHead, pooled: np.ndarray) -> np.ndarray:
    """``pooled @ (W + scale * A @ B)`` for a vector or a batch of rows."""
    if pooled.shape[-1] != head.W.shape[0]:
        raise DimensionError(f"pooled {pooled.shape} vs head input {head.W.shape[0]}")
    return pooled @ head.W + head.scale * ((pooled @ head.lora_A) @ head.lora_B)


def decode_backward(head: DecoderHead, pooled: np.ndarray, dout: np.ndarray):
    """Returns ``(dpooled, grads)``; the frozen ``W`` gets no gradient."""
    P = np.atleast_2d(pooled)
    D = np.atleast_2d(dout)
    PA = P @ head.lora_A
    dB = head.scale * PA.T @ D
    dPA = head.scale * D @ head.lora_B.T
    dA = P.T @ dPA
    dP = D @ head.W.T + dPA @ head.lora_A.T
    return dP.reshape(np.shape(pooled)), {"lora.A": dA, "lora.B": dB}
