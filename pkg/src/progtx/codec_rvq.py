"""Patch vector quantization with residual stages.

Images are cut into d x d x 3 pixel patches (one vector per cell of the
(W/d) x (H/d) grid), optionally projected onto a few principal directions,
and quantized either with a single codebook picked from a per-bpi family or
with a residual stack whose stages are sent one after another.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import ImageBuffer

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"RVQ1"
CODEBOOK_HEADER = struct.Struct("<4sBBHH")
KIND_SINGLE, KIND_STACK = 0, 1
TOKEN_MAGIC = 0x54
TOKEN_HEADER = struct.Struct("<BIBBI")
TOKEN_HEADER_BITS = 8 * TOKEN_HEADER.size
# above this many centroids a k-d tree does the assignment step
KDTREE_MIN_K = 1024


class BudgetTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    vectors: np.ndarray  # (gh, gw, dim)
    patch: int
    width: int
    height: int

    @property
    def flat(self) -> np.ndarray:
        return self.vectors.reshape(-1, self.vectors.shape[-1])

    @property
    def cells(self) -> int:
        return self.vectors.shape[0] * self.vectors.shape[1]


@dataclass(frozen=True)
class Projector:
    rows: np.ndarray  # (out_dim, dim), orthonormal
    mean: np.ndarray  # (dim,)
    variances: np.ndarray  # captured variance per row

    def project(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.rows.T

    def back_project(self, z: np.ndarray) -> np.ndarray:
        return z @ self.rows + self.mean

    def to_npz(self, path):
        _atomic_npz(path, rows=self.rows, mean=self.mean, variances=self.variances)

    @classmethod
    def from_npz(cls, path) -> "Projector":
        with np.load(path) as z:
            return cls(z["rows"], z["mean"], z["variances"])


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # (2**bpi, dim) float32

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float32)
        if e.ndim != 2:
            raise ValueError("codebook entries must be a 2-D array")
        k = e.shape[0]
        if k & (k - 1):
            raise ValueError(f"codebook size {k} is not a power of two")
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook entries must be finite")
        object.__setattr__(self, "entries", e)

    @property
    def bpi(self) -> int:
        return self.entries.shape[0].bit_length() - 1

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def __len__(self):
        return self.entries.shape[0]


@dataclass(frozen=True)
class ResidualStack:
    stages: tuple[Codebook, ...]
    train_mse: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a residual stack needs at least one stage")
        shapes = {cb.entries.shape for cb in self.stages}
        if len(shapes) != 1:
            raise ValueError("all stages must share bpi and dimension")

    @property
    def bpi(self) -> int:
        return self.stages[0].bpi

    @property
    def m_max(self) -> int:
        return len(self.stages)


CodebookFamily = dict  # bpi -> Codebook, keys contiguous and increasing


@dataclass(frozen=True)
class TokenMap:
    indices: np.ndarray  # (cells, stages) int
    bpi: int
    grid: tuple[int, int]

    def __post_init__(self):
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= 1 << self.bpi):
            raise ValueError("token index outside codebook")

    @property
    def stages(self) -> int:
        return self.indices.shape[1]


# -- patches -----------------------------------------------------------------

def extract_patches(image: ImageBuffer, d: int = 8) -> PatchGrid:
    h, w = image.height, image.width
    px = image.pixels
    ph, pw = -h % d, -w % d
    if ph or pw:
        px = np.pad(px, ((0, ph), (0, pw), (0, 0)), mode="edge")
    gh, gw = px.shape[0] // d, px.shape[1] // d
    v = px.reshape(gh, d, gw, d, 3).transpose(0, 2, 1, 3, 4).reshape(gh, gw, d * d * 3)
    return PatchGrid(v.astype(np.float64), d, w, h)


def assemble_patches(grid: PatchGrid, d: int | None = None) -> ImageBuffer:
    d = grid.patch if d is None else d
    gh, gw, _ = grid.vectors.shape
    px = grid.vectors.reshape(gh, gw, d, d, 3).transpose(0, 2, 1, 3, 4).reshape(gh * d, gw * d, 3)
    px = px[: grid.height, : grid.width]
    return ImageBuffer(np.clip(np.rint(px), 0, 255).astype(np.uint8))


def training_patches(images: Sequence[ImageBuffer], d: int = 8, stride: int | None = None
                     ) -> np.ndarray:
    """All d x d windows at ``stride`` (default d) from every image, stacked."""
    stride = d if stride is None else stride
    out = []
    for img in images:
        win = np.lib.stride_tricks.sliding_window_view(img.pixels, (d, d), axis=(0, 1))
        win = win[::stride, ::stride]  # (ny, nx, 3, d, d)
        out.append(win.transpose(0, 1, 3, 4, 2).reshape(-1, d * d * 3))
    return np.concatenate(out).astype(np.float64)


# -- projector ---------------------------------------------------------------

def fit_projector(vectors: np.ndarray, out_dim: int = 4, iters: int = 500, tol: float = 1e-12,
                  seed: int = 0) -> Projector:
    """Top principal directions by power iteration with deflation."""
    x = np.asarray(vectors, dtype=np.float64)
    n, dim = x.shape
    if n <= out_dim:
        raise ValueError(f"corpus of {n} vectors too small for out_dim={out_dim}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    if np.trace(cov) <= 0:
        raise ValueError("corpus has zero variance")
    rng = np.random.default_rng(seed)
    rows, lams = [], []
    work = cov.copy()
    for _ in range(out_dim):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = work @ v
            # keep the iterate orthogonal to earlier rows against round-off drift
            for r in rows:
                w -= (w @ r) * r
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            new_lam = w @ work @ w
            done = abs(new_lam - lam) <= tol * max(abs(new_lam), 1e-300) and np.linalg.norm(w - v) < 1e-9
            v, lam = w, new_lam
            if done:
                break
        rows.append(v)
        lams.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)
    return Projector(np.array(rows), mean, np.array(lams))


# -- k-means -----------------------------------------------------------------

def _exact_sq(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def nearest(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid (lowest index on ties) and its squared distance.

    Distances come from the BLAS expansion |x|^2 - 2 x.c + |c|^2; rows whose
    best two candidates are within round-off of each other are re-resolved
    with direct differences so tie-breaking stays exact.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if c.shape[0] >= KDTREE_MIN_K and c.shape[1] <= 16:
        from scipy.spatial import cKDTree

        kk = min(4, c.shape[0])
        _, idx = cKDTree(c).query(x, k=kk)
        d = np.stack([np.einsum("nd,nd->n", x - c[idx[:, j]], x - c[idx[:, j]])
                      for j in range(kk)], axis=1)
        # sort candidates by index so argmin's first minimum is the lowest index
        key = np.argsort(idx, axis=1)
        idx_s = np.take_along_axis(idx, key, axis=1)
        d_s = np.take_along_axis(d, key, axis=1)
        pick = np.argmin(d_s, axis=1)
        rows = np.arange(len(x))
        best, dist = idx_s[rows, pick].astype(np.int64), d_s[rows, pick]
        # a tie could extend past the candidate list: resolve those rows exactly
        slack = 1e-9 * (dist + 1.0)
        for r in np.flatnonzero(d.max(axis=1) <= dist + slack):
            row = _exact_sq(x[r:r + 1], c)[0]
            best[r] = int(np.argmin(row))
            dist[r] = row[best[r]]
        return best, dist
    cc = np.einsum("kd,kd->k", c, c)
    rows = max(1, (1 << 21) // max(1, c.shape[0]))
    best = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0])
    for i in range(0, x.shape[0], rows):
        xb = x[i:i + rows]
        xx = np.einsum("nd,nd->n", xb, xb)
        d = xx[:, None] - 2.0 * (xb @ c.T) + cc[None, :]
        b = np.argmin(d, axis=1)
        dmin = d[np.arange(len(b)), b]
        slack = 1e-9 * (xx + cc.max()) + 1e-12
        near = (d <= (dmin + slack)[:, None]).sum(axis=1) > 1
        for r in np.flatnonzero(near):
            b[r] = int(np.argmin(_exact_sq(xb[r:r + 1], c)[0]))
        diff = xb - c[b]
        best[i:i + rows] = b
        dist[i:i + rows] = np.einsum("nd,nd->n", diff, diff)
    return best, dist


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = np.einsum("nd,nd->n", x - centers[0], x - centers[0])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError("k-means++ ran out of distinct points")
        pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        pick = min(pick, n - 1)
        while d2[pick] == 0:  # guard against landing on a zero-mass point at the boundary
            pick = (pick + 1) % n
        centers[j] = x[pick]
        diff = x - centers[j]
        d2 = np.minimum(d2, np.einsum("nd,nd->n", diff, diff))
    return centers


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    objective: tuple[float, ...]  # total squared distance after each assignment step

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.centroids)


def train_kmeans(vectors: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
                 tol: float = 1e-6) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when no centroid moves more than ``tol`` or after ``max_iters``.
    Empty clusters are reseeded with the points farthest from their centroid.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("train_kmeans needs a non-empty 2-D array")
    distinct = np.unique(x, axis=0).shape[0]
    if k > distinct:
        raise ValueError(f"k={k} exceeds the {distinct} distinct vectors")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    objective = []
    assign, dist = nearest(x, centers)
    for it in range(max_iters):
        objective.append(float(dist.sum()))
        counts = np.bincount(assign, minlength=k)
        sums = np.stack([np.bincount(assign, weights=x[:, j], minlength=k)
                         for j in range(x.shape[1])], axis=1)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            # reseed from the points farthest from their current centroid
            far = np.argsort(-dist, kind="stable")[: empty.size]
            new[empty] = x[far]
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        assign, dist = nearest(x, centers)
        if shift < tol:
            break
    objective.append(float(dist.sum()))
    log.debug("k-means k=%d n=%d finished after %d iterations, objective %.6g",
              k, x.shape[0], len(objective) - 1, objective[-1])
    return KMeansResult(centers, assign, tuple(objective))


def cluster_codebook(large: Codebook, bpi: int, max_iters: int = 100, seed: int = 0) -> Codebook:
    k = 1 << bpi
    if k > len(large):
        raise ValueError(f"bpi={bpi} needs {k} entries but the large codebook has {len(large)}")
    res = train_kmeans(large.entries.astype(np.float64), k, max_iters=max_iters, seed=seed)
    return res.codebook


def train_codebook_family(vectors: np.ndarray, bpi_range: Sequence[int], large_size: int,
                          max_iters: int = 100, seed: int = 0
                          ) -> tuple[Codebook, CodebookFamily]:
    """Train the large codebook, then cluster it down to each bpi in ``bpi_range``."""
    large = train_kmeans(vectors, large_size, max_iters=max_iters, seed=seed).codebook
    family = {}
    for bpi in sorted(bpi_range):
        family[bpi] = (large if 1 << bpi == len(large)
                       else cluster_codebook(large, bpi, max_iters=max_iters, seed=seed + bpi))
    return large, family


def train_residual_stack(vectors: np.ndarray, m: int, bpi: int, seed: int = 0,
                         max_iters: int = 100) -> ResidualStack:
    if m < 1:
        raise ValueError("m must be >= 1")
    residual = np.asarray(vectors, dtype=np.float64).copy()
    seeds = np.random.SeedSequence(seed).spawn(m)
    stages, history = [], []
    for i in range(m):
        stage_seed = int(seeds[i].generate_state(1)[0])
        res = train_kmeans(residual, 1 << bpi, max_iters=max_iters, seed=stage_seed)
        cb = res.codebook
        idx, _ = nearest(residual, cb.entries)
        residual = residual - cb.entries.astype(np.float64)[idx]
        stages.append(cb)
        history.append(float(np.mean(np.einsum("nd,nd->n", residual, residual))))
        log.info("stage %d/%d: mean squared residual %.4f", i + 1, m, history[-1])
    return ResidualStack(tuple(stages), tuple(history))


# -- residual quantization ---------------------------------------------------

def rq_encode_batch(x: np.ndarray, stack: ResidualStack, m: int) -> np.ndarray:
    """Greedy stage-by-stage codeword choice for every row of ``x``; shape (n, m)."""
    if not 1 <= m <= stack.m_max:
        raise ValueError(f"m must lie in [1, {stack.m_max}], got {m}")
    residual = np.asarray(x, dtype=np.float64).copy()
    if residual.ndim == 1:
        residual = residual[None]
    codes = np.empty((residual.shape[0], m), dtype=np.int64)
    for i in range(m):
        entries = stack.stages[i].entries.astype(np.float64)
        idx, _ = nearest(residual, entries)
        codes[:, i] = idx
        residual -= entries[idx]
    return codes


def rq_encode(vector: np.ndarray, stack: ResidualStack, m: int) -> list[int]:
    return rq_encode_batch(np.asarray(vector)[None], stack, m)[0].tolist()


def rq_decode_batch(codes: np.ndarray, stack: ResidualStack, dim: int | None = None) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim == 1:
        codes = codes[None]
    if codes.shape[1] > stack.m_max:
        raise ValueError("more stages than the stack holds")
    out = np.zeros((codes.shape[0], stack.stages[0].dim if dim is None else dim))
    for i in range(codes.shape[1]):
        entries = stack.stages[i].entries.astype(np.float64)
        col = codes[:, i]
        if col.size and (col.min() < 0 or col.max() >= len(entries)):
            raise IndexError(f"stage {i} index outside 0..{len(entries) - 1}")
        out += entries[col]
    return out


def rq_decode(indices: Sequence[int], stack: ResidualStack) -> np.ndarray:
    return rq_decode_batch(np.asarray(indices, dtype=np.int64)[None], stack)[0]


def select_codebook(family: CodebookFamily, n_bits_budget: int, width: int, height: int,
                    d: int = 8) -> int:
    """Largest bpi whose token map fits in ``n_bits_budget``."""
    if not family:
        raise ValueError("empty codebook family")
    cells = math.ceil(width / d) * math.ceil(height / d)
    fits = [bpi for bpi in family if cells * bpi <= n_bits_budget]
    if not fits:
        raise BudgetTooSmall(
            f"budget too small: {n_bits_budget} bits < {cells} cells x bpi {min(family)}")
    return max(fits)


def m_stages(n_bits_budget: int, n_bits_per_stage: int, m_max: int) -> int:
    if n_bits_per_stage <= 0:
        raise ValueError("n_bits_per_stage must be positive")
    return min(n_bits_budget // n_bits_per_stage, m_max)


# -- codec -------------------------------------------------------------------

@dataclass(frozen=True)
class RVQCodec:
    stack: ResidualStack
    projector: Projector | None = None
    patch: int = 8

    def vectors(self, image: ImageBuffer) -> tuple[PatchGrid, np.ndarray]:
        grid = extract_patches(image, self.patch)
        v = grid.flat
        return grid, (self.projector.project(v) if self.projector is not None else v)

    def encode(self, image: ImageBuffer, m: int | None = None) -> TokenMap:
        grid, v = self.vectors(image)
        codes = rq_encode_batch(v, self.stack, self.stack.m_max if m is None else m)
        return TokenMap(codes, self.stack.bpi, grid.vectors.shape[:2])

    def decode(self, tokens: TokenMap, width: int, height: int, m: int | None = None) -> ImageBuffer:
        m = tokens.stages if m is None else m
        z = rq_decode_batch(tokens.indices[:, :m], self.stack)
        v = self.projector.back_project(z) if self.projector is not None else z
        gh, gw = tokens.grid
        grid = PatchGrid(v.reshape(gh, gw, -1), self.patch, width, height)
        return assemble_patches(grid)

    def stage_bits(self, width: int, height: int) -> int:
        cells = math.ceil(width / self.patch) * math.ceil(height / self.patch)
        return TOKEN_HEADER_BITS + 8 * math.ceil(cells * self.stack.bpi / 8)


# -- serialization -----------------------------------------------------------

def pack_indices(indices: np.ndarray, bpi: int) -> bytes:
    """Big-endian, MSB-first fixed-width packing, zero padded to a byte."""
    idx = np.asarray(indices, dtype=np.uint32)
    if bpi == 0:
        return b""
    shifts = np.arange(bpi - 1, -1, -1, dtype=np.uint32)
    bits = ((idx[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bits).tobytes()


def unpack_indices(data: bytes, bpi: int, count: int) -> np.ndarray:
    if bpi == 0:
        return np.zeros(count, dtype=np.int64)
    need = math.ceil(count * bpi / 8)
    if len(data) < need:
        raise ValueError(f"token payload truncated ({len(data)} of {need} bytes)")
    bits = np.unpackbits(np.frombuffer(data[:need], dtype=np.uint8))[: count * bpi]
    weights = 1 << np.arange(bpi - 1, -1, -1, dtype=np.int64)
    return bits.reshape(count, bpi).astype(np.int64) @ weights


def token_packet(image_id: int, stage: int, bpi: int, indices: np.ndarray) -> bytes:
    idx = np.asarray(indices).ravel()
    return TOKEN_HEADER.pack(TOKEN_MAGIC, image_id, stage, bpi, idx.size) + pack_indices(idx, bpi)


def parse_token_packet(raw: bytes) -> tuple[int, int, int, np.ndarray]:
    """Return (image_id, stage, bpi, indices)."""
    if len(raw) < TOKEN_HEADER.size:
        raise ValueError("token packet shorter than its header")
    magic, image_id, stage, bpi, count = TOKEN_HEADER.unpack_from(raw)
    if magic != TOKEN_MAGIC:
        raise ValueError(f"bad token packet magic 0x{magic:02x}")
    return image_id, stage, bpi, unpack_indices(raw[TOKEN_HEADER.size:], bpi, count)


def _atomic_write(path, data: bytes):
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _atomic_npz(path, **arrays):
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def codebook_bytes(obj: Codebook | ResidualStack) -> bytes:
    stages = obj.stages if isinstance(obj, ResidualStack) else (obj,)
    kind = KIND_STACK if isinstance(obj, ResidualStack) else KIND_SINGLE
    head = CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, kind, stages[0].bpi, stages[0].dim, len(stages))
    body = b"".join(cb.entries.astype("<f4").tobytes() for cb in stages)
    return head + body


def write_codebook(path, obj: Codebook | ResidualStack) -> None:
    _atomic_write(path, codebook_bytes(obj))


def read_codebook(path) -> Codebook | ResidualStack:
    raw = Path(path).read_bytes()
    if len(raw) < CODEBOOK_HEADER.size:
        raise ValueError(f"{path}: codebook file too short")
    magic, kind, bpi, dim, n_stages = CODEBOOK_HEADER.unpack_from(raw)
    if magic != CODEBOOK_MAGIC:
        raise ValueError(f"{path}: bad codebook magic {magic!r}")
    k = 1 << bpi
    need = CODEBOOK_HEADER.size + 4 * k * dim * n_stages
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=CODEBOOK_HEADER.size)
    books = tuple(Codebook(e) for e in flat.reshape(n_stages, k, dim))
    if kind == KIND_SINGLE:
        if n_stages != 1:
            raise ValueError(f"{path}: single codebook with {n_stages} stages")
        return books[0]
    if kind != KIND_STACK:
        raise ValueError(f"{path}: unknown codebook kind {kind}")
    return ResidualStack(books)
