"""Codebooks and quantizers: nearest-code lookup, EMA maintenance with code
reset, the residual-quantization loop, and usage diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gradcore import Tensor, ops


class QuantizeError(ValueError):
    pass


@dataclass
class Codebook:
    entries: np.ndarray                 # (K, D)
    lam: float = 0.99                   # EMA constant
    ema_count: np.ndarray = field(default=None)
    ema_sum: np.ndarray = field(default=None)
    staleness: np.ndarray = field(default=None)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise QuantizeError(f"entries must be (K, D), got {self.entries.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise QuantizeError("codebook entries must be finite")
        if not 0.0 < self.lam < 1.0:
            raise QuantizeError(f"EMA constant must be in (0, 1), got {self.lam}")
        k = self.entries.shape[0]
        if self.ema_count is None:
            self.ema_count = np.ones(k)
        if self.ema_sum is None:
            self.ema_sum = self.entries.copy()
        if self.staleness is None:
            self.staleness = np.zeros(k, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def init_codebook(rng: np.random.Generator, size: int, dim: int,
                  lam: float = 0.99, std: float = 0.02) -> Codebook:
    return Codebook(rng.normal(0.0, std, size=(size, dim)), lam=lam)


def nearest_code(z: np.ndarray, book: Codebook) -> int:
    """Index of the squared-distance argmin; ties break to the lowest index."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (book.dim,):
        raise QuantizeError(f"vector width {z.shape} != codebook dim ({book.dim},)")
    d = ((book.entries - z) ** 2).sum(axis=1)
    return int(np.argmin(d))


def assign_codes(batch: np.ndarray, book: Codebook) -> np.ndarray:
    """Vectorized nearest_code over a (T, D) batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != book.dim:
        raise QuantizeError(f"batch shape {batch.shape} incompatible with "
                            f"codebook dim {book.dim}")
    # ||z - e||^2 = ||z||^2 - 2 z.e + ||e||^2; the ||z||^2 term is constant per row
    cross = batch @ book.entries.T
    sq = (book.entries ** 2).sum(axis=1)
    scores = sq[None, :] - 2.0 * cross
    return np.argmin(scores, axis=1)


@dataclass
class QuantizeOutcome:
    indices: np.ndarray       # (T,)
    quantized: Tensor         # (T, D) straight-through carrier
    commitment: Tensor        # scalar, sum of squared distances ||z - sg(zhat)||^2


def quantize(batch: Tensor, book: Codebook) -> QuantizeOutcome:
    """Snap each row to its nearest code. The returned vectors carry decoder
    gradients back to the encoder (straight-through); the commitment term uses
    a stopped-gradient target so only the encoder side is pushed."""
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if not np.all(np.isfinite(batch.data)):
        raise QuantizeError("quantize: non-finite batch")
    idx = assign_codes(batch.data, book)
    rows = Tensor(book.entries[idx])
    quantized = ops.straight_through(batch, rows)
    diff = ops.sub(batch, ops.stop_gradient(rows))
    commitment = ops.sum_(ops.multiply(diff, diff))
    return QuantizeOutcome(indices=idx, quantized=quantized, commitment=commitment)


def ema_update(book: Codebook, batch: np.ndarray, assignments: np.ndarray) -> None:
    """Exponential-moving-average re-estimation from the assigned vectors.

    Counts and sums decay for every code; entries are rewritten only for codes
    that received at least one vector, so unassigned codes keep their exact
    value while their staleness grows.
    """
    batch = np.asarray(batch, dtype=np.float64)
    assignments = np.asarray(assignments)
    if assignments.min(initial=0) < 0 or assignments.max(initial=0) >= book.size:
        raise QuantizeError("assignment index out of range")
    k = book.size
    counts = np.bincount(assignments, minlength=k).astype(np.float64)
    sums = np.zeros_like(book.ema_sum)
    np.add.at(sums, assignments, batch)

    lam = book.lam
    book.ema_count = lam * book.ema_count + (1.0 - lam) * counts
    book.ema_sum = lam * book.ema_sum + (1.0 - lam) * sums
    used = counts > 0
    book.entries[used] = (book.ema_sum[used]
                          / np.maximum(book.ema_count[used], 1e-5)[:, None])
    book.staleness[used] = 0
    book.staleness[~used] += 1


def code_reset(book: Codebook, batch: np.ndarray, staleness_threshold: int,
               rng: np.random.Generator) -> int:
    """Reseed codes stale for >= threshold updates from uniformly sampled batch
    vectors; their EMA stats restart at (count=1, sum=entry). Returns the
    number of reseeded codes."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise QuantizeError("code_reset: empty batch")
    stale = np.nonzero(book.staleness >= staleness_threshold)[0]
    if stale.size == 0:
        return 0
    picks = rng.integers(0, batch.shape[0], size=stale.size)
    book.entries[stale] = batch[picks]
    book.ema_sum[stale] = batch[picks]
    book.ema_count[stale] = 1.0
    book.staleness[stale] = 0
    return int(stale.size)


def rvq_quantize(z: np.ndarray, books: list[Codebook]) -> tuple[np.ndarray, np.ndarray]:
    """Residual quantization: each level quantizes what the previous levels
    left over. Returns per-level indices and the summed reconstruction."""
    z = np.asarray(z, dtype=np.float64)
    dims = {b.dim for b in books}
    if len(dims) != 1:
        raise QuantizeError(f"inconsistent codebook widths: {sorted(dims)}")
    if z.shape != (books[0].dim,):
        raise QuantizeError(f"vector width {z.shape} != codebook dim")
    z_hat = np.zeros_like(z)
    res = z.copy()
    indices = []
    for book in books:
        k = nearest_code(res, book)
        picked = book.entries[k]
        z_hat = z_hat + picked
        res = res - picked
        indices.append(k)
    return np.array(indices), z_hat


def rvq_assign_batch(batch: np.ndarray, books: list[Codebook]) \
        -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Batched residual quantization: (T, D) -> per-level indices (levels, T),
    summed quantization (T, D), and the per-level residual inputs (for EMA)."""
    batch = np.asarray(batch, dtype=np.float64)
    res = batch.copy()
    z_hat = np.zeros_like(batch)
    all_idx = []
    residual_inputs = []
    for book in books:
        residual_inputs.append(res.copy())
        idx = assign_codes(res, book)
        picked = book.entries[idx]
        z_hat = z_hat + picked
        res = res - picked
        all_idx.append(idx)
    return np.stack(all_idx), z_hat, residual_inputs


def rvq_apply(batch: Tensor, books: list[Codebook]) \
        -> tuple[np.ndarray, Tensor, Tensor, list[np.ndarray]]:
    """Training-path residual quantization of a (T, D) tensor: straight-through
    on the summed quantization, commitment against the final reconstruction."""
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    idx, z_hat, residual_inputs = rvq_assign_batch(batch.data, books)
    rows = Tensor(z_hat)
    quantized = ops.straight_through(batch, rows)
    diff = ops.sub(batch, ops.stop_gradient(rows))
    commitment = ops.sum_(ops.multiply(diff, diff))
    return idx, quantized, commitment, residual_inputs


def codebook_perplexity(histogram: np.ndarray) -> float:
    """exp(entropy) of the empirical code distribution; 1 (collapse) to K."""
    histogram = np.asarray(histogram, dtype=np.float64)
    total = histogram.sum()
    if histogram.size == 0 or total <= 0:
        raise QuantizeError("empty histogram")
    p = histogram / total
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))
