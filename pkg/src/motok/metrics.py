"""Generation-evaluation metrics over embedding feature sets: distribution
distance, retrieval precision, matching distance, and diversity measures."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import DIVERSITY_PAIR_COUNT, EVAL_REPETITIONS

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


@dataclass
class FeatureSet:
    embeddings: np.ndarray          # (n, dim)
    extractor: str
    item_ids: list = field(default_factory=list)
    text_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise MetricError(f"embeddings must be 2-D, got {self.embeddings.shape}")
        if not np.all(np.isfinite(self.embeddings)):
            raise MetricError("non-finite embeddings")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def _gaussian_fit(x: np.ndarray, shrink_flag: list) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / max(x.shape[0] - 1, 1)
    if x.shape[0] < x.shape[1] + 1:
        ridge = 1e-6 * max(np.trace(cov) / x.shape[1], 1e-12)
        cov = cov + ridge * np.eye(x.shape[1])
        shrink_flag.append(True)
        log.warning("covariance shrinkage applied (n=%d < dim+1=%d)",
                    x.shape[0], x.shape[1] + 1)
    return mu, cov


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(a)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real: FeatureSet, gen: FeatureSet) -> float:
    """Distance between Gaussian fits: |mu1-mu2|^2 + Tr(S1+S2-2(S1 S2)^(1/2)),
    with the cross term computed through the symmetrized product."""
    if real.dim != gen.dim:
        raise MetricError(f"dim mismatch: {real.dim} vs {gen.dim}")
    flags: list = []
    mu1, s1 = _gaussian_fit(real.embeddings, flags)
    mu2, s2 = _gaussian_fit(gen.embeddings, flags)
    s1_half = _sqrtm_psd(s1)
    inner = s1_half @ s2 @ s1_half
    vals = np.linalg.eigvalsh(inner)
    neg = vals[vals < -1e-8]
    if neg.size:
        log.warning("clipping %d negative eigenvalues (min %.3e)", neg.size,
                    neg.min())
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)


def diversity(features: FeatureSet, pair_count: int = DIVERSITY_PAIR_COUNT,
              seed: int = 0) -> float:
    """Mean distance over seeded random distinct pairs; the pair count clamps
    to the number of available pairs at small scale."""
    n = features.n
    if n < 2:
        raise MetricError("diversity needs at least 2 items")
    available = n * (n - 1) // 2
    if pair_count > available:
        log.warning("diversity pair count clamped from %d to %d", pair_count,
                    available)
        pair_count = available
    rng = np.random.default_rng(np.random.SeedSequence((seed, n)))
    chosen = rng.choice(available, size=pair_count, replace=False)
    # unrank the flat pair index into (i, j), i < j
    total = 0.0
    emb = features.embeddings
    rows, offsets = _pair_index_table(n)
    for c in chosen:
        i = int(np.searchsorted(offsets, c, side="right") - 1)
        j = int(i + 1 + (c - offsets[i]))
        total += float(np.linalg.norm(emb[i] - emb[j]))
    return total / pair_count


def _pair_index_table(n: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.arange(n - 1, 0, -1)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return counts, offsets


def mmodality(per_text_sets: list[np.ndarray]) -> float:
    """Mean over texts of the mean pairwise distance among that text's
    generations."""
    if not per_text_sets:
        raise MetricError("no generation sets supplied")
    means = []
    for k, gens in enumerate(per_text_sets):
        gens = np.asarray(gens, dtype=np.float64)
        g = gens.shape[0]
        if g < 2:
            raise MetricError(f"text {k} has {g} generations; need >= 2")
        total, count = 0.0, 0
        for i in range(g):
            for j in range(i + 1, g):
                total += float(np.linalg.norm(gens[i] - gens[j]))
                count += 1
        means.append(total / count)
    return float(np.mean(means))


def matching_score(text_features: FeatureSet, motion_features: FeatureSet) -> float:
    """Mean distance between paired text and motion embeddings (lower is
    closer alignment)."""
    if text_features.dim != motion_features.dim:
        raise MetricError(f"dim mismatch: {text_features.dim} vs "
                          f"{motion_features.dim}")
    if text_features.n != motion_features.n:
        raise MetricError(f"count mismatch: {text_features.n} vs "
                          f"{motion_features.n}")
    d = np.linalg.norm(text_features.embeddings - motion_features.embeddings,
                       axis=1)
    return float(d.mean())


def r_precision(text_features: FeatureSet, motion_features: FeatureSet,
                pool_size: int = 32, top: int = 1, seed: int = 0) -> float:
    """Motion-to-text retrieval accuracy in seeded pools of one ground truth
    plus pool_size-1 negatives."""
    n = text_features.n
    if motion_features.n != n:
        raise MetricError("paired feature sets must have equal counts")
    if n < pool_size:
        raise MetricError(f"need at least {pool_size} items, have {n}")
    if top >= pool_size:
        raise MetricError("top must be smaller than the pool")
    rng = np.random.default_rng(np.random.SeedSequence((seed, pool_size)))
    hits = 0
    t_emb = text_features.embeddings
    m_emb = motion_features.embeddings
    for i in range(n):
        others = np.delete(np.arange(n), i)
        negatives = rng.choice(others, size=pool_size - 1, replace=False)
        pool = np.concatenate([[i], negatives])
        d = np.linalg.norm(t_emb[pool] - m_emb[i][None, :], axis=1)
        order = pool[np.argsort(d, kind="stable")]
        if i in order[:top]:
            hits += 1
    return hits / n


def evaluate_suite(real: FeatureSet, gen: FeatureSet, text: FeatureSet,
                   per_text_sets: list[np.ndarray] | None = None,
                   repetitions: int = EVAL_REPETITIONS,
                   base_seed: int = 0) -> dict:
    """One evaluation row: FID, pooled retrieval at both pool sizes, matching
    distance, diversity, and within-text diversity, as mean +/- std over
    seeded repetitions. Pools larger than the split are clamped and flagged."""
    rows: list[dict] = []
    clamp_notes: set = set()
    for rep in range(repetitions):
        seed = base_seed + rep
        row = {"fid": fid(real, gen)}
        for b in (32, 256):
            eff = min(b, gen.n)
            if eff != b:
                clamp_notes.add(f"pool {b} clamped to {eff}")
            for top in (1, 2, 3):
                key = f"r_precision_{b}_top{top}"
                row[key] = r_precision(text, gen, pool_size=eff, top=top,
                                       seed=seed)
        row["matching_score"] = matching_score(text, gen)
        row["diversity"] = diversity(gen, seed=seed)
        row["diversity_real"] = diversity(real, seed=seed)
        if per_text_sets is not None:
            row["mmodality"] = mmodality(per_text_sets)
        rows.append(row)
    report: dict = {}
    for key in rows[0]:
        vals = np.array([r[key] for r in rows])
        report[key] = (float(vals.mean()), float(vals.std()))
    report["notes"] = sorted(clamp_notes)
    report["repetitions"] = repetitions
    return report


def format_report(report: dict, system: str, extractor: str) -> str:
    """Delimited text block in the headline column order."""
    cols = ["fid",
            "r_precision_256_top1", "r_precision_256_top2", "r_precision_256_top3",
            "r_precision_32_top1", "r_precision_32_top2", "r_precision_32_top3",
            "matching_score", "mmodality", "diversity", "diversity_real"]
    header = ("system\textractor\t"
              + "\t".join(c for c in cols if c in report) + "\n")
    cells = [system, extractor]
    for c in cols:
        if c in report:
            mean, std = report[c]
            cells.append(f"{mean:.4f}+/-{std:.4f}")
    lines = header + "\t".join(cells) + "\n"
    for note in report.get("notes", []):
        lines += f"# note: {note}\n"
    lines += (f"# retrieval extractor: {extractor} for both pool sizes "
              f"(32 and 256); repetitions={report.get('repetitions')}\n")
    return lines
