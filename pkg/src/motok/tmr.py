"""Contrastive text-motion retrieval pre-training.

A text encoder and a motion encoder map into a shared latent Gaussian space;
training combines sequence reconstruction (through a shared motion decoder),
KL regularization, latent similarity, and a filtered InfoNCE. The trained text
embedding conditions the token generator, the motion embedding scores
generated motions, and both feed the retrieval protocols and the evaluation
metrics.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .config import TMRConfig
from .gradcore import (AdamW, Tape, Tensor, gaussian_kl, infonce, nn, ops,
                       smooth_l1_loss, smooth_l1_raw)
from .latentseq import (MAX_MOTION_LEN, DistributionEncoder, LatentGaussian,
                        SequenceDecoder, masked_smooth_l1)
from .motionrep import MotionLayout, Skeleton, motion_layout


class TMRError(RuntimeError):
    pass


def tokenize_words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


class TextTokenizer:
    """Word-level vocabulary built from the corpus; id 0 is the unknown token."""

    UNK = 0

    def __init__(self, texts, max_len: int = 24):
        words = sorted({w for t in texts for w in tokenize_words(t)})
        self.vocab = {w: i + 1 for i, w in enumerate(words)}
        self.max_len = max_len

    @property
    def size(self) -> int:
        return len(self.vocab) + 1

    def encode(self, text: str) -> np.ndarray:
        if not tokenize_words(text):
            raise TMRError("empty text")
        ids = [self.vocab.get(w, self.UNK) for w in tokenize_words(text)]
        return np.array(ids[:self.max_len], dtype=np.int64)


class SimilarityOracle:
    """Deterministic text-to-text similarity: cosine over term frequencies."""

    def __call__(self, a: str, b: str) -> float:
        ta, tb = tokenize_words(a), tokenize_words(b)
        counts_a: dict[str, int] = {}
        counts_b: dict[str, int] = {}
        for w in ta:
            counts_a[w] = counts_a.get(w, 0) + 1
        for w in tb:
            counts_b[w] = counts_b.get(w, 0) + 1
        dot = sum(c * counts_b.get(w, 0) for w, c in counts_a.items())
        na = np.sqrt(sum(c * c for c in counts_a.values()))
        nb = np.sqrt(sum(c * c for c in counts_b.values()))
        if na == 0 or nb == 0:
            return 0.0
        return float(dot / (na * nb))

    def matrix(self, texts) -> np.ndarray:
        n = len(texts)
        sim = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                sim[i, j] = sim[j, i] = self(texts[i], texts[j])
        return sim


def negative_filter(texts, oracle: SimilarityOracle | None = None,
                    threshold: float = 0.85) -> np.ndarray:
    """Admission mask for InfoNCE negatives: pair (i, j) stays a negative only
    when the text similarity is at or below the threshold; the diagonal is
    always the positive."""
    if len(texts) < 2:
        raise TMRError("negative_filter needs a batch of at least 2")
    oracle = oracle or SimilarityOracle()
    sim = oracle.matrix(texts)
    admit = sim <= threshold
    np.fill_diagonal(admit, True)
    return admit


class TMRModel(nn.Module):
    def __init__(self, rng, vocab_size: int, motion_dim: int, cfg: TMRConfig,
                 heads: int = 4):
        self.cfg = cfg
        self.token_emb = nn.Embedding(rng, vocab_size, cfg.width)
        self.text_enc = DistributionEncoder(rng, cfg.width, heads, cfg.layers,
                                            cfg.latent_dim, cfg.max_text_len)
        self.motion_proj = nn.Linear(rng, motion_dim, cfg.width)
        self.motion_enc = DistributionEncoder(rng, cfg.width, heads, cfg.layers,
                                              cfg.latent_dim, MAX_MOTION_LEN)
        self.decoder = SequenceDecoder(rng, cfg.width, heads, cfg.decoder_layers,
                                     cfg.latent_dim, motion_dim)
        self.tokenizer: TextTokenizer | None = None
        self.norm_mean: np.ndarray | None = None
        self.norm_std: np.ndarray | None = None

    # -- text side ----------------------------------------------------------
    def encode_text_ids(self, ids_batch: list[np.ndarray]) -> LatentGaussian:
        b = len(ids_batch)
        lengths = np.array([len(ids) for ids in ids_batch])
        t = int(lengths.max())
        padded = np.zeros((b, t), dtype=np.int64)
        for i, ids in enumerate(ids_batch):
            padded[i, :len(ids)] = ids
        emb = self.token_emb(padded)
        return self.text_enc(emb, lengths)

    def encode_text(self, texts: list[str]) -> LatentGaussian:
        if self.tokenizer is None:
            raise TMRError("tokenizer not attached")
        return self.encode_text_ids([self.tokenizer.encode(t) for t in texts])

    # -- motion side ---------------------------------------------------------
    def normalize_motion(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.norm_mean) / self.norm_std

    def encode_motion_batch(self, feats: list[np.ndarray]) -> LatentGaussian:
        """Normalized feature sequences (L_i, D) -> batched latent."""
        b = len(feats)
        lengths = np.array([f.shape[0] for f in feats])
        t = int(lengths.max())
        d = feats[0].shape[1]
        padded = np.zeros((b, t, d))
        for i, f in enumerate(feats):
            padded[i, :f.shape[0]] = f
        x = self.motion_proj(Tensor(padded))
        return self.motion_enc(x, lengths)

    def encode_motion_tensor(self, x: Tensor, lengths: np.ndarray) -> LatentGaussian:
        """Differentiable path for already-normalized (B, L, D) tensors."""
        return self.motion_enc(self.motion_proj(x), lengths)


def body_hand_features(frames: np.ndarray, layout: MotionLayout) -> np.ndarray:
    return np.concatenate([frames[:, layout.body_cols],
                           frames[:, layout.hand_cols]], axis=1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def tmr_train_step(model: TMRModel, texts: list[str], feats: list[np.ndarray],
                   opt: AdamW, rng: np.random.Generator,
                   oracle: SimilarityOracle) -> dict:
    cfg = model.cfg
    lengths = np.array([f.shape[0] for f in feats])
    t_max = int(lengths.max())
    d = feats[0].shape[1]
    target = np.zeros((len(feats), t_max, d))
    for i, f in enumerate(feats):
        target[i, :f.shape[0]] = f

    admit = negative_filter(texts, oracle, cfg.negative_threshold) \
        if len(texts) > 1 else None

    with Tape() as tape:
        lat_t = model.encode_text(texts)
        lat_m = model.encode_motion_batch(feats)
        z_t = lat_t.sample(rng)
        z_m = lat_m.sample(rng)

        rec_t = masked_smooth_l1(model.decoder(z_t, t_max, lengths), target, lengths)
        rec_m = masked_smooth_l1(model.decoder(z_m, t_max, lengths), target, lengths)
        l_rec = ops.add(rec_t, rec_m)

        l_kl = ops.add(
            ops.add(gaussian_kl(lat_m.mu, lat_m.logvar),
                    gaussian_kl(lat_t.mu, lat_t.logvar)),
            ops.add(gaussian_kl(lat_m.mu, lat_m.logvar, lat_t.mu, lat_t.logvar),
                    gaussian_kl(lat_t.mu, lat_t.logvar, lat_m.mu, lat_m.logvar)))
        l_e = smooth_l1_loss(z_t, z_m)
        if admit is not None:
            l_nce = infonce(z_t, z_m, cfg.nce_temperature, admit)
        else:
            l_nce = Tensor(0.0)
        total = ops.add(
            ops.add(l_rec, ops.scale(l_kl, cfg.lambda_kl)),
            ops.add(ops.scale(l_e, cfg.lambda_e), ops.scale(l_nce, cfg.lambda_nce)))
    values = {"total": float(total.data), "rec": float(l_rec.data),
              "kl": float(l_kl.data), "emb": float(l_e.data),
              "nce": float(l_nce.data)}
    if not np.isfinite(total.data):
        raise TMRError(f"non-finite loss: {values}")
    opt.zero_grad()
    tape.backward(total)
    opt.step()
    return values


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, step)))


def train_tmr(items, skel: Skeleton, cfg: TMRConfig, seed: int, steps: int,
              model: TMRModel | None = None, opt: AdamW | None = None,
              start_step: int = 0):
    layout = motion_layout(skel)
    train = [it for it in items if it.split == "train"] or items
    if model is None:
        init_rng = _step_rng(seed, 2 ** 32 - 1)
        tokenizer = TextTokenizer([it.text for it in train],
                                  max_len=cfg.max_text_len)
        feats_all = np.concatenate(
            [body_hand_features(it.repr.frames, layout) for it in train])
        mean, std = feats_all.mean(axis=0), feats_all.std(axis=0)
        std[std < 1e-6] = 1.0
        model = TMRModel(init_rng, tokenizer.size, feats_all.shape[1], cfg)
        model.tokenizer = tokenizer
        model.norm_mean, model.norm_std = mean, std
        model.name_parameters()
    if opt is None:
        opt = AdamW(model.parameters(), lr=cfg.learning_rate)
    oracle = SimilarityOracle()
    cached = [model.normalize_motion(body_hand_features(it.repr.frames, layout))
              for it in train]
    history = []
    for step in range(start_step, steps):
        rng = _step_rng(seed, step)
        idx = rng.choice(len(train), size=min(cfg.batch_size, len(train)),
                         replace=False)
        texts = [train[i].text for i in idx]
        feats = [cached[i] for i in idx]
        history.append(tmr_train_step(model, texts, feats, opt, rng, oracle))
    return model, opt, history


# ---------------------------------------------------------------------------
# frozen-model services
# ---------------------------------------------------------------------------

def text_prior(model: TMRModel, text: str) -> np.ndarray:
    """Evaluation-mode text embedding (the latent mean) for conditioning."""
    return model.encode_text([text]).mu.data[0].copy()


def motion_embeddings(model: TMRModel, feats: list[np.ndarray]) -> np.ndarray:
    return model.encode_motion_batch(feats).mu.data.copy()


def text_embeddings(model: TMRModel, texts: list[str]) -> np.ndarray:
    return model.encode_text(texts).mu.data.copy()


def alignment_loss(model: TMRModel, texts: list[str], motion_batch: Tensor,
                   lengths: np.ndarray,
                   threshold: float | None = None) -> Tensor:
    """Masked InfoNCE between frozen text embeddings and the (differentiable)
    motion embeddings of the supplied normalized feature sequences."""
    if any(p.requires_grad for p in model.parameters()):
        raise TMRError("alignment_loss requires a frozen model "
                       "(call set_trainable(False))")
    threshold = model.cfg.negative_threshold if threshold is None else threshold
    text_emb = Tensor(text_embeddings(model, texts))
    lat = model.encode_motion_tensor(motion_batch, lengths)
    admit = negative_filter(texts, threshold=threshold) if len(texts) > 1 else None
    return infonce(text_emb, lat.mu, model.cfg.nce_temperature, admit)


# ---------------------------------------------------------------------------
# retrieval protocols
# ---------------------------------------------------------------------------

def recall_table(rank_ok: np.ndarray, ks) -> dict:
    return {k: float(rank_ok[:, :k].any(axis=1).mean()) for k in ks}


def retrieval_eval(model: TMRModel, items, skel: Skeleton, protocol: str,
                   pool_seed: int = 0, ks=(1, 2, 3, 5, 10),
                   epsilon: float | None = None) -> dict:
    """Recall@K for text-to-motion and motion-to-text retrieval.

    A: full-split ranking. B: full-split ranking where any candidate whose
    text the oracle scores above epsilon against the query's text counts as
    correct. C/D: pools of one ground truth plus 255/31 seeded negatives.
    """
    protocol = protocol.upper()
    if protocol not in "ABCD":
        raise TMRError(f"unknown protocol '{protocol}'")
    layout = motion_layout(skel)
    texts = [it.text for it in items]
    feats = [model.normalize_motion(body_hand_features(it.repr.frames, layout))
             for it in items]
    t_emb = text_embeddings(model, texts)
    m_emb = motion_embeddings(model, feats)
    n = len(items)

    pool_size = {"C": 256, "D": 32}.get(protocol)
    if pool_size is not None and n < pool_size:
        raise TMRError(f"protocol {protocol} needs at least {pool_size} items, "
                       f"split has {n}")

    dist = np.linalg.norm(t_emb[:, None, :] - m_emb[None, :, :], axis=2)

    oracle = SimilarityOracle()
    eps = model.cfg.protocol_b_epsilon if epsilon is None else epsilon

    def full_ranks(d, accept_oracle: bool) -> np.ndarray:
        order = np.argsort(d, axis=1, kind="stable")
        max_k = max(ks)
        ok = np.zeros((n, max_k), dtype=bool)
        for i in range(n):
            for pos in range(max_k):
                j = order[i, pos]
                if j == i:
                    ok[i, pos] = True
                elif accept_oracle and oracle(texts[j], texts[i]) > eps:
                    ok[i, pos] = True
        return ok

    def pooled_ranks(d, size: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence((pool_seed, size)))
        max_k = max(ks)
        ok = np.zeros((n, max_k), dtype=bool)
        for i in range(n):
            others = np.delete(np.arange(n), i)
            negatives = rng.choice(others, size=size - 1, replace=False)
            pool = np.concatenate([[i], negatives])
            order = pool[np.argsort(d[i, pool], kind="stable")]
            hits = order[:max_k] == i
            ok[i, :len(hits)] = hits
        return ok

    results = {}
    for direction, d in (("t2m", dist), ("m2t", dist.T)):
        if protocol == "A":
            ok = full_ranks(d, accept_oracle=False)
        elif protocol == "B":
            ok = full_ranks(d, accept_oracle=True)
        else:
            ok = pooled_ranks(d, pool_size)
        results[direction] = recall_table(ok, ks)
    return results


# ---------------------------------------------------------------------------
# checkpoint bridging
# ---------------------------------------------------------------------------

def tmr_blocks(model: TMRModel, opt: AdamW | None = None) -> dict:
    blocks = dict(model.state_dict())
    blocks["norm.mean"] = model.norm_mean
    blocks["norm.std"] = model.norm_std
    if opt is not None:
        blocks.update(opt.state_blocks())
    return blocks


def tmr_vocab_payload(model: TMRModel) -> dict:
    return {"vocab": model.tokenizer.vocab, "max_len": model.tokenizer.max_len}


def tmr_from_blocks(blocks: dict, vocab_payload: dict, motion_dim: int,
                    cfg: TMRConfig) -> TMRModel:
    model = TMRModel(np.random.default_rng(0), len(vocab_payload["vocab"]) + 1,
                     motion_dim, cfg)
    tok = TextTokenizer([], max_len=vocab_payload["max_len"])
    tok.vocab = {str(k): int(v) for k, v in vocab_payload["vocab"].items()}
    model.tokenizer = tok
    model.load_state_dict(blocks)
    model.name_parameters()
    model.norm_mean = np.array(blocks["norm.mean"])
    model.norm_std = np.array(blocks["norm.std"])
    return model
