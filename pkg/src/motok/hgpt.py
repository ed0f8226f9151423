"""Causal transformer over interleaved body/hand code indices.

Stream grammar: each super-step carries two body tokens then one hand token
([B, B, H] at the hand-rate grid); a stream terminates with an End pair
(End_B then End_H). The first transformer input is a projected text embedding,
and every position's output distribution is restricted to the token range
that is admissible there, so the body/hand factorization stays normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GPTConfig
from .gradcore import (NEG_INF, AdamW, Tape, Tensor, cross_entropy, nn, ops)


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class TokenVocabulary:
    body_size: int
    hand_size: int

    @property
    def end_body(self) -> int:
        return self.body_size + self.hand_size

    @property
    def end_hand(self) -> int:
        return self.body_size + self.hand_size + 1

    @property
    def total(self) -> int:
        return self.body_size + self.hand_size + 2

    def hand_token(self, hand_index: int) -> int:
        return self.body_size + hand_index

    def decode_token(self, token: int) -> tuple[str, int]:
        if 0 <= token < self.body_size:
            return "body", token
        if self.body_size <= token < self.body_size + self.hand_size:
            return "hand", token - self.body_size
        if token == self.end_body:
            return "end_body", 0
        if token == self.end_hand:
            return "end_hand", 0
        raise StreamError(f"token {token} outside vocabulary of {self.total}")


def build_stream(idx_body: np.ndarray, idx_hand: np.ndarray,
                 vocab: TokenVocabulary) -> np.ndarray:
    """[B, B, H] per super-step, then the End pair."""
    idx_body = np.asarray(idx_body, dtype=np.int64)
    idx_hand = np.asarray(idx_hand, dtype=np.int64)
    if len(idx_body) != 2 * len(idx_hand):
        raise StreamError(f"need |body| = 2|hand|, got {len(idx_body)} and "
                          f"{len(idx_hand)}")
    n = len(idx_hand)
    stream = np.empty(3 * n + 2, dtype=np.int64)
    stream[0:3 * n:3] = idx_body[0::2]
    stream[1:3 * n:3] = idx_body[1::2]
    stream[2:3 * n:3] = idx_hand + vocab.body_size
    stream[3 * n] = vocab.end_body
    stream[3 * n + 1] = vocab.end_hand
    return stream


def parse_stream(stream: np.ndarray, vocab: TokenVocabulary) \
        -> tuple[np.ndarray, np.ndarray, bool]:
    """Inverse of build_stream; stops at the first End pair. Returns
    (body indices, hand indices, terminated). Streams that stop cleanly at a
    super-step boundary without an End pair parse as truncated."""
    stream = np.asarray(stream, dtype=np.int64)
    body, hand = [], []
    pos = 0
    while pos < len(stream):
        kind, value = vocab.decode_token(int(stream[pos]))
        r = pos % 3
        if kind == "end_body":
            if r != 0:
                raise StreamError(f"End_B at position {pos} is not on a "
                                  f"super-step boundary")
            if pos + 1 >= len(stream):
                raise StreamError(f"End_B at position {pos} lacks its End_H")
            nxt, _ = vocab.decode_token(int(stream[pos + 1]))
            if nxt != "end_hand":
                raise StreamError(f"position {pos + 1}: expected End_H after "
                                  f"End_B, found {nxt}")
            return np.array(body, dtype=np.int64), np.array(hand, dtype=np.int64), True
        expected = "body" if r in (0, 1) else "hand"
        if kind != expected:
            raise StreamError(f"position {pos}: expected a {expected} token, "
                              f"found {kind}")
        (body if kind == "body" else hand).append(value)
        pos += 1
    if len(body) != 2 * len(hand):
        raise StreamError("stream ends mid super-step")
    return np.array(body, dtype=np.int64), np.array(hand, dtype=np.int64), False


def causal_mask(t: int) -> np.ndarray:
    return nn.causal_mask(t)


def admissible_mask(vocab: TokenVocabulary, positions: int,
                    prev_tokens: np.ndarray,
                    force_end_super: int | None = None) -> np.ndarray:
    """Additive (B, positions, V) mask of the admissible vocabulary range per
    prediction position.

    ``prev_tokens[b, i]`` is the token preceding prediction position ``i``
    (-1 when the predecessor is the text embedding). After End_B only End_H is
    admissible; position i mod 3 selects body/body/hand ranges; when
    ``force_end_super`` is set, the super-step at that index admits only End_B
    (how enumeration and length-capped sampling stay normalized).
    """
    b = prev_tokens.shape[0]
    v = vocab.total
    mask = np.full((b, positions, v), NEG_INF)
    body = slice(0, vocab.body_size)
    hand = slice(vocab.body_size, vocab.body_size + vocab.hand_size)
    for i in range(positions):
        r = i % 3
        for row in range(b):
            prev = prev_tokens[row, i]
            if prev == vocab.end_body:
                mask[row, i, vocab.end_hand] = 0.0
            elif prev == vocab.end_hand:
                # past the end; teacher-forced padding, loss-masked anyway
                mask[row, i, vocab.end_hand] = 0.0
            elif r == 0:
                if force_end_super is not None and i == 3 * force_end_super:
                    mask[row, i, vocab.end_body] = 0.0
                else:
                    mask[row, i, body] = 0.0
                    mask[row, i, vocab.end_body] = 0.0
            elif r == 1:
                mask[row, i, body] = 0.0
            else:
                mask[row, i, hand] = 0.0
    return mask


class HierarchicalGPT(nn.Module):
    def __init__(self, rng, vocab: TokenVocabulary, text_dim: int, cfg: GPTConfig):
        self.cfg = cfg
        self.vocab = vocab
        self.tok_emb = nn.Embedding(rng, vocab.total, cfg.width)
        self.pos_emb = nn.Embedding(rng, cfg.max_stream_length + 1, cfg.width)
        self.text_proj = nn.Linear(rng, text_dim, cfg.width)
        self.stack = nn.TransformerStack(rng, cfg.layers, cfg.width, cfg.heads)
        self.head = nn.Linear(rng, cfg.width, vocab.total)

    def forward(self, text_emb, input_tokens: np.ndarray) -> Tensor:
        """Logits for stream positions 0..T: the text embedding occupies input
        position 0 and ``input_tokens`` (B, T) are the teacher-forced prefix."""
        text_emb = text_emb if isinstance(text_emb, Tensor) else Tensor(text_emb)
        b = text_emb.shape[0]
        t = input_tokens.shape[1] if input_tokens.size else 0
        if t + 1 > self.cfg.max_stream_length + 1:
            raise StreamError(f"stream of {t + 1} exceeds maximum length "
                              f"{self.cfg.max_stream_length}")
        txt = ops.reshape(self.text_proj(text_emb), (b, 1, self.cfg.width))
        if t:
            seq = ops.concat([txt, self.tok_emb(input_tokens)], axis=1)
        else:
            seq = txt
        seq = ops.add(seq, self.pos_emb(np.arange(t + 1)))
        h = self.stack(seq, nn.causal_mask(t + 1))
        return self.head(h)                       # (B, T+1, V)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def stream_batch(streams: list[np.ndarray], vocab: TokenVocabulary) \
        -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pad streams with End_H; returns (targets, inputs, weights, prev)."""
    b = len(streams)
    s_max = max(len(s) for s in streams)
    targets = np.full((b, s_max), vocab.end_hand, dtype=np.int64)
    weights = np.zeros((b, s_max))
    for i, s in enumerate(streams):
        targets[i, :len(s)] = s
        weights[i, :len(s)] = 1.0
    prev = np.full((b, s_max), -1, dtype=np.int64)
    prev[:, 1:] = targets[:, :-1]
    inputs = targets[:, :-1]
    return targets, inputs, weights, prev


def masked_ce(logits: Tensor, targets: np.ndarray, weights: np.ndarray,
              adm: np.ndarray) -> Tensor:
    b, s, v = logits.shape
    flat = ops.reshape(ops.add_mask(logits, adm), (b * s, v))
    return cross_entropy(flat, targets.reshape(-1), weights.reshape(-1))


def gpt_ce_loss(model: HierarchicalGPT, text_embs: np.ndarray,
                streams: list[np.ndarray]) -> tuple[Tensor, Tensor, dict]:
    targets, inputs, weights, prev = stream_batch(streams, model.vocab)
    logits = model.forward(text_embs, inputs)
    adm = admissible_mask(model.vocab, targets.shape[1], prev)
    return logits, masked_ce(logits, targets, weights, adm), {
        "positions": float(weights.sum())}


def soft_decode_latents(logits: Tensor, vocab: TokenVocabulary,
                        n_super: int, book_body: np.ndarray,
                        book_hand: np.ndarray) -> tuple[Tensor, Tensor]:
    """Probability-weighted codebook rows from teacher-forced logits.

    Body slots use the body code range of positions {3s, 3s+1}; hand slots the
    hand range at {3s+2}. Returns differentiable (B, D, 2n) and (B, D, n)
    latent streams ready for the decoder.
    """
    b = logits.shape[0]
    grid = ops.slice_(logits, (slice(None), slice(0, 3 * n_super)))
    grid = ops.reshape(grid, (b, n_super, 3, vocab.total))
    body_logits = ops.slice_(grid, (slice(None), slice(None), slice(0, 2),
                                    slice(0, vocab.body_size)))
    hand_logits = ops.slice_(grid, (slice(None), slice(None), slice(2, 3),
                                    slice(vocab.body_size,
                                          vocab.body_size + vocab.hand_size)))
    p_body = ops.softmax(ops.reshape(body_logits, (b, 2 * n_super, vocab.body_size)),
                         axis=-1)
    p_hand = ops.softmax(ops.reshape(hand_logits, (b, n_super, vocab.hand_size)),
                         axis=-1)
    zb = ops.matmul(ops.reshape(p_body, (b * 2 * n_super, vocab.body_size)),
                    Tensor(book_body))
    zh = ops.matmul(ops.reshape(p_hand, (b * n_super, vocab.hand_size)),
                    Tensor(book_hand))
    d = book_body.shape[1]
    zb = ops.transpose(ops.reshape(zb, (b, 2 * n_super, d)), (0, 2, 1))
    zh = ops.transpose(ops.reshape(zh, (b, n_super, d)), (0, 2, 1))
    return zb, zh


def gpt_train_step(model: HierarchicalGPT, text_embs: np.ndarray,
                   streams: list[np.ndarray], texts: list[str], opt: AdamW,
                   codec=None, tmr_model=None) -> dict:
    """Teacher-forced cross-entropy plus the weighted text-motion alignment
    term (InfoNCE between frozen text embeddings and the frozen motion-encoder
    embedding of the soft-decoded prediction)."""
    from .tmr import alignment_loss

    eta = model.cfg.eta
    with Tape() as tape:
        logits, l_ce, _ = gpt_ce_loss(model, text_embs, streams)
        if eta != 0.0:
            if codec is None or tmr_model is None:
                raise StreamError("alignment loss requires frozen codec and "
                                  "retrieval model")
            n_min = min((len(s) - 2) // 3 for s in streams)
            zb, zh = soft_decode_latents(logits, model.vocab, n_min,
                                         codec.book_body.entries,
                                         codec.book_hand.entries)
            recon = codec.decode_soft(zb, zh)             # (B, d_bh, L) codec space
            feats = ops.transpose(recon, (0, 2, 1))       # (B, L, d_bh)
            stats = codec.stats
            codec_mean = np.concatenate([stats.mean_b, stats.mean_h])
            codec_std = np.concatenate([stats.std_b, stats.std_h])
            raw = ops.add(ops.multiply(feats, Tensor(codec_std)), Tensor(codec_mean))
            tmr_feats = ops.multiply(ops.sub(raw, Tensor(tmr_model.norm_mean)),
                                     Tensor(1.0 / tmr_model.norm_std))
            lengths = np.full(len(streams), feats.shape[1])
            l_align = alignment_loss(tmr_model, texts, tmr_feats, lengths)
            total = ops.add(l_ce, ops.scale(l_align, eta))
        else:
            l_align = Tensor(0.0)
            total = l_ce
    values = {"total": float(total.data), "ce": float(l_ce.data),
              "align": float(l_align.data)}
    if not np.isfinite(total.data):
        raise StreamError(f"non-finite loss: {values}")
    opt.zero_grad()
    tape.backward(total)
    opt.step()
    return values


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, step)))


def train_gpt(token_streams: list[np.ndarray], text_embs: np.ndarray,
              texts: list[str], vocab: TokenVocabulary, cfg: GPTConfig,
              seed: int, steps: int, codec=None, tmr_model=None,
              model: HierarchicalGPT | None = None, opt: AdamW | None = None,
              start_step: int = 0):
    """Token streams, their text embeddings, and raw texts come precomputed
    from the frozen codec and retrieval model."""
    if model is None:
        init_rng = _step_rng(seed, 2 ** 32 - 1)
        model = HierarchicalGPT(init_rng, vocab, text_embs.shape[1], cfg)
        model.name_parameters()
    if opt is None:
        opt = AdamW(model.parameters(), lr=cfg.learning_rate)
    history = []
    n = len(token_streams)
    for step in range(start_step, steps):
        rng = _step_rng(seed, step)
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        history.append(gpt_train_step(
            model, text_embs[idx], [token_streams[i] for i in idx],
            [texts[i] for i in idx], opt, codec=codec, tmr_model=tmr_model))
    return model, opt, history


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def admissible_row(vocab: TokenVocabulary, position: int, prev_token: int,
                   force_end_super: int | None = None,
                   min_super_steps: int = 0) -> np.ndarray:
    """Additive mask of the admissible range at one prediction position."""
    row = np.full(vocab.total, NEG_INF)
    if prev_token == vocab.end_body:
        row[vocab.end_hand] = 0.0
        return row
    r = position % 3
    if r == 0:
        s = position // 3
        if force_end_super is not None and s >= force_end_super:
            row[vocab.end_body] = 0.0
        else:
            row[0:vocab.body_size] = 0.0
            if s >= min_super_steps:
                row[vocab.end_body] = 0.0
    elif r == 1:
        row[0:vocab.body_size] = 0.0
    else:
        row[vocab.body_size:vocab.body_size + vocab.hand_size] = 0.0
    return row


def sample(model: HierarchicalGPT, text_emb: np.ndarray,
           max_super_steps: int, rng: np.random.Generator,
           temperature: float | None = None, top_k: int | None = None,
           min_super_steps: int = 0) -> tuple[np.ndarray, np.ndarray, bool]:
    """Autoregressive categorical sampling restricted to admissible ranges.

    Stops at the End pair or after ``max_super_steps``; ``min_super_steps``
    masks End_B earlier (used for length-conditioned generation). Temperature
    0 is greedy argmax. Returns (body indices, hand indices, terminated).
    """
    cfg = model.cfg
    vocab = model.vocab
    temperature = cfg.temperature if temperature is None else temperature
    top_k = cfg.top_k if top_k is None else top_k
    max_super_steps = min(max_super_steps, (cfg.max_stream_length - 2) // 3)
    min_super_steps = min(min_super_steps, max_super_steps)

    tokens: list[int] = []
    text_emb = np.asarray(text_emb)
    if text_emb.ndim == 1:
        text_emb = text_emb[None]
    while True:
        i = len(tokens)
        prev = -1 if i == 0 else tokens[-1]
        adm = admissible_row(vocab, i, prev, force_end_super=max_super_steps,
                             min_super_steps=min_super_steps)
        inputs = np.array(tokens, dtype=np.int64)[None] if tokens \
            else np.zeros((1, 0), dtype=np.int64)
        logits = model.forward(text_emb, inputs).data[0, -1] + adm
        if temperature <= 0.0:
            choice = int(np.argmax(logits))
        else:
            scaled = logits / temperature
            if top_k and top_k > 0:
                kth = np.sort(scaled)[-top_k]
                scaled = np.where(scaled < kth, NEG_INF, scaled)
            p = np.exp(scaled - scaled.max())
            p /= p.sum()
            choice = int(rng.choice(len(p), p=p))
        tokens.append(choice)
        if choice == vocab.end_hand:
            break
    body, hand, terminated = parse_stream(np.array(tokens), vocab)
    return body, hand, terminated
