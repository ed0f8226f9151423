"""Text-conditioned variational generation of facial coefficient sequences.

A facial encoder and a face-text encoder produce latent Gaussians whose
four-way KL coupling ties the two posteriors to each other and to the prior;
the decoder turns a latent draw plus positional queries into an (L, 50)
coefficient sequence of exactly the requested length.
"""

from __future__ import annotations

import numpy as np

from .config import FaceConfig
from .gradcore import AdamW, Tape, Tensor, gaussian_kl, nn, ops, smooth_l1_loss
from .latentseq import (MAX_MOTION_LEN, DistributionEncoder, LatentGaussian,
                        SequenceDecoder, masked_smooth_l1)
from .motionrep import FACE_DIM, MotionLayout, MotionRepr, merge_parts
from .tmr import TextTokenizer


class FaceError(RuntimeError):
    pass


class FaceModel(nn.Module):
    def __init__(self, rng, vocab_size: int, cfg: FaceConfig,
                 max_text_len: int = 24):
        self.cfg = cfg
        self.face_proj = nn.Linear(rng, FACE_DIM, cfg.width)
        self.face_enc = DistributionEncoder(rng, cfg.width, cfg.heads,
                                            cfg.layers, cfg.latent_dim,
                                            MAX_MOTION_LEN)
        self.token_emb = nn.Embedding(rng, vocab_size, cfg.width)
        self.text_enc = DistributionEncoder(rng, cfg.width, cfg.heads,
                                            cfg.layers, cfg.latent_dim,
                                            max_text_len)
        self.decoder = SequenceDecoder(rng, cfg.width, cfg.heads, cfg.layers,
                                       cfg.latent_dim, FACE_DIM)
        self.tokenizer: TextTokenizer | None = None

    def encode_face(self, faces: list[np.ndarray]) -> LatentGaussian:
        b = len(faces)
        lengths = np.array([f.shape[0] for f in faces])
        t = int(lengths.max())
        padded = np.zeros((b, t, FACE_DIM))
        for i, f in enumerate(faces):
            padded[i, :f.shape[0]] = f
        return self.face_enc(self.face_proj(Tensor(padded)), lengths)

    def encode_text(self, texts: list[str]) -> LatentGaussian:
        if self.tokenizer is None:
            raise FaceError("tokenizer not attached")
        ids = [self.tokenizer.encode(t) for t in texts]
        lengths = np.array([len(i) for i in ids])
        t = int(lengths.max())
        padded = np.zeros((len(ids), t), dtype=np.int64)
        for i, row in enumerate(ids):
            padded[i, :len(row)] = row
        return self.text_enc(self.token_emb(padded), lengths)


def face_train_step(model: FaceModel, texts: list[str],
                    faces: list[np.ndarray], opt: AdamW,
                    rng: np.random.Generator) -> dict:
    """Reconstruction (both latent paths), the four-term KL, and the latent
    similarity term, at their configured weights."""
    cfg = model.cfg
    lengths = np.array([f.shape[0] for f in faces])
    t_max = int(lengths.max())
    target = np.zeros((len(faces), t_max, FACE_DIM))
    for i, f in enumerate(faces):
        target[i, :f.shape[0]] = f

    with Tape() as tape:
        lat_f = model.encode_face(faces)
        lat_t = model.encode_text(texts)
        z_f = lat_f.sample(rng)
        z_t = lat_t.sample(rng)
        rec_f = masked_smooth_l1(model.decoder(z_f, t_max, lengths), target, lengths)
        rec_t = masked_smooth_l1(model.decoder(z_t, t_max, lengths), target, lengths)
        l_rec = ops.scale(ops.add(rec_f, rec_t), 0.5)
        l_kl = four_term_kl(lat_f, lat_t)
        l_e = smooth_l1_loss(z_f, z_t)
        total = ops.add(l_rec, ops.add(ops.scale(l_kl, cfg.lambda_kl),
                                       ops.scale(l_e, cfg.lambda_e)))
    values = {"total": float(total.data), "rec": float(l_rec.data),
              "kl": float(l_kl.data), "emb": float(l_e.data)}
    if not np.isfinite(total.data):
        raise FaceError(f"non-finite loss: {values}")
    opt.zero_grad()
    tape.backward(total)
    opt.step()
    return values


def four_term_kl(lat_f: LatentGaussian, lat_t: LatentGaussian) -> Tensor:
    """KL(F||prior) + KL(T||prior) + KL(F||T) + KL(T||F)."""
    return ops.add(
        ops.add(gaussian_kl(lat_f.mu, lat_f.logvar),
                gaussian_kl(lat_t.mu, lat_t.logvar)),
        ops.add(gaussian_kl(lat_f.mu, lat_f.logvar, lat_t.mu, lat_t.logvar),
                gaussian_kl(lat_t.mu, lat_t.logvar, lat_f.mu, lat_f.logvar)))


def generate_face(model: FaceModel, text: str, length: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Sample z from the text posterior and decode exactly ``length`` frames."""
    if length < 1:
        raise FaceError(f"length must be >= 1, got {length}")
    if length > MAX_MOTION_LEN:
        raise FaceError(f"length {length} exceeds maximum {MAX_MOTION_LEN}")
    lat = model.encode_text([text])
    z = lat.sample(rng)
    out = model.decoder(z, length, np.array([length]))
    return out.data[0].copy()


def assemble_whole_body(body_hand: np.ndarray, face: np.ndarray,
                        layout: MotionLayout) -> MotionRepr:
    """Merge decoded body-hand channels with a generated face sequence."""
    body_hand = np.asarray(body_hand)
    face = np.asarray(face)
    if body_hand.shape[0] != face.shape[0]:
        raise FaceError(f"length mismatch: body-hand {body_hand.shape[0]} vs "
                        f"face {face.shape[0]}")
    if body_hand.shape[1] != layout.d_b + layout.d_h:
        raise FaceError(f"body-hand width {body_hand.shape[1]} != "
                        f"{layout.d_b + layout.d_h}")
    return merge_parts(body_hand[:, :layout.d_b], body_hand[:, layout.d_b:],
                       face, layout)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, step)))


def train_face(items, cfg: FaceConfig, seed: int, steps: int,
               model: FaceModel | None = None, opt: AdamW | None = None,
               start_step: int = 0):
    train = [it for it in items if it.split == "train"] or items
    layout = train[0].repr.layout
    faces = [it.repr.frames[:, layout.face_cols] for it in train]
    texts = [it.text for it in train]
    if model is None:
        init_rng = _step_rng(seed, 2 ** 32 - 1)
        tokenizer = TextTokenizer(texts)
        model = FaceModel(init_rng, tokenizer.size, cfg)
        model.tokenizer = tokenizer
        model.name_parameters()
    if opt is None:
        opt = AdamW(model.parameters(), lr=cfg.learning_rate)
    history = []
    for step in range(start_step, steps):
        rng = _step_rng(seed, step)
        idx = rng.choice(len(train), size=min(cfg.batch_size, len(train)),
                         replace=False)
        history.append(face_train_step(model, [texts[i] for i in idx],
                                       [faces[i] for i in idx], opt, rng))
    return model, opt, history


def face_blocks(model: FaceModel, opt: AdamW | None = None) -> dict:
    blocks = dict(model.state_dict())
    if opt is not None:
        blocks.update(opt.state_blocks())
    return blocks


def face_vocab_payload(model: FaceModel) -> dict:
    return {"vocab": model.tokenizer.vocab, "max_len": model.tokenizer.max_len}


def face_from_blocks(blocks: dict, vocab_payload: dict, cfg: FaceConfig) -> FaceModel:
    model = FaceModel(np.random.default_rng(0), len(vocab_payload["vocab"]) + 1, cfg)
    tok = TextTokenizer([], max_len=vocab_payload["max_len"])
    tok.vocab = {str(k): int(v) for k, v in vocab_payload["vocab"].items()}
    model.tokenizer = tok
    model.load_state_dict(blocks)
    model.name_parameters()
    return model
