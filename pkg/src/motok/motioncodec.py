"""Motion autoencoders over body-hand feature streams: a single-codebook
baseline, its residual-quantization variant, and the two-codebook hierarchical
codec in which quantized hand codes are fused into the body encoding before
body quantization.

All codecs consume channel-normalized [body | hand] features laid out as
(B, C, T) and emit reconstructions of the same shape. Temporal rates: the body
branch compresses 2x and the hand branch 4x; baselines compress 4x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CodecConfig
from .gradcore import AdamW, Tape, Tensor, mse_loss, nn, ops
from .motionrep import MotionLayout, MotionRepr, Skeleton, merge_parts, motion_layout
from .quantize import (Codebook, assign_codes, code_reset, ema_update,
                       init_codebook, quantize, rvq_apply)


class CodecError(RuntimeError):
    pass


@dataclass
class ChannelStats:
    mean_b: np.ndarray
    std_b: np.ndarray
    mean_h: np.ndarray
    std_h: np.ndarray


def compute_channel_stats(items, layout: MotionLayout) -> ChannelStats:
    body = np.concatenate([it.repr.frames[:, layout.body_cols] for it in items])
    hand = np.concatenate([it.repr.frames[:, layout.hand_cols] for it in items])

    def _stats(x):
        mean, std = x.mean(axis=0), x.std(axis=0)
        std = np.where(std < 1e-6, 1.0, std)
        return mean, std

    mb, sb = _stats(body)
    mh, sh = _stats(hand)
    return ChannelStats(mb, sb, mh, sh)


class ConvEncoder(nn.Module):
    """Strided 1-D convolution stack; each stage halves the frame rate and is
    followed by residual blocks."""

    def __init__(self, rng, in_channels: int, width: int, out_channels: int,
                 stages: int, res_blocks: int):
        self.conv_in = nn.Conv1d(rng, in_channels, width, 3, padding=1)
        self.stages = []
        for _ in range(stages):
            stage = [nn.Conv1d(rng, width, width, 4, stride=2, padding=1)]
            stage += [nn.ResConv1dBlock(rng, width) for _ in range(res_blocks)]
            self.stages.append(stage)
        self.conv_out = nn.Conv1d(rng, width, out_channels, 3, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.relu(self.conv_in(x))
        for stage in self.stages:
            for layer in stage:
                h = layer(h)
        return self.conv_out(h)

    def named_parameters(self, prefix: str = ""):
        yield from self.conv_in.named_parameters(prefix + "conv_in.")
        for i, stage in enumerate(self.stages):
            for j, layer in enumerate(stage):
                yield from layer.named_parameters(f"{prefix}stages.{i}.{j}.")
        yield from self.conv_out.named_parameters(prefix + "conv_out.")


class ConvDecoder(nn.Module):
    """Mirror of the encoder: residual blocks, nearest 2x upsampling, a
    convolution, and a trailing residual block per stage (the trailing block
    smooths the upsampling stair-steps before the next stage)."""

    def __init__(self, rng, in_channels: int, width: int, out_channels: int,
                 stages: int, res_blocks: int):
        self.conv_in = nn.Conv1d(rng, in_channels, width, 3, padding=1)
        self.stages = []
        for _ in range(stages):
            stage = [nn.ResConv1dBlock(rng, width) for _ in range(res_blocks)]
            stage.append(nn.Conv1d(rng, width, width, 3, padding=1))
            stage.append(nn.ResConv1dBlock(rng, width))
            self.stages.append(stage)
        self.conv_out = nn.Conv1d(rng, width, out_channels, 3, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.relu(self.conv_in(x))
        for stage in self.stages:
            for layer in stage[:-2]:
                h = layer(h)
            h = ops.upsample_nearest2(h)
            h = ops.relu(stage[-2](h))
            h = stage[-1](h)
        return self.conv_out(h)

    def named_parameters(self, prefix: str = ""):
        yield from self.conv_in.named_parameters(prefix + "conv_in.")
        for i, stage in enumerate(self.stages):
            for j, layer in enumerate(stage):
                yield from layer.named_parameters(f"{prefix}stages.{i}.{j}.")
        yield from self.conv_out.named_parameters(prefix + "conv_out.")


def _stages_for(rate: int) -> int:
    n = int(round(np.log2(rate)))
    if 2 ** n != rate:
        raise CodecError(f"downsample rate {rate} must be a power of two")
    return n


def _flatten_time(x: Tensor) -> Tensor:
    """(B, D, T) -> (B*T, D) keeping batch-major time order."""
    b, d, t = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1)), (b * t, d))


def _unflatten_time(x: Tensor, b: int, t: int) -> Tensor:
    d = x.shape[1]
    return ops.transpose(ops.reshape(x, (b, t, d)), (0, 2, 1))


class H2VQCodec(nn.Module):
    """Hand codes are quantized first, projected, upsampled to the body rate,
    fused with the body encoding, then body codes are quantized. The decoder
    sees the pre-fusion hand codes next to the body codes."""

    def __init__(self, rng, d_b: int, d_h: int, cfg: CodecConfig):
        w, d = cfg.hidden_width, cfg.code_dim
        self.cfg = cfg
        self.d_b, self.d_h = d_b, d_h
        self.enc_hand = ConvEncoder(rng, d_h, w, d, _stages_for(cfg.hand_rate),
                                    cfg.res_blocks)
        self.enc_body = ConvEncoder(rng, d_b, w, w, _stages_for(cfg.body_rate),
                                    cfg.res_blocks)
        self.transform = nn.Conv1d(rng, d, w, 1)
        self.fuse = nn.Conv1d(rng, 2 * w, d, 3, padding=1)
        self.dec = ConvDecoder(rng, 2 * d, w, d_b + d_h,
                               _stages_for(cfg.body_rate), cfg.res_blocks)
        self.book_hand = init_codebook(rng, cfg.codebook_size, d, cfg.ema_lambda)
        self.book_body = init_codebook(rng, cfg.codebook_size, d, cfg.ema_lambda)
        self.stats: ChannelStats | None = None

    def forward_train(self, xb: Tensor, xh: Tensor):
        b, _, L = xb.shape
        if L % self.cfg.hand_rate:
            raise CodecError(f"length {L} not divisible by {self.cfg.hand_rate}")
        l4, l2 = L // self.cfg.hand_rate, L // self.cfg.body_rate

        z_h = self.enc_hand(xh)                          # (B, D, L/4)
        flat_h = _flatten_time(z_h)
        out_h = quantize(flat_h, self.book_hand)
        zq_h = _unflatten_time(out_h.quantized, b, l4)

        proj = self.transform(zq_h)                      # (B, W, L/4)
        up = ops.upsample_nearest2(proj)                 # (B, W, L/2)
        z_b = self.enc_body(xb)                          # (B, W, L/2)
        fused = self.fuse(ops.concat([up, z_b], axis=1))  # (B, D, L/2)
        flat_b = _flatten_time(fused)
        out_b = quantize(flat_b, self.book_body)
        zq_b = _unflatten_time(out_b.quantized, b, l2)

        dec_in = ops.concat([zq_b, ops.upsample_nearest2(zq_h)], axis=1)
        recon = self.dec(dec_in)                         # (B, d_b+d_h, L)
        return recon, out_h, out_b, flat_h, flat_b

    def encode(self, m_b: np.ndarray, m_h: np.ndarray):
        """Normalized parts (L, d_b), (L, d_h) -> (I_H, I_B) index arrays."""
        L = m_b.shape[0]
        if L % self.cfg.hand_rate:
            raise CodecError(f"length {L} not divisible by {self.cfg.hand_rate}")
        xb = Tensor(m_b.T[None])
        xh = Tensor(m_h.T[None])
        _, out_h, out_b, _, _ = self.forward_train(xb, xh)
        return out_h.indices, out_b.indices

    def decode(self, idx_body: np.ndarray, idx_hand: np.ndarray) \
            -> tuple[np.ndarray, np.ndarray]:
        """Query the codebooks with index streams and decode to normalized
        body/hand features of length body_rate * len(idx_body)."""
        idx_body = np.asarray(idx_body)
        idx_hand = np.asarray(idx_hand)
        if len(idx_body) != 2 * len(idx_hand):
            raise CodecError("body stream must be twice the hand stream")
        for idx, book in ((idx_body, self.book_body), (idx_hand, self.book_hand)):
            if idx.size and (idx.min() < 0 or idx.max() >= book.size):
                raise CodecError("code index out of range")
        zq_b = Tensor(self.book_body.entries[idx_body].T[None])
        zq_h = Tensor(self.book_hand.entries[idx_hand].T[None])
        dec_in = ops.concat([zq_b, ops.upsample_nearest2(zq_h)], axis=1)
        recon = self.dec(dec_in).data[0]                 # (d_b+d_h, L)
        return recon[:self.d_b].T, recon[self.d_b:].T

    def decode_soft(self, zq_b: Tensor, zq_h: Tensor) -> Tensor:
        """Differentiable decode from (B, D, L/2), (B, D, L/4) latents."""
        dec_in = ops.concat([zq_b, ops.upsample_nearest2(zq_h)], axis=1)
        return self.dec(dec_in)

    def books(self) -> dict[str, Codebook]:
        return {"hand": self.book_hand, "body": self.book_body}


class VanillaCodec(nn.Module):
    """Single encoder and codebook over the whole body-hand channel stack."""

    def __init__(self, rng, d_b: int, d_h: int, cfg: CodecConfig, levels: int = 1):
        w, d = cfg.hidden_width, cfg.code_dim
        self.cfg = cfg
        self.d_b, self.d_h = d_b, d_h
        stages = _stages_for(cfg.hand_rate)
        self.enc = ConvEncoder(rng, d_b + d_h, w, d, stages, cfg.res_blocks)
        self.dec = ConvDecoder(rng, d, w, d_b + d_h, stages, cfg.res_blocks)
        self.levels = [init_codebook(rng, cfg.codebook_size, d, cfg.ema_lambda)
                       for _ in range(levels)]
        self.stats: ChannelStats | None = None

    def forward_train(self, x: Tensor):
        b, _, L = x.shape
        if L % self.cfg.hand_rate:
            raise CodecError(f"length {L} not divisible by {self.cfg.hand_rate}")
        t = L // self.cfg.hand_rate
        z = self.enc(x)
        flat = _flatten_time(z)
        if len(self.levels) == 1:
            out = quantize(flat, self.levels[0])
            zq = _unflatten_time(out.quantized, b, t)
            recon = self.dec(zq)
            return recon, out.commitment, [(self.levels[0], flat.data, out.indices)]
        idx, quantized, commitment, residual_inputs = rvq_apply(flat, self.levels)
        zq = _unflatten_time(quantized, b, t)
        recon = self.dec(zq)
        ema_jobs = [(book, res, idx[i])
                    for i, (book, res) in enumerate(zip(self.levels, residual_inputs))]
        return recon, commitment, ema_jobs

    def books(self) -> dict[str, Codebook]:
        return {f"level{i}": book for i, book in enumerate(self.levels)}


def build_codec(rng: np.random.Generator, layout: MotionLayout, cfg: CodecConfig):
    if cfg.variant == "h2vq":
        return H2VQCodec(rng, layout.d_b, layout.d_h, cfg)
    if cfg.variant == "vanilla":
        return VanillaCodec(rng, layout.d_b, layout.d_h, cfg, levels=1)
    if cfg.variant == "rvq":
        return VanillaCodec(rng, layout.d_b, layout.d_h, cfg, levels=cfg.rvq_levels)
    raise CodecError(f"unknown codec variant '{cfg.variant}'")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def normalized_parts(item, layout: MotionLayout, stats: ChannelStats):
    mb = (item.repr.frames[:, layout.body_cols] - stats.mean_b) / stats.std_b
    mh = (item.repr.frames[:, layout.hand_cols] - stats.mean_h) / stats.std_h
    return mb, mh


def _batch_arrays(parts, batch_idx, hand_rate: int, rng):
    usable = [(parts[i][0].shape[0] // hand_rate) * hand_rate for i in batch_idx]
    window = min(usable)
    xb, xh = [], []
    for i, cap in zip(batch_idx, usable):
        mb, mh = parts[i]
        hi = mb.shape[0] - window
        off = int(rng.integers(0, hi + 1)) if hi > 0 else 0
        xb.append(mb[off:off + window].T)
        xh.append(mh[off:off + window].T)
    return Tensor(np.stack(xb)), Tensor(np.stack(xh))


_INIT_STREAM = 2 ** 32 - 1  # reserved step id for parameter initialization


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, step)))


def h2vq_train_step(model: H2VQCodec, xb: Tensor, xh: Tensor, opt: AdamW,
                    rng: np.random.Generator) -> dict:
    cfg = model.cfg
    with Tape() as tape:
        recon, out_h, out_b, flat_h, flat_b = model.forward_train(xb, xh)
        target = ops.concat([xb, xh], axis=1)
        rec = mse_loss(recon, ops.stop_gradient(target))
        commit_h = ops.scale(out_h.commitment, 1.0 / flat_h.size)
        commit_b = ops.scale(out_b.commitment, 1.0 / flat_b.size)
        total = ops.add(rec, ops.scale(ops.add(commit_h, commit_b), cfg.alpha))
    if not np.isfinite(total.data):
        raise CodecError(
            f"non-finite loss: recon={rec.data}, commit_h={commit_h.data}, "
            f"commit_b={commit_b.data}")
    opt.zero_grad()
    tape.backward(total)
    opt.step()
    ema_update(model.book_hand, flat_h.data, out_h.indices)
    ema_update(model.book_body, flat_b.data, out_b.indices)
    code_reset(model.book_hand, flat_h.data, cfg.reset_staleness, rng)
    code_reset(model.book_body, flat_b.data, cfg.reset_staleness, rng)
    return {"total": float(total.data), "recon": float(rec.data),
            "commit_hand": float(commit_h.data), "commit_body": float(commit_b.data)}


def baseline_train_step(model: VanillaCodec, x: Tensor, opt: AdamW,
                        rng: np.random.Generator, reset_enabled: bool = True) -> dict:
    cfg = model.cfg
    with Tape() as tape:
        recon, commitment, ema_jobs = model.forward_train(x)
        rec = mse_loss(recon, ops.stop_gradient(x))
        commit = ops.scale(commitment, 1.0 / (x.shape[0] * cfg.code_dim
                                              * (x.shape[2] // cfg.hand_rate)))
        total = ops.add(rec, ops.scale(commit, cfg.alpha))
    if not np.isfinite(total.data):
        raise CodecError(f"non-finite loss: recon={rec.data}, commit={commit.data}")
    opt.zero_grad()
    tape.backward(total)
    opt.step()
    for book, values, idx in ema_jobs:
        ema_update(book, values, idx)
        if reset_enabled:
            code_reset(book, values, cfg.reset_staleness, rng)
    return {"total": float(total.data), "recon": float(rec.data),
            "commit": float(commit.data)}


def train_codec(items, skel: Skeleton, cfg: CodecConfig, seed: int, steps: int,
                reset_enabled: bool = True, start_step: int = 0,
                model=None, opt=None):
    """Train a codec of the configured variant on the train split. Per-step
    randomness derives from (seed, step), so a run can resume mid-stream and
    reproduce the uninterrupted trajectory."""
    layout = motion_layout(skel)
    train = [it for it in items if it.split == "train"] or items
    init_rng = _step_rng(seed, _INIT_STREAM)
    if model is None:
        model = build_codec(init_rng, layout, cfg)
        model.stats = compute_channel_stats(train, layout)
        model.name_parameters()
    parts = [normalized_parts(it, layout, model.stats) for it in train]
    if opt is None:
        opt = AdamW(model.parameters(), lr=cfg.learning_rate)
    history = []
    for step in range(start_step, steps):
        rng = _step_rng(seed, step)
        batch_idx = rng.integers(0, len(parts), size=cfg.batch_size)
        xb, xh = _batch_arrays(parts, batch_idx, cfg.hand_rate, rng)
        if isinstance(model, H2VQCodec):
            losses = h2vq_train_step(model, xb, xh, opt, rng)
        else:
            x = ops.concat([xb, xh], axis=1)
            losses = baseline_train_step(model, x, opt, rng, reset_enabled)
        history.append(losses)
    return model, opt, history


# ---------------------------------------------------------------------------
# reconstruction paths and the benchmark
# ---------------------------------------------------------------------------

def reconstruct_item(model, item, layout: MotionLayout) -> MotionRepr:
    """Round-trip one corpus item through a trained codec; face channels pass
    through untouched. The output is cropped to the codec-divisible length."""
    stats = model.stats
    mb, mh = normalized_parts(item, layout, stats)
    L = (mb.shape[0] // model.cfg.hand_rate) * model.cfg.hand_rate
    mb, mh = mb[:L], mh[:L]
    if isinstance(model, H2VQCodec):
        idx_h, idx_b = model.encode(mb, mh)
        rb, rh = model.decode(idx_b, idx_h)
    else:
        x = Tensor(np.concatenate([mb, mh], axis=1).T[None])
        recon, _, _ = model.forward_train(x)
        flat = recon.data[0]
        rb, rh = flat[:layout.d_b].T, flat[layout.d_b:].T
    body = rb * stats.std_b + stats.mean_b
    hand = rh * stats.std_h + stats.mean_h
    face = item.repr.frames[:L, layout.face_cols]
    return merge_parts(body, hand, face, layout)


def reconstruction_benchmark(models: dict, items, skel: Skeleton) -> dict:
    """Table 2-style table: per codec, MPJPE / PA-MPJPE / Accel over the
    all/body/hand joint sets, averaged over the supplied items."""
    from .motionrep import accel_error, mpjpe, pa_mpjpe, repr_decode

    layout = motion_layout(skel)
    table: dict[str, dict[str, float]] = {}
    for name, model in models.items():
        if model.stats is None:
            raise CodecError(f"codec '{name}' has no channel stats; untrained?")
        sums = {f"{metric}_{part}": 0.0
                for metric in ("mpjpe", "pa_mpjpe", "accel")
                for part in ("all", "body", "hand")}
        for item in items:
            pred_repr = reconstruct_item(model, item, layout)
            L = pred_repr.length
            gt_repr = MotionRepr(item.repr.frames[:L].copy(), layout)
            gt_raw = repr_decode(gt_repr, skel)
            pred_raw = repr_decode(pred_repr, skel)
            for part in ("all", "body", "hand"):
                sums[f"mpjpe_{part}"] += mpjpe(pred_raw, gt_raw, skel, part)
                sums[f"pa_mpjpe_{part}"] += pa_mpjpe(pred_raw, gt_raw, skel, part)
                sums[f"accel_{part}"] += accel_error(pred_raw, gt_raw, skel, part)
        table[name] = {k: v / len(items) for k, v in sums.items()}
    return table


def format_benchmark(table: dict) -> str:
    """Delimited text table in the reconstruction-error column layout."""
    cols = ["mpjpe_all", "mpjpe_body", "mpjpe_hand",
            "pa_mpjpe_all", "pa_mpjpe_body", "pa_mpjpe_hand",
            "accel_all", "accel_body", "accel_hand"]
    lines = ["codec\t" + "\t".join(cols)]
    for name, row in table.items():
        lines.append(name + "\t" + "\t".join(f"{row[c]:.3f}" for c in cols))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoint bridging
# ---------------------------------------------------------------------------

def codec_blocks(model, opt: AdamW | None = None) -> dict[str, np.ndarray]:
    blocks = dict(model.state_dict())
    for name, book in model.books().items():
        blocks[f"book.{name}.entries"] = book.entries
        blocks[f"book.{name}.ema_count"] = book.ema_count
        blocks[f"book.{name}.ema_sum"] = book.ema_sum
        blocks[f"book.{name}.staleness"] = book.staleness.astype(np.float64)
    stats = model.stats
    blocks["stats.mean_b"] = stats.mean_b
    blocks["stats.std_b"] = stats.std_b
    blocks["stats.mean_h"] = stats.mean_h
    blocks["stats.std_h"] = stats.std_h
    if opt is not None:
        blocks.update(opt.state_blocks())
    return blocks


def codec_from_blocks(blocks: dict, layout: MotionLayout, cfg: CodecConfig):
    model = build_codec(np.random.default_rng(0), layout, cfg)
    model.load_state_dict(blocks)
    model.name_parameters()
    for name, book in model.books().items():
        book.entries = np.array(blocks[f"book.{name}.entries"])
        book.ema_count = np.array(blocks[f"book.{name}.ema_count"])
        book.ema_sum = np.array(blocks[f"book.{name}.ema_sum"])
        book.staleness = np.array(blocks[f"book.{name}.staleness"]).astype(np.int64)
    model.stats = ChannelStats(
        mean_b=np.array(blocks["stats.mean_b"]), std_b=np.array(blocks["stats.std_b"]),
        mean_h=np.array(blocks["stats.mean_h"]), std_h=np.array(blocks["stats.std_h"]))
    return model
