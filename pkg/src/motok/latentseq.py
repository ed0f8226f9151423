"""Shared latent-sequence components: distribution-token encoders and a
positional-query decoder, used by both the retrieval model and the face VAE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcore import Parameter, Tensor, nn, ops, smooth_l1_raw

MAX_MOTION_LEN = 256


@dataclass
class LatentGaussian:
    """(mu, log-diagonal-variance) pair; sigma stays positive by construction."""
    mu: Tensor
    logvar: Tensor

    def sample(self, rng: np.random.Generator) -> Tensor:
        return self.sample_with(rng.standard_normal(self.mu.shape))

    def sample_with(self, eps: np.ndarray) -> Tensor:
        sigma = ops.exp(ops.scale(self.logvar, 0.5))
        return ops.add(self.mu, ops.multiply(sigma, Tensor(eps)))


class DistributionEncoder(nn.Module):
    """Transformer over an embedded sequence with two learnable tokens whose
    output positions read out the latent mean and log-variance."""

    def __init__(self, rng, width: int, heads: int, layers: int, latent: int,
                 max_len: int, mlp_ratio: int = 2):
        self.dist_param = Parameter(nn.normal_embedding(rng, (2, width)))
        self.pos = nn.Embedding(rng, max_len + 2, width)
        self.stack = nn.TransformerStack(rng, layers, width, heads,
                                         mlp_ratio=mlp_ratio)
        self.mu_head = nn.Linear(rng, width, latent)
        self.logvar_head = nn.Linear(rng, width, latent)

    def __call__(self, x: Tensor, lengths: np.ndarray) -> LatentGaussian:
        b, t, w = x.shape
        pos_ids = np.arange(t + 2)
        dist = ops.reshape(self.dist_param, (1, 2, w))
        seq = ops.concat([ops.add(dist, Tensor(np.zeros((b, 2, w)))), x], axis=1)
        seq = ops.add(seq, self.pos(pos_ids))
        mask = nn.padding_mask(np.asarray(lengths) + 2, t + 2)
        h = self.stack(seq, mask)
        mu = self.mu_head(ops.reshape(ops.slice_(h, (slice(None), slice(0, 1))),
                                      (b, w)))
        logvar = self.logvar_head(ops.reshape(
            ops.slice_(h, (slice(None), slice(1, 2))), (b, w)))
        return LatentGaussian(mu, logvar)


class SequenceDecoder(nn.Module):
    """Reconstructs a feature sequence from a latent plus positional queries."""

    def __init__(self, rng, width: int, heads: int, layers: int, latent: int,
                 out_dim: int, max_len: int = MAX_MOTION_LEN, mlp_ratio: int = 2):
        self.z_proj = nn.Linear(rng, latent, width)
        self.queries = nn.Embedding(rng, max_len, width)
        self.stack = nn.TransformerStack(rng, layers, width, heads,
                                         mlp_ratio=mlp_ratio)
        self.out = nn.Linear(rng, width, out_dim)

    def __call__(self, z: Tensor, length: int, lengths: np.ndarray) -> Tensor:
        b = z.shape[0]
        q = self.queries(np.arange(length))                   # (L, W)
        zp = ops.reshape(self.z_proj(z), (b, 1, -1))
        seq = ops.add(ops.reshape(q, (1, length, -1)), zp)    # broadcast add
        mask = nn.padding_mask(np.asarray(lengths), length)
        h = self.stack(seq, mask)
        return self.out(h)                                    # (B, L, out)


def masked_smooth_l1(pred: Tensor, target: np.ndarray,
                     lengths: np.ndarray) -> Tensor:
    """Smooth-L1 over a padded (B, T, D) batch, averaged over real frames."""
    b, t, d = pred.shape
    mask = (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(float)
    weight = mask[:, :, None]
    raw = smooth_l1_raw(pred, Tensor(target))
    total = ops.sum_(ops.multiply(raw, Tensor(np.broadcast_to(weight, (b, t, d)))))
    return ops.scale(total, 1.0 / (mask.sum() * d))
