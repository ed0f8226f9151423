"""Configuration defaults. Training-recipe constants keep their published
values; model sizes default to desk scale and are overridable per run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

# training-recipe constants (also asserted by the constants test)
COMMITMENT_ALPHA = 0.02
EMA_LAMBDA = 0.99
BODY_DOWNSAMPLE = 2
HAND_DOWNSAMPLE = 4
LEARNING_RATE = 1e-4
LAMBDA_KL = 1e-5
LAMBDA_E = 1e-5
LAMBDA_NCE = 0.1
NEGATIVE_FILTER_THRESHOLD = 0.85
PROTOCOL_B_EPSILON = 0.9
SPLIT_PROPORTIONS = (0.80, 0.05, 0.15)
DIVERSITY_PAIR_COUNT = 300
EVAL_REPETITIONS = 5
FACE_LAMBDA_1 = 1e-5
FACE_LAMBDA_2 = 1e-5

# full-scale reference sizes (desk runs use the dataclass defaults below)
FULL_SCALE_CODEBOOK_SIZE = 512
FULL_SCALE_CODE_DIM = 512
FULL_SCALE_GPT_LAYERS = 18
FULL_SCALE_GPT_WIDTH = 1024
FULL_SCALE_GPT_HEADS = 16
MAX_STREAM_LENGTH = 149


@dataclass
class CodecConfig:
    variant: str = "h2vq"            # h2vq | vanilla | rvq
    hidden_width: int = 64
    res_blocks: int = 2
    body_rate: int = BODY_DOWNSAMPLE
    hand_rate: int = HAND_DOWNSAMPLE
    codebook_size: int = 64          # 512 at full scale
    code_dim: int = 64
    alpha: float = COMMITMENT_ALPHA
    ema_lambda: float = EMA_LAMBDA
    reset_staleness: int = 32
    rvq_levels: int = 2
    learning_rate: float = LEARNING_RATE
    batch_size: int = 8

    def __post_init__(self):
        if self.hand_rate % self.body_rate:
            raise ValueError("hand downsample rate must be a multiple of the "
                             "body rate")


@dataclass
class GPTConfig:
    layers: int = 2
    width: int = 64
    heads: int = 4
    max_stream_length: int = MAX_STREAM_LENGTH
    eta: float = 0.1                 # alignment-loss weight
    temperature: float = 1.0
    top_k: int = 0                   # 0 disables top-k filtering
    learning_rate: float = LEARNING_RATE
    batch_size: int = 16

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


@dataclass
class TMRConfig:
    width: int = 64
    layers: int = 2
    decoder_layers: int = 4
    latent_dim: int = 32
    nce_temperature: float = 0.1
    lambda_kl: float = LAMBDA_KL
    lambda_e: float = LAMBDA_E
    lambda_nce: float = LAMBDA_NCE
    negative_threshold: float = NEGATIVE_FILTER_THRESHOLD
    protocol_b_epsilon: float = PROTOCOL_B_EPSILON
    max_text_len: int = 24
    learning_rate: float = LEARNING_RATE
    batch_size: int = 32


@dataclass
class FaceConfig:
    width: int = 48
    layers: int = 6
    heads: int = 4
    latent_dim: int = 16
    lambda_kl: float = FACE_LAMBDA_1
    lambda_e: float = FACE_LAMBDA_2
    learning_rate: float = LEARNING_RATE
    batch_size: int = 16


@dataclass
class CorpusConfig:
    seed: int = 0
    items_per_family: int = 64
    min_length: int = 32
    max_length: int = 64
    frame_rate: float = 30.0
    families: tuple = ("walk_forward", "walk_backward", "circle_cw",
                       "circle_ccw", "wave", "fist", "squat", "reach_up")


def config_to_dict(cfg) -> dict:
    if dataclasses.is_dataclass(cfg):
        d = dataclasses.asdict(cfg)
        d["__class__"] = type(cfg).__name__
        return d
    return dict(cfg)


def config_from_dict(d: dict):
    d = dict(d)
    name = d.pop("__class__", None)
    classes = {c.__name__: c for c in
               (CodecConfig, GPTConfig, TMRConfig, FaceConfig, CorpusConfig)}
    if name in classes:
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return classes[name](**d)
    return d


def config_hash(cfg) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
