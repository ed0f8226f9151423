"""Corpus determinism, splits, file formats, checkpoints, and constants."""

import json
from pathlib import Path

import numpy as np
import pytest

from motok import config
from motok.config import CodecConfig, CorpusConfig, GPTConfig, TMRConfig
from motok.corpusio import (CorpusIOError, gen_corpus, load_checkpoint,
                            load_corpus, load_manifest, load_motion_file,
                            save_checkpoint, save_corpus, save_motion_file,
                            split_items)
from motok.motionrep import MotionRepr, default_skeleton, motion_layout

SKEL = default_skeleton()
LAYOUT = motion_layout(SKEL)


class TestCorpusGeneration:
    def test_same_seed_byte_identical(self, tmp_path):
        cfg = CorpusConfig(seed=77, items_per_family=4)
        for sub in ("a", "b"):
            save_corpus(tmp_path / sub, gen_corpus(cfg), cfg)
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                twin = tmp_path / "b" / f.relative_to(tmp_path / "a")
                assert f.read_bytes() == twin.read_bytes(), f.name

    def test_split_proportions(self):
        items = gen_corpus(CorpusConfig(seed=1, items_per_family=64))
        n = len(items)
        counts = {s: len(split_items(items, s)) for s in ("train", "val", "test")}
        assert abs(counts["train"] - 0.80 * n) <= 1
        assert abs(counts["val"] - 0.05 * n) <= 1
        assert abs(counts["test"] - 0.15 * n) <= 1
        assert counts["train"] + counts["val"] + counts["test"] == n

    def test_every_family_in_every_split(self):
        items = gen_corpus(CorpusConfig(seed=2, items_per_family=32))
        for split in ("train", "val", "test"):
            families = {it.family for it in split_items(items, split)}
            assert len(families) == 8

    def test_chirality_yaw_integral(self):
        items = gen_corpus(CorpusConfig(seed=3, items_per_family=4))
        for it in items:
            lap = it.repr.frames[:-1, 0].sum()
            if it.family == "circle_ccw":
                np.testing.assert_allclose(lap, 2 * np.pi, atol=1e-9)
            elif it.family == "circle_cw":
                np.testing.assert_allclose(lap, -2 * np.pi, atol=1e-9)

    def test_direction_pairs_distinguishable(self):
        items = gen_corpus(CorpusConfig(seed=4, items_per_family=4))
        fwd = [it for it in items if it.family == "walk_forward"]
        back = [it for it in items if it.family == "walk_backward"]
        # forward motion has positive local-forward velocity, backward negative
        assert all(it.repr.frames[:, 2].mean() > 0 for it in fwd)
        assert all(it.repr.frames[:, 2].mean() < 0 for it in back)

    def test_too_few_families_rejected(self):
        with pytest.raises(CorpusIOError):
            gen_corpus(CorpusConfig(families=("walk_forward",) * 4))


class TestMotionFile:
    def test_round_trip(self, tmp_path):
        item = gen_corpus(CorpusConfig(seed=5, items_per_family=3))[0]
        path = tmp_path / "m.tmto"
        save_motion_file(path, item.repr, SKEL)
        back = load_motion_file(path, SKEL)
        np.testing.assert_array_equal(
            back.frames, item.repr.frames.astype(np.float32).astype(np.float64))
        assert back.velocity_included

    def test_truncation_reports_sizes(self, tmp_path):
        item = gen_corpus(CorpusConfig(seed=6, items_per_family=3))[0]
        path = tmp_path / "m.tmto"
        save_motion_file(path, item.repr, SKEL)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(CorpusIOError, match="size mismatch"):
            load_motion_file(path, SKEL)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.tmto"
        path.write_bytes(b"NOPE" + b"\0" * 100)
        with pytest.raises(CorpusIOError, match="magic"):
            load_motion_file(path, SKEL)

    def test_unknown_major_rejected(self, tmp_path):
        item = gen_corpus(CorpusConfig(seed=7, items_per_family=3))[0]
        path = tmp_path / "m.tmto"
        save_motion_file(path, item.repr, SKEL)
        data = bytearray(path.read_bytes())
        data[4] = 99  # format major lives right after the magic
        path.write_bytes(bytes(data))
        with pytest.raises(CorpusIOError, match="major"):
            load_motion_file(path, SKEL)


class TestManifest:
    def test_save_load_round_trip(self, tmp_path):
        cfg = CorpusConfig(seed=8, items_per_family=3)
        items = gen_corpus(cfg)
        manifest_path = save_corpus(tmp_path, items, cfg)
        manifest = load_manifest(manifest_path)
        assert manifest.corpus_seed == 8
        assert len(manifest.items) == len(items)
        loaded, skel = load_corpus(manifest_path)
        assert skel.joint_count == SKEL.joint_count
        assert [it.text for it in loaded] == [it.text for it in items]
        assert [it.split for it in loaded] == [it.split for it in items]

    def test_invalid_json_reported(self, tmp_path):
        bad = tmp_path / "manifest.json"
        bad.write_text("{not json")
        with pytest.raises(CorpusIOError, match="JSON"):
            load_manifest(bad)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        blocks = {"layer.w": rng.normal(size=(7, 3)),
                  "layer.b": rng.normal(size=(3,)),
                  "scalar": np.array([2.0])}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "demo", CodecConfig(), blocks, step=17)
        ck = load_checkpoint(path, expected_module="demo")
        assert ck.step == 17
        for name, arr in blocks.items():
            np.testing.assert_array_equal(ck.blocks[name], arr)

    def test_module_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, "codec:h2vq", None, {"w": np.zeros(2)})
        with pytest.raises(CorpusIOError, match="expected 'tmr'"):
            load_checkpoint(path, expected_module="tmr")

    def test_config_mismatch_is_error_not_cast(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, "codec:h2vq", CodecConfig(codebook_size=64),
                        {"w": np.zeros(2)})
        with pytest.raises(CorpusIOError, match="configuration mismatch"):
            load_checkpoint(path, expected_config=CodecConfig(codebook_size=128))
        ck = load_checkpoint(path, expected_config=CodecConfig(codebook_size=64))
        assert ck.blocks["w"].shape == (2,)

    def test_truncated_block(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, "demo", None, {"w": np.zeros(100)})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(CorpusIOError, match="truncated"):
            load_checkpoint(path)


class TestConstants:
    def test_paper_recipe_constants(self):
        assert config.COMMITMENT_ALPHA == 0.02
        assert config.EMA_LAMBDA == 0.99
        assert config.FULL_SCALE_CODEBOOK_SIZE == 512
        assert config.FULL_SCALE_CODE_DIM == 512
        assert config.BODY_DOWNSAMPLE == 2
        assert config.HAND_DOWNSAMPLE == 4
        assert config.MAX_STREAM_LENGTH == 149
        assert config.LAMBDA_KL == 1e-5
        assert config.LAMBDA_E == 1e-5
        assert config.LAMBDA_NCE == 0.1
        assert config.PROTOCOL_B_EPSILON == 0.9
        assert config.NEGATIVE_FILTER_THRESHOLD == 0.85
        assert config.SPLIT_PROPORTIONS == (0.80, 0.05, 0.15)
        assert config.DIVERSITY_PAIR_COUNT == 300
        assert config.EVAL_REPETITIONS == 5
        assert config.FACE_LAMBDA_1 == 1e-5
        assert config.FACE_LAMBDA_2 == 1e-5
        assert config.LEARNING_RATE == 1e-4

    def test_config_defaults_echo_constants(self):
        codec = CodecConfig()
        assert codec.alpha == 0.02
        assert codec.ema_lambda == 0.99
        assert codec.body_rate == 2
        assert codec.hand_rate == 4
        gpt = GPTConfig()
        assert gpt.max_stream_length == 149
        tmr = TMRConfig()
        assert tmr.lambda_kl == 1e-5 and tmr.lambda_e == 1e-5
        assert tmr.lambda_nce == 0.1
        assert tmr.negative_threshold == 0.85
        assert tmr.protocol_b_epsilon == 0.9

    def test_full_scale_gpt_reference(self):
        assert (config.FULL_SCALE_GPT_LAYERS, config.FULL_SCALE_GPT_WIDTH,
                config.FULL_SCALE_GPT_HEADS) == (18, 1024, 16)
