"""Facial cVAE: KL oracles, generation contracts, whole-body assembly."""

import numpy as np
import pytest

from motok.config import CorpusConfig, FaceConfig
from motok.corpusio import gen_corpus
from motok.facecvae import (FaceError, FaceModel, assemble_whole_body,
                            face_train_step, four_term_kl, generate_face,
                            train_face)
from motok.gradcore import AdamW, Tensor, gaussian_kl
from motok.latentseq import LatentGaussian
from motok.motionrep import default_skeleton, motion_layout, split_parts
from motok.tmr import TextTokenizer

rng = np.random.default_rng(64)
ITEMS = gen_corpus(CorpusConfig(seed=31, items_per_family=4))
SKEL = default_skeleton()
LAYOUT = motion_layout(SKEL)


def tiny_face(seed=0):
    tok = TextTokenizer([it.text for it in ITEMS])
    cfg = FaceConfig(width=32, layers=1, heads=2, latent_dim=8)
    model = FaceModel(np.random.default_rng(seed), tok.size, cfg)
    model.tokenizer = tok
    return model


def lat(mu, logvar):
    return LatentGaussian(Tensor(np.asarray(mu, float)),
                          Tensor(np.asarray(logvar, float)))


class TestKL:
    def test_identical_standard_gaussians_all_terms_zero(self):
        a = lat(np.zeros((2, 4)), np.zeros((2, 4)))
        b = lat(np.zeros((2, 4)), np.zeros((2, 4)))
        assert four_term_kl(a, b).item() == 0.0

    def test_each_term_zero_only_for_identical(self):
        for _ in range(25):
            mu1, lv1 = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
            mu2, lv2 = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
            kl = gaussian_kl(Tensor(mu1), Tensor(lv1), Tensor(mu2), Tensor(lv2))
            assert kl.item() >= 0.0
            if not (np.allclose(mu1, mu2) and np.allclose(lv1, lv2)):
                assert kl.item() > 0.0
        same = gaussian_kl(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3)) * 0.3),
                           Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3)) * 0.3))
        assert same.item() == 0.0

    def test_matches_monte_carlo(self):
        # E_{x~N1}[log N1(x) - log N2(x)] over 100k samples, within 2%
        r = np.random.default_rng(11)
        mu1, lv1 = np.array([0.3, -0.5]), np.array([0.2, -0.4])
        mu2, lv2 = np.array([-0.1, 0.2]), np.array([-0.3, 0.5])
        analytic = gaussian_kl(Tensor(mu1[None]), Tensor(lv1[None]),
                               Tensor(mu2[None]), Tensor(lv2[None])).item()
        s1, s2 = np.exp(0.5 * lv1), np.exp(0.5 * lv2)
        x = mu1 + s1 * r.standard_normal((100_000, 2))

        def logpdf(x, mu, sigma):
            return (-0.5 * ((x - mu) / sigma) ** 2
                    - np.log(sigma) - 0.5 * np.log(2 * np.pi)).sum(axis=1)

        mc = (logpdf(x, mu1, s1) - logpdf(x, mu2, s2)).mean()
        assert abs(analytic - mc) / abs(analytic) < 0.02

    def test_four_term_hand_composition(self):
        a = lat(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)))
        b = lat(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)))
        expected = (gaussian_kl(a.mu, a.logvar).item()
                    + gaussian_kl(b.mu, b.logvar).item()
                    + gaussian_kl(a.mu, a.logvar, b.mu, b.logvar).item()
                    + gaussian_kl(b.mu, b.logvar, a.mu, a.logvar).item())
        np.testing.assert_allclose(four_term_kl(a, b).item(), expected, rtol=1e-12)


class TestTraining:
    def test_loss_weights_default_1e5(self):
        cfg = FaceConfig()
        assert cfg.lambda_kl == 1e-5
        assert cfg.lambda_e == 1e-5

    def test_step_reports_all_terms(self):
        model = tiny_face()
        opt = AdamW(model.parameters(), lr=1e-4)
        texts = [it.text for it in ITEMS[:4]]
        faces = [it.repr.frames[:, LAYOUT.face_cols] for it in ITEMS[:4]]
        out = face_train_step(model, texts, faces, opt, rng)
        assert {"total", "rec", "kl", "emb"} <= set(out)
        assert np.isfinite(out["total"])

    def test_short_training_descends(self):
        cfg = FaceConfig(width=32, layers=1, heads=2, latent_dim=8, batch_size=4)
        model, opt, hist = train_face(ITEMS, cfg, seed=3, steps=30)
        assert hist[-1]["total"] < hist[0]["total"]


class TestGeneration:
    def test_exact_length_contract(self):
        model = tiny_face()
        for L in (1, 2, 7, 64, 256):
            out = generate_face(model, "a happy face", L, np.random.default_rng(0))
            assert out.shape == (L, 50)

    def test_seeded_draw_deterministic(self):
        model = tiny_face()
        a = generate_face(model, "a sad face", 9, np.random.default_rng(4))
        b = generate_face(model, "a sad face", 9, np.random.default_rng(4))
        assert (a == b).all()

    def test_stochastic_across_draws(self):
        model = tiny_face()
        a = generate_face(model, "a calm face", 9, np.random.default_rng(1))
        b = generate_face(model, "a calm face", 9, np.random.default_rng(2))
        assert not (a == b).all()

    def test_invalid_length(self):
        model = tiny_face()
        with pytest.raises(FaceError):
            generate_face(model, "x y", 0, np.random.default_rng(0))


class TestAssembly:
    def test_width_and_round_trip(self):
        item = ITEMS[0]
        b, h, f = split_parts(item.repr)
        bh = np.concatenate([b, h], axis=1)
        face = rng.normal(size=(item.length, 50))
        rep = assemble_whole_body(bh, face, LAYOUT)
        assert rep.frames.shape[1] == LAYOUT.d_b + LAYOUT.d_h + LAYOUT.d_f
        b2, h2, f2 = split_parts(rep)
        assert (f2 == face).all()
        assert (b2 == b).all() and (h2 == h).all()

    def test_length_mismatch_rejected(self):
        item = ITEMS[0]
        b, h, _ = split_parts(item.repr)
        bh = np.concatenate([b, h], axis=1)
        with pytest.raises(FaceError, match="length"):
            assemble_whole_body(bh, np.zeros((item.length + 1, 50)), LAYOUT)

    def test_bad_width_rejected(self):
        with pytest.raises(FaceError, match="width"):
            assemble_whole_body(np.zeros((4, 10)), np.zeros((4, 50)), LAYOUT)
