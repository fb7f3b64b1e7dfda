import itertools

import numpy as np
import pytest
import torch
from scipy.special import log_softmax

from oracles import ctc_brute_force
from unitrans.ctc import (
    CTCConfig, CTCFinetuner, FeatureEncoder, ctc_grad_logits, ctc_greedy_decode, ctc_loss_batch,
    ctc_nll, finetune_encoder, min_frames,
)
from unitrans.exceptions import InfeasibleAlignmentError, ShapeError


def random_lattice(T, C, seed):
    return log_softmax(np.random.default_rng(seed).normal(size=(T, C)) * 2, axis=1)


class TestNLL:
    def test_uniform_three_symbols(self):
        lp = np.log(np.full((2, 3), 1 / 3))
        assert ctc_nll(lp, [0]) == pytest.approx(np.log(3), abs=1e-12)

    def test_infeasible(self):
        with pytest.raises(InfeasibleAlignmentError):
            ctc_nll(np.log(np.full((2, 4), 0.25)), [0, 1, 2])

    def test_repeats_need_blank(self):
        assert min_frames([1, 1]) == 3
        with pytest.raises(InfeasibleAlignmentError):
            ctc_nll(np.log(np.full((2, 3), 1 / 3)), [1, 1])

    def test_certain_path(self):
        lp = np.full((4, 3), -50.0)
        for t, k in enumerate([1, 0, 2, 2]):
            lp[t, k] = 0.0
        lp = log_softmax(lp, axis=1)
        assert ctc_nll(lp, [0, 1]) == pytest.approx(0.0, abs=1e-12)

    def test_unnormalized_rejected(self):
        with pytest.raises(ShapeError):
            ctc_nll(np.zeros((3, 3)), [0])

    def test_matches_brute_force_sample(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            T, C = int(rng.integers(1, 6)), int(rng.integers(2, 5))
            tgt = list(rng.integers(0, C - 1, size=int(rng.integers(0, 3))))
            lp = random_lattice(T, C, seed)
            want = ctc_brute_force(lp, tgt)
            if np.isinf(want):
                with pytest.raises(InfeasibleAlignmentError):
                    ctc_nll(lp, tgt)
            else:
                assert ctc_nll(lp, tgt) == pytest.approx(want, rel=1e-9)

    def test_permuting_other_labels(self):
        lp = random_lattice(6, 5, 1)
        # target uses labels 1 and 2 (ids 0, 1); swapping columns 3 and 4 is irrelevant
        swapped = lp[:, [0, 1, 2, 4, 3]]
        assert ctc_nll(swapped, [0, 1]) == pytest.approx(ctc_nll(lp, [0, 1]), rel=1e-12)


class TestGradients:
    def test_analytic_matches_finite_difference(self):
        z = np.random.default_rng(0).normal(size=(6, 4))
        tgt = [0, 2, 2]
        _, g = ctc_grad_logits(z, tgt)
        h = 1e-6
        num = np.zeros_like(z)
        for idx in itertools.product(range(6), range(4)):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            num[idx] = (ctc_nll(log_softmax(zp, axis=1), tgt) - ctc_nll(log_softmax(zm, axis=1), tgt)) / (2 * h)
        assert np.max(np.abs(num - g)) / np.max(np.abs(g)) <= 1e-4

    def test_torch_batch_matches_numpy(self):
        lps = [random_lattice(7, 5, s) for s in range(3)]
        targets = [np.array([0, 1]), np.array([3]), np.array([2, 2, 1])]
        x = torch.zeros(3, 7, 5, dtype=torch.float64)
        lens = [7, 5, 6]
        for i, lp in enumerate(lps):
            x[i, :lens[i]] = torch.from_numpy(log_softmax(lp[:lens[i]], axis=1))
        got = ctc_loss_batch(x, targets, lens).numpy()
        want = [ctc_nll(x[i, :lens[i]].numpy(), targets[i]) for i in range(3)]
        np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_torch_batch_agrees_with_builtin(self):
        torch.manual_seed(0)
        x = torch.randn(2, 9, 6, dtype=torch.float64).log_softmax(-1)
        targets = [np.array([1, 4, 4]), np.array([0, 2])]
        ours = ctc_loss_batch(x, targets, [9, 8])
        ref = torch.nn.functional.ctc_loss(
            x.transpose(0, 1), torch.tensor([2, 5, 5, 1, 3]), torch.tensor([9, 8]), torch.tensor([3, 2]),
            blank=0, reduction="none")
        torch.testing.assert_close(ours, ref)

    def test_infeasible_is_inf(self):
        x = torch.zeros(1, 2, 3, dtype=torch.float64).log_softmax(-1)
        assert torch.isinf(ctc_loss_batch(x, [np.array([0, 1, 0])], [2]))[0]


class TestGreedy:
    @pytest.mark.parametrize("path,want", [([1, 1, 0, 2], [0, 1]), ([0, 0, 0], []), ([1, 0, 1], [0, 0])])
    def test_collapse_rule(self, path, want):
        lp = np.full((len(path), 3), -10.0)
        lp[np.arange(len(path)), path] = 0.0
        assert ctc_greedy_decode(lp).tolist() == want


def toy_pairs(n=6, seed=0):
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(4, 8))
    pairs = []
    for _ in range(n):
        tgt = rng.integers(0, 4, size=3)
        tgt = tgt[np.concatenate([[True], tgt[1:] != tgt[:-1]])]
        frames = np.repeat(protos[tgt], 4, axis=0) + 0.05 * rng.normal(size=(4 * len(tgt), 8))
        pairs.append((frames.astype(np.float32), tgt))
    return pairs


class TestFinetune:
    cfg = CTCConfig(n_units=4, n_mels=8, hidden=16, layers=2, feature_dim=8, max_updates=150, batch_size=4,
                    warmup=10, lr=5e-3)

    def test_memorizes_identical_pairs(self):
        pair = toy_pairs(1)[0]
        hist = []
        finetune_encoder([pair] * 4, self.cfg, history=hist)
        assert hist[-1] < 0.05 * hist[0]

    def test_loss_halves(self):
        hist = []
        finetune_encoder(toy_pairs(), self.cfg, history=hist)
        assert np.mean(hist[-10:]) <= 0.5 * np.mean(hist[:10])

    def test_seeded_runs_identical(self):
        a = finetune_encoder(toy_pairs(), self.cfg)
        b = finetune_encoder(toy_pairs(), self.cfg)
        for (na, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb), na

    def test_encoder_preserves_frames(self):
        enc = FeatureEncoder(self.cfg)
        assert enc.encode(np.zeros((13, 8))).shape == (13, 8)
        np.testing.assert_allclose(np.exp(enc.lattice(np.zeros((5, 8)))).sum(1), 1.0, rtol=1e-5)

    def test_estimator(self):
        pairs = toy_pairs()
        est = CTCFinetuner(n_units=4, hidden=16, layers=2, feature_dim=8, max_updates=20, batch_size=4)
        est.fit([f for f, _ in pairs], [t for _, t in pairs])
        assert est.transform([pairs[0][0]])[0].shape == (pairs[0][0].shape[0], 8)
        assert est.get_params()["max_updates"] == 20
