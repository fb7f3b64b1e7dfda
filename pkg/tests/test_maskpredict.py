import logging

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from unitrans.exceptions import ParameterError
from unitrans.maskpredict import (
    AutoregressiveTranslator, DecodeConfig, MaskPredictTranslator, TrainConfig, distill_corpus,
    length_beam_decode, mask_predict_decode, mask_schedule, npd_select, sample_training_mask, train_model,
)
from unitrans.seqmodel import ModelConfig, ar_score_batch, build_model, conformer_encode, length_predict

TINY = dict(n_mels=4, hidden=16, heads=2, ffn_mult=2, unit_vocab=6, max_len=12, length_proj=16,
            conv_kernel=3, dropout=0.0, encoder_blocks=1, decoder_blocks=1)


def tiny(kind="nar", seed=0, **over):
    torch.manual_seed(seed)
    return build_model(kind, ModelConfig(**{**TINY, **over})).eval()


def frames(n=24, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 4)).astype(np.float32)


@pytest.fixture(scope="module")
def nar():
    model = tiny()
    with torch.no_grad():
        enc = conformer_encode(model, frames())
    return model, enc


class TestTrainingMask:
    def test_single_position(self):
        rng = np.random.default_rng(0)
        assert all(sample_training_mask(1, rng).tolist() == [0] for _ in range(20))

    def test_count_uniform(self):
        rng = np.random.default_rng(0)
        counts = np.bincount([sample_training_mask(10, rng).size for _ in range(100_000)], minlength=11)[1:]
        assert chisquare(counts).pvalue > 0.01

    def test_positions_uniform(self):
        rng = np.random.default_rng(1)
        hits = np.zeros(6)
        for _ in range(30_000):
            hits[sample_training_mask(6, rng)] += 1
        assert chisquare(hits).pvalue > 0.01

    def test_seeded(self):
        a = sample_training_mask(30, np.random.default_rng(5))
        b = sample_training_mask(30, np.random.default_rng(5))
        assert a.tolist() == b.tolist()


class TestSchedule:
    def test_linear_decay(self):
        assert [mask_schedule(10, 5, t) for t in range(1, 5)] == [8, 6, 4, 2]

    def test_floor_and_minimum(self):
        assert mask_schedule(3, 10, 9) == 1

    def test_first_pass_masks_all(self):
        assert mask_schedule(7, 5, 0) == 7

    @pytest.mark.parametrize("t", [-1, 5, 9])
    def test_out_of_range(self, t):
        with pytest.raises(ParameterError):
            mask_schedule(10, 5, t)


class TestMaskPredict:
    def test_one_shot(self, nar):
        model, enc = nar
        units, trace = mask_predict_decode(model, enc, 7, 1)
        (cand,) = trace.candidates.values()
        assert len(cand.iterations) == 1 and cand.iterations[0].masked == list(range(7))
        assert trace.decoder_calls == 1
        assert len(units) == 7 and units.ids.max() < model.cfg.unit_vocab

    @pytest.mark.parametrize("N,T", [(10, 5), (3, 10), (12, 4)])
    def test_schedule_and_calls(self, nar, N, T):
        model, enc = nar
        _, trace = mask_predict_decode(model, enc, N, T)
        its = trace.candidates[N].iterations
        assert trace.decoder_calls == T
        assert [len(r.masked) for r in its] == [N] + [mask_schedule(N, T, t) for t in range(1, T)]
        for r in its:
            assert all(0 < p <= 1 for p in r.scores)

    def test_kept_scores_frozen(self, nar):
        model, enc = nar
        _, trace = mask_predict_decode(model, enc, 10, 5)
        its = trace.candidates[10].iterations
        scores = dict(zip(its[0].masked, its[0].scores))
        for prev, cur in zip(its, its[1:]):
            # remasked positions are exactly the lowest-scoring ones, ties to the lowest index
            order = sorted(scores, key=lambda p: (scores[p], p))
            assert cur.masked == sorted(order[:len(cur.masked)])
            before = dict(scores)
            scores.update(zip(cur.masked, cur.scores))
            for p in set(scores) - set(cur.masked):
                assert scores[p] == before[p]

    def test_pure(self, nar):
        model, enc = nar
        a = mask_predict_decode(model, enc, 9, 4)[0].tolist()
        b = mask_predict_decode(model, enc, 9, 4)[0].tolist()
        assert a == b


class TestLengthBeam:
    def test_k1_is_argmax_length(self, nar):
        model, enc = nar
        units, trace = length_beam_decode(model, enc, DecodeConfig(iterations=3, length_beam=1))
        n = length_predict(model, enc).argmax()
        assert units.tolist() == mask_predict_decode(model, enc, n, 3)[0].tolist()
        assert trace.selected_length == n

    def test_batched_equals_sequential(self, nar):
        model, enc = nar
        cfg = DecodeConfig(iterations=4, length_beam=5)
        a, ta = length_beam_decode(model, enc, cfg)
        b, tb = length_beam_decode(model, enc, cfg, sequential=True)
        assert a.tolist() == b.tolist()
        for n in ta.candidates:
            assert ta.candidates[n].units == tb.candidates[n].units
        assert ta.decoder_calls == 4 and tb.decoder_calls == 20

    def test_selection_rule(self, nar):
        model, enc = nar
        _, trace = length_beam_decode(model, enc, DecodeConfig(iterations=2, length_beam=4))
        best = trace.candidates[trace.selected_length].avg_log_score
        assert all(best >= c.avg_log_score for c in trace.candidates.values())
        assert len(trace.candidates) == 4

    def test_config_validated(self, nar):
        model, enc = nar
        with pytest.raises(ParameterError):
            length_beam_decode(model, enc, DecodeConfig(length_beam=13))
        with pytest.raises(ParameterError):
            length_beam_decode(model, enc, DecodeConfig(iterations=0))

    def test_trace_serializes(self, nar):
        model, enc = nar
        _, trace = length_beam_decode(model, enc, DecodeConfig(iterations=2, length_beam=2))
        d = trace.to_dict()
        assert [c["length"] for c in d["candidates"]] == sorted(trace.candidates)


@pytest.fixture(scope="module")
def teacher():
    model = tiny("ar", seed=3)
    with torch.no_grad():
        enc = conformer_encode(model, frames())
    return model, enc


class TestNPD:
    def test_single_candidate(self, teacher):
        model, enc = teacher
        idx, _ = npd_select(model, enc, [[1, 2, 3]])
        assert idx == 0

    def test_picks_max_normalized_score(self, teacher):
        model, enc = teacher
        cands = [[1, 2], [3, 3, 3, 0], [5], [0, 1, 2, 3, 4]]
        idx, scores = npd_select(model, enc, cands)
        raw = ar_score_batch(model, enc, cands)
        norm = raw / np.array([len(c) + 1 for c in cands])
        np.testing.assert_allclose(scores, norm)
        assert idx == int(np.argmax(norm))

    def test_in_length_beam(self, nar, teacher):
        model, enc = nar
        t_model, t_enc = teacher
        units, trace = length_beam_decode(model, enc, DecodeConfig(iterations=2, length_beam=3, npd=True),
                                          t_model, t_enc)
        chosen = trace.candidates[trace.selected_length]
        assert all(chosen.ar_score >= c.ar_score for c in trace.candidates.values())
        assert units.tolist() == chosen.units

    def test_requires_teacher(self, nar):
        model, enc = nar
        with pytest.raises(ParameterError):
            length_beam_decode(model, enc, DecodeConfig(npd=True))


class TestDistill:
    def test_one_target_per_source_and_cache(self):
        teacher = tiny("ar", seed=2)
        srcs = [frames(20, s) for s in range(3)]
        pairs = [(srcs[i % 3], [1, 2] if i % 2 else [3]) for i in range(9)]
        before = teacher.decoder.calls
        out = distill_corpus(teacher, pairs, beam=2)
        one = distill_corpus(teacher, pairs[:3], beam=2)
        assert len(out) <= 9
        targets = {}
        for s, t in out:
            targets.setdefault(s.tobytes(), set()).add(tuple(t))
        assert all(len(v) == 1 for v in targets.values())
        assert [t for _, t in one] == [t for _, t in out[:len(one)]]
        assert teacher.decoder.calls - before > 0

    def test_failures_dropped(self, caplog):
        teacher = tiny("ar", seed=2, max_source_frames=30)
        pairs = [(frames(20), [1]), (frames(40), [2])]
        with caplog.at_level(logging.WARNING):
            out = distill_corpus(teacher, pairs, beam=1)
        assert all(s.shape[0] == 20 for s, _ in out)
        assert "dropped" in caplog.text


def toy_pairs(n=40, seed=0):
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(6, 4)) * 2
    out = []
    for _ in range(n):
        src = rng.integers(0, 6, size=int(rng.integers(3, 6)))
        out.append((np.repeat(protos[src], 4, axis=0).astype(np.float32), [int((s + 1) % 6) for s in src]))
    return out


class TestTraining:
    def test_losses_drop(self):
        for kind in ("nar", "ar"):
            model = tiny(kind)
            hist = train_model(model, toy_pairs(), kind, TrainConfig(max_updates=60, batch_size=8, warmup=10,
                                                                    lr=3e-3, log_every=0))
            assert np.mean(hist[-10:]) < np.mean(hist[:10])
            assert not model.training

    def test_time_limit(self):
        hist = train_model(tiny(), toy_pairs(), "nar", TrainConfig(max_updates=10_000, batch_size=4,
                                                                    time_limit=0.5, log_every=0))
        assert len(hist) < 10_000


class TestEstimators:
    def test_nar_estimator(self):
        pairs = toy_pairs(16)
        est = MaskPredictTranslator(model_config={k: v for k, v in TINY.items() if k != "n_mels"},
                                    iterations=2, length_beam=2, max_updates=5, batch_size=4)
        est.fit([p[0] for p in pairs], [p[1] for p in pairs])
        preds = est.predict([pairs[0][0]])
        assert preds[0].max() < 6
        assert est.get_params()["iterations"] == 2
        assert 0.0 <= est.score([p[0] for p in pairs[:3]], [p[1] for p in pairs[:3]]) <= 100.0

    def test_ar_estimator(self):
        pairs = toy_pairs(16)
        est = AutoregressiveTranslator(model_config={k: v for k, v in TINY.items() if k != "n_mels"},
                                       beam=2, max_updates=5, batch_size=4)
        est.fit([p[0] for p in pairs], [p[1] for p in pairs])
        assert len(est.predict([pairs[1][0]])) == 1

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            MaskPredictTranslator().predict([frames()])
