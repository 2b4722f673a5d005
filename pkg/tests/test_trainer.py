import copy
from dataclasses import replace

import numpy as np
import pytest

import krada_lab.trainer as trainer
from krada_lab.errors import ConfigError, NumericalError
from krada_lab.losses import masked_adv_loss, source_seg_loss, star_seg_loss
from krada_lab.networks import classify, forward_features, init_model, param_set, save_model
from krada_lab.openset import generate_pseudo_labels, known_region_mask
from krada_lab.synthworld import SceneSpec, generate_source, generate_target, stack
from krada_lab.tensor import Tape, Tensor, softmax_channels
from krada_lab.trainer import (
    Dataset,
    PseudoLabelStore,
    TrainConfig,
    batch_indices,
    init_state,
    predict,
    train,
    train_step,
)

K = 4
SMALL = SceneSpec(height=16, width=16, size_min=3, size_max=5)


@pytest.fixture(scope="module")
def data():
    src = Dataset(*stack(generate_source(SMALL, 12)))
    tgt = Dataset(*stack(generate_target(SMALL, 12)))
    return src, tgt


def snapshot(state):
    return {(g, n): t.data.copy() for g, n, t in param_set(state.model, state.disc).named()}


def changed(before, after, group):
    return any(not np.array_equal(before[k], after[k]) for k in before if k[0] == group)


def loss_grads(model, disc, fn):
    """Gradient of one scalar loss w.r.t. every parameter, leaving buffers zeroed."""
    ps = param_set(model, disc)
    ps.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    out = {(g, n): t.grad.copy() for g, n, t in ps.named()}
    ps.zero_grad()
    return out


def first_batch(data, cfg):
    src, tgt = data
    s = batch_indices(cfg.seed, "source-shuffle", len(src), cfg.batch_size, 0)
    t = batch_indices(cfg.seed, "target-shuffle", len(tgt), cfg.batch_size, 0)
    return src.images[s], src.labels[s], tgt.images[t], t


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"iterations": 0}, {"lr": 0.0}, {"alpha": -1.0}, {"delta": 0.0}, {"batch_size": 0},
        {"mode": "bogus"}, {"metric": "tv"}, {"adv_mode": "wgan"}, {"adv_weight": -1.0},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            replace(TrainConfig(), **kwargs).validate()

    @pytest.mark.parametrize("mode, pseudo, disc, mask", [
        ("krada", True, True, True),
        ("krada_no_mask", True, True, False),
        ("csdas", False, True, False),
        ("source_only", False, False, False),
        ("source_only_pl", True, False, False),
    ])
    def test_mode_switches(self, mode, pseudo, disc, mask):
        cfg = TrainConfig(mode=mode)
        assert (cfg.uses_pseudo, cfg.uses_disc, cfg.uses_mask) == (pseudo, disc, mask)
        assert cfg.effective_alpha == (cfg.alpha if pseudo else 0.0)


class TestBatches:
    def test_epoch_is_permutation(self):
        seen = np.concatenate([batch_indices(0, "s", 10, 4, t) for t in range(3)])
        assert sorted(seen) == list(range(10))

    def test_epochs_reshuffle(self):
        a = np.concatenate([batch_indices(0, "s", 10, 4, t) for t in range(3)])
        b = np.concatenate([batch_indices(0, "s", 10, 4, t) for t in range(3, 6)])
        assert not np.array_equal(a, b)

    def test_streams_independent(self):
        assert not np.array_equal(batch_indices(0, "source-shuffle", 50, 50, 0),
                                  batch_indices(0, "target-shuffle", 50, 50, 0))


class TestPseudoStore:
    def test_versions_must_increase(self):
        store = PseudoLabelStore(3, K, 2, 2)
        lab = np.zeros((1, K + 1, 2, 2))
        store.put([0], lab, 1)
        with pytest.raises(ValueError):
            store.put([0], lab, 1)

    def test_get_is_one_hot_unknown(self):
        store = PseudoLabelStore(2, K, 2, 2)
        lab = np.zeros((1, K + 1, 2, 2))
        lab[0, K, 0, 1] = 1
        store.put([1], lab, 3)
        got = store.get([1])
        np.testing.assert_array_equal(got, lab)
        assert store.version.tolist() == [0, 3]


class TestRouting:
    """Each parameter group moves by exactly the gradient of its own loss."""

    @pytest.mark.parametrize("mode", ["krada", "krada_no_mask", "csdas"])
    def test_exact_updates(self, data, mode):
        cfg = TrainConfig(mode=mode, lr=0.05, iterations=5, batch_size=3, seed=2)
        state = init_state(cfg, K, len(data[1]), 16, 16)
        xS, yS, xT, t_idx = first_batch(data, cfg)
        model, disc = copy.deepcopy(state.model), copy.deepcopy(state.disc)

        def f_both():
            return forward_features(model, xS), forward_features(model, xT)

        def adv():
            fS, fT = f_both()
            mask = np.ones((len(xT),) + xT.shape[2:])
            if cfg.uses_mask:
                probs = softmax_channels(classify(model.C_star, fT.detach())).data
                mask = known_region_mask(generate_pseudo_labels(probs, cfg.delta, cfg.metric))
            return masked_adv_loss(disc, fS, fT, mask)

        g_seg = loss_grads(model, disc, lambda: source_seg_loss(model, xS, yS))
        g_star = loss_grads(model, disc, lambda: star_seg_loss(model, xS, yS))
        g_adv = loss_grads(model, disc, adv)

        before = snapshot(state)
        train_step(state, xS, yS, xT, t_idx)
        after = snapshot(state)
        lr = cfg.lr
        for key in before:
            group = key[0]
            if group == "C":
                step = g_seg[key]
            elif group == "C_star":
                step = g_star[key]
            elif group == "D":
                step = g_adv[key]
            else:
                step = g_seg[key] + g_star[key] - g_adv[key]
            np.testing.assert_allclose(after[key], before[key] - lr * step, rtol=0, atol=1e-12,
                                       err_msg=str(key))
        # cross terms really are zero
        for key in before:
            if key[0] == "C":
                assert not g_star[key].any() and not g_adv[key].any()
            if key[0] == "C_star":
                assert not g_seg[key].any() and not g_adv[key].any()
            if key[0] == "D":
                assert not g_seg[key].any() and not g_star[key].any()

    @pytest.mark.parametrize("target, frozen, moving", [
        ("star_seg_loss", "C_star", ("C", "D", "F")),
        ("masked_adv_loss", "D", ("C", "C_star", "F")),
        ("source_seg_loss", "C", ("C_star", "D", "F")),
    ])
    def test_selective_zeroing(self, data, monkeypatch, target, frozen, moving):
        cfg = TrainConfig(mode="csdas", iterations=3, batch_size=3)
        monkeypatch.setattr(trainer, target, lambda *a, **k: Tensor(0.0))
        state = init_state(cfg, K, len(data[1]), 16, 16)
        before = snapshot(state)
        train_step(state, *first_batch(data, cfg))
        after = snapshot(state)
        assert not changed(before, after, frozen)
        for g in moving:
            assert changed(before, after, g), g

    def test_nonsaturating_routes_disc_loss_to_d_only(self, data):
        cfg = TrainConfig(mode="krada_no_mask", adv_mode="nonsaturating", batch_size=3)
        state = init_state(cfg, K, len(data[1]), 16, 16)
        xS, yS, xT, t_idx = first_batch(data, cfg)
        model, disc = copy.deepcopy(state.model), copy.deepcopy(state.disc)
        ones = np.ones((len(xT),) + xT.shape[2:])
        g_d = loss_grads(model, disc, lambda: masked_adv_loss(
            disc, forward_features(model, xS).detach(), forward_features(model, xT).detach(), ones))
        before = snapshot(state)
        train_step(state, xS, yS, xT, t_idx)
        after = snapshot(state)
        for key in before:
            if key[0] == "D":
                np.testing.assert_allclose(after[key], before[key] - cfg.lr * g_d[key], atol=1e-12)


class TestModes:
    def test_source_only_leaves_disc_and_store(self, data):
        cfg = TrainConfig(mode="source_only", iterations=4, batch_size=3)
        result = train(cfg, *data, K)
        fresh = init_state(cfg, K, len(data[1]), 16, 16)
        for a, b in zip(result.state.disc.layers, fresh.disc.layers):
            np.testing.assert_array_equal(a.weight.data, b.weight.data)
        assert not result.state.store.unknown.any()
        assert not result.state.store.version.any()
        assert all(b.L_adv == 0.0 and b.unknown_fraction == 0.0 for b in result.trace)

    def test_first_target_loss_is_zero(self, data):
        result = train(TrainConfig(iterations=1, batch_size=3), *data, K)
        assert result.trace[0].L_seg_T == 0.0

    def test_pseudo_store_refreshed(self, data):
        cfg = TrainConfig(mode="source_only_pl", iterations=4, batch_size=3)
        result = train(cfg, *data, K)
        assert result.state.store.version.max() == 4
        assert result.trace[0].L_adv == 0.0

    @pytest.mark.parametrize("n", [1, 3])
    def test_trace_length(self, data, n):
        result = train(TrainConfig(iterations=n, batch_size=3), *data, K)
        assert len(result.trace) == n and result.state.t == n

    def test_no_mask_differs_only_in_mask(self, data, monkeypatch):
        seen = []
        real = trainer.masked_adv_loss

        def spy(disc, fS, fT, mask, **kw):
            seen.append(mask.copy())
            return real(disc, fS, fT, mask, **kw)

        monkeypatch.setattr(trainer, "masked_adv_loss", spy)
        cfg = TrainConfig(mode="krada_no_mask", delta=5.0, iterations=2, batch_size=3)
        train(cfg, *data, K)
        assert all(m.all() for m in seen)
        seen.clear()
        train(replace(cfg, mode="krada"), *data, K)
        assert not all(m.all() for m in seen)

    def test_non_finite_aborts(self, data):
        cfg = TrainConfig(iterations=2, batch_size=3)
        state = init_state(cfg, K, len(data[1]), 16, 16)
        state.model.C.weight.data[...] = np.inf
        with pytest.raises(NumericalError):
            train(cfg, *data, K, state=state)

    def test_empty_dataset(self, data):
        empty = Dataset(data[0].images[:0], data[0].labels[:0])
        with pytest.raises(ConfigError):
            train(TrainConfig(iterations=1), empty, data[1], K)


class TestDeterminism:
    def test_bit_identical_checkpoints(self, data, tmp_path):
        cfg = TrainConfig(iterations=10, batch_size=3, seed=5)
        for name in ("a", "b"):
            save_model(tmp_path / name, train(cfg, *data, K).state.model)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_identical_traces(self, data):
        cfg = TrainConfig(iterations=6, batch_size=3, seed=1)
        assert train(cfg, *data, K).trace == train(cfg, *data, K).trace

    def test_resume_matches_uninterrupted(self, data):
        cfg = TrainConfig(iterations=8, batch_size=5, seed=3)
        full = train(cfg, *data, K)
        part = train(cfg, *data, K, until=3)
        state = copy.deepcopy(part.state)
        rest = train(cfg, *data, K, state=state)
        assert part.trace + rest.trace == full.trace
        np.testing.assert_array_equal(rest.state.model.C.weight.data, full.state.model.C.weight.data)


class TestPredict:
    def _model(self):
        model, _ = init_model(K, 3, seed=0)
        model.C.weight.data[...] = 0
        return model

    def test_constant_logits_tie_to_class_one(self):
        pred = predict(self._model(), np.random.default_rng(0).random((2, 3, 5, 5)))
        assert (pred == 1).all()

    def test_unknown_channel_dominant(self):
        model = self._model()
        model.C.bias.data[...] = [0, 0, 0, 0, 3]
        assert (predict(model, np.zeros((1, 3, 4, 4))) == K + 1).all()

    def test_shift_invariance(self):
        model, _ = init_model(K, 3, seed=1)
        x = np.random.default_rng(1).random((2, 3, 6, 6))
        base = predict(model, x)
        model.C.bias.data += 7.25
        np.testing.assert_array_equal(predict(model, x), base)

    def test_range(self):
        model, _ = init_model(K, 3, seed=2)
        pred = predict(model, np.random.default_rng(2).random((3, 3, 6, 6)))
        assert pred.min() >= 1 and pred.max() <= K + 1


@pytest.mark.slow
def test_source_miou_star_held_out():
    spec = SceneSpec()
    src = Dataset(*stack(generate_source(spec, 200)))
    held = Dataset(*stack(generate_source(spec, 100, split="test")))
    result = train(TrainConfig(mode="source_only", iterations=1500), src, src, K)
    report = trainer.evaluate(result.state.model, held)
    print(f"held-out source mIoU* = {report.miou_star:.4f}")
    assert report.miou_star > 0.8
