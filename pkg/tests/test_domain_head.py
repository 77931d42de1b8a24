"""Prototype classifier tests: hand cases, fixed points, head shapes."""

import numpy as np
import pytest

import mitodet.tensor as T
from mitodet.data import DomainLabel
from mitodet.domain_head import (
    ANCHOR_PULL,
    PREDICTION_PULL,
    DomainHead,
    DomainHeadConfig,
    PrototypeBank,
    agnostic_loss,
    domain_loss,
    prototype_fixed_point,
)
from mitodet.tensor import Graph, Tensor


class TestBank:
    def test_anchors_are_unit_vectors(self):
        bank = PrototypeBank(4)
        np.testing.assert_array_equal(bank.anchors, np.eye(4))

    def test_prototypes_start_scaled_inward(self):
        bank = PrototypeBank(3)
        np.testing.assert_array_equal(bank.prototypes.data, 0.1 * np.eye(3))
        assert bank.prototypes.requires_grad

    def test_dimension_validated(self):
        with pytest.raises(ValueError):
            PrototypeBank(0)

    def test_pull_weights(self):
        assert ANCHOR_PULL == 0.1
        assert PREDICTION_PULL == 0.9
        assert ANCHOR_PULL + PREDICTION_PULL == 1.0

    def test_fixed_point_formula(self):
        bank = PrototypeBank(2)
        z = np.array([0.3, 0.4])
        fp = prototype_fixed_point(bank, 1, z)
        np.testing.assert_allclose(fp, 0.1 * np.array([0.0, 1.0]) + 0.9 * z)


class TestDomainLoss:
    def test_prediction_at_prototype(self):
        # z sits on the fresh prototype: only the anchor pull remains
        bank = PrototypeBank(2)
        z = Tensor(np.array([[0.1, 0.0]]))
        loss = domain_loss([bank], [z], [DomainLabel(0, 0, 0)])
        assert abs(loss.item() - 0.0405) <= 1e-12

    def test_prediction_at_anchor(self):
        bank = PrototypeBank(2)
        z = Tensor(np.array([[1.0, 0.0]]))
        loss = domain_loss([bank], [z], [DomainLabel(0, 0, 0)])
        assert abs(loss.item() - 0.405) <= 1e-12

    def test_zero_when_all_coincide(self):
        bank = PrototypeBank(2)
        bank.prototypes = Tensor(np.eye(2), requires_grad=True)
        z = Tensor(np.array([[1.0, 0.0]]))
        loss = domain_loss([bank], [z], [DomainLabel(0, 0, 0)])
        assert loss.item() == 0.0

    def test_heads_sum(self):
        b1, b2 = PrototypeBank(2), PrototypeBank(2)
        z = Tensor(np.array([[0.1, 0.0]]))
        labels = [DomainLabel(0, 0, 0)]
        single = domain_loss([b1], [z], labels).item()
        both = domain_loss([b1, b2], [z, z], [DomainLabel(0, 0, 0)]).item()
        assert abs(both - 2 * single) <= 1e-15

    def test_batch_averages(self):
        bank = PrototypeBank(2)
        z2 = Tensor(np.array([[0.1, 0.0], [0.1, 0.0]]))
        z1 = Tensor(np.array([[0.1, 0.0]]))
        two = domain_loss([bank], [z2],
                          [DomainLabel(0, 0, 0), DomainLabel(0, 0, 1)]).item()
        one = domain_loss([bank], [z1], [DomainLabel(0, 0, 0)]).item()
        assert abs(two - one) <= 1e-15

    def test_label_out_of_range(self):
        bank = PrototypeBank(2)
        z = Tensor(np.array([[0.0, 0.0]]))
        with pytest.raises(ValueError):
            domain_loss([bank], [z], [DomainLabel(2, 0, 0)])

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(0)
        bank = PrototypeBank(3)
        bank.prototypes = Tensor(rng.standard_normal((3, 3)),
                                 requires_grad=True)
        z = rng.standard_normal((4, 3))
        labels = [DomainLabel(i % 3, 0, i) for i in range(4)]
        base = domain_loss([bank], [Tensor(z)], labels).item()
        perm = [2, 0, 3, 1]
        shuffled = domain_loss([bank], [Tensor(z[perm])],
                               [labels[i] for i in perm]).item()
        assert abs(base - shuffled) <= 1e-12

    def test_unclaimed_prototype_gets_no_gradient(self):
        bank = PrototypeBank(3)
        z = Tensor(np.array([[0.4, 0.1, 0.0]]))
        with Graph() as g:
            loss = domain_loss([bank], [z], [DomainLabel(1, 0, 0)])
            g.backward(loss)
        grad = bank.prototypes.grad
        np.testing.assert_array_equal(grad[0], np.zeros(3))
        np.testing.assert_array_equal(grad[2], np.zeros(3))
        assert np.abs(grad[1]).max() > 0

    def test_gradient_descent_reaches_fixed_point(self):
        # constant prediction per class: prototypes contract linearly
        # toward 0.1 * anchor + 0.9 * z, so 500 steps at lr 0.1 suffice
        rng = np.random.default_rng(1)
        bank = PrototypeBank(3)
        zs = rng.standard_normal((3, 3)) * 0.5
        labels = [DomainLabel(v, 0, v) for v in range(3)]
        preds = Tensor(zs)
        for _ in range(500):
            bank.prototypes.zero_grad()
            with Graph() as g:
                g.backward(domain_loss([bank], [preds], labels))
            # lr scaled by batch x dim to undo the loss normalization
            bank.prototypes = Tensor(
                bank.prototypes.data - 0.1 * 9 * bank.prototypes.grad / 2.0,
                requires_grad=True)
        for v in range(3):
            fp = prototype_fixed_point(bank, v, zs[v])
            assert np.abs(bank.prototypes.data[v] - fp).max() <= 1e-6

    def test_anchors_untouched_by_training(self):
        bank = PrototypeBank(2)
        before = bank.anchors.copy()
        z = Tensor(np.array([[0.5, 0.2]]))
        with Graph() as g:
            g.backward(domain_loss([bank], [z], [DomainLabel(0, 0, 0)]))
        np.testing.assert_array_equal(bank.anchors, before)


class TestAgnosticLoss:
    def test_hand_value_at_origin(self):
        bank = PrototypeBank(2)
        z = Tensor(np.array([[0.0, 0.0]]))
        loss = agnostic_loss([bank], [z])
        assert abs(loss.item() - 0.01) <= 1e-12

    def test_zero_when_coincident(self):
        bank = PrototypeBank(2)
        bank.prototypes = Tensor(np.tile([0.5, 0.25], (2, 1)),
                                 requires_grad=True)
        z = Tensor(np.array([[0.5, 0.25]]))
        assert agnostic_loss([bank], [z]).item() == 0.0

    def test_matches_naive_mean_of_squares(self):
        rng = np.random.default_rng(2)
        bank = PrototypeBank(4)
        bank.prototypes = Tensor(rng.standard_normal((4, 4)),
                                 requires_grad=True)
        z = rng.standard_normal((3, 4))
        want = np.mean([
            np.sum((bank.prototypes.data[l] - z[i]) ** 2)
            for i in range(3) for l in range(4)])
        got = agnostic_loss([bank], [Tensor(z)]).item()
        assert abs(got - want) <= 1e-12

    def test_gradient_zero_exactly_at_centroid(self):
        # prototype coordinates picked so their mean is exact in binary
        bank = PrototypeBank(2)
        bank.prototypes = Tensor(np.array([[0.25, 1.0], [0.75, 0.5]]),
                                 requires_grad=True)
        centroid = bank.prototypes.data.mean(axis=0)  # (0.5, 0.75), exact
        z = Tensor(centroid[None, :], requires_grad=True)
        with Graph() as g:
            g.backward(agnostic_loss([bank], [z]))
        np.testing.assert_array_equal(z.grad, np.zeros((1, 2)))

    def test_gradient_matches_closed_form(self):
        rng = np.random.default_rng(3)
        bank = PrototypeBank(3)
        bank.prototypes = Tensor(rng.standard_normal((3, 3)),
                                 requires_grad=True)
        z0 = rng.standard_normal((2, 3))
        z = Tensor(z0, requires_grad=True)
        with Graph() as g:
            g.backward(agnostic_loss([bank], [z]))
        s = bank.prototypes.data.sum(axis=0)
        want = (2.0 * (3 * z0 - s)) / (2 * 3)
        np.testing.assert_allclose(z.grad, want, rtol=1e-10)

    def test_prototypes_stay_constant(self):
        bank = PrototypeBank(2)
        z = Tensor(np.array([[0.3, 0.1]]), requires_grad=True)
        with Graph() as g:
            g.backward(agnostic_loss([bank], [z]))
        assert bank.prototypes.grad is None
        assert z.grad is not None


class TestDomainHead:
    CFG = DomainHeadConfig(reduced_channels=8, head_dims=(4, 6, 11))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DomainHeadConfig(reduced_channels=0, head_dims=(4,))
        with pytest.raises(ValueError):
            DomainHeadConfig(reduced_channels=8, head_dims=())
        with pytest.raises(ValueError):
            DomainHeadConfig(reduced_channels=8, head_dims=(0,))

    def test_tap_fusion_shapes(self):
        rng = np.random.default_rng(4)
        taps = [Tensor(rng.standard_normal(s))
                for s in [(8, 16, 16), (16, 8, 8), (32, 4, 4)]]
        head = DomainHead(56, self.CFG, seed=0)
        outs = head.forward(taps)
        assert [o.shape for o in outs] == [(4,), (6,), (11,)]

    def test_batched_tap_fusion(self):
        rng = np.random.default_rng(5)
        taps = [Tensor(rng.standard_normal((2,) + s))
                for s in [(8, 16, 16), (16, 8, 8), (32, 4, 4)]]
        head = DomainHead(56, self.CFG, seed=0)
        outs = head.forward(taps)
        assert [o.shape for o in outs] == [(2, 4), (2, 6), (2, 11)]

    def test_batched_matches_single(self):
        rng = np.random.default_rng(6)
        raw = [rng.standard_normal((2,) + s)
               for s in [(8, 16, 16), (16, 8, 8), (32, 4, 4)]]
        head = DomainHead(56, self.CFG, seed=1)
        batched = head.forward([Tensor(r) for r in raw])
        single = head.forward([Tensor(r[0]) for r in raw])
        for b, s in zip(batched, single):
            np.testing.assert_allclose(b.data[0], s.data, atol=1e-12)

    def test_zero_taps_map_to_zero_logits(self):
        taps = [Tensor(np.zeros(s))
                for s in [(8, 16, 16), (16, 8, 8), (32, 4, 4)]]
        head = DomainHead(56, self.CFG, seed=0)
        for out in head.forward(taps):
            np.testing.assert_array_equal(out.data, np.zeros(out.shape))

    def test_wrong_tap_count_rejected(self):
        head = DomainHead(56, self.CFG, seed=0)
        with pytest.raises(T.ShapeError):
            head.forward([Tensor(np.zeros((8, 16, 16)))])

    def test_channel_mismatch_rejected(self):
        head = DomainHead(60, self.CFG, seed=0)
        taps = [Tensor(np.zeros(s))
                for s in [(8, 16, 16), (16, 8, 8), (32, 4, 4)]]
        with pytest.raises(T.ShapeError):
            head.forward(taps)

    def test_deterministic_init(self):
        h1 = DomainHead(56, self.CFG, seed=7)
        h2 = DomainHead(56, self.CFG, seed=7)
        for name in h1.params:
            np.testing.assert_array_equal(h1.params[name].data,
                                          h2.params[name].data)

    def test_param_names_cover_heads(self):
        head = DomainHead(56, self.CFG, seed=0)
        for i in range(3):
            assert f"out{i}.weight" in head.params
            assert f"out{i}.bias" in head.params
