# tests/test_identity.py
import logging
import math

import numpy as np
import pytest

from adaptrack.diffcore import Mlp, Tensor, grad_check, l2_normalize
from adaptrack.identity import (
    IdentityError,
    LabeledEmbedding,
    PairSet,
    assign_identities,
    ia_loss,
    info_nce,
    pair_weight,
    project,
    sample_pairs,
)


def unit(*values) -> Tensor:
    v = np.asarray(values, dtype=np.float64)
    return Tensor(v / np.linalg.norm(v))


def sample(identity, frame, iou=1.0, dim=4, rng=None) -> LabeledEmbedding:
    rng = rng or np.random.default_rng(identity * 100 + frame)
    return LabeledEmbedding(rng.normal(size=dim), frame=frame, identity=identity, iou=iou)


class TestLabeledEmbedding:
    def test_identity_requires_match(self):
        with pytest.raises(IdentityError):
            LabeledEmbedding(np.zeros(2), frame=0, identity=None, iou=0.5)

    def test_match_requires_identity(self):
        with pytest.raises(IdentityError):
            LabeledEmbedding(np.zeros(2), frame=0, identity=3, iou=0.0)

    def test_iou_range(self):
        with pytest.raises(IdentityError) as exc_info:
            LabeledEmbedding(np.zeros(2), frame=0, identity=1, iou=1.5)
        assert "IoU" in str(exc_info.value)


class TestAssignIdentities:
    def test_exact_boxes(self):
        boxes = np.array([[0, 0, 10, 10], [50, 50, 10, 10]], dtype=float)
        out = assign_identities(boxes, [np.ones(2), np.ones(2)], boxes, [7, 9], frame=3)
        assert [(s.identity, s.iou, s.frame) for s in out] == [(7, 1.0, 3), (9, 1.0, 3)]

    def test_prefers_higher_overlap(self):
        det = np.array([[0, 0, 10, 10]], dtype=float)
        gt = np.array([[0, 0, 10, 6], [0, 0, 3, 10]], dtype=float)
        out = assign_identities(det, [np.ones(2)], gt, [1, 2])
        assert out[0].identity == 1
        assert out[0].iou == pytest.approx(0.6)

    def test_disjoint_unmatched(self):
        out = assign_identities(np.array([[0, 0, 1, 1]], dtype=float), [np.ones(2)],
                                np.array([[5, 5, 1, 1]], dtype=float), [1])
        assert out[0].identity is None
        assert out[0].iou == 0.0
        assert not out[0].matched

    def test_count_mismatch(self):
        with pytest.raises(IdentityError):
            assign_identities(np.zeros((2, 4)), [np.ones(2)], np.zeros((0, 4)), [])


class TestPairWeight:
    @pytest.mark.parametrize("a, b, expected", [(1.0, 1.0, 1.0), (0.5, 1.0, 2 / 3), (0.6, 0.6, 0.6)])
    def test_harmonic_mean(self, a, b, expected):
        assert pair_weight(a, b) == pytest.approx(expected, abs=1e-12)

    def test_random_matches_formula(self):
        rng = np.random.default_rng(0)
        for a, b in rng.uniform(0.01, 1.0, size=(200, 2)):
            assert abs(pair_weight(a, b) - 2 * a * b / (a + b)) < 1e-12

    def test_zero_sum(self):
        with pytest.raises(IdentityError):
            pair_weight(0.0, 0.0)


class TestSamplePairs:
    def test_one_identity_three_frames(self):
        pairs = sample_pairs([sample(1, f) for f in range(3)])
        assert len(pairs.positives) == 3

    def test_two_identities_two_frames(self):
        pool = [sample(1, 0), sample(2, 0), sample(1, 1), sample(2, 1)]
        pairs = sample_pairs(pool)
        assert len(pairs.positives) == 2
        assert pairs.num_negative_pairs == 4

    def test_low_iou_excluded(self):
        pool = [sample(1, 0), sample(1, 1, iou=0.4), sample(1, 2)]
        pairs = sample_pairs(pool)
        assert len(pairs.samples) == 2
        assert len(pairs.positives) == 1

    def test_filter_off_keeps_matched_with_unit_weight(self):
        pool = [sample(1, 0, iou=0.2), sample(1, 1, iou=0.3)]
        pairs = sample_pairs(pool, use_filter=False)
        assert pairs.positives == [(0, 1, 1.0)]

    def test_weights_are_harmonic(self):
        pairs = sample_pairs([sample(1, 0, iou=0.5), sample(1, 1, iou=1.0)])
        assert pairs.positives[0][2] == pytest.approx(2 / 3)

    def test_unmatched_never_sampled(self):
        pool = [sample(1, 0), LabeledEmbedding(np.ones(4), frame=1, identity=None, iou=0.0), sample(1, 2)]
        pairs = sample_pairs(pool, use_filter=False)
        assert all(s.matched for s in pairs.samples)

    def test_pair_accounting(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            pool = []
            for frame in range(int(rng.integers(1, 6))):
                for identity in rng.choice(6, size=int(rng.integers(0, 7)), replace=False):
                    iou = float(rng.uniform(0.0, 1.0))
                    matched = rng.random() < 0.9 and iou > 0.0
                    pool.append(LabeledEmbedding(np.ones(2), frame=frame,
                                                 identity=int(identity) if matched else None,
                                                 iou=iou if matched else 0.0))
            pairs = sample_pairs(pool)

            kept = [s for s in pool if s.matched and s.iou >= 0.5]
            counts = {}
            for s in kept:
                counts[s.identity] = counts.get(s.identity, 0) + 1
            assert len(pairs.positives) == sum(m * (m - 1) // 2 for m in counts.values())
            for a, b, _ in pairs.positives:
                assert pairs.samples[a].identity == pairs.samples[b].identity
                assert pairs.samples[a].frame != pairs.samples[b].frame
            for anchor, negatives in pairs.negatives.items():
                assert all(pairs.samples[n].identity != pairs.samples[anchor].identity for n in negatives)


class TestProject:
    def test_unit_norm(self):
        rng = np.random.default_rng(1)
        phi = Mlp([4, 6, 6, 4], rng)
        z = project(rng.normal(size=(5, 4)), phi)
        assert np.allclose(np.linalg.norm(z.data, axis=-1), 1.0, atol=1e-9)

    def test_deterministic(self):
        phi = Mlp([3, 5, 3], np.random.default_rng(2))
        x = np.array([0.3, -1.0, 2.0])
        assert np.array_equal(project(x, phi).data, project(x, phi).data)

    def test_without_phi_only_normalizes(self):
        assert np.allclose(project(np.array([3.0, 4.0]), None).data, [0.6, 0.8])

    def test_zero_vector(self):
        with pytest.raises(IdentityError):
            project(np.zeros(3), None)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        phi = Mlp([4, 5, 4], rng)
        x = Tensor(rng.normal(size=4))
        w = Tensor(rng.normal(size=4))
        assert grad_check(lambda: (project(x, phi) * w).sum(), [x, phi.weights[0]]).passed(1e-4)


class TestInfoNce:
    def test_no_negatives(self):
        z = unit(1.0, 0.0)
        assert info_nce(z, z, []).item() == pytest.approx(0.0)

    def test_symmetric_negative(self):
        z = unit(1.0, 0.0)
        assert info_nce(z, unit(0.0, 1.0), [unit(0.0, -1.0)]).item() == pytest.approx(math.log(2.0))

    def test_closed_form(self):
        tau = 0.1
        z, pos, neg = unit(1.0, 0.0), unit(1.0, 1.0), unit(0.0, 1.0)
        delta = float(z.data @ pos.data - z.data @ neg.data)
        assert info_nce(z, pos, [neg], tau).item() == pytest.approx(math.log1p(math.exp(-delta / tau)))

    def test_bad_temperature(self):
        z = unit(1.0, 0.0)
        with pytest.raises(IdentityError):
            info_nce(z, z, [], tau=0.0)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        raw = [Tensor(rng.normal(size=3)) for _ in range(4)]
        f = lambda: info_nce(l2_normalize(raw[0]), l2_normalize(raw[1]), [l2_normalize(r) for r in raw[2:]], 0.5)
        assert grad_check(f, raw).passed(1e-4)


class TestIaLoss:
    @pytest.fixture
    def pool(self):
        return [
            LabeledEmbedding(np.array([1.0, 0.2, 0.0]), frame=0, identity=1, iou=1.0),
            LabeledEmbedding(np.array([0.9, 0.0, 0.3]), frame=1, identity=1, iou=1.0),
            LabeledEmbedding(np.array([0.0, 1.0, 0.1]), frame=0, identity=2, iou=1.0),
        ]

    def test_single_pair_is_symmetric_info_nce(self, pool):
        pairs = sample_pairs(pool)
        z = [l2_normalize(Tensor(s.embedding)) for s in pairs.samples]
        expected = 0.5 * (info_nce(z[0], z[1], [z[2]], 0.1).item() + info_nce(z[1], z[0], [z[2]], 0.1).item())
        assert ia_loss(pairs, None, tau=0.1).item() == pytest.approx(expected)

    def test_doubling_weights_doubles_loss(self, pool):
        pairs = sample_pairs(pool)
        doubled = PairSet(pairs.samples, [(a, b, 2.0 * w) for a, b, w in pairs.positives], pairs.negatives)
        assert ia_loss(doubled, None).item() == pytest.approx(2.0 * ia_loss(pairs, None).item())

    def test_two_pairs_weighted_mean(self, pool):
        pool = pool + [
            LabeledEmbedding(np.array([0.1, 0.8, 0.5]), frame=1, identity=2, iou=0.5),
        ]
        pairs = sample_pairs(pool)
        z = [l2_normalize(Tensor(s.embedding)) for s in pairs.samples]
        a0, a1, b0, b1 = z
        l_a = 0.5 * (info_nce(a0, a1, [b0, b1], 0.1).item() + info_nce(a1, a0, [b0, b1], 0.1).item())
        l_b = 0.5 * (info_nce(b0, b1, [a0, a1], 0.1).item() + info_nce(b1, b0, [a0, a1], 0.1).item())
        w_b = 2 * 1.0 * 0.5 / 1.5
        assert ia_loss(pairs, None, tau=0.1).item() == pytest.approx((l_a + w_b * l_b) / 2)

    def test_empty_positives_warns(self, caplog):
        pairs = sample_pairs([sample(1, 0), sample(2, 0)])
        with caplog.at_level(logging.WARNING):
            loss = ia_loss(pairs, None)
        assert loss.item() == 0.0
        assert "正样本对" in caplog.text

    def test_gradient_through_phi(self, pool):
        phi = Mlp([3, 4, 3], np.random.default_rng(8))
        for s in pool:
            s.embedding = Tensor(s.embedding)
        pairs = sample_pairs(pool)
        params = [s.embedding for s in pairs.samples] + [phi.weights[0], phi.biases[1]]
        assert grad_check(lambda: ia_loss(pairs, phi, tau=0.5), params).passed(1e-4)
