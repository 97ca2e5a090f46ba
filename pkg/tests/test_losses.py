import numpy as np
import pytest

from protohead import autodiff as ad
from protohead import losses as L
from protohead.errors import BatchTooSmall, ConfigError, LabelOutOfRange, NonFiniteTerm


class TestAssignmentLoss:
    def test_agreeing_one_hot_is_zero(self):
        a = np.zeros((5, 4))
        a[np.arange(5), [0, 1, 2, 3, 0]] = 1.0
        out = L.assignment_loss(ad.constant(a), ad.constant(a))
        assert out.value == pytest.approx(0.0, abs=1e-12)

    def test_uniform_gives_log_n(self):
        n = 6
        a = np.full((9, n), 1.0 / n)
        out = L.assignment_loss(ad.constant(a), ad.constant(a))
        assert out.value == pytest.approx(np.log(n), abs=1e-12)

    def test_disjoint_one_hots_hit_log_floor(self):
        a = np.zeros((3, 4))
        b = np.zeros((3, 4))
        a[:, 0] = 1.0
        b[:, 1] = 1.0
        out = L.assignment_loss(ad.constant(a), ad.constant(b), eps_log=1e-8)
        assert out.value == pytest.approx(-np.log(1e-8), abs=1e-9)
        assert out.value == pytest.approx(18.4207, abs=1e-3)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(0)
        a = rng.dirichlet(np.ones(5), size=7)
        b = rng.dirichlet(np.ones(5), size=7)
        lab = L.assignment_loss(ad.constant(a), ad.constant(b))
        lba = L.assignment_loss(ad.constant(b), ad.constant(a))
        assert lab.value == pytest.approx(lba.value, abs=1e-14)

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = rng.dirichlet(np.ones(4), size=6)
            b = rng.dirichlet(np.ones(4), size=6)
            assert L.assignment_loss(ad.constant(a), ad.constant(b)).value >= 0


class TestCorrelationAndShift:
    def test_diagonal_is_one(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 4))
        c = L.correlation_matrix(ad.constant(x)).value
        assert np.allclose(np.diag(c), 1.0, atol=1e-12)

    def test_orthogonal_rows_give_identity(self):
        c = L.correlation_matrix(ad.constant(np.eye(4) * 3.0)).value
        assert np.allclose(c, np.eye(4), atol=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        c = L.correlation_matrix(ad.constant(rng.normal(size=(8, 5)))).value
        assert np.max(np.abs(c - c.T)) < 1e-12

    def test_intra_shift_substitution(self):
        f = np.full((4, 4), 0.5)
        a = np.full((4, 4), 0.3)
        b = L.adaptive_shift(ad.constant(f), ad.constant(a), L.AlignmentConfig(), "intra")
        assert b.value == pytest.approx(0.1, abs=1e-12)

    def test_inter_shift_substitution(self):
        f = np.full((4, 4), 0.2)
        a = np.full((4, 4), 0.3)
        b = L.adaptive_shift(ad.constant(f), ad.constant(a), L.AlignmentConfig(), "inter")
        assert b.value == pytest.approx(1.2, abs=1e-12)

    def test_intra_shift_zero_case(self):
        f = np.full((3, 3), 0.45)
        a = np.full((3, 3), 0.35)  # mean difference exactly k_shift
        b = L.adaptive_shift(ad.constant(f), ad.constant(a), L.AlignmentConfig(), "intra")
        assert b.value == pytest.approx(0.0, abs=1e-12)


class TestCorrDistill:
    def test_all_ones_zero_shift(self):
        ones = np.ones((5, 5))
        out = L.corr_distill(ad.constant(ones), ad.constant(ones), ad.constant(0.0))
        assert out.value == pytest.approx(-1.0, abs=1e-12)

    def test_zero_assignment_correlation_gives_zero(self):
        rng = np.random.default_rng(4)
        f = rng.normal(size=(5, 5))
        out = L.corr_distill(ad.constant(f), ad.constant(np.zeros((5, 5))), ad.constant(3.3))
        assert out.value == pytest.approx(0.0, abs=1e-12)

    def test_collapsed_assignment_penalized_on_two_cluster_toy(self):
        # two tight clusters: collapse (every patch on one prototype) makes
        # the assignment correlation all ones and must cost more than the
        # matched two-block assignment
        i = 8
        fhat = np.full((i, i), -0.2)
        fhat[:4, :4] = 1.0
        fhat[4:, 4:] = 1.0
        matched = np.zeros((i, i))
        matched[:4, :4] = 1.0
        matched[4:, 4:] = 1.0
        collapsed = np.ones((i, i))
        cfg = L.AlignmentConfig()
        loss_matched = L.alignment_pair(ad.constant(fhat), ad.constant(matched), cfg, "intra")
        loss_collapsed = L.alignment_pair(ad.constant(fhat), ad.constant(collapsed), cfg, "intra")
        assert loss_matched.value == pytest.approx(-0.4, abs=1e-12)
        assert loss_collapsed.value == pytest.approx(0.3, abs=1e-12)
        assert loss_matched.value < loss_collapsed.value

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            L.adaptive_shift(ad.constant(np.ones((2, 2))), ad.constant(np.ones((2, 2))), L.AlignmentConfig(), "diag")


def nce_oracle(s, q, dom_s, dom_t, tau):
    sn = s / np.linalg.norm(s, axis=1, keepdims=True)
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    valid = [n for n in range(s.shape[0]) if dom_s[n] and dom_t[n]]
    cand = [n for n in range(s.shape[0]) if dom_t[n]]
    if not valid:
        return 0.0
    total = 0.0
    for n in valid:
        num = np.exp(qn[n] @ sn[n] / tau)
        den = sum(np.exp(qn[m] @ sn[n] / tau) for m in cand)
        total += -np.log(num / den)
    return total / len(valid)


class TestContrastiveLoss:
    def test_single_valid_prototype_is_zero(self):
        rng = np.random.default_rng(5)
        s = rng.normal(size=(4, 3))
        q = rng.normal(size=(4, 3))
        dom = np.array([1, 0, 0, 0])
        out = L.contrastive_loss(ad.constant(s), ad.constant(q), dom, dom, 0.5)
        assert out.value == pytest.approx(0.0, abs=1e-12)

    def test_two_orthonormal_prototypes_analytic(self):
        s = np.array([[1.0, 0.0], [0.0, 1.0]])
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        dom = np.array([1, 1])
        out = L.contrastive_loss(ad.constant(s), ad.constant(q), dom, dom, 1.0)
        expect = -np.log(np.e / (np.e + 1.0))
        assert out.value == pytest.approx(expect, abs=1e-10)
        assert out.value == pytest.approx(0.3133, abs=1e-4)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(6)
        for trial in range(5):
            n = 7
            s = rng.normal(size=(n, 4))
            q = rng.normal(size=(n, 4))
            dom_s = (rng.random(n) > 0.3).astype(int)
            dom_t = (rng.random(n) > 0.3).astype(int)
            dom_t[0] = dom_s[0] = 1  # keep at least one valid pair
            out = L.contrastive_loss(ad.constant(s), ad.constant(q), dom_s, dom_t, 0.37)
            assert out.value == pytest.approx(
                nce_oracle(s, q, dom_s, dom_t, 0.37), abs=1e-10
            )

    def test_no_valid_prototype_returns_zero(self):
        rng = np.random.default_rng(7)
        s = rng.normal(size=(3, 2))
        out = L.contrastive_loss(
            ad.constant(s), ad.constant(s), np.array([1, 0, 0]), np.array([0, 1, 1]), 1.0
        )
        assert out.value == 0.0

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            s = rng.normal(size=(5, 3))
            q = rng.normal(size=(5, 3))
            dom = (rng.random(5) > 0.4).astype(int)
            dom[2] = 1
            out = L.contrastive_loss(ad.constant(s), ad.constant(q), dom, dom, 0.8)
            assert out.value >= -1e-12


class TestSparsityLoss:
    def test_single_nonzero_entry(self):
        r = np.zeros((3, 4))
        r[1, 2] = 0.7
        out = L.sparsity_loss(ad.constant(r), alpha=0.1, gamma=0.1)
        assert out.value == pytest.approx(0.1 * 1.0 + 0.1 * 0.7, abs=1e-12)

    def test_k_equal_entries(self):
        r = np.zeros((2, 6))
        c, k = 0.3, 5
        r.ravel()[:k] = c
        out = L.sparsity_loss(ad.constant(r), alpha=0.2, gamma=0.5)
        assert out.value == pytest.approx(0.2 * k + 0.5 * c * np.sqrt(k), abs=1e-12)

    def test_zero_matrix_guard(self):
        out = L.sparsity_loss(ad.constant(np.zeros((4, 5))), alpha=0.1, gamma=0.1)
        assert out.value == 0.0

    def test_zeroing_small_entry_decreases_loss(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            r = rng.uniform(0.5, 1.0, size=(3, 5))
            r[1, 3] = 0.01  # distinctly small entry
            base = L.sparsity_loss(ad.constant(r), 0.1, 0.1).value
            r2 = r.copy()
            r2[1, 3] = 0.0
            assert L.sparsity_loss(ad.constant(r2), 0.1, 0.1).value < base


class TestClassificationLoss:
    def test_uniform_scores_give_log_d(self):
        d = 7
        y = np.zeros(d)
        out = L.classification_loss(ad.constant(y), ad.constant(y), 3, d)
        assert out.value == pytest.approx(np.log(d), abs=1e-12)

    def test_large_margin_drives_loss_to_zero(self):
        y = np.zeros(4)
        y[2] = 60.0
        out = L.classification_loss(ad.constant(y), ad.constant(y), 2, 4)
        assert out.value < 1e-12

    def test_matches_log_sum_exp_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(8):
            ys = rng.normal(size=5)
            yt = rng.normal(size=5)
            label = int(rng.integers(0, 5))
            expect = 0.5 * (
                (np.log(np.exp(ys).sum()) - ys[label])
                + (np.log(np.exp(yt).sum()) - yt[label])
            )
            out = L.classification_loss(ad.constant(ys), ad.constant(yt), label, 5)
            assert out.value == pytest.approx(expect, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            L.classification_loss(ad.constant(np.zeros(3)), ad.constant(np.zeros(3)), 3, 3)


class TestAlignmentLoss:
    def test_fast_form_matches_direct_form(self):
        rng = np.random.default_rng(11)
        s, i, cf, n = 4, 12, 6, 5
        feats = rng.normal(size=(s, i, cf))
        raw = np.abs(rng.normal(size=(s, i, n))) + 0.05
        for seed in range(3):
            a1, a2 = ad.Var.param(raw), ad.Var.param(raw)
            fast = L.alignment_loss(feats, a1, L.AlignmentConfig(), 2, np.random.default_rng(seed))
            ref = L.alignment_loss_direct(feats, a2, L.AlignmentConfig(), 2, np.random.default_rng(seed))
            assert fast.value == pytest.approx(ref.value, abs=1e-12)
            fast.backward()
            ref.backward()
            assert np.max(np.abs(a1.grad - a2.grad)) < 1e-12

    def test_batch_of_one_rejected(self):
        rng = np.random.default_rng(12)
        with pytest.raises(BatchTooSmall):
            L.alignment_loss(
                rng.normal(size=(1, 4, 3)),
                ad.constant(np.abs(rng.normal(size=(1, 4, 2))) + 0.1),
                L.AlignmentConfig(),
                1,
                rng,
            )

    def test_partner_draws_exclude_self(self):
        rng = np.random.default_rng(13)
        for s in (2, 3, 8):
            partners = L.draw_partners(s, 1, rng)
            assert partners.shape == (1, s)
            assert all(partners[0, i] != i for i in range(s))

    def test_bounded_below_on_normalized_inputs(self):
        rng = np.random.default_rng(14)
        feats = rng.normal(size=(3, 10, 4))
        a = ad.constant(np.abs(rng.normal(size=(3, 10, 6))) + 0.05)
        out = L.alignment_loss(feats, a, L.AlignmentConfig(), 1, rng)
        # correlations live in [-1, 1]; with the shift formulas the loss
        # cannot go below -(1 + max|b|) on normalized inputs
        assert np.isfinite(out.value)
        assert out.value > -10.0


class TestTotalLoss:
    def mk_terms(self, vals):
        return {k: ad.constant(v) for k, v in zip(L.TERM_NAMES, vals)}

    def test_all_zero(self):
        total, rep = L.total_loss(self.mk_terms([0.0] * 5), L.LossWeights())
        assert total.value == 0.0 and rep.total == 0.0

    def test_default_weights_arithmetic(self):
        total, rep = L.total_loss(self.mk_terms([1.0] * 5), L.LossWeights())
        assert total.value == pytest.approx(10.1, abs=1e-12)
        assert rep.total == pytest.approx(
            sum(l * t for l, t in zip(L.LossWeights().as_tuple(), [1.0] * 5)), abs=1e-12
        )

    def test_zeroed_weight_removes_dependence(self):
        w = L.LossWeights(lambda_contrast=0.0)
        t1, _ = L.total_loss(self.mk_terms([1, 1, 5, 1, 1]), w)
        t2, _ = L.total_loss(self.mk_terms([1, 1, -3, 1, 1]), w)
        assert t1.value == t2.value

    def test_report_keeps_unweighted_terms(self):
        _, rep = L.total_loss(self.mk_terms([0.5, 1.5, 2.5, 3.5, 4.5]), L.LossWeights())
        assert rep.terms == {
            "assign": 0.5,
            "align": 1.5,
            "contrast": 2.5,
            "sparsity": 3.5,
            "classify": 4.5,
        }
        assert rep.total == pytest.approx(
            2 * 0.5 + 5 * 1.5 + 1 * 2.5 + 0.1 * 3.5 + 2 * 4.5, abs=1e-12
        )

    def test_nonfinite_term_rejected(self):
        terms = self.mk_terms([1.0, np.nan, 1.0, 1.0, 1.0])
        with pytest.raises(NonFiniteTerm):
            L.total_loss(terms, L.LossWeights())

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ConfigError):
            L.LossWeights(
                lambda_assign=0, lambda_align=0, lambda_contrast=0,
                lambda_sparsity=0, lambda_classify=0,
            ).validate()


class TestLossGradients:
    def test_assignment_gradient(self):
        rng = np.random.default_rng(15)
        raw_s, raw_t = rng.normal(size=(2, 6, 4))

        def fn(leaves):
            return L.assignment_loss(
                ad.softmax_rows(leaves[0], 0.6), ad.softmax_rows(leaves[1], 0.6)
            )

        assert ad.grad_check(fn, [raw_s, raw_t], seed=0) <= 1e-6

    def test_alignment_gradient(self):
        rng = np.random.default_rng(16)
        feats = rng.normal(size=(3, 8, 5))
        raw = rng.normal(size=(3, 8, 4))

        def fn(leaves):
            return L.alignment_loss(
                feats,
                ad.softmax_rows(leaves[0], 0.7),
                L.AlignmentConfig(),
                1,
                np.random.default_rng(3),
            )

        assert ad.grad_check(fn, [raw], seed=1) <= 1e-6

    def test_contrastive_gradient(self):
        rng = np.random.default_rng(17)
        s = rng.normal(size=(6, 4))
        q = rng.normal(size=(6, 4))
        dom = np.array([1, 1, 0, 1, 0, 1])

        def fn(leaves):
            return L.contrastive_loss(leaves[0], leaves[1], dom, dom, 0.5)

        assert ad.grad_check(fn, [s, q], seed=2) <= 1e-6

    def test_sparsity_gradient(self):
        rng = np.random.default_rng(18)
        r = rng.uniform(0.2, 1.0, size=(4, 6))  # all entries well above zero

        def fn(leaves):
            return L.sparsity_loss(leaves[0], 0.1, 0.1)

        assert ad.grad_check(fn, [r], step=1e-5, seed=3) <= 1e-5

    def test_classification_gradient(self):
        rng = np.random.default_rng(19)
        ys = rng.normal(size=(3, 5))
        yt = rng.normal(size=(3, 5))
        labels = np.array([0, 4, 2])

        def fn(leaves):
            return L.classification_loss(leaves[0], leaves[1], labels, 5)

        assert ad.grad_check(fn, [ys, yt], seed=4) <= 1e-6
