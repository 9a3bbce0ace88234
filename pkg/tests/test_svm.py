import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptsvm import svm
from ptsvm.svm import (KernelSpec, KKTViolation, SvmError, TrainConfig, decision_value,
                       decision_values, dual_objective, fit_precomputed, kernel_eval,
                       kernel_matrix, kkt_audit, kkt_violation, predict, read_model, risk_bound,
                       srm_diagnostics, train_reference_qp, train_smo, write_model)

TIGHT = TrainConfig(C=100.0, kkt_tol=1e-6)


def two_point(C=100.0):
    return train_smo([[0.0], [2.0]], [1, -1], TrainConfig(C=C, kkt_tol=1e-6),
                     KernelSpec.linear(), standardize=False)


def _blobs(rng, n, d=2, sep=1.0):
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    X = rng.normal(size=(n, d)) + sep * y[:, None]
    return X, y


def test_kernel_examples():
    a, b = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    assert kernel_eval(KernelSpec.linear(), a, b) == 11.0
    c = np.array([2.0, 3.0])  # |a - c|^2 = 2
    assert kernel_eval(KernelSpec.rbf(0.5), a, c) == pytest.approx(math.exp(-1), abs=1e-15)
    assert kernel_eval(KernelSpec.rbf(3.7), a, a) == 1.0
    assert kernel_eval(KernelSpec.poly(2), a, b) == 144.0
    assert kernel_eval(KernelSpec.sigmoid(0.1, 0.5), a, b) == pytest.approx(math.tanh(1.6))
    with pytest.raises(SvmError):
        kernel_eval(KernelSpec.linear(), a, np.ones(3))


def test_kernel_spec_validation():
    with pytest.raises(SvmError):
        KernelSpec.rbf(0.0)
    with pytest.raises(SvmError):
        KernelSpec.poly(0)
    with pytest.raises(SvmError):
        KernelSpec("cubic")
    assert KernelSpec.poly(3).name == "poly3"
    assert KernelSpec.rbf(1).uses_gamma and not KernelSpec.linear().uses_gamma
    with pytest.raises(SvmError):
        TrainConfig(C=0.0)


def test_kernel_matrix_matches_pointwise(rng):
    A = rng.normal(size=(7, 3))
    B = rng.normal(size=(4, 3))
    for k in (KernelSpec.linear(), KernelSpec.rbf(0.3), KernelSpec.poly(3, 0.5),
              KernelSpec.sigmoid(0.2, -0.1)):
        ref = np.array([[kernel_eval(k, a, b) for b in B] for a in A])
        np.testing.assert_allclose(kernel_matrix(k, A, B), ref, rtol=1e-13, atol=1e-13)
        S = kernel_matrix(k, A)
        assert np.array_equal(S, S.T)


def test_two_point_closed_form():
    m = two_point()
    assert m.converged
    np.testing.assert_allclose(m.alpha, [0.5, 0.5], atol=1e-12)
    assert m.bias == pytest.approx(1.0, abs=1e-12)
    w = float(m.coeffs @ m.support_vectors[:, 0])
    assert w == pytest.approx(-1.0, abs=1e-12)
    assert m.support_vectors.shape == (2, 1)


def test_two_point_decision_values():
    m = two_point()
    assert decision_value(m, [1.0]) == pytest.approx(0.0, abs=1e-12)
    assert decision_value(m, [-5.0]) == pytest.approx(6.0, abs=1e-12)
    np.testing.assert_allclose(m.train_decision, [1.0, -1.0], atol=1e-12)
    with pytest.raises(SvmError):
        decision_value(m, [[1.0]])


def test_predict_sign_rule():
    m = two_point()
    assert predict(m, [-1.3]) == 1  # f = 2.3
    assert predict(m, [1.1]) == 0   # f = -0.1
    # f = 0 exactly at x = 1 ties to class 0
    zero = svm.SvmModel(np.array([[0.0]]), np.array([0.0]), 0.0, KernelSpec.linear(),
                        np.zeros(1), np.ones(1), 1.0)
    assert predict(zero, [3.0]) == 0
    assert list(predict(m, [[-1.3], [1.1]])) == [1, 0]


def test_xor_rbf():
    X = np.array([[1, 1], [-1, -1], [1, -1], [-1, 1]], dtype=float)
    y = np.array([1, 1, -1, -1])
    cfg = TrainConfig(C=10.0, kkt_tol=1e-6)
    m = train_smo(X, y, cfg, KernelSpec.rbf(1.0), standardize=False)
    ref = train_reference_qp(X, y, cfg, KernelSpec.rbf(1.0), standardize=False)
    assert np.all(predict(m, X) == (y > 0))
    assert np.all(predict(ref, X) == (y > 0))
    np.testing.assert_allclose(m.alpha, ref.alpha, atol=1e-6)


def test_reference_two_point():
    ref = train_reference_qp([[0.0], [2.0]], [1, -1], TIGHT, KernelSpec.linear(),
                             standardize=False)
    np.testing.assert_allclose(ref.alpha, [0.5, 0.5], atol=1e-8)
    with pytest.raises(SvmError):
        train_reference_qp(np.zeros((51, 1)), np.r_[np.ones(26), -np.ones(25)])


@pytest.mark.parametrize("kernel", [KernelSpec.linear(), KernelSpec.rbf(0.5),
                                    KernelSpec.poly(2)])
def test_smo_matches_reference_qp(kernel):
    rng = np.random.default_rng(hash(kernel.name) % 1000)
    for _ in range(10):
        X = rng.normal(size=(10, 3))
        y = np.where(rng.random(10) < 0.5, 1, -1)
        y[:2] = [1, -1]
        cfg = TrainConfig(C=float(rng.choice([0.1, 1.0, 10.0])), kkt_tol=1e-6)
        a = train_smo(X, y, cfg, kernel)
        b = train_reference_qp(X, y, cfg, kernel)
        K = kernel_matrix(kernel, (X - a.mean) / a.sd)
        oa = dual_objective(a.alpha, y.astype(float), K)
        ob = dual_objective(b.alpha, y.astype(float), K)
        assert abs(oa - ob) <= 1e-6 * max(1.0, abs(ob))
        assert kkt_violation(b.alpha, y.astype(float), b.train_decision, cfg.C) <= 1e-6


def test_inseparable_small_c_hits_bounds(rng):
    X, y = _blobs(rng, 30, sep=0.1)
    cfg = TrainConfig(C=1e-3, kkt_tol=1e-6)
    ref = train_reference_qp(X, y, cfg, KernelSpec.linear())
    alpha = ref.alpha
    at_bound = np.isclose(alpha, 0, atol=1e-9) | np.isclose(alpha, cfg.C, rtol=1e-9)
    assert at_bound.mean() >= 0.9
    assert kkt_violation(alpha, y, ref.train_decision, cfg.C) <= 1e-6
    smo = train_smo(X, y, cfg, KernelSpec.linear())
    np.testing.assert_allclose(smo.alpha, alpha, atol=1e-7)


def test_duplicated_data_with_half_c(rng):
    X, y = _blobs(rng, 40, sep=0.6)
    k = KernelSpec.rbf(0.7)
    a = train_smo(X, y, TrainConfig(C=4.0, kkt_tol=1e-8), k)
    b = train_smo(np.vstack([X, X]), np.r_[y, y], TrainConfig(C=2.0, kkt_tol=1e-8), k)
    T = rng.normal(size=(50, 2))
    np.testing.assert_allclose(decision_values(a, T), decision_values(b, T), atol=1e-5)


def test_kkt_and_feasibility_on_trained_model(rng):
    X, y = _blobs(rng, 80, sep=0.5)
    cfg = TrainConfig(C=3.0)
    m = train_smo(X, y, cfg, KernelSpec.rbf(0.5))
    assert np.all(m.alpha >= 0) and np.all(m.alpha <= cfg.C)
    assert abs(m.alpha @ y) <= 1e-9 * cfg.C
    assert kkt_audit(m, X, y, tol=cfg.kkt_tol) <= cfg.kkt_tol
    # cached training values match fresh evaluation
    np.testing.assert_allclose(decision_values(m, X), m.train_decision, atol=1e-9)
    free = (m.alpha > 1e-8) & (m.alpha < cfg.C - 1e-8)
    assert np.all(np.abs(y[free] * m.train_decision[free] - 1) <= cfg.kkt_tol)


def test_kkt_audit_flags_bad_multipliers():
    y = np.array([1.0, -1.0])
    assert kkt_violation(np.array([0.0, 0.0]), y, np.array([0.2, -0.2]), 1.0) == pytest.approx(0.8)
    m = two_point()
    broken = svm.SvmModel(m.support_vectors, m.coeffs, m.bias + 0.5, m.kernel, m.mean, m.sd,
                          m.C, alpha=m.alpha)
    with pytest.raises(KKTViolation):
        kkt_audit(broken, [[0.0], [2.0]], [1, -1], tol=1e-3)


def test_audit_hook_counts(rng):
    before = dict(svm.audit_stats)
    X, y = _blobs(rng, 20)
    train_smo(X, y)
    assert svm.audit_stats["audited"] == before["audited"] + 1


def test_debug_objective_is_monotone(rng):
    X, y = _blobs(rng, 60, sep=0.3)
    m = train_smo(X, y, TrainConfig(C=5.0), KernelSpec.rbf(1.0), debug=True)
    tr = np.asarray(m.objective_trace)
    assert tr.size == m.iterations + 1 and m.iterations > 10
    assert np.all(np.diff(tr) >= -1e-12 * np.abs(tr[1:]).max())
    K = kernel_matrix(m.kernel, (X - m.mean) / m.sd)
    assert tr[-1] == pytest.approx(dual_objective(m.alpha, y, K), rel=1e-10)


def test_iteration_cap_gives_unconverged_model(rng):
    X, y = _blobs(rng, 40, sep=0.2)
    before = svm.audit_stats["non_converged"]
    m = train_smo(X, y, TrainConfig(C=10.0, max_passes=1))
    assert not m.converged
    assert m.iterations == 1
    assert svm.audit_stats["non_converged"] == before + 1


def test_single_class_and_bad_labels():
    with pytest.raises(SvmError, match="both classes"):
        train_smo([[0.0], [1.0]], [1, 1])
    with pytest.raises(SvmError, match="-1 or \\+1"):
        train_smo([[0.0], [1.0]], [0, 1])
    with pytest.raises(SvmError):
        train_smo([[0.0], [1.0], [2.0]], [1, -1])


def test_fit_precomputed_direct():
    K = np.array([[0.0, 0.0], [0.0, 4.0]])
    alpha, b, f, ok, it, _ = fit_precomputed(K, np.array([1.0, -1.0]), TIGHT)
    assert ok
    np.testing.assert_allclose(alpha, [0.5, 0.5], atol=1e-12)
    assert b == pytest.approx(1.0)


def test_srm_two_point_example():
    d = srm_diagnostics(two_point(), t=0, N=2, eta=0.05)
    assert d.w_norm_sq == pytest.approx(1.0, abs=1e-12)
    assert d.margin == pytest.approx(2.0, abs=1e-12)
    assert d.ball_radius_sq == pytest.approx(1.0, abs=1e-12)
    assert d.h_bound == 2
    expected = math.sqrt((2 * (math.log(2) + 1) - math.log(0.0125)) / 2)
    assert d.risk_bound == pytest.approx(expected, rel=1e-14)
    assert d.margin * math.sqrt(d.w_norm_sq) == pytest.approx(2.0)


def test_risk_bound_example():
    assert risk_bound(0, 2, 2, 0.05) == pytest.approx(
        math.sqrt((2 * (math.log(2) + 1) - math.log(0.0125)) / 2), rel=1e-15)
    assert risk_bound(3, 100, 5, 0.1) > 0.03
    with pytest.raises(SvmError):
        risk_bound(0, 10, 2, 1.0)


def test_srm_rbf_radius_at_most_one(rng):
    X, y = _blobs(rng, 50, sep=0.4)
    m = train_smo(X, y, TrainConfig(C=2.0), KernelSpec.rbf(0.8))
    d = srm_diagnostics(m, 0, 50, 0.05, X)
    assert 0 < d.ball_radius_sq <= 1.0
    assert d.h_bound == math.floor(d.ball_radius_sq * d.w_norm_sq + 1e-9) + 1


def test_srm_degenerate_model():
    m = svm.SvmModel(np.zeros((0, 1)), np.zeros(0), 1.0, KernelSpec.linear(), np.zeros(1),
                     np.ones(1), 1.0)
    with pytest.raises(SvmError, match="degenerate"):
        srm_diagnostics(m, 0, 2, 0.05)


def test_model_file_round_trip(rng, tmp_path):
    X, y = _blobs(rng, 60, d=4, sep=0.5)
    m = train_smo(X, y, TrainConfig(C=2.5), KernelSpec.rbf(0.37))
    text = write_model(m, {"seed": 7})
    back, meta = read_model(text)
    assert meta == {"seed": "7"}
    assert write_model(back, {"seed": 7}) == text
    assert np.array_equal(back.support_vectors, m.support_vectors)
    assert np.array_equal(back.coeffs, m.coeffs)
    assert back.bias == m.bias and back.kernel == m.kernel
    T = rng.normal(size=(30, 4))
    assert np.array_equal(decision_values(back, T), decision_values(m, T))
    assert text.splitlines()[0] == "ptsvm-model 1"
    assert text.splitlines()[-1].startswith("b=")


def test_model_file_errors():
    text = write_model(two_point())
    with pytest.raises(SvmError, match="header"):
        read_model("garbage\n")
    with pytest.raises(SvmError):
        read_model(text.replace("b=", "x="))
    lines = text.splitlines()
    nsv = next(i for i, ln in enumerate(lines) if ln.startswith("nsv="))
    lines[nsv + 1] += ",1.0"
    with pytest.raises(SvmError, match="wrong width"):
        read_model("\n".join(lines))
    with pytest.raises(SvmError):
        two_point().scale([[1.0, 2.0]])


# --- properties ---------------------------------------------------------------------------

points = st.integers(min_value=0, max_value=2 ** 32 - 1)


@settings(max_examples=30, deadline=None)
@given(seed=points, kind=st.sampled_from(["linear", "rbf", "poly2", "poly3"]))
def test_kernel_psd(seed, kind):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 4)) * rng.uniform(0.1, 3)
    k = {"linear": KernelSpec.linear(), "rbf": KernelSpec.rbf(float(rng.uniform(0.01, 5))),
         "poly2": KernelSpec.poly(2, 1.0), "poly3": KernelSpec.poly(3, 0.5)}[kind]
    K = kernel_matrix(k, X)
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * max(1.0, np.abs(K).max())


@settings(max_examples=15, deadline=None)
@given(seed=points)
def test_dual_feasibility_and_sv_order(seed):
    rng = np.random.default_rng(seed)
    X, y = _blobs(rng, 30, d=3, sep=float(rng.uniform(0, 1.5)))
    C = float(2.0 ** rng.integers(-3, 6))
    m = train_smo(X, y, TrainConfig(C=C), KernelSpec.rbf(float(rng.uniform(0.1, 2))))
    assert np.all(m.alpha >= 0) and np.all(m.alpha <= C)
    assert abs(m.alpha @ y) <= 1e-9 * max(1.0, C)
    perm = rng.permutation(m.coeffs.size)
    shuffled = svm.SvmModel(m.support_vectors[perm], m.coeffs[perm], m.bias, m.kernel,
                            m.mean, m.sd, m.C)
    T = rng.normal(size=(40, 3)) * 2
    fa, fb = decision_values(m, T), decision_values(shuffled, T)
    clear = np.abs(fa) > 1e-9
    assert np.array_equal(predict(m, T)[clear], predict(shuffled, T)[clear])
    np.testing.assert_allclose(fa, fb, atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(seed=points)
def test_standardization_round_trip(seed):
    rng = np.random.default_rng(seed)
    X, y = _blobs(rng, 30, d=3, sep=0.8)
    X = X * rng.uniform(0.1, 10, size=3) + rng.normal(size=3) * 5
    k = KernelSpec.rbf(0.5)
    cfg = TrainConfig(C=2.0, kkt_tol=1e-8)
    a = train_smo(X, y, cfg, k)
    Z = (X - a.mean) / a.sd
    b = train_smo(Z, y, cfg, k, standardize=False)
    T = rng.normal(size=(20, 3))
    np.testing.assert_allclose(decision_values(a, T), decision_values(b, (T - a.mean) / a.sd),
                               atol=1e-9)
