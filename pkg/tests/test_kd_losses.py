import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdkd.kd import (
    KdConfig,
    KdTargetSet,
    collapse_lattice,
    collapse_node,
    combined_loss,
    fuse_targets,
    kd_collapsed,
    kd_collapsed_grad,
    kd_full_lattice,
    kd_full_lattice_grad,
    kd_one_best,
    kd_one_best_grad,
    lattice_entropy,
    load_targets,
    make_target_set,
    save_targets,
    target_entropy,
)
from tdkd.lattice import Alignment, lattice_from_logits, random_lattice, uniform_lattice
from tdkd.transducer import viterbi_alignment

from oracles import central_diff, rel_err


def _pair(seed, T=2, U=2, K=3):
    rng = np.random.default_rng(seed)
    return random_lattice(rng, T, U, K), random_lattice(rng, T, U, K)


def _target(seed, T=3, U=2, K=4):
    rng = np.random.default_rng(seed)
    teacher = random_lattice(rng, T, U, K)
    student = random_lattice(rng, T, U, K)
    y = tuple(int(rng.integers(1, K)) for _ in range(U))
    align, _ = viterbi_alignment(teacher, y)
    return make_target_set(f"utt-{seed}", teacher, align), teacher, student, y


def _ce_oracle(p_target: np.ndarray, log_student: np.ndarray) -> float:
    total = 0.0
    for pt, ls in zip(p_target.reshape(-1), log_student.reshape(-1)):
        if pt > 0:
            total -= pt * ls
    return total


# ---------------------------------------------------------------- full lattice


def test_full_lattice_self_ce_is_entropy():
    zt, _ = _pair(0)
    assert kd_full_lattice(zt, zt) == pytest.approx(lattice_entropy(zt), abs=1e-9)


def test_full_lattice_uniform_pair():
    zt = uniform_lattice(2, 1, 3)
    zs = uniform_lattice(2, 1, 3)
    # T * (U+1) nodes, each contributing ln K.
    assert kd_full_lattice(zt, zs) == pytest.approx(2 * 2 * math.log(3), abs=1e-12)


def test_full_lattice_matches_per_node_oracle():
    zt, zs = _pair(1)
    expected = _ce_oracle(np.exp(zt.values), zs.values)
    assert abs(kd_full_lattice(zt, zs) - expected) < 1e-9


def test_full_lattice_shape_mismatch():
    with pytest.raises(ValueError):
        kd_full_lattice(uniform_lattice(2, 1, 3), uniform_lattice(2, 2, 3))


def test_full_lattice_grad_is_prob_difference():
    zt, zs = _pair(2)
    grad = kd_full_lattice_grad(zt, zs)
    assert np.allclose(grad, np.exp(zs.values) - np.exp(zt.values), atol=1e-12)
    assert np.allclose(kd_full_lattice_grad(zt, zt), 0.0, atol=1e-12)


def test_full_lattice_grad_finite_differences():
    zt, _ = _pair(3)
    rng = np.random.default_rng(33)
    logits = rng.normal(size=zt.values.shape)

    def loss_of(z):
        return kd_full_lattice(zt, lattice_from_logits(z))

    analytic = kd_full_lattice_grad(zt, lattice_from_logits(logits))
    assert rel_err(analytic, central_diff(loss_of, logits)) < 1e-4


def test_ce_lower_bounded_by_entropy():
    zt, zs = _pair(4)
    assert kd_full_lattice(zt, zs) >= lattice_entropy(zt) - 1e-9


# ------------------------------------------------------------------- collapsed


def test_collapse_node_uniform():
    out = collapse_node(np.full(4, 0.25), correct=2)
    assert np.allclose(out, [0.25, 0.25, 0.5], atol=1e-12)


def test_collapse_node_onehot_blank():
    out = collapse_node(np.array([1.0, 0.0, 0.0]), correct=1)
    assert np.allclose(out, [1.0, 0.0, 0.0], atol=1e-12)


def test_collapse_node_plain_arithmetic():
    out = collapse_node(np.array([0.5, 0.3, 0.2]), correct=2)
    assert np.allclose(out, [0.5, 0.2, 0.3], atol=1e-12)


def test_collapse_node_rejects_blank_as_correct():
    with pytest.raises(ValueError):
        collapse_node(np.full(3, 1 / 3), correct=0)


def test_collapsed_self_ce_is_entropy_mix():
    # Uniform K=4: interior nodes collapse to (1/4, 1/4, 1/2); at u=U the
    # correct slot is empty, giving (1/4, 3/4).
    T, U = 3, 2
    zt = uniform_lattice(T, U, 4)
    y = (1, 2)
    ct = collapse_lattice(zt, y)
    h3 = -(0.25 * math.log(0.25) * 2 + 0.5 * math.log(0.5))
    h2 = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
    expected = T * U * h3 + T * h2
    assert kd_collapsed(ct, zt, y) == pytest.approx(expected, abs=1e-9)


def test_collapsed_matches_node_oracle():
    rng = np.random.default_rng(8)
    teacher = random_lattice(rng, 2, 2, 4)
    student = random_lattice(rng, 2, 2, 4)
    y = (3, 1)
    ct = collapse_lattice(teacher, y)
    cs = collapse_lattice(student, y)
    expected = 0.0
    for t in range(2):
        for u in range(3):
            for c in range(3):
                if ct.values[t, u, c] > 0:
                    expected -= ct.values[t, u, c] * math.log(cs.values[t, u, c])
    assert abs(kd_collapsed(ct, student, y) - expected) < 1e-9


def test_collapsed_grad_finite_differences():
    rng = np.random.default_rng(41)
    teacher = random_lattice(rng, 3, 2, 5)
    y = (2, 4)
    ct = collapse_lattice(teacher, y)
    logits = rng.normal(size=(3, 3, 5))

    def loss_of(z):
        return kd_collapsed(ct, lattice_from_logits(z), y)

    analytic = kd_collapsed_grad(ct, lattice_from_logits(logits), y)
    assert rel_err(analytic, central_diff(loss_of, logits)) < 1e-4


def test_collapsed_grad_zero_at_match():
    rng = np.random.default_rng(43)
    teacher = random_lattice(rng, 2, 1, 4)
    y = (3,)
    ct = collapse_lattice(teacher, y)
    grad = kd_collapsed_grad(ct, teacher, y)
    assert np.max(np.abs(grad.sum(axis=-1))) < 1e-9  # per-node zero-sum
    # Matching collapsed stats means every class ratio is 1, so the whole
    # gradient vanishes even though the K-class dists could differ elsewhere.
    assert np.max(np.abs(grad)) < 1e-9


# -------------------------------------------------------------------- one-best


def test_one_best_self_ce_is_path_entropy():
    target, teacher, _, _ = _target(10)
    assert kd_one_best(target, teacher, tau=0) == pytest.approx(target_entropy(target), abs=1e-9)


def test_one_best_equals_masked_full_lattice():
    target, teacher, student, _ = _target(11)
    # Mask oracle: per-node CE summed over path nodes only.
    expected = 0.0
    for i, (t, u, _) in enumerate(target.alignment.steps):
        pt = np.exp(target.node_dists[i])
        expected -= float(np.sum(pt * student.values[t, u, :]))
    assert abs(kd_one_best(target, student, tau=0) - expected) < 1e-9


def test_one_best_tau_t_drops_everything():
    target, _, student, _ = _target(12)
    assert kd_one_best(target, student, tau=student.T) == 0.0
    assert np.max(np.abs(kd_one_best_grad(target, student, tau=student.T))) == 0.0


def test_one_best_tau_shifts_nodes():
    target, _, student, _ = _target(13, T=4, U=2)
    tau = 2
    expected = 0.0
    for i, (t, u, _) in enumerate(target.alignment.steps):
        if t + tau < student.T:
            pt = np.exp(target.node_dists[i])
            expected -= float(np.sum(pt * student.values[t + tau, u, :]))
    assert abs(kd_one_best(target, student, tau=tau) - expected) < 1e-9


def test_one_best_rejects_negative_tau():
    target, _, student, _ = _target(14)
    with pytest.raises(ValueError):
        kd_one_best(target, student, tau=-1)


def test_one_best_grad_sparsity():
    target, _, student, _ = _target(15)
    grad = kd_one_best_grad(target, student, tau=0)
    path = set(target.alignment.nodes)
    for t in range(student.T):
        for u in range(student.U + 1):
            if (t, u) not in path:
                assert np.all(grad[t, u, :] == 0.0)


def test_one_best_grad_finite_differences():
    for tau in (0, 2):
        target, _, _, _ = _target(16, T=5, U=3, K=4)
        rng = np.random.default_rng(100 + tau)
        logits = rng.normal(size=(5, 4, 4))

        def loss_of(z):
            return kd_one_best(target, lattice_from_logits(z), tau=tau)

        analytic = kd_one_best_grad(target, lattice_from_logits(logits), tau=tau)
        assert rel_err(analytic, central_diff(loss_of, logits)) < 1e-4


def test_one_best_grad_zero_where_student_matches():
    target, teacher, _, _ = _target(17)
    grad = kd_one_best_grad(target, teacher, tau=0)
    assert np.max(np.abs(grad)) < 1e-12


# ------------------------------------------------------------------ lm fusion


def test_fuse_beta_zero_is_identity():
    target, _, _, _ = _target(20)
    lm = np.log(np.full(target.node_dists.shape, 1.0 / target.node_dists.shape[1]))
    fused = fuse_targets(target, lm, beta=0.0)
    assert np.allclose(fused.node_dists, target.node_dists, atol=1e-12)
    assert fused.fused


def test_fuse_blank_node_hand_example():
    # Blank-emitting node: Z = (0.5, 0.3, 0.2), LM non-blank = (0.6, 0.4), beta = 1
    # -> renormalized (0.5, 0.18, 0.08).
    dists = np.log(np.array([[0.5, 0.3, 0.2]]))
    target = KdTargetSet("u", Alignment(((0, 0, 0),)), dists)
    lm = np.log(np.array([[1.0, 0.6, 0.4]]))  # blank slot ignored
    fused = fuse_targets(target, lm, beta=1.0)
    got = np.exp(fused.node_dists[0])
    assert np.allclose(got, [0.5 / 0.76, 0.18 / 0.76, 0.08 / 0.76], atol=1e-12)


def test_fuse_nonblank_node_uses_min_lm_score():
    dists = np.log(np.array([[0.5, 0.3, 0.2]]))
    target = KdTargetSet("u", Alignment(((0, 0, 2),)), dists)
    lm = np.log(np.array([[1.0, 0.6, 0.4]]))
    fused = fuse_targets(target, lm, beta=1.0)
    # Blank slot takes min non-blank LM log-score: log(0.4).
    raw = np.array([math.log(0.5) + math.log(0.4), math.log(0.3) + math.log(0.6), math.log(0.2) + math.log(0.4)])
    expected = np.exp(raw) / np.exp(raw).sum()
    assert np.allclose(np.exp(fused.node_dists[0]), expected, atol=1e-12)


@settings(max_examples=20)
@given(st.integers(min_value=0, max_value=10**6), st.floats(min_value=0.0, max_value=3.0))
def test_fuse_output_always_normalized(seed, beta):
    target, _, _, _ = _target(seed % 100)
    rng = np.random.default_rng(seed)
    lm_raw = rng.normal(size=target.node_dists.shape)
    lm = lm_raw - np.log(np.sum(np.exp(lm_raw), axis=1, keepdims=True))
    fused = fuse_targets(target, lm, beta=beta)
    sums = np.sum(np.exp(fused.node_dists), axis=1)
    assert np.allclose(sums, 1.0, atol=1e-9)


# ------------------------------------------------------------- combined + cfg


def test_combined_loss_arithmetic():
    assert combined_loss(2.0, 3.0, 0.0) == 2.0
    assert combined_loss(2.0, 3.0, 0.1) == pytest.approx(2.3, abs=1e-12)
    with pytest.raises(ValueError):
        combined_loss(1.0, 1.0, -0.5)


def test_kd_config_validation():
    cfg = KdConfig(lam=0.1, tau=2, beta_lm=0.5, variant="one_best")
    assert cfg.lam == 0.1
    with pytest.raises(ValueError):
        KdConfig(lam=-1)
    with pytest.raises(ValueError):
        KdConfig(tau=-1)
    with pytest.raises(ValueError):
        KdConfig(variant="nope")


# ------------------------------------------------------------- memory + cache


def test_target_memory_is_linear_in_path_length():
    for T, U, K in [(4, 2, 3), (7, 5, 6), (10, 0, 4)]:
        target, teacher, _, _ = _target(T * 100 + U * 10 + K, T=T, U=U, K=K)
        assert target.stored_values == K * (T + U)
        assert teacher.values.size == K * T * (U + 1)


def test_target_cache_roundtrip_exact(tmp_path):
    targets = [_target(s)[0] for s in range(5)]
    fused = fuse_targets(targets[0], np.zeros_like(targets[0].node_dists), beta=0.25)
    targets[0] = fused
    path = tmp_path / "targets.jsonl"
    save_targets(targets, path)
    back = load_targets(path)
    assert set(back) == {t.utt_id for t in targets}
    for t in targets:
        b = back[t.utt_id]
        assert b.alignment == t.alignment
        assert np.array_equal(b.node_dists, t.node_dists)  # bit-exact floats
        assert b.fused == t.fused and b.beta == t.beta
