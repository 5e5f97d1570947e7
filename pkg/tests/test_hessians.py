import numpy as np
import pytest

from ggda import models
from ggda.datahub import Dataset, make_blobs
from ggda.grouping import Partition, make_partition, random_partition
from ggda.hessians import (
    HessianStrategy,
    ModelContext,
    apply_inverse,
    build_fisher,
    group_gradients,
    log_c_of_t,
    prepare,
    trak_fisher_equivalence_check,
)
from ggda.numkit import make_rng
from helpers import CONVEX_CFG, logreg_fixture


@pytest.fixture(scope="module")
def ctx6():
    """LogReg with p = 6 (2 features, 2 classes)."""
    ds, arch, m = logreg_fixture(0, d=2, classes=2)
    return ModelContext(m, ds, CONVEX_CFG.weight_decay)


@pytest.fixture(scope="module")
def ctx20():
    ds, arch, m = logreg_fixture(0)
    return ModelContext(m, ds, CONVEX_CFG.weight_decay)


ALL_STRATEGIES = [
    HessianStrategy.identity(),
    HessianStrategy.exact(),
    HessianStrategy.cg(tol=1e-12),
    HessianStrategy.lissa(damp=0.0, scale=10.0, depth=300, repeat=2),
    HessianStrategy.emp_fisher(),
    HessianStrategy.batched_emp_fisher(),
    HessianStrategy.emp_fisher(proj_dim=5, seed=3),
]


def test_identity(ctx20):
    v = make_rng(0).standard_normal(ctx20.model.p)
    np.testing.assert_array_equal(apply_inverse(HessianStrategy.identity(), ctx20, v), v)


def test_exact_vs_cg(ctx6):
    v = make_rng(1).standard_normal(6)
    exact = apply_inverse(HessianStrategy.exact(), ctx6, v)
    cg = apply_inverse(HessianStrategy.cg(tol=1e-10), ctx6, v)
    np.testing.assert_allclose(cg, exact, atol=1e-6)


def test_exact_solves_hessian(ctx20):
    v = make_rng(2).standard_normal(ctx20.model.p)
    H = models.exact_hessian(ctx20.model, ctx20.ds, ctx20.weight_decay)
    np.testing.assert_allclose(H @ apply_inverse(HessianStrategy.exact(), ctx20, v), v, atol=1e-9)


def test_lissa_approximates_exact(ctx6):
    v = make_rng(3).standard_normal(6)
    exact = apply_inverse(HessianStrategy.exact(), ctx6, v)
    H = models.exact_hessian(ctx6.model, ctx6.ds, ctx6.weight_decay)
    scale = 1.5 * np.linalg.eigvalsh(H).max()
    lissa = apply_inverse(HessianStrategy.lissa(damp=0.0, scale=scale, depth=20000, repeat=1), ctx6, v)
    np.testing.assert_allclose(lissa, exact, rtol=1e-4, atol=1e-6)


def test_lissa_minibatch_deterministic(ctx20):
    hs = HessianStrategy.lissa(damp=0.01, scale=10.0, depth=50, repeat=3, batch_size=8, seed=5)
    v = make_rng(4).standard_normal(ctx20.model.p)
    a = apply_inverse(hs, ctx20, v)
    np.testing.assert_array_equal(a, apply_inverse(hs, ctx20, v))
    full = apply_inverse(HessianStrategy.lissa(damp=0.01, scale=10.0, depth=50, repeat=3), ctx20, v)
    assert not np.array_equal(a, full)


def test_exact_fallback_damping():
    ds = make_blobs(30, 2, 2, 2.0, make_rng(0))
    arch = models.Architecture.logreg(2, 2)
    # softmax Hessian is singular along the all-classes-equal direction; no weight decay
    m = models.ModelState(arch, np.zeros(6))
    op = prepare(HessianStrategy.exact(), ModelContext(m, ds, 0.0))
    out = op.apply(np.ones(6))
    assert np.all(np.isfinite(out)) and op._H_damp == pytest.approx(1e-3)


def test_batched_singletons_equal_emp_fisher(ctx20):
    v = make_rng(5).standard_normal(ctx20.model.p)
    single = Partition.singletons(ctx20.ds.n_train)
    a = apply_inverse(HessianStrategy.emp_fisher(), ctx20, v)
    b = apply_inverse(HessianStrategy.batched_emp_fisher(), ctx20, v, single)
    assert a.tobytes() == b.tobytes()


def test_one_group_rank_one(ctx20):
    F = build_fisher(ctx20, Partition([list(range(ctx20.ds.n_train))])).matrix()
    assert np.linalg.matrix_rank(F, tol=1e-10 * np.abs(F).max()) == 1


def test_duplicates_scale_by_s_squared():
    base = make_blobs(20, 2, 2, 2.0, make_rng(0))
    s = 3
    tr = base.train_rows
    X = np.vstack([np.repeat(base.features[tr[:1]], s, 0), base.features[tr[1:]], base.X_test])
    y = np.concatenate([np.repeat(base.labels[tr[:1]], s), base.labels[tr[1:]], base.y_test])
    n_tr = s + tr.size - 1
    ds = Dataset(X, y, np.arange(len(y)) < n_tr, 2)
    m = models.ModelState(models.Architecture.logreg(2, 2), make_rng(1).standard_normal(6))
    ctx = ModelContext(m, ds)
    dup_group = Partition([list(range(s))] + [[i] for i in range(s, n_tr)])
    F = build_fisher(ctx, dup_group).matrix()
    g = models.grad_group(m, ds, [0])
    others = sum(np.outer(models.grad_group(m, ds, [i]), models.grad_group(m, ds, [i])) for i in range(s, n_tr))
    np.testing.assert_allclose(F - others, s**2 * np.outer(g, g), atol=1e-12)


@pytest.mark.parametrize("hs", ALL_STRATEGIES, ids=lambda h: h.kind + ("-proj" if h.proj_dim else ""))
def test_linearity(ctx20, hs):
    rng = make_rng(6)
    part = random_partition(ctx20.ds.n_train, 4, make_rng(0))
    op = prepare(hs, ctx20, part)
    u, v = rng.standard_normal(ctx20.model.p), rng.standard_normal(ctx20.model.p)
    a, b = 0.7, -2.3
    lhs = op.apply(op.project(a * u + b * v))
    rhs = a * op.apply(op.project(u)) + b * op.apply(op.project(v))
    np.testing.assert_allclose(lhs, rhs, atol=1e-8 * max(1.0, np.abs(rhs).max()))


@pytest.mark.parametrize("part_kind", ["singletons", "random"])
def test_fisher_symmetric_psd(ctx20, part_kind):
    part = None if part_kind == "singletons" else random_partition(ctx20.ds.n_train, 4, make_rng(1))
    acc = build_fisher(ctx20, part)
    F = acc.matrix()
    np.testing.assert_array_equal(F, F.T)
    assert np.linalg.eigvalsh(F).min() >= -1e-10 * np.abs(F).max()
    assert np.linalg.eigvalsh(F + acc.damp * np.eye(F.shape[0])).min() > 0


def test_projection_identity_hook(ctx20):
    p = ctx20.model.p
    v = make_rng(7).standard_normal(p)
    plain = apply_inverse(HessianStrategy.emp_fisher(), ctx20, v)
    hooked = apply_inverse(HessianStrategy.emp_fisher(proj_dim=p, projection=np.eye(p)), ctx20, v)
    np.testing.assert_allclose(hooked, plain, atol=1e-10)


def test_projection_deterministic(ctx20):
    hs = HessianStrategy.emp_fisher(proj_dim=6, seed=11)
    v = make_rng(8).standard_normal(ctx20.model.p)
    out = apply_inverse(hs, ctx20, v)
    assert out.shape == (6,)
    np.testing.assert_array_equal(out, apply_inverse(hs, ctx20, v))
    assert not np.array_equal(out, apply_inverse(HessianStrategy.emp_fisher(proj_dim=6, seed=12), ctx20, v))


def test_fisher_frobenius_grad_kmeans_vs_random():
    """Averaged over 10 seeds, Grad-K-Means groups should sit closer to the per-sample Fisher."""
    grad_err, rand_err = [], []
    for seed in range(10):
        ds, arch, m = logreg_fixture(seed)
        ctx = ModelContext(m, ds, CONVEX_CFG.weight_decay)
        F = build_fisher(ctx).matrix()
        pg = make_partition("grad_kmeans", ds, 4, seed, model=m)
        pr = make_partition("random", ds, 4, seed)
        assert pg.k == pr.k
        grad_err.append(np.linalg.norm(build_fisher(ctx, pg).matrix() - F))
        rand_err.append(np.linalg.norm(build_fisher(ctx, pr).matrix() - F))
    assert np.mean(grad_err) < np.mean(rand_err)


def test_group_gradients_k_passes(ctx20):
    part = random_partition(ctx20.ds.n_train, 4, make_rng(0))
    with models.count_passes() as c:
        G = group_gradients(ctx20, part)
    assert G.shape == (part.k, ctx20.model.p) and c.grad == part.k


@pytest.fixture(scope="module")
def binary():
    rng = make_rng(0)
    arch = models.Architecture.mlp(3, [4], 2)
    m = models.ModelState(arch, rng.standard_normal(arch.n_params))
    X = rng.standard_normal((100, 3))
    y = np.where(rng.random(100) < 0.5, -1, 1)
    return m, X, y


class TestTrakFisherEquivalence:
    @pytest.mark.parametrize("T", [0.1, 1.0, 7.5, 1e3, 1e6])
    def test_proportional(self, binary, T):
        m, X, y = binary
        assert trak_fisher_equivalence_check(m, X, y, T).max_deviation <= 1e-10

    def test_large_temperature_limit(self, binary):
        m, X, y = binary
        assert trak_fisher_equivalence_check(m, X, y, 1e6).worst_c_times_4t2_error <= 1e-4

    def test_both_signs(self, binary):
        m, X, _ = binary
        pos = trak_fisher_equivalence_check(m, X, np.ones(100), 2.0)
        neg = trak_fisher_equivalence_check(m, X, -np.ones(100), 2.0)
        assert pos.max_deviation <= 1e-10 and neg.max_deviation <= 1e-10

    def test_c_of_t_closed_form(self):
        margin, T = 1.3, 2.0
        direct = np.exp(-2 * margin / T) / ((1 + np.exp(-margin / T)) ** 2 * T**2)
        assert np.exp(log_c_of_t(margin, T)) == pytest.approx(direct, rel=1e-14)

    def test_rejects_multiclass(self):
        m = models.ModelState(models.Architecture.logreg(2, 3), np.zeros(9))
        with pytest.raises(ValueError):
            trak_fisher_equivalence_check(m, np.zeros((1, 2)), np.ones(1), 1.0)


def test_strategy_validation():
    with pytest.raises(ValueError):
        HessianStrategy("newton")
    with pytest.raises(ValueError):
        HessianStrategy.lissa(scale=0)
