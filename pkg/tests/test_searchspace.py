import json

import numpy as np
import pytest

from udarts.autodiff import Tensor, finite_diff_grad, max_rel_err, ops, value_and_grad
from udarts.searchspace import (OPS, CellGraph, DiscreteArchitecture, Network, NetworkSpec,
                                OpCatalog, discretize, mixed_op, n_edges, plan_edge_params,
                                saturated_alpha)
from udarts.uncertainty import MaskSampler

TINY = dict(n_cells=2, channels=4, n_nodes=2, input_shape=(2,), lift_hw=4, reduction_positions=(1,))


def tensors(params):
    return {k: Tensor(v) for k, v in params.items()}


def edge_params(catalog, c, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for name, (shape, fans) in plan_edge_params(catalog, c).items():
        out[name] = np.ones(shape) if fans is None and name.endswith(".g") else rng.normal(size=shape)
    return out


class TestCatalogAndGraph:
    def test_fixed_order(self):
        assert OpCatalog().ops == OPS
        assert OPS.index("zero") == 7

    def test_edges(self):
        g = CellGraph(4)
        assert len(g.edges) == 14 == n_edges(4)
        assert all(i < j for i, j in g.edges)
        assert g.incoming(2) == [5, 6, 7, 8]

    def test_bad_catalog(self):
        with pytest.raises(ValueError):
            OpCatalog(("identity", "conv_7x7"))


class TestMixedOp:
    def test_identity_zero_uniform(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        out = mixed_op(Tensor(x), Tensor(np.zeros(2)), OpCatalog(("identity", "zero")))
        np.testing.assert_allclose(out.data, x / 2, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("op", [o for o in OPS if o != "zero"])
    def test_saturation_selects_op(self, op):
        cat = OpCatalog()
        leaves = tensors(edge_params(cat, 3))
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 5, 5)))
        alpha = np.full(len(cat), -1e6)
        alpha[cat.index(op)] = 1e6
        sat = mixed_op(x, Tensor(alpha), cat, leaves)
        alone = mixed_op(x, Tensor(np.array([0.0])), OpCatalog((op,)), leaves)
        np.testing.assert_allclose(sat.data, alone.data, atol=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mixed_op(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(3)), OpCatalog(("identity", "zero")))

    @pytest.mark.parametrize("seed", range(3))
    def test_alpha_gradient(self, seed):
        cat = OpCatalog()
        rng = np.random.default_rng(seed)
        fixed = tensors(edge_params(cat, 2, seed))
        x = Tensor(rng.normal(size=(2, 2, 4, 4)))
        probe = rng.normal(size=(2, 2, 4, 4))

        def loss(p):
            return ops.sum(ops.mul(mixed_op(x, p["alpha"], cat, fixed), probe))

        params = {"alpha": rng.normal(size=len(cat))}
        _, grads, _ = value_and_grad(loss, params)
        fd = finite_diff_grad(lambda q: loss(tensors(q)).item(), params)
        assert max_rel_err(grads["alpha"], fd["alpha"]) < 1e-4


class TestNetwork:
    def test_desk_default_shape(self):
        spec = NetworkSpec(n_cells=4, channels=8, n_nodes=4, input_shape=(3, 8, 8), n_classes=10)
        assert spec.reduction_positions == (1, 2)
        net = Network(spec)
        p = net.init_params(np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
        out = net.logits(tensors(p), x, sampler=MaskSampler(0))
        assert out.shape == (2, 10)
        assert np.all(np.isfinite(out.data))

    def test_channel_doubling(self):
        a = Network(NetworkSpec(**{**TINY, "channels": 4}))
        b = Network(NetworkSpec(**{**TINY, "channels": 8}))
        assert b.feature_width == 2 * a.feature_width
        assert b.init_params(np.random.default_rng(0))["head.w"].shape[0] == 2 * a.feature_width

    def test_identity_catalog_concatenates(self):
        spec = NetworkSpec(n_cells=1, channels=2, n_nodes=2, input_shape=(2,), lift_hw=2)
        net = Network(spec, OpCatalog(("identity",)))
        trace = {}
        x = np.random.default_rng(0).normal(size=(3, 2))
        net.logits(tensors(net.init_params(np.random.default_rng(0))), x, trace=trace)
        s0, s1, (n0, n1) = trace["cell0"]["s0"], trace["cell0"]["s1"], trace["cell0"]["nodes"]
        np.testing.assert_allclose(n0, s0 + s1, atol=1e-14)
        np.testing.assert_allclose(n1, s0 + s1 + n0, atol=1e-14)

    @pytest.mark.parametrize("positions", [(0,), (4,), (2, 2)])
    def test_invalid_reductions(self, positions):
        with pytest.raises(ValueError):
            NetworkSpec(n_cells=4, channels=8, reduction_positions=positions)

    def test_input_shape_checked(self):
        net = Network(NetworkSpec(**TINY))
        with pytest.raises(ValueError):
            net.logits(tensors(net.init_params(np.random.default_rng(0))), np.zeros((2, 3)))

    def test_dropout_sites(self):
        net = Network(NetworkSpec(**TINY))
        names = [s.name for s in net.sites]
        assert names[-1] == "head.cd"
        assert all(".sep_conv" in n or ".dil_conv" in n for n in names[:-1])
        assert Network(NetworkSpec(**{**TINY, "dropout": False})).n_sites == 0

    def test_stochastic_forward_is_seeded(self):
        net = Network(NetworkSpec(**TINY))
        p = tensors(net.init_params(np.random.default_rng(0)))
        x = np.random.default_rng(1).normal(size=(4, 2))
        a = net.logits(p, x, sampler=MaskSampler(3)).data
        b = net.logits(p, x, sampler=MaskSampler(3)).data
        c = net.logits(p, x, sampler=MaskSampler(4)).data
        assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()

    def test_gradients_match_fd(self):
        net = Network(NetworkSpec(n_cells=1, channels=2, n_nodes=1, input_shape=(2,), lift_hw=2))
        rng = np.random.default_rng(2)
        params = net.init_params(rng)
        params["dropout.logits"] = rng.normal(-1, 0.5, size=net.n_sites)
        x = rng.normal(size=(4, 2))
        y = np.eye(2)[[0, 1, 1, 0]]

        def loss(p):
            lg = net.logits(p, x, sampler=MaskSampler(9), temperature=0.5)
            return ops.neg(ops.mean(ops.sum(ops.mul(ops.log_softmax(lg), y), axis=1)))

        check = ["alpha.normal", "dropout.logits", "head.w", "stem.w"]
        _, grads, _ = value_and_grad(loss, params)
        sub = {k: params[k] for k in check}
        fd = finite_diff_grad(lambda q: loss(tensors({**params, **q})).item(), sub, h=1e-6)
        for k in check:
            assert max_rel_err(grads[k], fd[k], floor=1e-6) < 1e-4, k

    def test_discrete_matches_saturated_mixed(self):
        spec = NetworkSpec(n_cells=3, channels=4, n_nodes=2, input_shape=(2,), lift_hw=4)
        cat = OpCatalog()
        arch = DiscreteArchitecture(
            normal=[[(0, "sep_conv_3x3"), (1, "max_pool_3x3")], [(2, "dil_conv_5x5"), (3, "identity")]],
            reduction=[[(0, "avg_pool_3x3"), (1, "identity")], [(3, "sep_conv_5x5"), (4, "identity")]])
        mixed = Network(spec, cat)
        params = mixed.init_params(np.random.default_rng(0))
        params["alpha.normal"] = saturated_alpha(arch.normal, 2, cat)
        params["alpha.reduce"] = saturated_alpha(arch.reduction, 2, cat)
        x = np.random.default_rng(1).normal(size=(5, 2))
        a = mixed.logits(tensors(params), x, sampler=MaskSampler(1)).data
        discrete = Network(spec, cat, arch)
        sub = {k: v for k, v in params.items() if k in discrete.weight_names() or k == "dropout.logits"}
        idx = [i for i, s in enumerate(mixed.sites) if s.name in {t.name for t in discrete.sites}]
        sub["dropout.logits"] = params["dropout.logits"][idx]
        b = discrete.logits(tensors(sub), x).data
        c = mixed.logits(tensors(params), x).data
        np.testing.assert_allclose(b, c, atol=1e-5)
        assert np.all(np.isfinite(a))


class TestDiscretize:
    def test_all_equal_tie_break(self):
        nodes = discretize(np.zeros((n_edges(4), 8)), 4)
        assert nodes[0] == [(0, OPS[0]), (1, OPS[0])]
        for j, pairs in enumerate(nodes):
            first = CellGraph(4).incoming(j)[0]
            assert pairs == [(first, OPS[0]), (first + 1, OPS[0])]

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        a = rng.normal(scale=0.1, size=(n_edges(2), 8))
        a[2, OPS.index("sep_conv_3x3")] = 5.0
        a[0, OPS.index("identity")] = 4.0
        nodes = discretize(a, 2)
        assert nodes[0][0] == (0, "identity")
        assert nodes[1][0] == (2, "sep_conv_3x3")
        w = np.exp(a - a.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        for j, edges in enumerate([(0, 1), (2, 3, 4)]):
            best = {e: max(range(7), key=lambda o: w[e, o]) for e in edges}
            brute = max(((e1, e2) for e1 in edges for e2 in edges if e1 < e2),
                        key=lambda p: w[p[0], best[p[0]]] + w[p[1], best[p[1]]])
            assert sorted(e for e, _ in nodes[j]) == list(brute)
            assert all(op == OPS[best[e]] for e, op in nodes[j])

    def test_never_zero_and_k_entries(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(n_edges(4), 8))
        a[:, OPS.index("zero")] = 50.0
        for k in (1, 2):
            nodes = discretize(a, 4, k=k)
            assert all(len(p) == k and all(op != "zero" for _, op in p) for p in nodes)
            assert all(len({e for e, _ in p}) == k for p in nodes)

    @pytest.mark.parametrize("seed", range(5))
    def test_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(n_edges(3), 8))
        shifted = a + rng.normal(scale=10, size=(n_edges(3), 1))
        assert discretize(a, 3) == discretize(shifted, 3)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            discretize(np.zeros((n_edges(1), 2)), 1, k=3, catalog=OpCatalog(("identity", "zero")))
        with pytest.raises(ValueError):
            discretize(np.zeros((n_edges(1), 1)), 1, k=1, catalog=OpCatalog(("zero",)))

    def test_json_round_trip(self):
        rng = np.random.default_rng(2)
        alpha = {"alpha.normal": rng.normal(size=(5, 8)), "alpha.reduce": rng.normal(size=(5, 8))}
        arch = discretize(alpha, 2)
        doc = json.loads(arch.to_json())
        assert doc["normal"][0][0][1] in OPS
        assert DiscreteArchitecture.from_json(arch.to_json()) == arch

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            DiscreteArchitecture([[(0, "zero"), (1, "identity")]], [[(0, "identity"), (1, "identity")]])
