"""Model ladder: closed forms, message-passing equivalences, limits, layers."""

import numpy as np
import pytest

from spatialchoice import autodiff as ad
from spatialchoice import models as mdl
from spatialchoice.autodiff import Tensor
from spatialchoice.errors import ConfigError, GraphError
from spatialchoice.graph import (
    build_graph,
    complete_graph,
    nests_to_graph,
    path_graph,
    random_connected_graph,
)
from spatialchoice.models import (
    FittedModel,
    GNNSpec,
    MNLSpec,
    NLSpec,
    SCLSpec,
    gat_attention_weights,
    gated_skip,
    gcn_update,
    gnn_forward,
    init_params,
    mnl_probs,
    mpnn_update,
    nl_closed_components,
    nl_probs_closed,
    nl_probs_mp,
    probs_from_utilities,
    scl_probs_closed,
    scl_probs_mp,
    squash_mu,
)

GOLDEN_V0 = np.array([-10.0, -11.0, -12.0, -13.0, -14.0])
GOLDEN_NESTS = ((0, 1, 2), (3, 4))
GOLDEN_MUS = (0.8, 0.9)


def scl_bruteforce(graph, mu, utilities, alpha_row=None):
    """Literal transcription of the paired-nest probability formula, without
    log-space rearrangement; valid for moderate utilities."""
    v = np.asarray(utilities, dtype=float)
    deg = graph.degrees
    alpha = alpha_row if alpha_row is not None else 1.0 / deg
    den = 0.0
    for k, l in graph.edges:
        den += ((alpha[k] * np.exp(v[k])) ** (1 / mu) + (alpha[l] * np.exp(v[l])) ** (1 / mu)) ** mu
    out = np.zeros(graph.num_nodes)
    for i in range(graph.num_nodes):
        total = 0.0
        for j in graph.neighbors[i]:
            ti = (alpha[i] * np.exp(v[i])) ** (1 / mu)
            tj = (alpha[j] * np.exp(v[j])) ** (1 / mu)
            total += ti * (ti + tj) ** (mu - 1)
        out[i] = total / den
    return out


class TestMNL:
    def test_zero_coefficients_uniform(self):
        feats = np.random.default_rng(0).normal(size=(9, 4))
        p = mnl_probs(np.zeros(4), features=feats)
        np.testing.assert_allclose(p, 1.0 / 9.0, atol=1e-15)

    def test_two_alternative_softmax(self):
        p = mnl_probs(None, utilities=np.array([np.log(2.0), 0.0]))
        np.testing.assert_allclose(p, [2 / 3, 1 / 3], atol=1e-15)

    def test_descending_price_utilities(self):
        # softmax of (-10..-14): top probability 1/(1+e^-1+e^-2+e^-3+e^-4)
        p = mnl_probs(None, utilities=GOLDEN_V0)
        expected_top = 1.0 / sum(np.exp(-k) for k in range(5))
        assert abs(p[0] - expected_top) < 1e-15
        assert abs(p[0] - 0.6364) < 1e-4

    def test_probabilities_positive_sum_one(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            p = mnl_probs(rng.normal(size=3), features=rng.normal(scale=20, size=(12, 3)))
            assert (p > 0).all()
            assert abs(p.sum() - 1.0) < 1e-12


class TestNestedLogitGolden:
    def test_closed_form_matches_golden_numbers(self):
        p = nl_probs_closed(GOLDEN_NESTS, GOLDEN_MUS, utilities=GOLDEN_V0)
        assert abs(p[0] - 0.6959) < 5e-5
        p_nest, p_within = nl_closed_components(GOLDEN_V0, GOLDEN_NESTS, GOLDEN_MUS)
        assert abs(p_nest[0] - 0.9523) < 5e-5
        assert abs(p_within[0] - 0.7307) < 5e-5

    def test_mp_intermediate_utilities(self):
        spec = NLSpec(n_features=0, nests=GOLDEN_NESTS)
        v1 = mdl.nl_utilities_node(spec, {"mu": Tensor(np.array(GOLDEN_MUS))}, utilities=GOLDEN_V0)
        expected = np.array([-10.063, -11.313, -12.563, -13.028, -14.140])
        np.testing.assert_allclose(v1.value[0], expected, atol=5e-4)

    def test_both_paths_agree(self):
        p_closed = nl_probs_closed(GOLDEN_NESTS, GOLDEN_MUS, utilities=GOLDEN_V0)
        p_mp = nl_probs_mp(GOLDEN_NESTS, GOLDEN_MUS, utilities=GOLDEN_V0)
        np.testing.assert_allclose(p_closed, p_mp, atol=1e-12)


class TestNestedLogit:
    def test_mu_one_reduces_to_mnl(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=8)
        nests = ((0, 1, 2), (3, 4, 5), (6, 7))
        p = nl_probs_closed(nests, (1.0, 1.0, 1.0), utilities=v)
        np.testing.assert_allclose(p, probs_from_utilities(v), atol=1e-12)

    def test_single_nest_is_temperature_scaled_mnl(self):
        # One nest over everything rescales utilities by 1/mu: identical to
        # the plain logit with coefficients b/mu, not to the plain logit at b.
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(6, 3))
        b = rng.normal(size=3)
        mu = 0.5
        p = nl_probs_closed((tuple(range(6)),), (mu,), b=b, features=feats)
        np.testing.assert_allclose(p, mnl_probs(b / mu, features=feats), atol=1e-12)
        np.testing.assert_allclose(p, probs_from_utilities(feats @ b / mu), atol=1e-12)

    def test_mp_matches_closed_on_random_instances(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(200):
            v_count = int(rng.integers(4, 13))
            cuts = np.sort(
                rng.choice(np.arange(1, v_count), size=int(rng.integers(1, min(4, v_count))), replace=False)
            )
            bounds = np.concatenate([[0], cuts, [v_count]])
            nests = tuple(tuple(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:]))
            mus = tuple(rng.uniform(0.2, 1.0, size=len(nests)))
            v = rng.uniform(-3, 3, size=v_count)
            diff = np.abs(
                nl_probs_closed(nests, mus, utilities=v) - nl_probs_mp(nests, mus, utilities=v)
            ).max()
            worst = max(worst, diff)
        assert worst < 1e-10

    def test_mu_outside_range_rejected(self):
        with pytest.raises(ConfigError):
            nl_probs_closed(((0, 1),), (1.5,), utilities=np.zeros(2))

    def test_nest_graph_self_inclusion(self):
        # singleton nest: aggregation over {i} alone leaves the utility fixed
        p = nl_probs_mp(((0,), (1, 2)), (0.4, 0.7), utilities=np.array([1.0, 0.5, -0.5]))
        q = nl_probs_closed(((0,), (1, 2)), (0.4, 0.7), utilities=np.array([1.0, 0.5, -0.5]))
        np.testing.assert_allclose(p, q, atol=1e-12)


class TestSCL:
    def test_mu_one_reduces_to_mnl(self):
        rng = np.random.default_rng(5)
        g = random_connected_graph(7, 4, seed=0)
        v = rng.normal(size=7)
        np.testing.assert_allclose(
            scl_probs_closed(g, 1.0, utilities=v), probs_from_utilities(v), atol=1e-12
        )
        np.testing.assert_allclose(
            scl_probs_mp(g, 1.0, utilities=v), probs_from_utilities(v), atol=1e-12
        )

    def test_two_nodes_single_edge_equals_pair_nest(self):
        g = build_graph(2, [(0, 1)])
        v = np.array([0.3, -0.6])
        for mu in (0.3, 0.7):
            p_scl = scl_probs_closed(g, mu, utilities=v)
            p_nl = nl_probs_closed(((0, 1),), (mu,), utilities=v)
            np.testing.assert_allclose(p_scl, p_nl, atol=1e-12)

    def test_perfect_matching_equals_pair_nests(self):
        # every node has degree one: allocations are all 1 and the paired
        # nests are exactly a nested logit over two-alternative nests
        g = build_graph(6, [(0, 1), (2, 3), (4, 5)])
        rng = np.random.default_rng(6)
        v = rng.normal(size=6)
        mu = 0.55
        p_scl = scl_probs_mp(g, mu, utilities=v)
        p_nl = nl_probs_closed(((0, 1), (2, 3), (4, 5)), (mu,) * 3, utilities=v)
        np.testing.assert_allclose(p_scl, p_nl, atol=1e-12)

    def test_closed_matches_bruteforce_transcription(self):
        rng = np.random.default_rng(7)
        for seed in range(20):
            g = random_connected_graph(6, int(rng.integers(0, 6)), seed=seed)
            v = rng.uniform(-2, 2, size=6)
            p = scl_probs_closed(g, 0.5, utilities=v)
            np.testing.assert_allclose(p, scl_bruteforce(g, 0.5, v), atol=1e-12)
            assert abs(p.sum() - 1.0) < 1e-12

    def test_mp_matches_closed_on_random_instances(self):
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(4, 13))
            g = random_connected_graph(n, int(rng.integers(0, n)), seed=int(rng.integers(2**31)))
            b = rng.uniform(-2, 2, size=3)
            feats = rng.normal(size=(n, 3))
            mu = float(rng.choice([0.3, 0.6, 0.9]))
            diff = np.abs(
                scl_probs_closed(g, mu, b=b, features=feats)
                - scl_probs_mp(g, mu, b=b, features=feats)
            ).max()
            worst = max(worst, diff)
        assert worst < 1e-10

    def test_isolated_node_rejected(self):
        g = build_graph(3, [(0, 1)])
        with pytest.raises(GraphError):
            scl_probs_closed(g, 0.5, utilities=np.zeros(3))


class TestGNNLayers:
    def test_gcn_single_edge_hand_value(self):
        # one edge (0,1), h=1, unit weight: self-inclusive degrees are 2, so
        # node 0 becomes relu(h0/2 + h1/2)
        g = build_graph(2, [(0, 1)])
        h = Tensor(np.array([[[0.6], [0.2]]]))
        out = gcn_update(h, Tensor(np.array([[1.0]])), g)
        np.testing.assert_allclose(out.value[0, 0, 0], 0.6 / 2 + 0.2 / 2, atol=1e-15)
        np.testing.assert_allclose(out.value[0, 1, 0], 0.4, atol=1e-15)

    def test_gat_zero_attention_uniform(self):
        g = path_graph(4)
        rng = np.random.default_rng(9)
        h = rng.normal(size=(1, 4, 4))
        W = np.eye(4)
        a = np.zeros((1, 8))
        att = gat_attention_weights(h, W, a, g, heads=1)
        src, dst = g.arrows_with_self
        for node in range(4):
            weights = att[0, dst == node, 0]
            np.testing.assert_allclose(weights, 1.0 / (g.degree(node) + 1), atol=1e-12)
            assert abs(weights.sum() - 1.0) < 1e-12

    def test_mpnn_lse_single_neighbor_is_plain_sum(self):
        # log-sum-exp of one message is the message itself
        g = build_graph(2, [(0, 1)])
        rng = np.random.default_rng(10)
        h = rng.normal(size=(1, 2, 3))
        W = rng.normal(size=(3, 3))
        out = mpnn_update(Tensor(h), Tensor(W), g, "lse")
        expected = np.maximum(h @ W + (h @ W)[:, ::-1, :], 0.0)
        np.testing.assert_allclose(out.value, expected, atol=1e-12)

    def test_gated_skip_zero_gate_params(self):
        rng = np.random.default_rng(11)
        h = rng.normal(size=(1, 3, 4))
        update = rng.normal(size=(1, 3, 4))
        out = gated_skip(Tensor(h), Tensor(update), Tensor(np.zeros((4, 4))), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.value, np.maximum(0.5 * h + 0.5 * update, 0.0), atol=1e-15)

    def test_gated_skip_closed_gate_keeps_representation(self):
        rng = np.random.default_rng(12)
        h = rng.normal(size=(1, 3, 4))
        update = rng.normal(scale=10, size=(1, 3, 4))
        out = gated_skip(
            Tensor(h), Tensor(update), Tensor(np.zeros((4, 4))), Tensor(np.full(4, -40.0))
        )
        np.testing.assert_allclose(out.value, np.maximum(h, 0.0), atol=1e-12)


class TestGNNForward:
    def test_zero_layers_alternative_specific(self):
        # without message passing, probability ratios of untouched
        # alternatives ignore every other alternative's features
        g = random_connected_graph(6, 3, seed=1)
        spec = GNNSpec(n_features=3, hidden=8, layers=0, dropout=0.0)
        store = init_params(spec, seed=0)
        rng = np.random.default_rng(13)
        feats = rng.normal(size=(6, 3))
        p0 = gnn_forward(spec, store, g, feats)
        feats2 = feats.copy()
        feats2[4] = rng.normal(size=3)
        p1 = gnn_forward(spec, store, g, feats2)
        assert abs(p0[0] / p0[1] - p1[0] / p1[1]) < 1e-12

    @pytest.mark.parametrize("update,agg", [("mpnn", "sum"), ("mpnn", "lse"), ("gcn", "sum"), ("gat", "sum")])
    def test_locality_bit_identical(self, update, agg):
        g = path_graph(7)
        rng = np.random.default_rng(14)
        for layers in (1, 2):
            spec = GNNSpec(n_features=3, hidden=8, layers=layers, update=update,
                           aggregation=agg, skip=True, dropout=0.0)
            store = init_params(spec, seed=3)
            model = FittedModel(spec=spec, store=store, graph=g)
            feats = rng.normal(size=(7, 3))
            v0 = model.utilities(feats)
            feats2 = feats.copy()
            feats2[0] += 2.0
            v1 = model.utilities(feats2)
            assert np.array_equal(v0[layers + 1 :], v1[layers + 1 :])
            assert not np.array_equal(v0[: layers + 1], v1[: layers + 1])

    def test_probabilities_sum_to_one(self):
        g = random_connected_graph(9, 6, seed=2)
        rng = np.random.default_rng(15)
        for update, agg in (("mpnn", "max"), ("mpnn", "mean"), ("gcn", "sum"), ("gat", "sum")):
            spec = GNNSpec(n_features=4, hidden=8, layers=2, update=update,
                           aggregation=agg, skip=True, dropout=0.0)
            store = init_params(spec, seed=5)
            p = gnn_forward(spec, store, g, rng.normal(size=(3, 9, 4)))
            assert (p > 0).all()
            np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    def test_dropout_train_deterministic_by_seed(self):
        g = random_connected_graph(5, 2, seed=3)
        spec = GNNSpec(n_features=3, hidden=4, layers=1, dropout=0.3)
        store = init_params(spec, seed=0)
        feats = np.random.default_rng(16).normal(size=(4, 5, 3))
        leaves = store.leaves()
        a = mdl.gnn_utilities_node(spec, leaves, g, feats, train=True, rng=np.random.default_rng(9)).value
        b = mdl.gnn_utilities_node(store.leaves(), {}, g, feats) if False else None
        c = mdl.gnn_utilities_node(spec, store.leaves(), g, feats, train=True, rng=np.random.default_rng(9)).value
        assert np.array_equal(a, c)

    def test_heads_rule(self):
        assert GNNSpec(n_features=2, hidden=1, update="gat").heads == 1
        assert GNNSpec(n_features=2, hidden=4, update="gat").heads == 1
        assert GNNSpec(n_features=2, hidden=64, update="gat").heads == 8
        with pytest.raises(ConfigError):
            GNNSpec(n_features=2, hidden=12, update="gat")  # 12 % 8 != 0

    def test_disconnected_graph_supported(self):
        # connectivity is never assumed: isolated components and even an
        # isolated node pass through every update rule except max pooling
        g = build_graph(5, [(0, 1), (2, 3)])
        rng = np.random.default_rng(20)
        feats = rng.normal(size=(5, 3))
        for update, agg in (("mpnn", "sum"), ("mpnn", "lse"), ("mpnn", "mean"),
                            ("gcn", "sum"), ("gat", "sum")):
            spec = GNNSpec(n_features=3, hidden=4, layers=2, update=update,
                           aggregation=agg, skip=True, dropout=0.0)
            p = gnn_forward(spec, init_params(spec, seed=1), g, feats)
            assert abs(p.sum() - 1.0) < 1e-12


class TestSquash:
    def test_roundtrip(self):
        for mu in (0.1, 0.5, 0.9, 0.999):
            assert abs(float(squash_mu(mdl.unsquash_mu(mu))) - mu) < 1e-12

    def test_boundary_not_representable(self):
        with pytest.raises(ConfigError):
            mdl.unsquash_mu(1.0)


class TestModelFiles:
    def test_save_load_roundtrip(self, tmp_path):
        g = random_connected_graph(5, 2, seed=1)
        spec = GNNSpec(n_features=3, hidden=8, layers=1, update="gat", dropout=0.0)
        store = init_params(spec, seed=7)
        model = FittedModel(spec=spec, store=store, graph=g,
                            feature_names=("a", "b", "c"), scaling={"a": (1.0, 2.0)})
        path = tmp_path / "model.json"
        model.save(path)
        loaded = FittedModel.load(path)
        assert loaded.spec == spec
        assert loaded.feature_names == ("a", "b", "c")
        assert loaded.scaling == {"a": (1.0, 2.0)}
        feats = np.random.default_rng(17).normal(size=(5, 3))
        np.testing.assert_array_equal(model.predict_probs(feats), loaded.predict_probs(feats))

    def test_version_field_required(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"spec": {"kind": "mnl", "n_features": 2}, "params": {}}')
        with pytest.raises(ConfigError):
            FittedModel.load(path)
