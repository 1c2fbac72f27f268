"""The model ladder for choice over correlated alternatives.

Closed-form logit family (MNL, nested logit, spatially correlated logit),
their message-passing reformulations on the alternative graph, and the
general graph-network utility model whose zero-layer case is the
alternative-specific deep utility network.

All trainable forward paths run on the :mod:`autodiff` tape; the closed
forms are independent numpy oracles.  Utilities are always real scalars
per alternative; choice probabilities are their softmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, NumericalError
from .graph import (
    AlternativeGraph,
    NestStructure,
    build_graph,
    equal_allocation_vector,
    nests_to_graph,
    scl_pair_nests,
)

MODEL_FILE_VERSION = 1

LEAKY_SLOPE = 0.2


def squash_mu(theta):
    """Map an unconstrained parameter onto (0, 1); the boundary mu=1 is
    reachable only in the limit theta -> +inf."""
    theta = np.asarray(theta, dtype=np.float64)
    return np.where(
        theta >= 0,
        1.0 / (1.0 + np.exp(-np.abs(theta))),
        np.exp(-np.abs(theta)) / (1.0 + np.exp(-np.abs(theta))),
    )


def unsquash_mu(mu):
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu <= 0.0) or np.any(mu >= 1.0):
        raise ConfigError("mu must lie strictly inside (0, 1) to be unsquashed")
    return np.log(mu) - np.log1p(-mu)


# ---------------------------------------------------------------------------
# Model specifications (the tagged union of shipped model kinds).


@dataclass(frozen=True)
class MNLSpec:
    n_features: int
    kind: str = field(default="mnl", init=False)


@dataclass(frozen=True)
class NLSpec:
    """Two-level nested logit; independence parameters stored unconstrained."""

    n_features: int
    nests: tuple[tuple[int, ...], ...]
    kind: str = field(default="nl", init=False)

    def __post_init__(self):
        NestStructure(self.nests, tuple(0.5 for _ in self.nests))  # validates partition


@dataclass(frozen=True)
class SCLSpec:
    """Paired-nest logit over graph edges with equal-split allocations and a
    single dissimilarity parameter."""

    n_features: int
    kind: str = field(default="scl", init=False)


@dataclass(frozen=True)
class GNNSpec:
    """Graph-network utility model: embedding -> layers of message passing
    (optionally gated-skip blended) -> scalar projection.

    ``layers=0`` is the alternative-specific deep network: no message
    passing, utilities depend on each alternative's own features only.
    """

    n_features: int
    hidden: int = 64
    layers: int = 2
    update: str = "mpnn"  # mpnn | gcn | gat
    aggregation: str = "sum"  # mpnn only: sum | mean | max | lse
    skip: bool = True
    dropout: float = 0.05
    embed_hidden: int = 1  # hidden layers in the embedding perceptron
    kind: str = field(default="gnn", init=False)

    def __post_init__(self):
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if self.update not in ("mpnn", "gcn", "gat"):
            raise ConfigError(f"unknown update '{self.update}'")
        if self.aggregation not in ("sum", "mean", "max", "lse"):
            raise ConfigError(f"unknown aggregation '{self.aggregation}'")
        if self.update == "gat" and self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden={self.hidden} not divisible by {self.heads} attention heads"
            )

    @property
    def heads(self) -> int:
        return 8 if self.hidden >= 8 else 1


ModelSpec = MNLSpec | NLSpec | SCLSpec | GNNSpec


def spec_to_dict(spec: ModelSpec) -> dict:
    out = asdict(spec)
    out["kind"] = spec.kind
    if isinstance(spec, NLSpec):
        out["nests"] = [list(nest) for nest in spec.nests]
    return out


def spec_from_dict(d: dict) -> ModelSpec:
    kind = d.get("kind")
    if kind == "mnl":
        return MNLSpec(n_features=int(d["n_features"]))
    if kind == "nl":
        return NLSpec(
            n_features=int(d["n_features"]),
            nests=tuple(tuple(int(i) for i in nest) for nest in d["nests"]),
        )
    if kind == "scl":
        return SCLSpec(n_features=int(d["n_features"]))
    if kind == "gnn":
        return GNNSpec(
            n_features=int(d["n_features"]),
            hidden=int(d.get("hidden", 64)),
            layers=int(d.get("layers", 2)),
            update=d.get("update", "mpnn"),
            aggregation=d.get("aggregation", "sum"),
            skip=bool(d.get("skip", True)),
            dropout=float(d.get("dropout", 0.05)),
            embed_hidden=int(d.get("embed_hidden", 1)),
        )
    raise ConfigError(f"unknown model kind '{kind}'")


# ---------------------------------------------------------------------------
# Parameter initialization.


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(spec: ModelSpec, seed) -> ParamStore:
    """Fresh parameter store for a model spec.

    Coefficient vectors start at zero; weight matrices use fan-scaled
    uniform draws; gate biases start at zero.  Dissimilarity parameters
    start at mu=0.7 on the unconstrained scale.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    if isinstance(spec, MNLSpec):
        store.add("b", np.zeros(spec.n_features))
        return store
    if isinstance(spec, NLSpec):
        store.add("b", np.zeros(spec.n_features))
        store.add("theta_mu", np.full(len(spec.nests), float(unsquash_mu(0.7))))
        return store
    if isinstance(spec, SCLSpec):
        store.add("b", np.zeros(spec.n_features))
        store.add("theta_mu", np.array(float(unsquash_mu(0.7))))
        return store
    if isinstance(spec, GNNSpec):
        h, d = spec.hidden, spec.n_features
        dims = [d] + [h] * spec.embed_hidden + [h]
        for li in range(len(dims) - 1):
            store.add(f"embed.{li}.W", _glorot(rng, dims[li], dims[li + 1], (dims[li], dims[li + 1])))
            store.add(f"embed.{li}.b", np.zeros(dims[li + 1]))
        for k in range(spec.layers):
            if spec.update == "gat":
                hd = h // spec.heads
                # One weight matrix holding every head's (h, hd) block.
                blocks = [_glorot(rng, h, hd, (h, hd)) for _ in range(spec.heads)]
                store.add(f"layer{k}.W", np.concatenate(blocks, axis=1))
                store.add(
                    f"layer{k}.a",
                    np.stack([_glorot(rng, 2 * hd, 1, (2 * hd,)) for _ in range(spec.heads)]),
                )
            else:
                store.add(f"layer{k}.W", _glorot(rng, h, h, (h, h)))
            if spec.skip:
                store.add(f"layer{k}.gate.W", _glorot(rng, h, h, (h, h)))
                store.add(f"layer{k}.gate.b", np.zeros(h))
        store.add("project.w", _glorot(rng, h, 1, (h,)))
        return store
    raise ConfigError(f"unknown spec {spec!r}")


# ---------------------------------------------------------------------------
# Closed-form probability oracles (plain numpy; independent of the tape).


def probs_from_utilities(utilities: np.ndarray) -> np.ndarray:
    """Stable softmax over the trailing axis."""
    v = np.asarray(utilities, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _linear_utilities(b, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    v = features @ b
    if not np.all(np.isfinite(v)):
        raise NumericalError("non-finite utility")
    return v


def _resolve_utilities(b, utilities, features) -> np.ndarray:
    if (utilities is None) == (features is None):
        raise ConfigError("provide exactly one of utilities or features")
    if utilities is not None:
        v = np.asarray(utilities, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NumericalError("non-finite utility")
        return v
    return _linear_utilities(b, features)


def mnl_probs(b, features=None, utilities=None) -> np.ndarray:
    """Multinomial logit: softmax of linear utilities."""
    return probs_from_utilities(_resolve_utilities(b, utilities, features))


def _check_mus(mus) -> np.ndarray:
    mus = np.asarray(mus, dtype=np.float64)
    if np.any(mus <= 0.0) or np.any(mus > 1.0):
        raise ConfigError(f"independence parameters must lie in (0, 1], got {mus}")
    return mus


def nl_closed_components(utilities, nests, mus):
    """Nest-choice and within-nest probabilities of the two-level nested logit.

    Returns (p_nest (..., K), p_within (..., V)); their product over the
    node's nest gives the choice probability.
    """
    v = np.asarray(utilities, dtype=np.float64)
    mus = _check_mus(mus)
    structure = NestStructure(tuple(tuple(int(i) for i in n) for n in nests), tuple(float(m) for m in mus))
    if structure.num_nodes != v.shape[-1]:
        raise ConfigError("nests do not cover the utility vector")
    K = len(structure.nests)
    lse = np.empty(v.shape[:-1] + (K,))
    p_within = np.empty_like(v)
    for k, nest in enumerate(structure.nests):
        idx = np.array(sorted(nest))
        scaled = v[..., idx] / mus[k]
        m = scaled.max(axis=-1, keepdims=True)
        lse_k = (m + np.log(np.exp(scaled - m).sum(axis=-1, keepdims=True))).squeeze(-1)
        lse[..., k] = lse_k
        p_within[..., idx] = np.exp(scaled - lse_k[..., None])
    nest_score = mus * lse
    m = nest_score.max(axis=-1, keepdims=True)
    log_den = (m + np.log(np.exp(nest_score - m).sum(axis=-1, keepdims=True))).squeeze(-1)
    p_nest = np.exp(nest_score - log_den[..., None])
    return p_nest, p_within


def nl_probs_closed(nests, mus, b=None, utilities=None, features=None) -> np.ndarray:
    """Nested logit probability as the product of the nest-choice
    probability and the within-nest probability."""
    v = _resolve_utilities(b, utilities, features)
    p_nest, p_within = nl_closed_components(v, nests, mus)
    nest_of = NestStructure(
        tuple(tuple(int(i) for i in n) for n in nests), tuple(float(m) for m in mus)
    ).nest_of_node
    return p_nest[..., nest_of] * p_within


def scl_probs_closed(graph: AlternativeGraph, mu, b=None, utilities=None, features=None, alpha=None) -> np.ndarray:
    """Paired-nest logit probability, one nest per graph edge.

    Computed in log space straight from the pairwise-nest sum: for each
    edge nest the bracketed term is a two-way log-sum-exp of the
    allocation-weighted scaled utilities.
    """
    mu = float(mu)
    _check_mus([mu])
    v = _resolve_utilities(b, utilities, features)
    if v.shape[-1] != graph.num_nodes:
        raise ConfigError("utility length does not match graph size")
    scl_pair_nests(graph)  # validates: edges exist, no isolated node
    if alpha is None:
        alpha = equal_allocation_vector(graph)
    alpha = np.asarray(alpha, dtype=np.float64)

    a = (v + np.log(alpha)) / mu  # (..., V): log of (alpha_i e^{V_i})^{1/mu}
    src = np.array([e[0] for e in graph.edges])
    dst = np.array([e[1] for e in graph.edges])
    pair = np.logaddexp(a[..., src], a[..., dst])  # (..., E)
    log_den_terms = mu * pair
    m = log_den_terms.max(axis=-1, keepdims=True)
    log_den = (m + np.log(np.exp(log_den_terms - m).sum(axis=-1, keepdims=True))).squeeze(-1)

    log_num = np.full(v.shape, -np.inf)
    # numerator of node i: LSE over incident edges of a_i + (mu-1) * pair
    for arrays in ((src, dst), (dst, src)):
        nodes, _ = arrays
        term = a[..., nodes] + (mu - 1.0) * pair
        for e in range(len(nodes)):
            i = nodes[e]
            log_num[..., i] = np.logaddexp(log_num[..., i], term[..., e])
    return np.exp(log_num - log_den[..., None])


# ---------------------------------------------------------------------------
# Message-passing forward paths (tape-based; usable for fitting).


def _as_feature_tensor(features) -> tuple[Tensor, bool]:
    """Wrap (V, D) or (B, V, D) features; returns (tensor, had_batch)."""
    arr = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
    if arr.value.ndim == 2:
        return ad.reshape(arr, (1,) + arr.value.shape), False
    if arr.value.ndim == 3:
        return arr, True
    raise ConfigError(f"features must be (V, D) or (B, V, D), got {arr.value.shape}")


def _utilities_tensor(value, batched_hint=None):
    """Wrap raw utilities (V,) or (B, V) as a batched tensor."""
    arr = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))
    if arr.value.ndim == 1:
        return ad.reshape(arr, (1,) + arr.value.shape), False
    if arr.value.ndim == 2:
        return arr, True
    raise ConfigError(f"utilities must be (V,) or (B, V), got {arr.value.shape}")


def mnl_utilities_node(leaves: dict[str, Tensor], features) -> Tensor:
    feats, _ = _as_feature_tensor(features)
    return ad.scalar_project(feats, leaves["b"])


def nl_utilities_node(
    spec: NLSpec, leaves: dict[str, Tensor], graph: AlternativeGraph | None = None,
    features=None, utilities=None,
) -> Tensor:
    """One-layer log-sum-exp message passing over the nest graph.

    Each node aggregates the scaled utilities of its neighborhood plus
    itself (self-inclusion active), then blends the aggregate back with
    the nest's independence weight.
    """
    if graph is None:
        graph = nests_to_graph(spec.nests)
    if (features is None) == (utilities is None):
        raise ConfigError("provide exactly one of utilities or features")
    if features is not None:
        feats, _ = _as_feature_tensor(features)
        v0 = ad.scalar_project(feats, leaves["b"])
    else:
        v0, _ = _utilities_tensor(utilities)
    structure = NestStructure(spec.nests, tuple(float(m) for m in squash_mu(np.zeros(len(spec.nests)))))
    nest_of = structure.nest_of_node
    # Fitting paths carry the unconstrained parameter; oracle wrappers may
    # pass exact mus directly (the squash cannot represent mu=1).
    mu = leaves["mu"] if "mu" in leaves else ad.sigmoid(leaves["theta_mu"])  # (K,)
    mu_node = ad.take(mu, nest_of, axis=0)  # (V,)
    scaled = v0 / mu_node
    src, dst = graph.arrows_with_self
    B, V = v0.value.shape
    msgs = ad.reshape(ad.take(scaled, src, axis=-1), (B, len(src), 1))
    agg = ad.reshape(ad.segment_aggregate(msgs, "lse", dst, V), (B, V))
    return scaled + (mu_node - 1.0) * agg


def scl_utilities_node(
    spec: SCLSpec, leaves: dict[str, Tensor], graph: AlternativeGraph,
    features=None, utilities=None, alpha=None,
) -> Tensor:
    """One-layer message passing equivalent of the paired-nest logit.

    Node embedding folds the allocation into the scaled utility; each
    directed edge carries a two-way log-sum-exp message; nodes aggregate
    their incoming messages with a log-sum-exp (no self-inclusion).
    """
    scl_pair_nests(graph)  # validates
    if alpha is None:
        alpha = equal_allocation_vector(graph)
    alpha = np.asarray(alpha, dtype=np.float64)
    if (features is None) == (utilities is None):
        raise ConfigError("provide exactly one of utilities or features")
    if features is not None:
        feats, _ = _as_feature_tensor(features)
        base = ad.scalar_project(feats, leaves["b"])
    else:
        base, _ = _utilities_tensor(utilities)
    mu = leaves["mu"] if "mu" in leaves else ad.sigmoid(leaves["theta_mu"])  # scalar
    v0 = (base + Tensor(np.log(alpha))) / mu
    src, dst = graph.arrows
    B, V = v0.value.shape
    E = len(src)
    vi = ad.take(v0, dst, axis=-1)  # receiving node's embedding, per directed edge
    vj = ad.take(v0, src, axis=-1)
    pair = ad.logsumexp(
        ad.concat([ad.reshape(vi, (B, E, 1)), ad.reshape(vj, (B, E, 1))], axis=-1), axis=-1
    )
    messages = vi + (mu - 1.0) * pair
    agg = ad.segment_aggregate(ad.reshape(messages, (B, E, 1)), "lse", dst, V)
    return ad.reshape(agg, (B, V))


def nl_probs_mp(nests, mus, b=None, utilities=None, features=None) -> np.ndarray:
    """Nested logit via its message-passing form; matches the closed form."""
    spec = NLSpec(n_features=0 if b is None else len(np.atleast_1d(b)), nests=tuple(tuple(int(i) for i in n) for n in nests))
    mus = _check_mus(mus)
    leaves = {"mu": Tensor(mus)}
    if features is not None:
        leaves["b"] = Tensor(np.asarray(b, dtype=np.float64))
    batched = utilities is not None and np.asarray(utilities).ndim == 2
    if features is not None:
        batched = np.asarray(features).ndim == 3
    v1 = nl_utilities_node(spec, leaves, features=features, utilities=utilities)
    out = probs_from_utilities(v1.value)
    return out if batched else out[0]


def scl_probs_mp(graph: AlternativeGraph, mu, b=None, utilities=None, features=None, alpha=None) -> np.ndarray:
    """Paired-nest logit via its message-passing form; matches the closed form."""
    _check_mus([float(mu)])
    spec = SCLSpec(n_features=0 if b is None else len(np.atleast_1d(b)))
    leaves = {"mu": Tensor(float(mu))}
    if features is not None:
        leaves["b"] = Tensor(np.asarray(b, dtype=np.float64))
    batched = utilities is not None and np.asarray(utilities).ndim == 2
    if features is not None:
        batched = np.asarray(features).ndim == 3
    v1 = scl_utilities_node(spec, leaves, graph, features=features, utilities=utilities, alpha=alpha)
    out = probs_from_utilities(v1.value)
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# Graph-network layer primitives (Tensor in, Tensor out).


def mpnn_preact(h: Tensor, W: Tensor, graph: AlternativeGraph, aggregation: str) -> Tensor:
    """W h_i plus the aggregated projected neighbor representations."""
    wh = ad.matmul(h, W)
    src, dst = graph.arrows
    if len(src) == 0:
        if aggregation == "max":
            raise NumericalError("max aggregation over empty neighborhoods")
        return wh
    msgs = ad.take(wh, src, axis=-2)
    agg = ad.segment_aggregate(msgs, aggregation, dst, graph.num_nodes)
    return wh + agg


def mpnn_update(h: Tensor, W: Tensor, graph: AlternativeGraph, aggregation: str) -> Tensor:
    return ad.relu(mpnn_preact(h, W, graph, aggregation))


def gcn_preact(h: Tensor, W: Tensor, graph: AlternativeGraph) -> Tensor:
    """Degree-normalized sum over the self-inclusive neighborhood.

    Degrees count the node itself, which keeps the normalization defined
    for isolated nodes.
    """
    wh = ad.matmul(h, W)
    src, dst = graph.arrows_with_self
    deg = graph.degrees.astype(np.float64) + 1.0
    coef = 1.0 / np.sqrt(deg[src] * deg[dst])
    msgs = ad.take(wh, src, axis=-2) * Tensor(coef[:, None])
    return ad.segment_aggregate(msgs, "sum", dst, graph.num_nodes)


def gcn_update(h: Tensor, W: Tensor, graph: AlternativeGraph) -> Tensor:
    return ad.relu(gcn_preact(h, W, graph))


def gat_preact(h: Tensor, W: Tensor, a: Tensor, graph: AlternativeGraph, heads: int) -> Tensor:
    """Attention-weighted sum over the self-inclusive neighborhood.

    ``W`` stacks every head's projection side by side (h, heads*hd) and
    ``a`` holds one attention vector per head (heads, 2*hd); all heads run
    in one batched pass and their outputs concatenate back to width h.
    """
    B, V = h.value.shape[0], graph.num_nodes
    hidden = W.value.shape[1]
    hd = hidden // heads
    wh = ad.matmul(h, W)  # (B, V, heads*hd)
    wh4 = ad.reshape(wh, (B, V, heads, hd))
    src, dst = graph.arrows_with_self
    E = len(src)
    hi = ad.take(wh4, dst, axis=1)  # receiving node, per directed edge
    hj = ad.take(wh4, src, axis=1)
    cat = ad.concat([hi, hj], axis=-1)  # (B, E, heads, 2*hd)
    scores = ad.leaky_relu(ad.tsum(cat * a, axis=-1), LEAKY_SLOPE)  # (B, E, heads)
    lse = ad.segment_aggregate(scores, "lse", dst, V)  # (B, V, heads)
    att = ad.exp(scores - ad.take(lse, dst, axis=1))
    weighted = ad.reshape(att, (B, E, heads, 1)) * hj
    return ad.segment_aggregate(ad.reshape(weighted, (B, E, hidden)), "sum", dst, V)


def gat_update(h: Tensor, W: Tensor, a: Tensor, graph: AlternativeGraph, heads: int) -> Tensor:
    return ad.relu(gat_preact(h, W, a, graph, heads))


def gat_attention_weights(h_value, W_value, a_value, graph: AlternativeGraph, heads: int) -> np.ndarray:
    """Attention coefficients per directed self-inclusive edge, per head
    (B, E, heads); diagnostics only."""
    h = Tensor(np.asarray(h_value, dtype=np.float64))
    if h.value.ndim == 2:
        h = ad.reshape(h, (1,) + h.value.shape)
    W = Tensor(W_value)
    a = Tensor(a_value)
    B, V = h.value.shape[0], graph.num_nodes
    hidden = W.value.shape[1]
    hd = hidden // heads
    wh4 = ad.reshape(ad.matmul(h, W), (B, V, heads, hd))
    src, dst = graph.arrows_with_self
    hi = ad.take(wh4, dst, axis=1)
    hj = ad.take(wh4, src, axis=1)
    scores = ad.leaky_relu(ad.tsum(ad.concat([hi, hj], axis=-1) * a, axis=-1), LEAKY_SLOPE)
    lse = ad.segment_aggregate(scores, "lse", dst, V)
    att = ad.exp(scores - ad.take(lse, dst, axis=1))
    return att.value


def gated_skip(h: Tensor, update: Tensor, Wc: Tensor, bc: Tensor) -> Tensor:
    """Blend a node's previous representation with its pre-activation update
    through a learned sigmoid gate, then activate."""
    c = ad.sigmoid(ad.matmul(h, Wc) + bc)
    return ad.relu((1.0 - c) * h + c * update)


def gnn_utilities_node(
    spec: GNNSpec,
    leaves: dict[str, Tensor],
    graph: AlternativeGraph,
    features,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Embed, run ``spec.layers`` rounds of message passing, project to
    scalar utilities.  Dropout applies after each activation while training."""
    feats, _ = _as_feature_tensor(features)
    if feats.value.shape[-2] != graph.num_nodes:
        raise ConfigError("feature alternative axis does not match graph size")
    if feats.value.shape[-1] != spec.n_features:
        raise ConfigError(
            f"expected {spec.n_features} features, got {feats.value.shape[-1]}"
        )
    h = feats
    li = 0
    while f"embed.{li}.W" in leaves:
        h = ad.relu(ad.matmul(h, leaves[f"embed.{li}.W"]) + leaves[f"embed.{li}.b"])
        h = ad.dropout(h, spec.dropout, train, rng)
        li += 1
    for k in range(spec.layers):
        if spec.update == "mpnn":
            pre = mpnn_preact(h, leaves[f"layer{k}.W"], graph, spec.aggregation)
        elif spec.update == "gcn":
            pre = gcn_preact(h, leaves[f"layer{k}.W"], graph)
        else:
            pre = gat_preact(h, leaves[f"layer{k}.W"], leaves[f"layer{k}.a"], graph, spec.heads)
        if spec.skip:
            h = gated_skip(h, pre, leaves[f"layer{k}.gate.W"], leaves[f"layer{k}.gate.b"])
        else:
            h = ad.relu(pre)
        h = ad.dropout(h, spec.dropout, train, rng)
    return ad.scalar_project(h, leaves["project.w"])


def gnn_forward(
    spec: GNNSpec,
    store: ParamStore,
    graph: AlternativeGraph,
    features,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Probability vector(s) of the graph-network model."""
    leaves = store.leaves()
    v = gnn_utilities_node(spec, leaves, graph, features, train=train, rng=rng)
    out = probs_from_utilities(v.value)
    return out if np.asarray(features).ndim == 3 else out[0]


# ---------------------------------------------------------------------------
# One dispatch for every model kind: tape utilities for a feature batch.


def utilities_node(
    spec: ModelSpec,
    leaves: dict[str, Tensor],
    graph: AlternativeGraph | None,
    features,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if isinstance(spec, MNLSpec):
        return mnl_utilities_node(leaves, features)
    if isinstance(spec, NLSpec):
        return nl_utilities_node(spec, leaves, features=features)
    if isinstance(spec, SCLSpec):
        if graph is None:
            raise ConfigError("the paired-nest model requires an alternative graph")
        return scl_utilities_node(spec, leaves, graph, features=features)
    if isinstance(spec, GNNSpec):
        if graph is None:
            raise ConfigError("the graph-network model requires an alternative graph")
        return gnn_utilities_node(spec, leaves, graph, features, train=train, rng=rng)
    raise ConfigError(f"unknown spec {spec!r}")


def nll_node(
    spec: ModelSpec,
    leaves: dict[str, Tensor],
    graph: AlternativeGraph | None,
    features,
    chosen,
    train: bool = False,
    rng: np.random.Generator | None = None,
    reduction: str = "sum",
) -> Tensor:
    """Negative log-likelihood of the chosen alternatives on the tape."""
    v = utilities_node(spec, leaves, graph, features, train=train, rng=rng)
    logp = v - ad.reshape(ad.logsumexp(v, axis=-1), (v.value.shape[0], 1))
    picked = ad.gather_rows(logp, np.asarray(chosen, dtype=np.int64))
    total = ad.tsum(picked)
    if reduction == "mean":
        total = total * (1.0 / len(np.asarray(chosen)))
    return -total


def model_reach_hops(spec: ModelSpec) -> int:
    """Graph radius within which an alternative's utility can depend on
    other alternatives' attributes."""
    if isinstance(spec, (NLSpec, SCLSpec)):
        return 1
    if isinstance(spec, GNNSpec):
        return spec.layers
    return 0


# ---------------------------------------------------------------------------
# Fitted model container and model-file serialization.


@dataclass
class FittedModel:
    """A model spec bound to parameter values and its alternative graph."""

    spec: ModelSpec
    store: ParamStore
    graph: AlternativeGraph | None = None
    feature_names: tuple[str, ...] = ()
    scaling: dict[str, tuple[float, float]] | None = None

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def reach_hops(self) -> int:
        return model_reach_hops(self.spec)

    def utilities(self, features) -> np.ndarray:
        leaves = self.store.leaves()
        v = utilities_node(self.spec, leaves, self.graph, features, train=False)
        out = v.value
        return out if np.asarray(features).ndim == 3 else out[0]

    def predict_probs(self, features) -> np.ndarray:
        return probs_from_utilities(self.utilities(features))

    def mus(self) -> np.ndarray | None:
        if "theta_mu" in self.store:
            return squash_mu(self.store.value("theta_mu"))
        return None

    def save(self, path, extra: dict | None = None) -> None:
        doc = {
            "version": MODEL_FILE_VERSION,
            "spec": spec_to_dict(self.spec),
            "params": self.store.to_payload(),
            "feature_names": list(self.feature_names),
            "scaling": {k: [float(v[0]), float(v[1])] for k, v in (self.scaling or {}).items()},
            "graph": None
            if self.graph is None
            else {"num_nodes": self.graph.num_nodes, "edges": [list(e) for e in self.graph.edges]},
        }
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "FittedModel":
        with open(path) as fh:
            doc = json.load(fh)
        if "version" not in doc:
            raise ConfigError(f"model file {path} lacks a version field")
        graph = None
        if doc.get("graph"):
            graph = build_graph(doc["graph"]["num_nodes"], [tuple(e) for e in doc["graph"]["edges"]])
        return cls(
            spec=spec_from_dict(doc["spec"]),
            store=ParamStore.from_payload(doc["params"]),
            graph=graph,
            feature_names=tuple(doc.get("feature_names", ())),
            scaling={k: (float(v[0]), float(v[1])) for k, v in doc.get("scaling", {}).items()},
        )
