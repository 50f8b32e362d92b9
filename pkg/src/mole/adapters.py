"""LoRA experts, top-K routers, and the routed adapted linear layer.

An adapted linear layer keeps its dense weight frozen and adds a gated sum of
low-rank expert updates on top. Each expert is a pair of factors; the output
factor starts Gaussian and the input factor starts at exactly zero, so a fresh
layer computes the frozen product unchanged. A per-layer router picks the K
most probable experts per token and fuses their outputs with renormalized
softmax weights. A switch-style load-balancing loss keeps expert workloads
equitable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng, Tensor, dropout, masked_softmax, matmul, mul, slice_axis, softmax

ADAPTED_TAGS = ("q", "k", "v", "o", "gate", "down", "up")

ROUTER_INIT_STD = 0.02
EXPERT_INIT_STD = 0.02

# Router weight modes. Both compute softmax restricted to the selected experts;
# "renorm" renormalizes the full softmax, "subset" masks logits before the
# softmax. The two agree to rounding error but build different graphs.
ROUTER_MODES = ("renorm", "subset")

_NEG_INF = -1e30


@dataclass
class GateBatch:
    """One router's decisions for a token batch.

    `fusion` (tokens, num_experts) carries the renormalized weights with exact
    zeros at unselected experts; `probs` is the dense softmax; `selected`
    (tokens, K) lists chosen expert indices in ascending order. `fusion` and
    `probs` stay in the autodiff graph.
    """

    fusion: Tensor
    probs: Tensor
    selected: np.ndarray

    def outcome(self, token: int) -> "RoutingOutcome":
        idx = tuple(int(i) for i in self.selected[token])
        return RoutingOutcome(selected=idx,
                              weights=self.fusion.data[token, list(idx)].copy(),
                              full_softmax=self.probs.data[token].copy())

    def outcomes(self) -> list["RoutingOutcome"]:
        return [self.outcome(t) for t in range(self.selected.shape[0])]


@dataclass(frozen=True)
class RoutingOutcome:
    """Routing decision for one token: which experts fire and at what weight.

    `selected` holds exactly K distinct expert indices in ascending order;
    `weights` are their fusion weights (positive, summing to 1); and
    `full_softmax` keeps the probabilities over all experts for the balance
    loss and the utilization statistics.
    """

    selected: tuple[int, ...]
    weights: np.ndarray
    full_softmax: np.ndarray


class LoraExpert:
    """One low-rank adapter: out_factor (out_dim x rank) @ in_factor (rank x in_dim).

    The update applied to a token x is (alpha / rank) * out_factor @ in_factor @ x,
    with dropout on x on this adapter path only. in_factor starts at zero, so a
    freshly initialized expert contributes nothing.
    """

    def __init__(self, in_dim: int, out_dim: int, rank: int, *, alpha: float = 16.0,
                 dropout_rate: float = 0.05, rng: Rng | None = None, dtype=np.float64):
        if rank < 1 or rank >= min(in_dim, out_dim):
            raise ValueError(f"rank must satisfy 1 <= rank < min({in_dim}, {out_dim}), got {rank}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        if alpha <= 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.rank = rank
        self.alpha = float(alpha)
        self.dropout_rate = float(dropout_rate)
        init = rng.normal((out_dim, rank), std=EXPERT_INIT_STD, dtype=dtype) \
            if rng is not None else np.zeros((out_dim, rank), dtype=dtype)
        self.out_factor = Tensor(init, requires_grad=True)
        self.in_factor = Tensor(np.zeros((rank, in_dim), dtype=dtype), requires_grad=True)

    @classmethod
    def from_factors(cls, out_factor, in_factor, *, alpha: float = 1.0,
                     dropout_rate: float = 0.0) -> "LoraExpert":
        """Build an expert from explicit factor matrices (mostly for tests)."""
        a = np.asarray(out_factor, dtype=np.float64)
        b = np.asarray(in_factor, dtype=np.float64)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"factor shapes disagree: {a.shape} x {b.shape}")
        expert = cls(b.shape[1], a.shape[0], a.shape[1], alpha=alpha, dropout_rate=dropout_rate)
        expert.out_factor = Tensor(a, requires_grad=True)
        expert.in_factor = Tensor(b, requires_grad=True)
        return expert

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor, train: bool = False, rng: Rng | None = None) -> Tensor:
        """Adapter update for a batch of tokens x (tokens, in_dim) -> (tokens, out_dim)."""
        dropped = dropout(x, self.dropout_rate, rng, train)
        low = matmul(dropped, self.in_factor.transpose())      # (tokens, rank)
        return matmul(low, self.out_factor.transpose()) * self.scaling

    def effective_delta(self) -> np.ndarray:
        """The dense (out_dim, in_dim) update this expert encodes, unscaled."""
        return self.out_factor.data @ self.in_factor.data


def expert_delta(expert: LoraExpert, x, train: bool = False,
                 rng: Rng | None = None) -> np.ndarray:
    """Apply one expert to a single token vector; returns a plain array."""
    vec = np.asarray(x, dtype=expert.in_factor.dtype)
    if vec.shape != (expert.in_dim,):
        raise ValueError(f"expected input of shape ({expert.in_dim},), got {vec.shape}")
    return expert.delta(Tensor(vec[None, :]), train=train, rng=rng).data[0]


class Router:
    """Top-K gate for one adapted matrix.

    Holds a trainable (in_dim x num_experts) weight; a token's logits are
    x @ weight. Selection takes the K largest probabilities, breaking ties
    toward the lower expert index, and fusion weights renormalize the selected
    probabilities to sum to one. Selection is invariant under a uniform shift
    of the logits.
    """

    def __init__(self, in_dim: int, num_experts: int, k: int, *, layer_index: int = 0,
                 tag: str = "q", rng: Rng | None = None, mode: str = "renorm",
                 dtype=np.float64):
        if k < 1 or k > num_experts:
            raise ValueError(f"top-K must satisfy 1 <= K <= {num_experts}, got K={k}")
        if mode not in ROUTER_MODES:
            raise ValueError(f"unknown router mode {mode!r}; expected one of {ROUTER_MODES}")
        self.in_dim = in_dim
        self.num_experts = num_experts
        self.k = k
        self.layer_index = layer_index
        self.tag = tag
        self.mode = mode
        init = rng.normal((in_dim, num_experts), std=ROUTER_INIT_STD, dtype=dtype) \
            if rng is not None else np.zeros((in_dim, num_experts), dtype=dtype)
        self.weight = Tensor(init, requires_grad=True)

    def gate(self, x: Tensor) -> "GateBatch":
        """Gate a batch of tokens x (tokens, in_dim); see :class:`GateBatch`."""
        logits = matmul(x, self.weight)                     # (tokens, N)
        try:
            probs = softmax(logits, axis=-1)
        except ValueError as err:
            raise ValueError(
                f"router (layer {self.layer_index}, {self.tag}): {err}") from err
        # Stable argsort on -p: ties resolve to the lower expert index.
        order = np.argsort(-probs.data, axis=-1, kind="stable")
        selected = np.sort(order[:, : self.k], axis=-1)
        mask = np.zeros(probs.shape, dtype=probs.dtype)
        np.put_along_axis(mask, selected, 1.0, axis=-1)
        if self.mode == "renorm":
            kept = mul(probs, Tensor(mask))
            fusion = kept * kept.sum(axis=-1, keepdims=True).pow(-1.0)
        else:
            fusion = masked_softmax(logits, (1.0 - mask) * _NEG_INF, axis=-1)
        return GateBatch(fusion=fusion, probs=probs, selected=selected)

    def route(self, x) -> RoutingOutcome:
        """Route a single token vector and report the decision."""
        vec = np.asarray(x, dtype=self.weight.dtype)
        if vec.shape != (self.in_dim,):
            raise ValueError(f"expected input of shape ({self.in_dim},), got {vec.shape}")
        if not np.isfinite(vec).all():
            raise ValueError("routing input contains non-finite entries")
        return self.gate(Tensor(vec[None, :])).outcome(0)


def load_balance_loss(outcomes: list[RoutingOutcome]) -> float:
    """Switch-style balance loss over a batch of routing decisions.

    With N experts, T tokens, and K selections per token this is
    N * sum_i f_i * P_i, where f_i is expert i's share of the T*K selection
    slots and P_i is its mean softmax probability. Perfectly uniform routing
    scores exactly 1; concentration raises it.
    """
    if not outcomes:
        raise ValueError("load_balance_loss needs at least one routing outcome")
    num_experts = len(outcomes[0].full_softmax)
    counts = np.zeros(num_experts)
    prob_sums = np.zeros(num_experts)
    k = len(outcomes[0].selected)
    for outcome in outcomes:
        for i in outcome.selected:
            counts[i] += 1.0
        prob_sums += outcome.full_softmax
    tokens = len(outcomes)
    dispatch_frac = counts / (tokens * k)
    mean_prob = prob_sums / tokens
    return float(num_experts * np.dot(dispatch_frac, mean_prob))


def balance_loss_tensor(gate: GateBatch) -> Tensor:
    """Differentiable twin of :func:`load_balance_loss` for one router batch.

    The dispatch fractions are constants (selection is discrete); gradient
    flows through the mean probabilities only, reaching every expert column
    of the router weight.
    """
    probs, selected = gate.probs, gate.selected
    num_experts = probs.shape[1]
    counts = np.bincount(selected.reshape(-1), minlength=num_experts).astype(probs.dtype)
    dispatch_frac = counts / selected.size
    mean_prob = probs.mean(axis=0)
    return (mean_prob * Tensor(dispatch_frac)).sum() * float(num_experts)


class AdaptedLinear:
    """A frozen linear map plus routed low-rank expert updates.

    The frozen weight is (out_dim, in_dim) and never receives gradients. All
    experts share the frozen matrix's dimensions and rank; the router consumes
    the same activation vector that feeds the frozen matrix.
    """

    def __init__(self, frozen_weight: np.ndarray, experts: list[LoraExpert],
                 router: Router):
        w0 = np.asarray(frozen_weight)
        if w0.ndim != 2:
            raise ValueError(f"frozen weight must be 2-d, got shape {w0.shape}")
        out_dim, in_dim = w0.shape
        for e in experts:
            if (e.in_dim, e.out_dim) != (in_dim, out_dim):
                raise ValueError(
                    f"expert dims ({e.in_dim}, {e.out_dim}) disagree with frozen ({in_dim}, {out_dim})")
        ranks = {e.rank for e in experts}
        if len(ranks) > 1:
            raise ValueError(f"experts must share one rank, got {sorted(ranks)}")
        if router.num_experts != len(experts):
            raise ValueError(f"router expects {router.num_experts} experts, got {len(experts)}")
        if router.in_dim != in_dim:
            raise ValueError(f"router input dim {router.in_dim} != layer input dim {in_dim}")
        self.frozen = Tensor(w0)  # requires_grad stays False: never trained
        self.experts = experts
        self.router = router
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, x: Tensor, train: bool = False, rng: Rng | None = None
                ) -> tuple[Tensor, GateBatch]:
        """Apply the layer to a token batch x (tokens, in_dim).

        Returns the output and the :class:`GateBatch` so the caller can
        assemble balance losses and routing statistics. The frozen path sees
        the undropped input; dropout applies on the adapter path only.
        """
        out = matmul(x, self.frozen.transpose())
        gate = self.router.gate(x)
        for i in np.unique(gate.selected):
            expert_rng = rng.child("expert", int(i)) if rng is not None else None
            delta = self.experts[int(i)].delta(x, train=train, rng=expert_rng)
            weight_col = slice_axis(gate.fusion, 1, int(i), 1)   # (tokens, 1)
            out = out + mul(delta, weight_col)
        return out, gate

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = {f"{prefix}frozen": self.frozen, f"{prefix}router": self.router.weight}
        for i, e in enumerate(self.experts):
            params[f"{prefix}expert{i}.out_factor"] = e.out_factor
            params[f"{prefix}expert{i}.in_factor"] = e.in_factor
        return params


def adapted_forward(layer: AdaptedLinear, x, train: bool = False,
                    rng: Rng | None = None) -> tuple[np.ndarray, RoutingOutcome]:
    """Single-vector convenience: apply `layer` to one token, with its routing."""
    vec = np.asarray(x, dtype=layer.frozen.dtype)
    if vec.shape != (layer.in_dim,):
        raise ValueError(f"expected input of shape ({layer.in_dim},), got {vec.shape}")
    out, gate = layer.forward(Tensor(vec[None, :]), train=train, rng=rng)
    return out.data[0], gate.outcome(0)
