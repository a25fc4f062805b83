"""Synchronous round-step functions for the decentralized algorithms.

All five algorithms share the same skeleton per round: local SGD step,
compress, exchange, gossip with (W - I) weighting scaled by the averaging
rate eta. They differ in what is sent and which correction state rides
along:

  dpsgd         raw local models (no compression state)
  deep_squeeze  error-compensated models, residual delta carried forward
  choco         compressed model updates against public proxy copies x_hat
  sparse_push   deep_squeeze plus a gossiped bias weight u; reports z = x/u
  quant_sgp     choco plus the same push-sum bias weight

Rounds mutate the NodeState list in place and return the list of messages
each node broadcast (for byte accounting). Gradients are inputs, evaluated
by the caller at each node's eval_point().
"""

from dataclasses import dataclass

import numpy as np

from .compression import (
    CompressedMessage,
    ErrorFeedbackState,
    IdentityCompressor,
    dense_message,
    ef_compress,
)
from .topology import MixingMatrix

DPSGD = "dpsgd"
DEEP_SQUEEZE = "deep_squeeze"
CHOCO = "choco"
SPARSE_PUSH = "sparse_push"
QUANT_SGP = "quant_sgp"

ALGORITHMS = (DPSGD, DEEP_SQUEEZE, CHOCO, SPARSE_PUSH, QUANT_SGP)
PUSH_ALGORITHMS = (SPARSE_PUSH, QUANT_SGP)

NO_MOMENTUM = "none"
NESTEROV = "nesterov"
QUASI_GLOBAL = "quasi_global"


@dataclass
class AlgoConfig:
    algorithm: str
    lr: float
    eta: float = 1.0
    momentum_kind: str = NO_MOMENTUM
    beta: float = 0.9
    compressor: object = None  # callable v -> CompressedMessage; None = identity

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.momentum_kind not in (NO_MOMENTUM, NESTEROV, QUASI_GLOBAL):
            raise ValueError(f"unknown momentum kind {self.momentum_kind!r}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"averaging rate eta must be in (0, 1], got {self.eta}")
        if self.lr < 0.0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.compressor is None:
            self.compressor = IdentityCompressor()


@dataclass
class NodeState:
    node: int
    x: np.ndarray
    momentum: np.ndarray
    error: ErrorFeedbackState | None = None
    proxies: dict | None = None  # j -> x_hat_j replica, own id included
    u: float = 1.0
    has_push: bool = False
    rounds_done: int = 0

    def eval_point(self) -> np.ndarray:
        """Where the local gradient is taken: x, or the de-biased z = x/u."""
        if self.has_push:
            if self.u <= 0.0:
                raise ArithmeticError(f"push weight became non-positive: {self.u}")
            return self.x / self.u
        return self.x


def init_states(x0: np.ndarray, mm, algorithm: str) -> list[NodeState]:
    """All nodes start from the same synchronized model.

    mm may be a single MixingMatrix or a sequence of them (time-varying
    graphs); proxy buffers then cover the union of in-neighborhoods.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    mms = [mm] if isinstance(mm, MixingMatrix) else list(mm)
    if len({m.n for m in mms}) != 1:
        raise ValueError("all mixing matrices in a schedule must share n")
    states = []
    size = x0.size
    for i in range(mms[0].n):
        error = None
        proxies = None
        if algorithm in (DEEP_SQUEEZE, SPARSE_PUSH):
            error = ErrorFeedbackState.zeros(size)
        if algorithm in (CHOCO, QUANT_SGP):
            neighborhood = {i}
            for m in mms:
                neighborhood |= set(m.in_neighbors(i))
            proxies = {j: np.zeros(size) for j in neighborhood}
        states.append(
            NodeState(
                node=i,
                x=x0.copy(),
                momentum=np.zeros(size),
                error=error,
                proxies=proxies,
                u=1.0,
                has_push=algorithm in PUSH_ALGORITHMS,
            )
        )
    return states


def local_sgd_update(state: NodeState, gradient: np.ndarray, cfg: AlgoConfig) -> np.ndarray:
    """x~ = x - lr * d, with d the momentum-adjusted gradient."""
    if gradient.shape != state.x.shape:
        raise ValueError("gradient shape mismatch")
    if cfg.momentum_kind == NESTEROV:
        state.momentum[...] = cfg.beta * state.momentum + gradient
        d = gradient + cfg.beta * state.momentum
    elif cfg.momentum_kind == QUASI_GLOBAL:
        d = gradient + cfg.beta * state.momentum
    else:
        d = gradient
    return state.x - cfg.lr * d


def qg_momentum_update(
    state: NodeState, x_before: np.ndarray, x_after: np.ndarray, cfg: AlgoConfig
):
    """Quasi-global buffer: driven by the whole-round model displacement."""
    if cfg.lr <= 0.0:
        raise ValueError("quasi-global momentum needs a positive learning rate")
    state.momentum[...] = cfg.beta * state.momentum + (x_before - x_after) / cfg.lr


def _gossip_mix(i: int, mm: MixingMatrix, base: np.ndarray, contributions, eta: float):
    """base + eta * sum_j (W_ij - I_ij) * contributions[j], fixed j order."""
    out = np.array(base, dtype=np.float64, copy=True)
    for j in mm.in_neighbors(i):
        w = mm.w[i, j] - (1.0 if j == i else 0.0)
        out += eta * w * contributions[j]
    return out


def _finish_round(states):
    for st in states:
        st.rounds_done += 1


def _with_qg(states, cfg, x_before, fn):
    out = fn()
    if cfg.momentum_kind == QUASI_GLOBAL:
        for st, xb in zip(states, x_before):
            qg_momentum_update(st, xb, st.x, cfg)
    return out


def dpsgd_round(
    states: list[NodeState], mm: MixingMatrix, grads: list[np.ndarray], cfg: AlgoConfig
) -> list[CompressedMessage]:
    """Plain gossip SGD: deep-squeeze with an identity compressor."""
    x_before = [st.x.copy() for st in states]

    def run():
        xt = [local_sgd_update(st, g, cfg) for st, g in zip(states, grads)]
        msgs = [dense_message(x) for x in xt]
        contributions = [m.decompress() for m in msgs]
        new_x = [
            _gossip_mix(i, mm, xt[i], contributions, cfg.eta) for i in range(mm.n)
        ]
        for st, x in zip(states, new_x):
            st.x = x
        _finish_round(states)
        return msgs

    return _with_qg(states, cfg, x_before, run)


def deep_squeeze_round(
    states: list[NodeState], mm: MixingMatrix, grads: list[np.ndarray], cfg: AlgoConfig
) -> list[CompressedMessage]:
    x_before = [st.x.copy() for st in states]

    def run():
        xt, msgs = [], []
        for st, g in zip(states, grads):
            x_local = local_sgd_update(st, g, cfg)
            msgs.append(ef_compress(x_local, st.error, cfg.compressor))
            xt.append(x_local)
        contributions = [m.decompress() for m in msgs]
        new_x = [
            _gossip_mix(i, mm, xt[i], contributions, cfg.eta) for i in range(mm.n)
        ]
        for st, x in zip(states, new_x):
            st.x = x
        _finish_round(states)
        return msgs

    return _with_qg(states, cfg, x_before, run)


def choco_round(
    states: list[NodeState], mm: MixingMatrix, grads: list[np.ndarray], cfg: AlgoConfig
) -> list[CompressedMessage]:
    x_before = [st.x.copy() for st in states]

    def run():
        for st in states:
            if st.proxies is None or st.node not in st.proxies:
                raise ValueError(f"node {st.node} missing its proxy buffer")
        xt, msgs = [], []
        for st, g in zip(states, grads):
            x_local = local_sgd_update(st, g, cfg)
            msgs.append(cfg.compressor(x_local - st.proxies[st.node]))
            xt.append(x_local)
        decompressed = [m.decompress() for m in msgs]
        for st in states:
            for j in st.proxies:
                st.proxies[j] = st.proxies[j] + decompressed[j]
        for i, st in enumerate(states):
            diffs = {j: st.proxies[j] - st.proxies[st.node] for j in st.proxies}
            st.x = _gossip_mix(i, mm, xt[i], diffs, cfg.eta)
        _finish_round(states)
        return msgs

    return _with_qg(states, cfg, x_before, run)


def _push_weights_mix(states, mm, eta):
    u_now = [st.u for st in states]
    new_u = []
    for i in range(mm.n):
        acc = u_now[i]
        for j in mm.in_neighbors(i):
            w = mm.w[i, j] - (1.0 if j == i else 0.0)
            acc += eta * w * u_now[j]
        new_u.append(acc)
    for st, u in zip(states, new_u):
        if u <= 0.0:
            raise ArithmeticError(f"push weight became non-positive at node {st.node}")
        st.u = u


def sparse_push_round(
    states: list[NodeState], mm: MixingMatrix, grads: list[np.ndarray], cfg: AlgoConfig
) -> list[CompressedMessage]:
    """Deep-squeeze with push-sum bias; gradients are taken at z = x/u."""
    x_before = [st.x.copy() for st in states]

    def run():
        xt, msgs = [], []
        for st, g in zip(states, grads):
            x_local = local_sgd_update(st, g, cfg)
            msg = ef_compress(x_local, st.error, cfg.compressor)
            msg.push_weight = st.u
            msgs.append(msg)
            xt.append(x_local)
        contributions = [m.decompress() for m in msgs]
        new_x = [
            _gossip_mix(i, mm, xt[i], contributions, cfg.eta) for i in range(mm.n)
        ]
        _push_weights_mix(states, mm, cfg.eta)
        for st, x in zip(states, new_x):
            st.x = x
        _finish_round(states)
        return msgs

    return _with_qg(states, cfg, x_before, run)


def quant_sgp_round(
    states: list[NodeState], mm: MixingMatrix, grads: list[np.ndarray], cfg: AlgoConfig
) -> list[CompressedMessage]:
    """Choco proxy mechanics plus the push-sum bias weight."""
    x_before = [st.x.copy() for st in states]

    def run():
        xt, msgs = [], []
        for st, g in zip(states, grads):
            x_local = local_sgd_update(st, g, cfg)
            msg = cfg.compressor(x_local - st.proxies[st.node])
            msg.push_weight = st.u
            msgs.append(msg)
            xt.append(x_local)
        decompressed = [m.decompress() for m in msgs]
        for st in states:
            for j in st.proxies:
                st.proxies[j] = st.proxies[j] + decompressed[j]
        new_x = []
        for i, st in enumerate(states):
            diffs = {j: st.proxies[j] - st.proxies[st.node] for j in st.proxies}
            new_x.append(_gossip_mix(i, mm, xt[i], diffs, cfg.eta))
        _push_weights_mix(states, mm, cfg.eta)
        for st, x in zip(states, new_x):
            st.x = x
        _finish_round(states)
        return msgs

    return _with_qg(states, cfg, x_before, run)


ROUND_FUNCTIONS = {
    DPSGD: dpsgd_round,
    DEEP_SQUEEZE: deep_squeeze_round,
    CHOCO: choco_round,
    SPARSE_PUSH: sparse_push_round,
    QUANT_SGP: quant_sgp_round,
}


def run_round(states, mm, grads, cfg) -> list[CompressedMessage]:
    return ROUND_FUNCTIONS[cfg.algorithm](states, mm, grads, cfg)


def spread(states: list[NodeState]) -> float:
    """Max pairwise infinity-norm distance between de-biased models."""
    zs = [st.eval_point() for st in states]
    worst = 0.0
    for i in range(len(zs)):
        for j in range(i + 1, len(zs)):
            worst = max(worst, float(np.abs(zs[i] - zs[j]).max()))
    return worst
