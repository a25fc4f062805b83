"""Deterministic synchronous multi-node training driver.

Wires partitions, models, algorithms and compressors together; keeps an
exact per-node byte ledger; evaluates the averaged model. Every source of
randomness is a named child of the experiment seed, and each node draws
batches from its own stream, so results are identical for any worker-pool
size.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import algorithms as alg
from .compression import IdentityCompressor, Quantize8Compressor, TopKCompressor
from .layers import FP32, INT8, build_model
from .partition import Dataset, generate_blobs, load_cifar10_binary, partition_skewed
from .topology import (
    MixingMatrix,
    build_directed_ring,
    build_undirected_torus,
    load_adjacency_file,
    validate,
)


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss (CLI exit code 3)."""


COMPRESSIONS = ("none", "topk")
ETA_AUTO = 0.0  # sentinel: pick the default for the compression level


@dataclass
class ExperimentConfig:
    # [topology]
    topology: str = "directed_ring"
    nodes: int = 8
    rows: int = 0  # torus only; 0 = square-ish from nodes
    cols: int = 0
    topology_file: str = ""
    # [algorithm]
    algorithm: str = "choco"
    precision: str = "fp32"
    compression: str = "none"
    fraction: float = 1.0
    eta: float = ETA_AUTO
    momentum: str = "nesterov"
    beta: float = 0.9
    # [data]
    dataset: str = "blobs"
    classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    dim: int = 8
    separation: float = 6.0
    skew: float = 0.0
    cifar_path: str = ""
    # [training]
    arch: str = "tinymlp"
    norm: str = "range_evonorm"
    epochs: int = 50
    batch_size: int = 25
    lr: float = 0.1
    lr_decay_factor: float = 10.0
    lr_decay_epochs: tuple = ()
    seed: int = 0
    # [logging]
    log_every: int = 1
    workers: int = 1


_SECTIONS = {
    "topology": ("topology", "nodes", "rows", "cols", "topology_file"),
    "algorithm": (
        "algorithm",
        "precision",
        "compression",
        "fraction",
        "eta",
        "momentum",
        "beta",
    ),
    "data": (
        "dataset",
        "classes",
        "per_class",
        "test_per_class",
        "dim",
        "separation",
        "skew",
        "cifar_path",
    ),
    "training": (
        "arch",
        "norm",
        "epochs",
        "batch_size",
        "lr",
        "lr_decay_factor",
        "lr_decay_epochs",
        "seed",
    ),
    "logging": ("log_every", "workers"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (tuple, "tuple"):
            return tuple(int(tok) for tok in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"field {name!r}: cannot parse {raw!r}") from exc


def config_to_text(cfg: ExperimentConfig) -> str:
    values = asdict(cfg)
    lines = []
    for section, names in _SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            v = values[name]
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            lines.append(f"{name} = {v}")
        lines.append("")
    return "\n".join(lines)


def config_from_text(text: str) -> ExperimentConfig:
    values = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw_val = (part.strip() for part in line.split("=", 1))
        if section is None:
            raise ConfigError(f"line {lineno}: key {key!r} outside any section")
        if key not in _SECTIONS[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        values[key] = _parse_value(key, raw_val)
    cfg = ExperimentConfig(**values)
    validate_config(cfg)
    return cfg


def config_from_file(path) -> ExperimentConfig:
    try:
        text = open(path).read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_text(text)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Dotted-path overrides: section.key=value."""
    values = asdict(cfg)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        path, raw_val = item.split("=", 1)
        section, key = path.split(".", 1)
        if section not in _SECTIONS or key not in _SECTIONS[section]:
            raise ConfigError(f"override {item!r}: unknown field {section}.{key}")
        values[key] = _parse_value(key, raw_val)
    values["lr_decay_epochs"] = tuple(values["lr_decay_epochs"])
    out = ExperimentConfig(**values)
    validate_config(out)
    return out


def resolve_eta(cfg: ExperimentConfig) -> float:
    """Averaging-rate defaults: lower rates for heavier compression."""
    if cfg.eta != ETA_AUTO:
        return cfg.eta
    if cfg.algorithm == alg.DPSGD:
        return 1.0  # always exchanges raw models
    if cfg.compression == "topk":
        return 0.5 if cfg.fraction >= 0.1 else 0.1
    if cfg.precision == INT8:
        return 0.9  # dense 8-bit messages are compressed, keep eta below 1
    return 1.0


def validate_config(cfg: ExperimentConfig):
    problems = []
    if cfg.topology not in ("directed_ring", "undirected_torus", "file"):
        problems.append(f"topology.topology: unknown kind {cfg.topology!r}")
    if cfg.topology == "file" and not cfg.topology_file:
        problems.append("topology.topology_file: required for file topologies")
    if cfg.nodes < 1:
        problems.append("topology.nodes: must be >= 1")
    if cfg.algorithm not in alg.ALGORITHMS:
        problems.append(f"algorithm.algorithm: unknown {cfg.algorithm!r}")
    if cfg.precision not in (FP32, INT8):
        problems.append(f"algorithm.precision: unknown {cfg.precision!r}")
    if cfg.compression not in COMPRESSIONS:
        problems.append(f"algorithm.compression: unknown {cfg.compression!r}")
    if not 0.0 < cfg.fraction <= 1.0:
        problems.append("algorithm.fraction: must be in (0, 1]")
    if cfg.eta != ETA_AUTO and not 0.0 < cfg.eta <= 1.0:
        problems.append("algorithm.eta: must be in (0, 1]")
    if cfg.algorithm == alg.DPSGD and cfg.compression != "none":
        problems.append("algorithm.compression: dpsgd exchanges raw models only")
    if (
        cfg.eta == 1.0
        and cfg.algorithm != alg.DPSGD
        and (cfg.compression != "none" or cfg.precision == INT8)
    ):
        problems.append("algorithm.eta: 1.0 is only valid with identity messages")
    if cfg.momentum not in (alg.NO_MOMENTUM, alg.NESTEROV, alg.QUASI_GLOBAL):
        problems.append(f"algorithm.momentum: unknown {cfg.momentum!r}")
    if cfg.dataset not in ("blobs", "cifar10"):
        problems.append(f"data.dataset: unknown {cfg.dataset!r}")
    if cfg.dataset == "cifar10" and not cfg.cifar_path:
        problems.append("data.cifar_path: required for cifar10")
    if not 0.0 <= cfg.skew <= 1.0:
        problems.append("data.skew: must be in [0, 1]")
    if cfg.arch not in ("tinymlp", "minicnn"):
        problems.append(f"training.arch: {cfg.arch!r} is not trainable (desk archs only)")
    if cfg.norm not in ("range_bn", "evonorm_s0", "range_evonorm"):
        problems.append(f"training.norm: unknown {cfg.norm!r}")
    if cfg.epochs < 1:
        problems.append("training.epochs: must be >= 1")
    if cfg.batch_size < 2:
        problems.append("training.batch_size: must be >= 2 (range statistics)")
    if cfg.lr < 0:
        problems.append("training.lr: must be >= 0")
    if cfg.log_every < 1:
        problems.append("logging.log_every: must be >= 1")
    if cfg.workers < 1:
        problems.append("logging.workers: must be >= 1")
    if problems:
        raise ConfigError("; ".join(problems))


def build_topology(cfg: ExperimentConfig) -> MixingMatrix:
    if cfg.topology == "directed_ring":
        if cfg.nodes == 1:
            return MixingMatrix(n=1, w=np.array([[1.0]]), kind="custom")
        return build_directed_ring(cfg.nodes)
    if cfg.topology == "undirected_torus":
        rows = cfg.rows or int(math.isqrt(cfg.nodes))
        cols = cfg.cols or (cfg.nodes // rows if rows else 0)
        if rows * cols != cfg.nodes:
            raise ConfigError(
                f"topology: torus rows*cols ({rows}x{cols}) != nodes ({cfg.nodes})"
            )
        return build_undirected_torus(rows, cols)
    mm = load_adjacency_file(cfg.topology_file)
    if mm.n != cfg.nodes:
        raise ConfigError(f"topology: file has {mm.n} nodes, config says {cfg.nodes}")
    return mm


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train/test split, deterministic under the experiment seed."""
    if cfg.dataset == "blobs":
        full = generate_blobs(
            cfg.classes,
            cfg.per_class + cfg.test_per_class,
            int(np.prod(input_shape(cfg))),
            cfg.separation,
            cfg.seed,
        )
        train_idx, test_idx = [], []
        for c in range(cfg.classes):
            idx = np.nonzero(full.labels == c)[0]
            train_idx.append(idx[: cfg.per_class])
            test_idx.append(idx[cfg.per_class :])
        train = full.subset(np.sort(np.concatenate(train_idx)))
        test = full.subset(np.sort(np.concatenate(test_idx)))
        # inputs are normalized before training; test reuses the train stats
        mean = train.features.mean(axis=0)
        std = train.features.std(axis=0)
        std[std == 0] = 1.0
        return (
            Dataset((train.features - mean) / std, train.labels),
            Dataset((test.features - mean) / std, test.labels),
        )
    import pathlib

    path = pathlib.Path(cfg.cifar_path)
    if path.is_dir():
        batches = sorted(path.glob("data_batch_*.bin"))
        test_file = path / "test_batch.bin"
        if not batches or not test_file.exists():
            raise ConfigError(f"data.cifar_path: {path} lacks CIFAR-10 batch files")
        parts = [load_cifar10_binary(p) for p in batches]
        train = Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )
        return train, load_cifar10_binary(test_file)
    full = load_cifar10_binary(path)
    cut = max(1, int(0.8 * len(full)))
    return full.subset(np.arange(cut)), full.subset(np.arange(cut, len(full)))


def build_compressor(cfg: ExperimentConfig, layer_offsets: list[int]):
    if cfg.compression == "topk":
        return TopKCompressor(
            fraction=cfg.fraction,
            layer_offsets=layer_offsets,
            quantize_values=cfg.precision == INT8,
        )
    if cfg.precision == INT8:
        return Quantize8Compressor()
    return IdentityCompressor()


def input_shape(cfg: ExperimentConfig) -> tuple:
    """Model input shape; blob features are generated (and reshaped) to fit."""
    if cfg.arch == "tinymlp":
        return (3 * 32 * 32,) if cfg.dataset == "cifar10" else (cfg.dim,)
    return (3, 32, 32) if cfg.dataset == "cifar10" else (3, cfg.dim, cfg.dim)


@dataclass
class RoundMetrics:
    round: int
    losses: list
    spread: float
    bytes_cum: list
    wall_time: float


def metrics_to_csv(metrics: list[RoundMetrics]) -> str:
    lines = ["round,node,loss,spread,bytes_cum"]
    for m in metrics:
        for node, (loss, sent) in enumerate(zip(m.losses, m.bytes_cum)):
            lines.append(f"{m.round},{node},{loss!r},{m.spread!r},{sent}")
    return "\n".join(lines) + "\n"


class CommLedger:
    """Exact sent-byte accounting, split by payload kind."""

    COLUMNS = (
        "round",
        "node",
        "values_bytes",
        "index_bytes",
        "header_bytes",
        "push_weight_bytes",
        "total_bytes",
    )

    def __init__(self, n: int):
        self.n = n
        self.rows: list[tuple] = []
        self.cumulative = [0] * n

    def record(self, round_idx: int, node: int, breakdown: dict, copies: int):
        values = breakdown["values"] * copies
        indices = breakdown["indices"] * copies
        header = breakdown["header"] * copies
        push = breakdown["push_weight"] * copies
        total = values + indices + header + push
        self.rows.append((round_idx, node, values, indices, header, push, total))
        self.cumulative[node] += total

    def node_total(self, node: int) -> int:
        return self.cumulative[node]

    def total(self) -> int:
        return sum(self.cumulative)

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        lines += [",".join(str(v) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"


class _NodeSampler:
    """Cycles through a node's samples in its own shuffled order."""

    def __init__(self, indices: np.ndarray, batch: int, rng: np.random.Generator):
        if indices.size == 0:
            raise ConfigError("a node received no samples; lower the skew or nodes")
        self.indices = indices
        self.batch = batch
        self.rng = rng
        self.order = rng.permutation(indices.size)
        self.pos = 0

    def next_batch(self) -> np.ndarray:
        out = []
        while len(out) < self.batch:
            if self.pos == self.order.size:
                self.order = self.rng.permutation(self.indices.size)
                self.pos = 0
            out.append(self.indices[self.order[self.pos]])
            self.pos += 1
        return np.array(out)


def rounds_per_epoch(plan_sizes: list[int], batch: int) -> int:
    return max(int(math.ceil(size / batch)) for size in plan_sizes)


def lr_at_epoch(cfg: ExperimentConfig, epoch: int) -> float:
    decays = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr / (cfg.lr_decay_factor**decays)


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: list
    ledger: CommLedger
    states: list
    model_template: object
    train: Dataset
    test: Dataset
    mixing: MixingMatrix

    def averaged_accuracy(self) -> float:
        mode = self.config.precision
        return evaluate_averaged_model(
            self.states, self.model_template, self.test, mode
        )


def evaluate_averaged_model(states, model, test: Dataset, mode: str = FP32) -> float:
    """Accuracy of the parameter-averaged model (de-biased for push-sum)."""
    avg = np.mean([st.eval_point() for st in states], axis=0)
    model.set_param_vector(avg)
    return model.accuracy(test.features, test.labels, mode)


def run_experiment(cfg: ExperimentConfig, mixing_schedule=None) -> RunResult:
    """Run the experiment; mixing_schedule optionally cycles a sequence of
    mixing matrices round by round (defaults to the constant configured one).
    """
    validate_config(cfg)
    mms = list(mixing_schedule) if mixing_schedule else [build_topology(cfg)]
    mm = mms[0]
    if any(m.n != mm.n for m in mms):
        raise ConfigError("all matrices in the schedule must have the same size")
    if cfg.nodes != mm.n:
        raise ConfigError(f"nodes field ({cfg.nodes}) != topology size ({mm.n})")
    for m in mms:
        errors = [v for v in validate(m) if v.severity == "error"]
        if errors:
            raise ConfigError(
                "topology invalid: " + "; ".join(v.message for v in errors)
            )

    train, test = load_datasets(cfg)
    shape = input_shape(cfg)
    if int(np.prod(train.features.shape[1:])) != int(np.prod(shape)):
        raise ConfigError(
            f"dataset features {train.features.shape[1:]} do not fit model "
            f"input {shape}"
        )
    train = Dataset(train.features.reshape(len(train), *shape), train.labels)
    test = Dataset(test.features.reshape(len(test), *shape), test.labels)
    plan = partition_skewed(train.labels, mm.n, cfg.skew, cfg.seed + 1)

    models = [
        build_model(cfg.arch, cfg.norm, cfg.classes, shape, seed=cfg.seed + 2)
        for _ in range(mm.n)
    ]
    template = models[0]
    x0 = template.param_vector()
    states = alg.init_states(x0, mms, cfg.algorithm)
    compressor = build_compressor(cfg, template.layer_param_offsets())
    algo_cfg = alg.AlgoConfig(
        algorithm=cfg.algorithm,
        lr=cfg.lr,
        eta=resolve_eta(cfg),
        momentum_kind=cfg.momentum,
        beta=cfg.beta,
        compressor=compressor,
    )

    samplers = [
        _NodeSampler(
            plan.assignments[i],
            cfg.batch_size,
            np.random.default_rng([cfg.seed, i, 1013]),
        )
        for i in range(mm.n)
    ]

    ledger = CommLedger(mm.n)
    metrics: list[RoundMetrics] = []
    per_epoch = rounds_per_epoch([a.size for a in plan.assignments], cfg.batch_size)
    total_rounds = cfg.epochs * per_epoch
    mode = cfg.precision
    start = time.monotonic()

    def node_grad(i: int):
        batch_idx = samplers[i].next_batch()
        models[i].set_param_vector(states[i].eval_point())
        loss, grad = models[i].loss_and_grad(
            train.features[batch_idx], train.labels[batch_idx], mode
        )
        return float(loss), grad

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        round_idx = 0
        for epoch in range(cfg.epochs):
            algo_cfg.lr = lr_at_epoch(cfg, epoch)
            for _ in range(per_epoch):
                if pool is not None:
                    results = list(pool.map(node_grad, range(mm.n)))
                else:
                    results = [node_grad(i) for i in range(mm.n)]
                losses = [r[0] for r in results]
                grads = [r[1] for r in results]
                if not all(np.isfinite(loss) for loss in losses):
                    raise DivergenceError(
                        f"non-finite loss at round {round_idx}: {losses}"
                    )
                if not all(np.isfinite(g).all() for g in grads):
                    raise DivergenceError(f"non-finite gradient at round {round_idx}")
                mm_t = mms[round_idx % len(mms)]
                msgs = alg.run_round(states, mm_t, grads, algo_cfg)
                for i, msg in enumerate(msgs):
                    ledger.record(
                        round_idx, i, msg.byte_breakdown(), max(mm_t.out_degree(i), 1)
                    )
                round_idx += 1
                if round_idx % cfg.log_every == 0 or round_idx == total_rounds:
                    metrics.append(
                        RoundMetrics(
                            round=round_idx,
                            losses=losses,
                            spread=alg.spread(states),
                            bytes_cum=list(ledger.cumulative),
                            wall_time=time.monotonic() - start,
                        )
                    )
    finally:
        if pool is not None:
            pool.shutdown()

    return RunResult(
        config=cfg,
        metrics=metrics,
        ledger=ledger,
        states=states,
        model_template=template,
        train=train,
        test=test,
        mixing=mm,
    )


def predict_message_bytes(
    params: int,
    compression: str = "none",
    fraction: float = 1.0,
    precision: str = FP32,
    push: bool = False,
    layer_offsets: list[int] | None = None,
) -> int:
    """Wire bytes of one broadcast payload, measured on a zero vector."""
    offsets = layer_offsets if layer_offsets is not None else [0]
    if compression == "topk":
        comp = TopKCompressor(
            fraction=fraction, layer_offsets=offsets, quantize_values=precision == INT8
        )
    elif precision == INT8:
        comp = Quantize8Compressor()
    else:
        comp = IdentityCompressor()
    msg = comp(np.zeros(params))
    if push:
        msg.push_weight = 1.0
    return msg.byte_size


def predict_data_volume(
    cfg: ExperimentConfig,
    params: int | None = None,
    total_samples: int | None = None,
    layer_offsets: list[int] | None = None,
) -> list[int]:
    """Analytic bytes sent per node over the whole run.

    With total_samples the dataset is assumed evenly split; otherwise the
    actual partition is rebuilt so the prediction equals the ledger exactly.
    """
    if params is None:
        model = build_model(
            cfg.arch, cfg.norm, cfg.classes, input_shape(cfg), seed=cfg.seed + 2
        )
        params = model.param_count
        layer_offsets = model.layer_param_offsets()
    mm = build_topology(cfg)
    if total_samples is not None:
        per_node = int(math.ceil(total_samples / mm.n))
        per_epoch = int(math.ceil(per_node / cfg.batch_size))
    else:
        train, _ = load_datasets(cfg)
        plan = partition_skewed(train.labels, mm.n, cfg.skew, cfg.seed + 1)
        per_epoch = rounds_per_epoch(
            [a.size for a in plan.assignments], cfg.batch_size
        )
    rounds = cfg.epochs * per_epoch
    push = cfg.algorithm in alg.PUSH_ALGORITHMS
    per_message = predict_message_bytes(
        params, cfg.compression, cfg.fraction, cfg.precision, push, layer_offsets
    )
    return [rounds * per_message * max(mm.out_degree(i), 1) for i in range(mm.n)]
