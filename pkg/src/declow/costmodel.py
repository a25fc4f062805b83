"""Analytic op-count, energy, and memory model for training and inference.

Counts are exact integer formulas per layer kind, parameterized by batch
size b, channels, kernel, padding, stride, and input resolution. Training
counts cover forward plus backward (convolutions carry the 3x factor);
inference counts the forward pass only. The low-precision network is the
same architecture with quantization layers added: weight quantization in
both phases, activation quantization during training only.

Per-op energies default to the widely used 45nm measurements
(fp32 add/mul 0.9/3.7 pJ, int8 add/mul 0.03/0.2 pJ); they are validated
here only through the fp32/int8 efficiency ratios they produce.
"""

from dataclasses import dataclass

CONV = "conv"
LINEAR = "linear"
QUANT_ACT = "quant_act"
QUANT_WEIGHT = "quant_weight"
RANGE_BN_RELU = "range_bn_relu"
RANGE_EVONORM = "range_evonorm"
SKIP = "skip"
AVGPOOL = "avgpool"

TRAINING = "training"
INFERENCE = "inference"

FP32 = "fp32"
INT8 = "int8"

NORM_KINDS = {"range_bn": RANGE_BN_RELU, "range_evonorm": RANGE_EVONORM}
_PARAMS_PER_CHANNEL = {RANGE_BN_RELU: 2, RANGE_EVONORM: 3}  # gamma/beta (+v)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    b: int = 1
    c_in: int = 0
    c_out: int = 0
    k: int = 1
    l: int = 1
    p: int = 0
    s: int = 1
    g: int = 1

    def out_side(self) -> int:
        # floor semantics, as convolutions actually behave; the stride-2
        # blocks of the CIFAR ResNets hit the non-integral case
        num = self.l + 2 * self.p - self.k
        if num < 0:
            raise ValueError(f"invalid conv geometry: {self}")
        return num // self.s + 1


@dataclass(frozen=True)
class OpCounts:
    adds: int
    mults: int
    phase: str

    def __add__(self, other: "OpCounts") -> "OpCounts":
        if self.phase != other.phase:
            raise ValueError("cannot add counts across phases")
        return OpCounts(self.adds + other.adds, self.mults + other.mults, self.phase)


@dataclass(frozen=True)
class EnergyModel:
    fp32_add: float = 0.9  # picojoules
    fp32_mul: float = 3.7
    int8_add: float = 0.03
    int8_mul: float = 0.2

    def __post_init__(self):
        vals = (self.fp32_add, self.fp32_mul, self.int8_add, self.int8_mul)
        if any(v <= 0 for v in vals):
            raise ValueError("per-op energies must be positive")
        if self.int8_add >= self.fp32_add or self.int8_mul >= self.fp32_mul:
            raise ValueError("int8 energies must be below fp32")


DEFAULT_ENERGY = EnergyModel()


def train_counts(spec: LayerSpec) -> OpCounts:
    """Forward+backward op counts (training table)."""
    b, ci, co, k, l = spec.b, spec.c_in, spec.c_out, spec.k, spec.l
    if spec.kind == CONV:
        n = 3 * b * co * ci * k * k * spec.out_side() ** 2
        return OpCounts(n, n, TRAINING)
    if spec.kind == LINEAR:
        n = 3 * b * co * ci
        return OpCounts(n, n, TRAINING)
    if spec.kind == QUANT_ACT:
        base = b * ci * l * l
        return OpCounts(2 * base, 4 * base, TRAINING)
    if spec.kind == QUANT_WEIGHT:
        base = co * ci * k * k
        return OpCounts(2 * base, 4 * base, TRAINING)
    if spec.kind == RANGE_BN_RELU:
        base = b * ci * l * l
        return OpCounts(9 * base, 6 * base + 7 * ci, TRAINING)
    if spec.kind == RANGE_EVONORM:
        base = b * ci * l * l
        return OpCounts(6 * base, 10 * base + 5 * ci, TRAINING)
    if spec.kind == SKIP:
        return OpCounts(2 * b * ci * l * l, 0, TRAINING)
    if spec.kind == AVGPOOL:
        return OpCounts(b * ci * l * l, 2 * b * ci, TRAINING)
    raise ValueError(f"no training count formula for kind {spec.kind!r}")


def infer_counts(spec: LayerSpec) -> OpCounts:
    """Forward-pass op counts (inference table).

    Activation quantization has no inference row: the low-precision
    inference network carries only weight-quantization layers.
    """
    b, ci, co, k, l = spec.b, spec.c_in, spec.c_out, spec.k, spec.l
    if spec.kind == CONV:
        n = b * co * ci * k * k * spec.out_side() ** 2
        return OpCounts(n, n, INFERENCE)
    if spec.kind == LINEAR:
        n = b * co * ci
        return OpCounts(n, n, INFERENCE)
    if spec.kind == QUANT_ACT:
        return OpCounts(0, 0, INFERENCE)
    if spec.kind == QUANT_WEIGHT:
        base = co * ci * k * k
        return OpCounts(2 * base, 4 * base, INFERENCE)
    if spec.kind == RANGE_BN_RELU:
        base = b * ci * l * l
        return OpCounts(3 * base, 2 * base + 3 * ci, INFERENCE)
    if spec.kind == RANGE_EVONORM:
        base = b * ci * l * l
        return OpCounts(2 * base, 4 * base + 2 * ci, INFERENCE)
    if spec.kind == SKIP:
        return OpCounts(2 * b * ci * l * l, 0, INFERENCE)
    if spec.kind == AVGPOOL:
        return OpCounts(b * ci * l * l, b * ci, INFERENCE)
    raise ValueError(f"no inference count formula for kind {spec.kind!r}")


def network_counts(specs: list[LayerSpec], phase: str) -> OpCounts:
    fn = train_counts if phase == TRAINING else infer_counts
    total = OpCounts(0, 0, TRAINING if phase == TRAINING else INFERENCE)
    for spec in specs:
        total = total + fn(spec)
    return total


def with_quantization_layers(specs: list[LayerSpec], phase: str) -> list[LayerSpec]:
    """The low-precision network: quantizers inserted around compute layers."""
    out: list[LayerSpec] = []
    for spec in specs:
        if spec.kind in (CONV, LINEAR):
            if phase == TRAINING:
                out.append(
                    LayerSpec(
                        QUANT_ACT,
                        b=spec.b,
                        c_in=spec.c_in,
                        l=spec.l if spec.kind == CONV else 1,
                    )
                )
            out.append(
                LayerSpec(
                    QUANT_WEIGHT,
                    c_in=spec.c_in,
                    c_out=spec.c_out,
                    k=spec.k if spec.kind == CONV else 1,
                )
            )
        out.append(spec)
    return out


def energy_mj(counts: OpCounts, precision: str, em: EnergyModel = DEFAULT_ENERGY) -> float:
    if precision == FP32:
        pj = counts.adds * em.fp32_add + counts.mults * em.fp32_mul
    elif precision == INT8:
        pj = counts.adds * em.int8_add + counts.mults * em.int8_mul
    else:
        raise ValueError(f"unknown precision {precision!r}")
    return pj * 1e-9  # pJ -> mJ


def params_of(spec: LayerSpec) -> int:
    if spec.kind == CONV:
        return spec.c_out * spec.c_in * spec.k * spec.k
    if spec.kind == LINEAR:
        return spec.c_out * spec.c_in
    if spec.kind in _PARAMS_PER_CHANNEL:
        return _PARAMS_PER_CHANNEL[spec.kind] * spec.c_in
    return 0


def param_count(specs: list[LayerSpec]) -> int:
    return sum(params_of(s) for s in specs)


def _activation_elems(spec: LayerSpec) -> int:
    """Stored activation footprint: layer input(s) plus its gradient buffer."""
    b, ci, l = spec.b, spec.c_in, spec.l
    feat = b * ci * l * l
    if spec.kind == CONV:
        return feat + b * spec.c_out * spec.out_side() ** 2
    if spec.kind == LINEAR:
        return b * ci + b * spec.c_out
    if spec.kind == RANGE_BN_RELU:
        # also caches the centered values and the pre-ReLU output
        return 4 * feat
    if spec.kind == RANGE_EVONORM:
        return 2 * feat
    if spec.kind == SKIP:
        return 3 * feat  # two addends in, one out
    if spec.kind == AVGPOOL:
        return feat + b * ci
    return 0  # quantizers project in place


_ALGO_BUFFERS = {
    "dpsgd": 0,
    "deep_squeeze": 1,  # error residual
    "choco": 1,  # public proxy copy
    "sparse_push": 1,
    "quant_sgp": 1,
}


def memory_bytes(
    specs: list[LayerSpec],
    phase: str,
    precision: str,
    algorithm: str = "choco",
) -> int:
    """Model-state plus activation storage for one node.

    Inference stores the weights alone at the deployed width. Training keeps
    weights, weight gradients, and momentum at fp32, one model-sized buffer
    for the algorithm's correction state, and layer activations at the
    compute width.
    """
    if algorithm not in _ALGO_BUFFERS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    n_params = param_count(specs)
    if phase == INFERENCE:
        return n_params * (4 if precision == FP32 else 1)
    act_width = 4 if precision == FP32 else 1
    copies = 3 + _ALGO_BUFFERS[algorithm]  # weights + grads + momentum + buffers
    acts = sum(_activation_elems(s) for s in specs)
    return n_params * 4 * copies + acts * act_width


def _norm(kind: str, channels: int, b: int, l: int) -> LayerSpec:
    return LayerSpec(NORM_KINDS[kind], b=b, c_in=channels, l=l)


def _cifar_resnet(blocks_per_stage: int, norm: str, classes: int, b: int):
    specs = [
        LayerSpec(CONV, b=b, c_in=3, c_out=16, k=3, l=32, p=1),
        _norm(norm, 16, b, 32),
    ]
    l = 32
    c = 16
    for stage, width in enumerate((16, 32, 64)):
        for block in range(blocks_per_stage):
            stride = 2 if stage > 0 and block == 0 else 1
            l_out = l // stride
            specs += [
                LayerSpec(CONV, b=b, c_in=c, c_out=width, k=3, l=l, p=1, s=stride),
                _norm(norm, width, b, l_out),
                LayerSpec(CONV, b=b, c_in=width, c_out=width, k=3, l=l_out, p=1),
                _norm(norm, width, b, l_out),
                LayerSpec(SKIP, b=b, c_in=width, l=l_out),
            ]
            c, l = width, l_out
    specs += [
        LayerSpec(AVGPOOL, b=b, c_in=64, l=l),
        LayerSpec(LINEAR, b=b, c_in=64, c_out=classes),
    ]
    return specs


def _resnet18(norm: str, classes: int, b: int):
    specs = [
        LayerSpec(CONV, b=b, c_in=3, c_out=64, k=7, l=224, p=3, s=2),
        _norm(norm, 64, b, 112),
        LayerSpec(AVGPOOL, b=b, c_in=64, l=112),  # stand-in for the 3x3 max pool
    ]
    l = 56
    c = 64
    for stage, width in enumerate((64, 128, 256, 512)):
        for block in range(2):
            stride = 2 if stage > 0 and block == 0 else 1
            l_out = l // stride
            specs += [
                LayerSpec(CONV, b=b, c_in=c, c_out=width, k=3, l=l, p=1, s=stride),
                _norm(norm, width, b, l_out),
                LayerSpec(CONV, b=b, c_in=width, c_out=width, k=3, l=l_out, p=1),
                _norm(norm, width, b, l_out),
            ]
            if stride != 1:
                specs += [
                    LayerSpec(CONV, b=b, c_in=c, c_out=width, k=1, l=l, s=stride),
                    _norm(norm, width, b, l_out),
                ]
            specs.append(LayerSpec(SKIP, b=b, c_in=width, l=l_out))
            c, l = width, l_out
    specs += [
        LayerSpec(AVGPOOL, b=b, c_in=512, l=7),
        LayerSpec(LINEAR, b=b, c_in=512, c_out=classes),
    ]
    return specs


def _vgg11(norm: str, classes: int, b: int):
    plan = [64, "pool", 128, "pool", 256, 256, "pool", 512, 512, "pool", 512, 512, "pool"]
    specs: list[LayerSpec] = []
    c, l = 3, 32
    for item in plan:
        if item == "pool":
            specs.append(LayerSpec(AVGPOOL, b=b, c_in=c, l=l))
            l //= 2
        else:
            specs += [
                LayerSpec(CONV, b=b, c_in=c, c_out=item, k=3, l=l, p=1),
                _norm(norm, item, b, l),
            ]
            c = item
    # modified classifier head: hidden size 512
    specs += [
        LayerSpec(LINEAR, b=b, c_in=512, c_out=512),
        _norm(norm, 512, b, 1),
        LayerSpec(LINEAR, b=b, c_in=512, c_out=classes),
    ]
    return specs


def _tinymlp(norm: str, classes: int, b: int, dim: int = 8):
    return [
        LayerSpec(LINEAR, b=b, c_in=dim, c_out=32),
        _norm(norm, 32, b, 1),
        LayerSpec(LINEAR, b=b, c_in=32, c_out=64),
        _norm(norm, 64, b, 1),
        LayerSpec(LINEAR, b=b, c_in=64, c_out=classes),
    ]


def _minicnn(norm: str, classes: int, b: int, l: int = 8):
    return [
        LayerSpec(CONV, b=b, c_in=3, c_out=8, k=3, l=l, p=1),
        _norm(norm, 8, b, l),
        LayerSpec(CONV, b=b, c_in=8, c_out=8, k=3, l=l, p=1),
        _norm(norm, 8, b, l),
        LayerSpec(CONV, b=b, c_in=8, c_out=8, k=3, l=l, p=1),
        _norm(norm, 8, b, l),
        LayerSpec(SKIP, b=b, c_in=8, l=l),
        LayerSpec(CONV, b=b, c_in=8, c_out=16, k=2, l=l, s=2),
        _norm(norm, 16, b, l // 2),
        LayerSpec(AVGPOOL, b=b, c_in=16, l=l // 2),
        LayerSpec(LINEAR, b=b, c_in=16, c_out=classes),
    ]


_ARCHS = {
    "resnet20": lambda norm, classes, b: _cifar_resnet(3, norm, classes, b),
    "resnet54": lambda norm, classes, b: _cifar_resnet(8, norm, classes, b),
    "vgg11": _vgg11,
    "resnet18": _resnet18,
    "tinymlp": _tinymlp,
    "minicnn": _minicnn,
}

ARCH_NAMES = tuple(sorted(_ARCHS))


def arch_spec(
    name: str, norm: str = "range_evonorm", classes: int = 10, batch: int = 1
) -> list[LayerSpec]:
    if name not in _ARCHS:
        raise ValueError(f"unknown architecture {name!r}, expected one of {ARCH_NAMES}")
    if norm not in NORM_KINDS:
        raise ValueError(f"unknown norm {norm!r}, expected one of {sorted(NORM_KINDS)}")
    return _ARCHS[name](norm, classes, batch)


@dataclass(frozen=True)
class EfficiencyReport:
    arch: str
    norm: str
    batch: int
    train_energy_fp_mj: float
    train_energy_lp_mj: float
    infer_energy_fp_mj: float
    infer_energy_lp_mj: float
    train_memory_fp_bytes: int
    train_memory_lp_bytes: int
    infer_memory_fp_bytes: int
    infer_memory_lp_bytes: int

    @property
    def train_energy_efficiency(self) -> float:
        return self.train_energy_fp_mj / self.train_energy_lp_mj

    @property
    def infer_energy_efficiency(self) -> float:
        return self.infer_energy_fp_mj / self.infer_energy_lp_mj

    @property
    def train_memory_efficiency(self) -> float:
        return self.train_memory_fp_bytes / self.train_memory_lp_bytes

    @property
    def infer_memory_efficiency(self) -> float:
        return self.infer_memory_fp_bytes / self.infer_memory_lp_bytes


def efficiency_report(
    arch: str,
    norm: str = "range_evonorm",
    batch: int = 32,
    classes: int = 10,
    em: EnergyModel = DEFAULT_ENERGY,
    algorithm: str = "choco",
) -> EfficiencyReport:
    specs = arch_spec(arch, norm=norm, classes=classes, batch=batch)
    lp_train = with_quantization_layers(specs, TRAINING)
    lp_infer = with_quantization_layers(specs, INFERENCE)
    return EfficiencyReport(
        arch=arch,
        norm=norm,
        batch=batch,
        train_energy_fp_mj=energy_mj(network_counts(specs, TRAINING), FP32, em),
        train_energy_lp_mj=energy_mj(network_counts(lp_train, TRAINING), INT8, em),
        infer_energy_fp_mj=energy_mj(network_counts(specs, INFERENCE), FP32, em),
        infer_energy_lp_mj=energy_mj(network_counts(lp_infer, INFERENCE), INT8, em),
        train_memory_fp_bytes=memory_bytes(specs, TRAINING, FP32, algorithm),
        train_memory_lp_bytes=memory_bytes(lp_train, TRAINING, INT8, algorithm),
        infer_memory_fp_bytes=memory_bytes(specs, INFERENCE, FP32, algorithm),
        infer_memory_lp_bytes=memory_bytes(lp_infer, INFERENCE, INT8, algorithm),
    )


def cost_report_csv(
    arch: str,
    norm: str = "range_evonorm",
    batch: int = 32,
    classes: int = 10,
    em: EnergyModel = DEFAULT_ENERGY,
) -> str:
    """Per-layer CSV plus a summary block with the efficiency ratios."""
    specs = arch_spec(arch, norm=norm, classes=classes, batch=batch)
    lines = ["layer,kind,adds,mults,energy_mj_fp,energy_mj_lp"]
    for idx, spec in enumerate(specs):
        counts = train_counts(spec)
        lines.append(
            f"{idx},{spec.kind},{counts.adds},{counts.mults},"
            f"{energy_mj(counts, FP32, em):.6f},{energy_mj(counts, INT8, em):.6f}"
        )
    rep = efficiency_report(arch, norm=norm, batch=batch, classes=classes, em=em)
    mib = 1024 * 1024
    lines += [
        "",
        f"# arch={arch} norm={norm} batch={batch} params={param_count(specs)}",
        "# memory accounting: training stores fp32 weights/gradients/momentum plus",
        "# one model-sized algorithm buffer; activations at the compute width",
        f"summary,train_energy_efficiency,{rep.train_energy_efficiency:.2f}",
        f"summary,infer_energy_efficiency,{rep.infer_energy_efficiency:.2f}",
        f"summary,train_memory_efficiency,{rep.train_memory_efficiency:.2f}",
        f"summary,infer_memory_efficiency,{rep.infer_memory_efficiency:.2f}",
        f"summary,train_memory_fp_mib,{rep.train_memory_fp_bytes / mib:.2f}",
        f"summary,train_memory_lp_mib,{rep.train_memory_lp_bytes / mib:.2f}",
        f"summary,infer_memory_fp_mib,{rep.infer_memory_fp_bytes / mib:.2f}",
        f"summary,infer_memory_lp_mib,{rep.infer_memory_lp_bytes / mib:.2f}",
        f"summary,train_energy_fp_mj,{rep.train_energy_fp_mj:.2f}",
        f"summary,train_energy_lp_mj,{rep.train_energy_lp_mj:.2f}",
        f"summary,infer_energy_fp_mj,{rep.infer_energy_fp_mj:.2f}",
        f"summary,infer_energy_lp_mj,{rep.infer_energy_lp_mj:.2f}",
    ]
    return "\n".join(lines) + "\n"
