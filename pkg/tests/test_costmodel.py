import pytest

from declow.costmodel import (
    FP32,
    INFERENCE,
    INT8,
    TRAINING,
    EnergyModel,
    LayerSpec,
    OpCounts,
    arch_spec,
    cost_report_csv,
    efficiency_report,
    energy_mj,
    infer_counts,
    memory_bytes,
    network_counts,
    param_count,
    train_counts,
    with_quantization_layers,
)
from declow.layers import build_model

MIB = 1024 * 1024


# --- table formulas, pinned at hand-evaluated points ---


def test_conv_unit_case():
    spec = LayerSpec("conv", b=1, c_in=1, c_out=1, k=1, l=1)
    assert train_counts(spec) == OpCounts(3, 3, TRAINING)
    assert infer_counts(spec) == OpCounts(1, 1, INFERENCE)


def test_conv_training_factor_three():
    spec = LayerSpec("conv", b=2, c_in=3, c_out=4, k=3, l=5, p=1)
    tr, inf = train_counts(spec), infer_counts(spec)
    assert tr.adds == 3 * inf.adds and tr.mults == 3 * inf.mults
    assert inf.adds == 2 * 4 * 3 * 9 * 25  # out side stays 5 with p=1


def test_conv_strided_output_side():
    spec = LayerSpec("conv", b=1, c_in=16, c_out=32, k=3, l=32, p=1, s=2)
    assert spec.out_side() == 16  # floor semantics, the CIFAR downsample case


def test_linear_counts():
    spec = LayerSpec("linear", b=2, c_in=3, c_out=4)
    assert train_counts(spec) == OpCounts(72, 72, TRAINING)
    assert infer_counts(spec) == OpCounts(24, 24, INFERENCE)


def test_quant_act_counts():
    spec = LayerSpec("quant_act", b=2, c_in=3, l=4)
    assert train_counts(spec) == OpCounts(192, 384, TRAINING)
    assert infer_counts(spec) == OpCounts(0, 0, INFERENCE)


def test_quant_weight_counts():
    spec = LayerSpec("quant_weight", c_in=3, c_out=4, k=3)
    assert train_counts(spec) == OpCounts(216, 432, TRAINING)
    assert infer_counts(spec) == OpCounts(216, 432, INFERENCE)


def test_range_bn_relu_counts():
    spec = LayerSpec("range_bn_relu", b=2, c_in=3, l=2)
    assert train_counts(spec) == OpCounts(216, 165, TRAINING)
    unit = LayerSpec("range_bn_relu", b=1, c_in=1, l=1)
    assert infer_counts(unit) == OpCounts(3, 5, INFERENCE)


def test_range_evonorm_counts():
    spec = LayerSpec("range_evonorm", b=32, c_in=16, l=32)
    got = train_counts(spec)
    assert got.adds == 3_145_728
    assert got.mults == 5_242_960
    small = LayerSpec("range_evonorm", b=2, c_in=3, l=2)
    assert train_counts(small) == OpCounts(144, 255, TRAINING)
    assert infer_counts(small) == OpCounts(48, 102, INFERENCE)


def test_skip_and_avgpool_counts():
    skip = LayerSpec("skip", b=2, c_in=3, l=2)
    assert train_counts(skip) == OpCounts(48, 0, TRAINING)
    assert infer_counts(skip) == OpCounts(48, 0, INFERENCE)
    pool = LayerSpec("avgpool", b=2, c_in=3, l=2)
    assert train_counts(pool) == OpCounts(24, 12, TRAINING)
    assert infer_counts(pool) == OpCounts(24, 6, INFERENCE)


def test_unknown_kind_errors():
    with pytest.raises(ValueError):
        train_counts(LayerSpec("dropout", b=1, c_in=1))
    with pytest.raises(ValueError):
        infer_counts(LayerSpec("dropout", b=1, c_in=1))


def test_network_counts_additive():
    specs = arch_spec("tinymlp", batch=4)
    total = network_counts(specs, TRAINING)
    by_layer = [train_counts(s) for s in specs]
    assert total.adds == sum(c.adds for c in by_layer)
    assert total.mults == sum(c.mults for c in by_layer)


# --- architectures ---


@pytest.mark.parametrize(
    "arch,target",
    [("resnet20", 0.27e6), ("resnet54", 0.76e6), ("vgg11", 9.49e6), ("resnet18", 11.2e6)],
)
def test_arch_param_counts(arch, target):
    n = param_count(arch_spec(arch))
    assert abs(n - target) / target <= 0.02


def test_unknown_arch():
    with pytest.raises(ValueError):
        arch_spec("lenet")


@pytest.mark.parametrize(
    "arch,shape", [("tinymlp", (8,)), ("minicnn", (3, 8, 8))]
)
@pytest.mark.parametrize("norm", ["range_bn", "range_evonorm"])
def test_desk_arch_specs_match_trainable_models(arch, shape, norm):
    model = build_model(arch, norm, 10, shape, seed=0)
    assert param_count(arch_spec(arch, norm=norm)) == model.param_count


def test_quantization_layer_insertion():
    specs = arch_spec("tinymlp")
    lp_train = with_quantization_layers(specs, TRAINING)
    lp_infer = with_quantization_layers(specs, INFERENCE)
    n_weighted = sum(1 for s in specs if s.kind in ("conv", "linear"))
    assert len(lp_train) == len(specs) + 2 * n_weighted
    assert len(lp_infer) == len(specs) + n_weighted
    assert param_count(lp_train) == param_count(specs)


# --- energy ---


def test_energy_ratio_on_balanced_counts():
    counts = OpCounts(1000, 1000, TRAINING)
    ratio = energy_mj(counts, FP32) / energy_mj(counts, INT8)
    assert ratio == pytest.approx(20.0, abs=1e-9)


def test_energy_zero_counts():
    assert energy_mj(OpCounts(0, 0, TRAINING), FP32) == 0.0


def test_energy_model_validation():
    with pytest.raises(ValueError):
        EnergyModel(fp32_add=0.0)
    with pytest.raises(ValueError):
        EnergyModel(int8_mul=5.0)


def test_resnet20_efficiency_band():
    rep = efficiency_report("resnet20", norm="range_evonorm", batch=32)
    assert 19.6 <= rep.train_energy_efficiency <= 20.1
    assert 19.6 <= rep.infer_energy_efficiency <= 20.1


# --- memory ---


@pytest.mark.parametrize("arch", ["resnet20", "resnet54", "vgg11", "resnet18"])
def test_inference_memory_ratio_exactly_four(arch):
    rep = efficiency_report(arch, batch=32)
    assert rep.infer_memory_efficiency == 4.0


def test_resnet20_training_memory_matches_paper_row():
    rep = efficiency_report("resnet20", norm="range_evonorm", batch=32)
    fp_mib = rep.train_memory_fp_bytes / MIB
    lp_mib = rep.train_memory_lp_bytes / MIB
    assert fp_mib == pytest.approx(124.60, rel=0.15)
    assert lp_mib == pytest.approx(35.43, rel=0.15)
    assert rep.train_memory_efficiency == pytest.approx(3.52, rel=0.15)


def test_memory_zero_layers():
    assert memory_bytes([], TRAINING, FP32) == 0
    assert memory_bytes([], INFERENCE, INT8) == 0


def test_choco_buffer_counted():
    specs = arch_spec("tinymlp", batch=8)
    plain = memory_bytes(specs, TRAINING, FP32, algorithm="dpsgd")
    with_proxy = memory_bytes(specs, TRAINING, FP32, algorithm="choco")
    assert with_proxy - plain == 4 * param_count(specs)


# --- report ---


def test_cost_report_csv_shape():
    text = cost_report_csv("tinymlp", batch=1)
    lines = text.splitlines()
    assert lines[0] == "layer,kind,adds,mults,energy_mj_fp,energy_mj_lp"
    assert any(line.startswith("summary,train_energy_efficiency") for line in lines)
    assert any(line.startswith("summary,infer_memory_efficiency,4.00") for line in lines)


def test_cost_report_tinymlp_hand_summed():
    # spreadsheet check at batch 1: three linears plus two norms
    text = cost_report_csv("tinymlp", batch=1)
    rows = [l.split(",") for l in text.splitlines()[1:] if l and not l.startswith(("summary", "#"))]
    adds = sum(int(r[2]) for r in rows)
    linear = 3 * (8 * 32 + 32 * 64 + 64 * 10)
    norms = 6 * 32 + 6 * 64
    assert adds == linear + norms
