import numpy as np
import pytest

from bnrobust.analysis import param_accounting
from bnrobust.attacks import predict
from bnrobust.data import batch_iter
from bnrobust.nn import (
    SELECTORS,
    BatchNorm2d,
    Conv2d,
    Linear,
    Module,
    ResNetConfig,
    bn_layers,
    build_resnet,
    enumerate_params,
    reset_bn_statistics,
)
from bnrobust.tensor import Tensor, no_grad
from conftest import micro_net


def count_by_hand(n, widths, in_channels, num_classes):
    """Layer arithmetic for the pre-activation ResNet with parameter-free shortcuts."""
    total = in_channels * widths[0] * 9  # stem conv, no bias
    bn = 0
    prev = widths[0]
    for w in widths:
        for b in range(n):
            cin = prev if b == 0 else w
            total += cin * w * 9 + w * w * 9  # two 3x3 convs
            bn += 2 * cin + 2 * w  # gamma+beta of bn1 (cin) and bn2 (w)
        prev = w
    bn += 2 * widths[-1]
    total += widths[-1] * num_classes + num_classes
    return total + bn, bn


def test_resnet20_parameter_count_by_enumeration():
    model = build_resnet(ResNetConfig(depth_n=3, widths=[16, 32, 64], num_classes=10))
    total, bn = count_by_hand(3, [16, 32, 64], 3, 10)
    assert (total, bn) == (269_722, 1_376)
    acc = param_accounting(model)
    assert acc["total"] == total
    assert acc["per_selector"]["bn_params"] == bn
    assert sum(t.data.size for _, t in model.named_parameters()) == total
    assert model.cfg.depth == 20


@pytest.mark.parametrize("n,widths", [(1, [4, 8, 16]), (1, [8, 16, 32]), (2, [3, 5])])
def test_micro_counts_match_hand_arithmetic(n, widths):
    model = build_resnet(depth_n=n, widths=widths, num_classes=7, in_channels=1)
    total, bn = count_by_hand(n, widths, 1, 7)
    acc = param_accounting(model)
    assert acc["total"] == total and acc["per_selector"]["bn_params"] == bn


def test_micro_net_forward_shape():
    out = micro_net()(Tensor(np.zeros((1, 3, 8, 8))))
    assert out.shape == (1, 10)


def test_odd_spatial_size_forward():
    out = micro_net(in_channels=1)(Tensor(np.zeros((2, 1, 7, 7))))
    assert out.shape == (2, 10)


@pytest.mark.parametrize(
    "kw", [{"depth_n": 0}, {"widths": []}, {"widths": [4, 0]}, {"num_classes": 1}, {"in_channels": 0}]
)
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        build_resnet(**kw)


def test_init_values():
    model = micro_net()
    for _, bn in bn_layers(model):
        np.testing.assert_array_equal(bn.gamma.data, 1.0)
        np.testing.assert_array_equal(bn.beta.data, 0.0)
        np.testing.assert_array_equal(bn.running_mean.data, 0.0)
        np.testing.assert_array_equal(bn.running_var.data, 1.0)
    w = build_resnet(widths=[64, 64], depth_n=1).conv1.weight.data
    assert w.std() == pytest.approx(np.sqrt(2.0 / 27), rel=0.05)


def test_bn_param_and_stat_counts_agree():
    model = build_resnet()
    sizes = {n: t.data.size for n, t in model.named_arrays()}
    params = enumerate_params(model, "bn_params")
    stats = enumerate_params(model, "bn_stats")
    assert len(params) == len(stats)
    assert sum(sizes[n] for n in params) == sum(sizes[n] for n in stats)


class NoBN(Module):
    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(0)
        self.conv1 = self.add_child("conv1", Conv2d(1, 2, rng=rng))
        self.fc = self.add_child("fc", Linear(2, 2, rng=rng))


def test_model_without_bn():
    model = NoBN()
    assert enumerate_params(model, "bn_params") == []
    assert enumerate_params(model, "bn_stats") == []
    assert param_accounting(model)["bn_fraction"] == 0.0


def test_selector_families_cover_every_array_once():
    model = micro_net()
    every = [n for n, _ in model.named_arrays()]
    assert enumerate_params(model, "all") == every
    assert len(set(every)) == len(every)
    bn_p = enumerate_params(model, "bn_params")
    bn_s = enumerate_params(model, "bn_stats")
    rest = [n for n, _ in model.named_parameters() if n not in bn_p]
    # BN family: params, stats and the remaining weights partition the store
    assert sorted(bn_p + bn_s + rest) == sorted(every)
    logit, conv1 = enumerate_params(model, "logit"), enumerate_params(model, "conv1")
    assert set(logit) == {"fc.weight", "fc.bias"} and conv1 == ["conv1.weight"]
    assert set(logit).isdisjoint(conv1) and set(logit + conv1) <= set(rest)
    with pytest.raises(ValueError):
        enumerate_params(model, "everything")
    assert set(SELECTORS) == {"all", "bn_params", "bn_stats", "logit", "conv1"}


def test_eval_forward_is_deterministic():
    model = micro_net().eval()
    x = np.random.default_rng(0).random((3, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(predict(model, x), predict(model, x))


def test_train_forward_changes_only_running_stats():
    model = micro_net()
    before = model.state_dict()
    model.train()
    with no_grad():
        model(Tensor(np.random.default_rng(0).random((4, 3, 8, 8))))
    after = model.state_dict()
    stats = set(enumerate_params(model, "bn_stats"))
    for name in before:
        if name in stats:
            assert not np.array_equal(before[name], after[name]), name
        else:
            np.testing.assert_array_equal(before[name], after[name])


def test_preactivation_ordering():
    model = micro_net()
    calls = []
    for name, mod in model.named_modules():
        if ".block" in name and name.count(".") == 2:
            mod.register_forward_hook(lambda m, out, name=name: calls.append(name.rsplit(".", 1)[1]))
    model(Tensor(np.zeros((2, 3, 8, 8))))
    assert calls[:6] == ["bn1", "relu1", "conv1", "bn2", "relu2", "conv2"]
    assert len(calls) == 6 * len(model.blocks)
    assert calls == ["bn1", "relu1", "conv1", "bn2", "relu2", "conv2"] * len(model.blocks)


def test_reset_gives_identity_bn():
    bn = BatchNorm2d(3)
    bn.running_mean.data[:] = [1.0, 2.0, 3.0]
    bn.running_var.data[:] = 4.0
    bn.reset_statistics()
    bn.eval()
    x = np.random.default_rng(0).normal(size=(2, 3, 2, 2)).astype(np.float32)
    np.testing.assert_allclose(bn(Tensor(x)).data, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_reset_on_fresh_model_is_noop():
    model = micro_net()
    before = model.state_dict()
    reset_bn_statistics(model)
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(arr, before[name])


def test_reset_then_readapt_recovers_accuracy(trained_blob_net, blobs):
    train_split, test_split = blobs
    model = build_resnet(trained_blob_net.cfg)
    model.load_state_dict(trained_blob_net.state_dict())
    model.eval()
    acc = lambda: 100.0 * (predict(model, test_split.images).argmax(1) == test_split.labels).mean()  # noqa: E731
    before = acc()
    reset_bn_statistics(model)
    model.train()
    with no_grad():
        for epoch in range(4):
            for batch in batch_iter(train_split, 32, seed=1, epoch=epoch):
                model(Tensor(batch.images))
    model.eval()
    assert abs(acc() - before) <= 1.0


def test_state_dict_roundtrip_and_errors():
    a, b = micro_net(seed=0), micro_net(seed=1)
    b.load_state_dict(a.state_dict())
    for (na, ta), (nb, tb) in zip(a.named_arrays(), b.named_arrays()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    with pytest.raises(KeyError):
        b.load_state_dict({})
    state = a.state_dict()
    state["fc.bias"] = np.zeros(3)
    with pytest.raises(ValueError):
        b.load_state_dict(state)
