import numpy as np
import pytest

from robustlab import autodiff as ad
from robustlab import checkpoint
from robustlab.errors import ConfigurationError, ContractViolation
from robustlab.models import ModelSpec, build, forward

from gradcheck import numeric_grad, rel_error

SMALL = ModelSpec(depth=10, width_multiplier=1, num_classes=10,
                  input_shape=(1, 8, 8))


def expected_param_count(spec):
    # independent enumeration of layer shapes
    n = (spec.depth - 4) // 6
    widths = [16 * spec.width_multiplier, 32 * spec.width_multiplier,
              64 * spec.width_multiplier]
    total = spec.input_shape[0] * 16 * 9  # init conv
    cin = 16
    for g, w in enumerate(widths):
        for b in range(n):
            stride = (2 if g > 0 else 1) if b == 0 else 1
            total += 2 * cin            # bn1 gamma+beta
            total += cin * w * 9        # conv1
            total += 2 * w              # bn2
            total += w * w * 9          # conv2
            if stride != 1 or cin != w:
                total += cin * w        # 1x1 shortcut
            cin = w
    total += 2 * cin                    # final bn
    total += cin * spec.num_classes + spec.num_classes  # fc
    return total


def test_build_deterministic():
    a = build(SMALL, seed=7)
    b = build(SMALL, seed=7)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name].data, b[name].data)
    c = build(SMALL, seed=8)
    assert not np.array_equal(a["init_conv.w"].data, c["init_conv.w"].data)


def test_deeper_means_more_parameters():
    p10 = build(ModelSpec(10, 2, input_shape=(3, 32, 32)))
    p16 = build(ModelSpec(16, 2, input_shape=(3, 32, 32)))
    assert p16.n_parameters() > p10.n_parameters()


@pytest.mark.parametrize("depth,width,in_shape", [
    (10, 1, (1, 8, 8)),
    (10, 2, (3, 32, 32)),
    (16, 1, (3, 32, 32)),
])
def test_param_count_matches_enumeration(depth, width, in_shape):
    spec = ModelSpec(depth, width, input_shape=in_shape)
    assert build(spec).n_parameters() == expected_param_count(spec)


def test_invalid_depth_rejected():
    with pytest.raises(ConfigurationError):
        ModelSpec(depth=12, width_multiplier=1)


def test_eval_forward_is_pure():
    params = build(SMALL, seed=0)
    x = np.random.default_rng(0).random((4, 1, 8, 8)).astype(np.float32)
    a = forward(params, ad.tensor(x), mode="eval").data
    b = forward(params, ad.tensor(x), mode="eval").data
    assert np.array_equal(a, b)


def test_eval_batch_independence():
    params = build(SMALL, seed=1)
    x = np.random.default_rng(1).random((6, 1, 8, 8)).astype(np.float32)
    batched = forward(params, ad.tensor(x), mode="eval").data
    singles = np.concatenate([
        forward(params, ad.tensor(x[i:i + 1]), mode="eval").data
        for i in range(6)])
    assert np.allclose(batched, singles, atol=1e-5)


def test_eval_batch_order_invariance():
    params = build(SMALL, seed=2)
    rng = np.random.default_rng(2)
    x = rng.random((8, 1, 8, 8)).astype(np.float32)
    perm = rng.permutation(8)
    out = forward(params, ad.tensor(x), mode="eval").data
    out_perm = forward(params, ad.tensor(x[perm]), mode="eval").data
    assert np.allclose(out[perm], out_perm, atol=1e-6)


def test_fresh_model_is_chance_level():
    params = build(SMALL, seed=3)
    rng = np.random.default_rng(3)
    x = rng.random((1000, 1, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 10, size=1000)
    logits = forward(params, ad.tensor(x), mode="eval").data
    assert np.std(logits.mean(axis=0)) < 2.0  # no class wildly preferred
    acc = float((logits.argmax(axis=1) == labels).mean())
    # Binomial(1000, 0.1): 3 sigma is about 0.0285
    assert abs(acc - 0.1) < 0.05


def test_train_mode_shape_mismatch():
    params = build(SMALL, seed=0)
    with pytest.raises(ContractViolation):
        forward(params, ad.tensor(np.zeros((2, 3, 8, 8), dtype=np.float32)))


def test_input_gradient_matches_finite_differences():
    # swish keeps the network C1 so central differences are trustworthy;
    # relu kink crossings are exercised per-op instead
    spec = ModelSpec(depth=10, width_multiplier=1, activation="swish",
                     num_classes=10, input_shape=(1, 8, 8))
    with ad.dtype_scope(np.float64):
        params = build(spec, seed=5)
        rng = np.random.default_rng(5)
        x0 = rng.random((2, 1, 8, 8))

        def mean_logit(xv):
            return forward(params.frozen(), ad.tensor(xv), mode="eval").mean().item()

        x = ad.tensor(x0, requires_grad=True)
        forward(params.frozen(), x, mode="eval").mean().backward()
        num = numeric_grad(mean_logit, x0)
        assert rel_error(x.grad, num) < 1e-5


def test_frozen_view_shares_storage():
    params = build(SMALL, seed=0)
    frozen = params.frozen()
    params["fc.b"].data += 1.0
    assert np.array_equal(frozen["fc.b"].data, params["fc.b"].data)
    assert not any(t.requires_grad for t in frozen.entries.values())


def test_checkpoint_roundtrip(tmp_path):
    params = build(SMALL, seed=11)
    params["fc.b"].data += 0.5
    path = tmp_path / "model.ckpt"
    checkpoint.save_params(path, params, extra={"note": "unit"})
    loaded, manifest = checkpoint.load_params(path)
    assert manifest["seed"] == 11
    assert manifest["extra"]["note"] == "unit"
    assert loaded.names() == params.names()
    for name in params.names():
        assert np.array_equal(loaded[name].data, params[name].data)


def test_checkpoint_shape_mismatch_diagnostic(tmp_path):
    params = build(SMALL, seed=0)
    path = tmp_path / "model.ckpt"
    checkpoint.save_params(path, params)
    arrays, manifest = checkpoint.load(path)
    arrays["fc.w"] = arrays["fc.w"][:, :5]
    other = build(SMALL, seed=0)
    with pytest.raises(ContractViolation, match="fc.w"):
        other.load_arrays(arrays)
