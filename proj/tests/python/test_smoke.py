import numpy as np
import pytest

import xmgan

TINY = {
    "image_size": 8,
    "depth": 2,
    "width": 8,
    "heads": 2,
    "noise_dim": 4,
    "batch_size": 4,
    "eval_samples": 8,
    "steps": 2,
    "eval_every": 2,
    "checkpoint_every": 2,
    "write_samples": "false",
}


def test_dataset_shape_range_and_determinism():
    a = xmgan.make_dataset(seed=3, image_size=8, per_class=4)
    b = xmgan.make_dataset(seed=3, image_size=8, per_class=4)
    c = xmgan.make_dataset(seed=4, image_size=8, per_class=4)
    assert a.shape == (8, 4, 3, 8, 8)
    assert a.min() >= -1.0 and a.max() <= 1.0
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert sorted(xmgan.seen_classes() + xmgan.unseen_classes()) == list(range(8))


def test_metrics_sanity():
    data = xmgan.make_dataset(seed=0, image_size=16, per_class=8)
    real = data[1]
    assert xmgan.fid_lite(real, real) == pytest.approx(0.0, abs=1e-6)
    assert xmgan.fid_lite(real, data[2]) > 0.0
    assert xmgan.lpips_lite(np.repeat(real[:1], 4, axis=0)) == pytest.approx(0.0, abs=1e-12)
    assert xmgan.lpips_lite(real) > 0.0
    with pytest.raises(ValueError):
        xmgan.lpips_lite(real[0])


def test_config_errors_are_value_errors():
    assert "steps=2000" in xmgan.default_config()
    with pytest.raises(xmgan.ConfigError):
        xmgan.default_config({"no_such_key": 1})
    with pytest.raises(ValueError):
        xmgan.default_config({"ablation": "nonsense"})


def test_train_and_generate(tmp_path):
    run = tmp_path / "tiny"
    rows = xmgan.train(str(run), TINY)
    assert [r["step"] for r in rows] == [0, 2]
    assert all(np.isfinite(r["fid_lite"]) for r in rows)
    samples = xmgan.generate(str(run), 1, num=5, seed=7)
    assert samples.shape == (5, 3, 8, 8)
    assert np.all(np.isfinite(samples))
    again = xmgan.generate(str(run), 1, num=5, seed=7)
    assert np.array_equal(samples, again)
    with pytest.raises(ValueError):
        xmgan.generate(str(run), 1, alphas=[1.0], num=2)


def test_cli_usage_and_gradcheck():
    code, out, err = xmgan.cli_captured(["no-such-command"])
    assert code == 2
    code, out, _ = xmgan.cli_captured(["gradcheck", "--seeds", "1"])
    assert code == 0
    assert "max_rel_error=" in out
    errors = xmgan.gradcheck(seeds=1)
    assert "conv2d" in errors
    assert max(errors.values()) <= 1e-4
