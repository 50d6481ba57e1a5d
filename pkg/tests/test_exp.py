import csv
import json

import numpy as np
import pytest

from fedes import nn
from fedes.data import Dataset, batches
from fedes.detrand import ConfigurationError
from fedes.escore import ClientWeights, RoundConfig
from fedes.exp import (
    CSV_HEADER,
    ExperimentConfig,
    client_gradient,
    es_train_local,
    prepare,
    quadratic_study,
    read_params,
    run_experiment,
    run_fedgd_round,
    uplink_scalars_per_client,
    write_params,
)


def synthetic(n=120, width=6, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, width), dtype=np.float32), rng.integers(0, classes, n).astype(np.uint8))


def small_cfg(**kw):
    base = dict(widths=(6, 5, 3), clients=2, n_b=16, rounds=3, eval_every=2, alpha=0.05)
    base.update(kw)
    return ExperimentConfig(**base)


def test_zero_rounds_writes_header_and_init(tmp_path):
    cfg = small_cfg(rounds=0)
    train = synthetic()
    result = run_experiment(cfg, train, synthetic(30, seed=1), out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines == [",".join(CSV_HEADER)]
    np.testing.assert_array_equal(read_params(tmp_path / "params.bin"), prepare(cfg, train).w0)
    assert result.rows == []


def test_params_file_layout(tmp_path):
    w = np.array([1.5, -2.0, 0.25], dtype=np.float32)
    path = tmp_path / "w.bin"
    write_params(path, w)
    raw = path.read_bytes()
    assert raw[:4] == b"FESW"
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:16] == (3).to_bytes(8, "little")
    assert len(raw) == 16 + 12
    np.testing.assert_array_equal(read_params(path), w)


def test_params_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        read_params(path)


def test_csv_rows_and_eval_cadence(tmp_path):
    cfg = small_cfg(rounds=5, eval_every=2)
    result = run_experiment(cfg, synthetic(), synthetic(30, seed=1), out_dir=tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["t"]) for r in rows] == [1, 2, 3, 4, 5]
    assert [bool(r["test_acc"]) for r in rows] == [False, True, False, True, True]
    assert all(int(r["uplink"]) == 4 for r in rows)  # 60 samples per client, n_b=16
    assert all(int(r["downlink"]) == nn.param_count(cfg.spec()) for r in rows)
    assert result.final_accuracy == pytest.approx(float(rows[-1]["test_acc"]))


def test_same_config_same_csv_except_wall(tmp_path):
    cfg = small_cfg(rounds=4)

    def run(d):
        run_experiment(cfg, synthetic(), synthetic(30, seed=1), out_dir=d)
        with open(d / "metrics.csv") as fh:
            return [r[:-1] for r in csv.reader(fh)], (d / "params.bin").read_bytes()

    assert run(tmp_path / "a") == run(tmp_path / "b")


def test_fedes_single_client_equals_local_training():
    cfg = small_cfg(clients=1, rounds=4)
    train = synthetic()
    work = prepare(cfg, train)
    fed = run_experiment(cfg, train, out_dir=False).params
    local = es_train_local(work.w0, work.client_batches, work.weights, cfg.round_config(),
                           cfg.seed(), cfg.rounds, nn.mlp_objective(work.spec))
    assert fed.tobytes() == local.tobytes()


def test_tcp_run_matches_inproc():
    train = synthetic()
    a = run_experiment(small_cfg(), train, out_dir=False)
    b = run_experiment(small_cfg(transport="tcp"), train, out_dir=False)
    assert a.params.tobytes() == b.params.tobytes()
    # bytes on the wire agree with the counted uplink
    for frames in b.uplink_frames:
        assert [(length - 16) // 8 for _, length in frames[1:]] == [4] * 3


def test_fedgd_pooled_equals_equal_shards():
    spec = nn.MlpSpec((6, 5, 3))
    train = synthetic(200)
    w = nn.init_params(spec, ExperimentConfig().seed())
    cfg = RoundConfig(alpha=0.1, n_b=200)

    def grad_fn(params, batch):
        return nn.backward(spec, params, batch)

    pooled = [batches(train, np.arange(200), 200)]
    shards = [batches(train, np.arange(20 * k, 20 * (k + 1)), 200) for k in range(10)]
    one = run_fedgd_round(w, pooled, cfg, ClientWeights.from_sizes([200], 200), grad_fn)
    ten = run_fedgd_round(w, shards, cfg, ClientWeights.from_sizes([20] * 10, 200), grad_fn)
    np.testing.assert_allclose(one, ten, rtol=0, atol=1e-6)


def test_fedgd_single_sample_exact_step():
    w = np.array([1.0, -2.0], dtype=np.float32)

    def grad_fn(params, batch):
        return params - batch  # gradient of 0.5 * ||params - x||^2

    target = np.array([0.5, 0.5], dtype=np.float32)
    out = run_fedgd_round(w, [[target]], RoundConfig(alpha=0.5), ClientWeights(np.array([1.0]), [1]), grad_fn)
    np.testing.assert_array_equal(out, w - 0.5 * (w - target))


def test_client_gradient_weights_short_batch():
    grads = {0: np.ones(2, np.float32), 1: 3 * np.ones(2, np.float32)}
    b0, b1 = np.zeros(3), np.zeros(1)
    g = client_gradient(lambda w, b: grads[0] if len(b) == 3 else grads[1], np.zeros(2), [b0, b1])
    np.testing.assert_allclose(g, [1.5, 1.5])


def test_accounting_full_mnist_scale():
    cfg = ExperimentConfig()
    sizes = [6000] * 10
    for n_b, expected in ((64, 94), (256, 24), (1024, 6)):
        cfg.n_b = n_b
        assert uplink_scalars_per_client(cfg, sizes) == [expected] * 10
    cfg.n_b = 64
    cfg.algo = "fedgd"
    assert uplink_scalars_per_client(cfg, sizes) == [1_863_690] * 10


def test_config_validation():
    with pytest.raises(ConfigurationError, match="beta"):
        small_cfg(beta=0.0).validate()
    with pytest.raises(ConfigurationError, match="in-process"):
        small_cfg(algo="fedgd", transport="tcp").validate()
    with pytest.raises(ConfigurationError, match="unknown config keys"):
        ExperimentConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigurationError):
        small_cfg(common_seed="zz").validate()


def test_config_relative_paths(tmp_path):
    (tmp_path / "cfg").mkdir()
    path = tmp_path / "cfg" / "c.json"
    path.write_text(json.dumps({"train_images": "../d/img.gz", "rounds": 2}))
    cfg = ExperimentConfig.load(path)
    assert cfg.train_images == str(tmp_path / "d" / "img.gz")
    assert cfg.rounds == 2


def test_quadratic_fixed_point():
    r = quadratic_study(d=10, T=50, repeats=2, noise=0.0, start_at_optimum=True)
    assert np.all(r.mean_loss == 0.0)


def test_quadratic_more_directions_lower_loss():
    few = quadratic_study(d=10, T=200, repeats=10, directions=16)
    many = quadratic_study(d=10, T=200, repeats=10, directions=32)
    # paired seeds: direction j of the small run is direction j of the large one
    assert np.mean(many.mean_loss[20:] <= few.mean_loss[20:]) >= 0.95
    assert many.mean_loss[20:].mean() < few.mean_loss[20:].mean()


def test_quadratic_rejects_large_d():
    with pytest.raises(ConfigurationError):
        quadratic_study(d=101, T=1)


def test_desk_config_loads(mnist5k_dir):
    from conftest import DESK_CONFIG
    cfg = ExperimentConfig.load(DESK_CONFIG).validate()
    assert cfg.train_images.endswith("train-images-idx3-ubyte.gz")
