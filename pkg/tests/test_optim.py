import json

import numpy as np
import pytest

from efcp.compressors import IdentityCompressor
from efcp.errors import ConfigError, DivergenceError
from efcp.optim import (
    EFCP,
    Adam,
    IdentityPreconditioner,
    RunConfig,
    SGDMomentum,
    StepRecord,
    adam_step,
    efcp_step,
    memory_report,
    run,
    sgd_momentum_step,
)
from efcp.tasks import make_synthetic


class ZeroPreconditioner:
    def step(self, c):
        return np.zeros(3)


def test_identity_everything_is_sgd():
    opt = EFCP(IdentityPreconditioner(), IdentityCompressor(), np.float64, d=3)
    theta, g = np.array([1.0, 2.0, 3.0]), np.array([0.5, -1.0, 2.0])
    new, _ = efcp_step(opt, theta, g, lr=0.1)
    np.testing.assert_array_equal(new, theta - 0.1 * g)
    assert opt.ef_norm() == 0.0


def test_pure_weight_decay():
    opt = EFCP(ZeroPreconditioner(), IdentityCompressor(), np.float64, d=3)
    theta = np.array([1.0, -2.0, 4.0])
    for _ in range(3):
        theta, _ = efcp_step(opt, theta, np.zeros(3), lr=0.5, wd=0.2)
    np.testing.assert_allclose(theta, np.array([1.0, -2.0, 4.0]) * 0.9**3)


def test_momentum_zero_is_plain_sgd():
    theta, g = np.array([1.0, 1.0]), np.array([0.2, -0.4])
    np.testing.assert_array_equal(sgd_momentum_step(theta, g, SGDMomentum(2, 0.0), 0.5), theta - 0.5 * g)


def test_adam_first_step_closed_form():
    theta, g = np.zeros(3), np.array([1e-3, -2.0, 0.0])
    out = adam_step(theta, g, Adam(3), lr=0.1)
    np.testing.assert_allclose(out, -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def reference_trace(task, opt, lr, steps, wd=0.0):
    """Textbook loops written without the library's optimizer classes."""
    theta = np.zeros(task.d)
    v = np.zeros(task.d)
    m1, m2 = np.zeros(task.d), np.zeros(task.d)
    losses = []
    for t in range(1, steps + 1):
        losses.append(0.5 * (theta - task.theta_star) @ task.A @ (theta - task.theta_star))
        g = task.A @ (theta - task.theta_star)
        theta = theta * (1 - wd * lr)
        if opt == "sgd":
            v = 0.9 * v + g
            theta = theta - lr * v
        else:
            m1 = 0.9 * m1 + 0.1 * g
            m2 = 0.999 * m2 + 0.001 * g**2
            theta = theta - lr * (m1 / (1 - 0.9**t)) / (np.sqrt(m2 / (1 - 0.999**t)) + 1e-8)
    return np.array(losses), theta


@pytest.mark.parametrize("opt,lr", [("sgd", 1e-3), ("adam", 1e-2)])
def test_baselines_match_reference_trace(opt, lr):
    cfg = RunConfig(task="quadratic", opt=opt, lr=lr, steps=100, d=20, seed=3, wd=0.01)
    res = run(cfg)
    ref_losses, ref_theta = reference_trace(make_synthetic("quadratic", 20, seed=3), opt, lr, 100, wd=0.01)
    np.testing.assert_allclose([r.loss for r in res.records], ref_losses, rtol=1e-10)
    np.testing.assert_allclose(res.theta, ref_theta, rtol=1e-10, atol=1e-12)


def test_paired_dmfac_smfac_quadratic():
    # frozen: eta = 1e-3 (the step size of the monotonicity check), f64 values
    common = dict(task="quadratic", d=50, m=16, lam=1e-4, lr=1e-3, steps=300, seed=1, precision="f64")
    dense = run(RunConfig(opt="dmfac", **common)).final_loss
    sparse = run(RunConfig(opt="smfac", density=0.1, **common)).final_loss
    assert abs(sparse - dense) / abs(dense) <= 0.10


def test_dmfac_monotone_after_warmup():
    cfg = RunConfig(task="quadratic", opt="dmfac", d=50, m=16, lam=1.0, lr=1e-3, steps=300, seed=1)
    res = run(cfg)
    losses = np.array([r.loss for r in res.records] + [res.final_loss])
    assert np.all(np.diff(losses[cfg.m + 1 :]) <= 0)


def test_density_one_matches_dense_trajectory():
    common = dict(task="quadratic", d=30, m=8, lam=1e-2, lr=1e-2, steps=60, seed=2, precision="f64")
    dense = run(RunConfig(opt="dmfac", **common))
    sparse = run(RunConfig(opt="smfac", density=1.0, **common))
    for a, b in zip(dense.records, sparse.records):
        assert abs(a.loss - b.loss) <= 1e-6 * abs(a.loss)
        assert b.ef_norm == 0.0


@pytest.mark.parametrize("opt", ["sgd", "adam", "dmfac", "smfac", "lrmfac", "dggt", "sggt"])
def test_every_optimizer_runs_deterministically(opt):
    task = "mlp" if opt == "lrmfac" else "quadratic"
    cfg = RunConfig(task=task, opt=opt, steps=15, d=12, n=100, m=4, density=0.2, block=8)
    a, b = run(cfg), run(cfg)
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]
    assert len(a.records) == 15
    assert all(np.isfinite([r.loss, r.grad_norm, r.upd_norm, r.ef_norm]).all() for r in a.records)


def test_linear_schedule_and_clip():
    cfg = RunConfig(opt="sgd", momentum=0.0, lr=0.1, schedule="linear", steps=4, d=5, clip=0.5)
    res = run(cfg)
    for t, rec in enumerate(res.records):
        assert rec.upd_norm <= 0.1 * (1 - t / 4) * 0.5 + 1e-15


def test_record_json_key_order():
    line = StepRecord(0, 1.0, 2.0, 3.0, 4.0, 0.0).to_json()
    assert list(json.loads(line)) == ["t", "loss", "grad_norm", "upd_norm", "ef_norm", "ms"]
    assert json.loads(StepRecord(1, float("nan"), 1.0, 1.0, 1.0, 0.0).to_json())["loss"] is None


def test_timing_off_by_default():
    assert all(r.ms == 0.0 for r in run(RunConfig(steps=3, opt="sgd")).records)
    assert any(r.ms > 0.0 for r in run(RunConfig(steps=3, opt="sgd", timing=True)).records)


def test_divergence_surfaces_with_record():
    cfg = RunConfig(opt="sgd", lr=10.0, steps=500, d=10)
    with pytest.raises(DivergenceError) as info:
        run(cfg)
    assert info.value.record is not None


@pytest.mark.parametrize(
    "kwargs,flag",
    [
        (dict(opt="smfac", density=1.5), "--density"),
        (dict(opt="smfac", density=0.0), "--density"),
        (dict(opt="dmfac", lam=0.0), "--lambda"),
        (dict(opt="dggt", eps=-1.0), "--eps"),
        (dict(opt="bogus"), "--opt"),
        (dict(steps=0), "--steps"),
        (dict(lr=-1.0), "--lr"),
        (dict(opt="lrmfac", rank=0), "--rank"),
        (dict(task="images"), "--task"),
        (dict(precision="f16"), "--precision"),
        (dict(threads=0), "--threads"),
    ],
)
def test_validation_names_flag(kwargs, flag):
    with pytest.raises(ConfigError, match=flag):
        RunConfig(**kwargs).resolved()


def test_irrelevant_parameters_not_validated():
    # density only matters for the sparse optimizers
    RunConfig(opt="sgd", density=5.0).resolved()


def test_config_json_roundtrip():
    cfg = RunConfig(opt="lrmfac", rank=3, lam=0.5, clip=2.0).resolved()
    back = RunConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_json({"nope": 1})


def test_memory_report_reference_settings():
    task = make_synthetic("quadratic", 8)
    rep = memory_report(RunConfig(opt="smfac", m=1024, density=0.01), task)
    assert rep["per_coordinate"]["4"]["sparse"] == pytest.approx(89.92)
    assert round(rep["per_coordinate"]["4"]["ratio_rounded"], 1) == 45.5
    assert round(rep["per_coordinate"]["2"]["ratio_rounded"], 1) == 58.5
    rep = memory_report(RunConfig(opt="sggt", m=100, density=0.01), task)
    assert rep["per_coordinate"]["4"]["sparse"] == pytest.approx(12.0)
    assert round(rep["per_coordinate"]["4"]["ratio_rounded"], 1) == 33.3


def test_memory_report_actual_bytes_large_model():
    # 100 full 4096-blocks at density 1%: 41 entries per block
    task = make_synthetic("quadratic", 1)
    task.layer_shapes = [(409_600,)]
    rep = memory_report(RunConfig(opt="smfac", m=1024, density=0.01), task)
    assert rep["row_entries"] == 4100
    assert rep["bytes"] == 8 * 1024 * 4100 + 8 * 409_600 + 4 * 1024
    assert round(rep["ratio"], 1) == 45.5
