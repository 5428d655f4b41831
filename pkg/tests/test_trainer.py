import numpy as np
import pytest

from flowvi import numcore as nc
from flowvi.errors import ConfigError, TrainingAborted
from flowvi.harness.data import SyntheticConfig, gen_synthetic, synthetic_tokenizer
from flowvi.model import ModelConfig, SumModel, make_batch
from flowvi.trainer import (
    AdamState,
    ParamPartition,
    StepLog,
    TrainConfig,
    adam_step,
    clip_gradients,
    collapse_monitor,
    early_stop_check,
    epochs_to_steps,
    global_norm,
    lr_schedule,
    phase_for,
    read_steplog_csv,
    backbone_names,
    theta_checksum,
    train,
    warm_start_backbone,
    write_steplog_csv,
)


# --- Adam ----------------------------------------------------------------------

def test_adam_zero_grads_keep_params_and_advance():
    p = nc.parameter(np.array([1.0, -2.0]))
    st = adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.t["p"] == 1


def test_adam_first_step_hand_value():
    p = nc.parameter(np.array([0.5, 0.5]))
    g = np.array([0.2, -3.0])
    adam_step({"p": p}, {"p": g}, AdamState(), lr=0.01)
    # m_hat = g, v_hat = g^2 on the first step
    np.testing.assert_allclose(p.data, 0.5 - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)


def _scalar_adam(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return x


def test_adam_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=5)
    gs = rng.normal(size=(2, 5))
    p = nc.parameter(x0.copy())
    st = AdamState()
    for g in gs:
        adam_step({"p": p}, {"p": g}, st, lr=3e-3)
    expected = [_scalar_adam(x0[i], gs[:, i], 3e-3) for i in range(5)]
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-12)


def test_adam_nan_names_parameter_and_touches_nothing():
    a, b = nc.parameter(np.ones(2)), nc.parameter(np.ones(2))
    with pytest.raises(TrainingAborted, match="'b'") as info:
        adam_step({"a": a, "b": b}, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, AdamState(), 0.1)
    assert info.value.param == "b"
    np.testing.assert_array_equal(a.data, 1.0)


def test_adam_per_parameter_counters():
    a, b = nc.parameter(np.ones(1)), nc.parameter(np.ones(1))
    st = AdamState()
    adam_step({"a": a, "b": b}, {"a": np.ones(1)}, st, 0.1)
    adam_step({"a": a, "b": b}, {"a": np.ones(1), "b": np.ones(1)}, st, 0.1)
    assert st.t == {"a": 2, "b": 1}


# --- schedule and clipping ------------------------------------------------------

def test_lr_schedule_examples():
    assert lr_schedule(0, 10, 100, 5e-5) == 0.0
    assert lr_schedule(10, 10, 100, 5e-5) == 5e-5
    assert lr_schedule(55, 10, 100, 5e-5) == pytest.approx(2.5e-5)
    assert lr_schedule(100, 10, 100, 5e-5) == 0.0


def test_lr_schedule_continuous_peak_at_warmup():
    vals = [lr_schedule(s, 20, 200, 1.0) for s in range(201)]
    assert int(np.argmax(vals)) == 20
    assert max(abs(a - b) for a, b in zip(vals, vals[1:])) <= 1.0 / 20 + 1e-12


def test_clip_examples():
    g = {"a": np.array([0.3, 0.4])}
    out, n = clip_gradients(g, 1.0)
    assert out is g and n == pytest.approx(0.5)
    out, n = clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)
    np.testing.assert_allclose(out["a"], [0.6, 0.8])
    assert n == 5.0


def test_clip_property_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        g = {k: rng.normal(scale=rng.uniform(0.01, 3), size=rng.integers(1, 6)) for k in "abc"}
        out, pre = clip_gradients(g, 1.0)
        assert global_norm(out) == pytest.approx(min(pre, 1.0), rel=1e-12)
        for k in g:
            assert np.all(np.abs(out[k]) <= np.abs(g[k]) + 1e-15)


# --- early stopping / collapse ----------------------------------------------------

def test_early_stop_examples():
    assert not early_stop_check([10, 9, 8, 7, 6, 5, 4, 3, 2, 1], 8)
    hist = [10, 9, 7] + [7.5, 8, 7.1, 9, 7.0, 8, 8, 8]
    assert early_stop_check(hist, 8)
    assert not early_stop_check(list(range(10, 0, -1))[:10], 16)
    assert not early_stop_check([5.0] * 10, 16)


def _logs(kls):
    return [StepLog(i + 1, "joint", 0.0, 0.0, kl, kl, kl, 0.0) for i, kl in enumerate(kls)]


def test_collapse_monitor_examples():
    assert collapse_monitor(_logs([0.0] * 100)).collapsed
    rep = collapse_monitor(_logs([5.0] * 100), threshold=0.02)
    assert not rep.collapsed and rep.final_window_mean == pytest.approx(5.0)
    rep = collapse_monitor(_logs([1.0] * 60 + [0.0] * 60), window=50)
    assert rep.collapsed and rep.first_collapse_step is not None


def test_epoch_conversion():
    assert epochs_to_steps(1, 1000, 8) == 125
    assert epochs_to_steps(3, 1001, 8) == 378


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(n_alt=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(n_agg=10, n_max=5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(strategy="free-bits").validate()
    with pytest.raises(ConfigError):
        TrainConfig(patience=0).validate()


def test_steplog_csv_roundtrip(tmp_path):
    logs = [StepLog(1, "agg_psi", 1e-4, 3.25, 0.1, 0.1, 3.35, 2.0 / 3.0)]
    write_steplog_csv(logs, tmp_path / "s.csv")
    assert read_steplog_csv(tmp_path / "s.csv") == logs
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == "step,phase,lr,ce,vi,vi_transformed,total,grad_norm_pre_clip"


# --- training loops on a tiny model -------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    cfg = SyntheticConfig(vocab_size=24, doc_min_len=6, doc_max_len=12, summary_max_len=3, n_train=24, n_val=8, n_test=4)
    corpora = gen_synthetic(cfg, seed=0)
    tok = synthetic_tokenizer(cfg)
    train_b = make_batch(tok, corpora["train"].documents, corpora["train"].summaries)
    val_b = make_batch(tok, corpora["val"].documents, corpora["val"].summaries)
    return tok, train_b, val_b


def _model(tok, seed=0, flow="rqnsf"):
    cfg = ModelConfig(vocab_size=len(tok), d_model=16, n_heads=2, n_enc=1, n_dec=1, d_ff=32,
                      latent_dim=4, flow=flow, n_flows=2, infer_hidden=16)
    return SumModel(cfg, np.random.default_rng(seed))


def test_phase_assignment():
    cfg = TrainConfig(strategy="caat", n_agg=30, n_alt=15, n_max=40)
    phases = [phase_for(i, cfg) for i in range(1, 41)]
    assert phases[14] == phases[29] == "agg_all"
    assert phases.count("agg_all") == 2 and phases.count("agg_psi") == 28
    assert set(phases[30:]) == {"joint"}
    assert {phase_for(i, TrainConfig(strategy="standard")) for i in range(1, 50)} == {"joint"}


def test_caat_theta_frozen_on_psi_steps(tiny_data):
    tok, data, _ = tiny_data
    model = _model(tok)
    part = ParamPartition.from_model(model)
    assert not set(part.psi) & set(part.theta)
    params = dict(model.named_parameters())
    before = {"theta": theta_checksum(model, part)}
    seen = []

    def check(rec, m):
        now = theta_checksum(m, part)
        psi_now = b"".join(params[n].data.tobytes() for n in part.psi)
        if rec.phase == "agg_psi":
            assert now == before["theta"], f"theta moved on psi-only step {rec.step}"
        elif rec.lr > 0:   # the schedule reaches zero on the final step
            assert now != before["theta"], f"theta frozen on step {rec.step}"
        if rec.lr > 0:
            assert psi_now != before.get("psi")
        before["theta"], before["psi"] = now, psi_now
        seen.append(rec.phase)

    cfg = TrainConfig(strategy="caat", n_agg=16, n_alt=15, n_max=18, lr=1e-3, batch_size=4, seed=1)
    train(model, data, cfg, on_step=check)
    assert seen[14] == "agg_all" and seen.count("agg_psi") == 15 and seen[16:] == ["joint", "joint"]


def test_caat_with_zero_agg_equals_standard(tiny_data):
    tok, data, _ = tiny_data
    cfg_std = TrainConfig(strategy="standard", n_max=12, lr=1e-3, batch_size=4, seed=3)
    cfg_caat = TrainConfig(strategy="caat", n_agg=0, n_max=12, lr=1e-3, batch_size=4, seed=3)
    m1, m2 = _model(tok, 5), _model(tok, 5)
    r1 = train(m1, data, cfg_std)
    r2 = train(m2, data, cfg_caat)
    assert r1.logs == r2.logs
    for (n1, p1), (n2, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


def test_training_is_deterministic(tiny_data):
    tok, data, val = tiny_data
    cfg = TrainConfig(strategy="beta_c", C=0.1, n_max=10, lr=1e-3, batch_size=4, seed=7, eval_interval=5)
    runs = []
    for _ in range(2):
        m = _model(tok, 2)
        res = train(m, data, cfg, val)
        runs.append((res.logs, m.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


def test_beta_c_logged_transform(tiny_data):
    tok, data, _ = tiny_data
    cfg = TrainConfig(strategy="beta_c", beta=1.0, C=0.1, n_max=8, lr=1e-3, batch_size=1, seed=0)
    res = train(_model(tok), data, cfg)
    for rec in res.logs:
        assert rec.vi_transformed == pytest.approx(abs(rec.vi - 0.1), abs=1e-12)
        assert rec.total == pytest.approx(rec.ce + rec.vi_transformed, abs=1e-12)


def test_batch_beta_c_is_per_example(tiny_data):
    tok, data, _ = tiny_data
    cfg = TrainConfig(strategy="beta_c", beta=1.0, C=0.1, n_max=5, lr=1e-3, batch_size=4, seed=0)
    for rec in train(_model(tok), data, cfg).logs:
        assert rec.vi_transformed >= abs(rec.vi - 0.1) - 1e-12


def test_nan_during_aggressive_phase_aborts_with_diagnostic(tiny_data):
    tok, data, _ = tiny_data
    model = _model(tok, flow="iaf")
    model.flows.layers[0].made.layers[-1].bias.data[4:] = 900.0  # exp overflow inside the flow
    cfg = TrainConfig(strategy="caat", n_agg=10, n_max=12, batch_size=4)
    with pytest.raises(TrainingAborted) as info:
        train(model, data, cfg)
    assert info.value.step == 1 and info.value.phase == "agg_psi"
    assert "iaf" in str(info.value)


def test_loss_decreases_on_tiny_task(tiny_data):
    tok, data, _ = tiny_data
    cfg = TrainConfig(strategy="standard", n_max=120, lr=3e-3, batch_size=8, warmup_frac=0.05, seed=0)
    logs = train(_model(tok), data, cfg).logs
    first = np.mean([r.total for r in logs[:30]])
    last = np.mean([r.total for r in logs[-30:]])
    assert last < first


def test_warm_start_touches_only_backbone(tiny_data):
    tok, data, _ = tiny_data
    model = _model(tok)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    losses = warm_start_backbone(model, data, 40, 3e-3, batch_size=8)
    bb = set(backbone_names(model))
    assert "embed" in bb and not any(n.startswith(("infer.", "flows.", "gate.")) for n in bb)
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, before[n]) != (n in bb), n
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_warm_start_is_independent_of_flow_kind(tiny_data):
    tok, data, _ = tiny_data
    a, b = _model(tok, 4, flow="planar"), _model(tok, 4, flow="rqnsf")
    warm_start_backbone(a, data, 6, 1e-3, batch_size=4, seed=2)
    warm_start_backbone(b, data, 6, 1e-3, batch_size=4, seed=2)
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    for n in backbone_names(a):
        assert np.array_equal(pa[n].data, pb[n].data), n
