import numpy as np
import pytest

from terrex.cloud import PointCloud
from terrex.errors import ConfigError, FormatError, InputTooSmall, NumericError, ShapeError
from terrex.gradcheck import THRESHOLD, gradcheck, random_problem
from terrex.model import (
    TINY,
    ModelConfig,
    Proxies,
    TrainState,
    encode,
    extract_proxies,
    forward,
    init_params,
    load_checkpoint,
    prepare,
    project,
    save_checkpoint,
    train,
    value_and_grad,
)
from terrex.objective import LossConfig


@pytest.fixture
def problem():
    return random_problem(TINY, np.random.default_rng(7))


@pytest.fixture
def params():
    return init_params(TINY, 3)


def grid_cloud(rng, n=40):
    # multiples of 1/4 keep every sum and difference exact in float32
    return rng.integers(-20, 20, size=(n, 3)) * 0.25


def test_shapes(problem, params):
    sample, _ = problem
    P = forward(sample.input_cloud, params, TINY)
    assert P.shape == (TINY.M, 3)
    assert len(extract_proxies(sample.input_cloud, params, TINY)) == TINY.n_proxy


def test_default_sizes():
    cfg = ModelConfig()
    assert (cfg.n_fps, cfg.n_proxy, cfg.d_model, cfg.M) == (256, 32, 64, 64)


def test_bad_configs():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(n_fps=8, n_proxy=16)
    with pytest.raises(ConfigError):
        ModelConfig(attention_bias="knn")


def test_input_too_small(params):
    with pytest.raises(InputTooSmall):
        forward(np.zeros((TINY.n_proxy - 1, 3)), params, TINY)


def test_translation_shifts_proxies_exactly(rng, params):
    X = grid_cloud(rng)
    t = np.array([8.0, -4.0, 2.0])
    a, b = prepare(X, TINY, 5), prepare(X + t, TINY, 5)
    assert np.array_equal(a.centers, b.centers) and np.array_equal(a.proxy_nb, b.proxy_nb)
    assert np.array_equal(b.pts[b.centers], a.pts[a.centers] + t)
    assert np.array_equal(b.edge_in[..., 3:], a.edge_in[..., 3:])
    assert np.array_equal(b.edge_in[..., :3], a.edge_in[..., :3] + t)
    pa = extract_proxies(X, params, TINY, 5)
    pb = extract_proxies(X + t, params, TINY, 5)
    assert np.array_equal(pb.coords, pa.coords + t)


def test_duplicate_points_give_finite_output(params):
    X = np.vstack([np.zeros((30, 3)), np.eye(3)])
    assert np.isfinite(forward(X, params, TINY)).all()


def test_encode_is_permutation_equivariant(rng, problem, params):
    sample, _ = problem
    prox = extract_proxies(sample.input_cloud, params, TINY)
    perm = rng.permutation(TINY.n_proxy)
    t = encode(prox, params, TINY)
    tp = encode(Proxies(prox.coords[perm], prox.features[perm]), params, TINY)
    slots = (perm[:, None] * TINY.q + np.arange(TINY.q)).ravel()
    np.testing.assert_allclose(tp, t[slots], rtol=0, atol=1e-12)


def test_encode_shape_mismatch(params):
    with pytest.raises(ConfigError):
        encode(Proxies(np.zeros((3, 3)), np.zeros((3, 8))), params, TINY)


def test_attention_rows_are_distributions(problem, params):
    sample, _ = problem
    trace = {}
    forward(sample.input_cloud, params, TINY, trace=trace)
    assert len(trace["attention"]) == TINY.n_layers
    for a in trace["attention"]:
        assert a.shape == (TINY.n_heads, TINY.n_proxy, TINY.n_proxy)
        assert (a >= 0).all()
        assert np.abs(a.sum(axis=-1) - 1).max() <= 1e-6


def test_zero_head_returns_repeated_proxies(problem, params):
    sample, _ = problem
    params["head.w"][:] = 0
    params["head.b"][:] = 0
    prox = extract_proxies(sample.input_cloud, params, TINY)
    P = forward(sample.input_cloud, params, TINY)
    assert np.array_equal(P, np.repeat(prox.coords, TINY.q, axis=0))


def test_forward_is_composition_of_stages(problem, params):
    sample, _ = problem
    prox = extract_proxies(sample.input_cloud, params, TINY, 2)
    staged = project(encode(prox, params, TINY), params, TINY, prox)
    np.testing.assert_allclose(forward(sample.input_cloud, params, TINY, 2), staged,
                               rtol=0, atol=1e-12)


def test_forward_deterministic(problem, params):
    sample, _ = problem
    a = forward(sample.input_cloud, params, TINY, 4)
    b = forward(sample.input_cloud, params, TINY, 4)
    assert a.tobytes() == b.tobytes()


def test_non_finite_params_raise_numeric_error(problem, params):
    sample, _ = problem
    params["head.b"][0] = np.inf
    with pytest.raises(NumericError):
        forward(sample.input_cloud, params, TINY)


# ------------------------------------------------------------- gradients


def test_gradcheck_small_run_passes():
    rep = gradcheck(TINY, draws=4, seed=1)
    assert rep.passed and rep.max_error < THRESHOLD
    assert set(rep.per_tensor) == set(init_params(TINY))


def test_gradcheck_detects_corrupted_gradient():
    rep = gradcheck(TINY, draws=2, seed=1, corrupt="enc.1.wv")
    assert not rep.passed and rep.worst_tensor == "enc.1.wv"


def test_alpha_is_linear(problem):
    sample, params = problem
    plan = prepare(sample.input_cloud, TINY, 0)
    _, g1, w = value_and_grad(params, sample, TINY, LossConfig(alpha=1, beta=0), plan=plan)
    _, g2, _ = value_and_grad(params, sample, TINY, LossConfig(alpha=2, beta=0), plan=plan,
                              weights=w)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


def test_spread_settings_irrelevant_at_zero_weight(problem):
    sample, params = problem
    _, a, _ = value_and_grad(params, sample, TINY, LossConfig(spread_margin=9.0))
    _, b, _ = value_and_grad(params, sample, TINY, LossConfig(spread_margin=0.1, spread_k=1))
    for k in a:
        assert np.array_equal(a[k], b[k])


# --------------------------------------------------------------- training


def test_zero_steps_leave_params_unchanged(problem):
    sample, _ = problem
    state, trace = train([sample], TINY, steps=0, seed=3)
    assert trace == []
    for k, v in init_params(TINY, 3).items():
        assert np.array_equal(state.params[k], v)


def test_same_seed_same_params(problem):
    sample, _ = problem
    a, ta = train([sample], TINY, steps=5, seed=2, log=None)
    b, tb = train([sample], TINY, steps=5, seed=2, log=None)
    assert ta == tb
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_resume_matches_uninterrupted_run(tmp_path, problem):
    sample, _ = problem
    full, _ = train([sample], TINY, steps=5, seed=2)
    part, _ = train([sample], TINY, steps=3, seed=2)
    save_checkpoint(part, tmp_path / "c.temd")
    resumed = load_checkpoint(tmp_path / "c.temd")
    resumed, _ = train([sample], TINY, steps=2, state=resumed)
    assert resumed.step == 5
    for k in full.params:
        assert full.params[k].tobytes() == resumed.params[k].tobytes()


def test_divergence_raises_with_last_good_state(problem):
    sample, _ = problem
    state = TrainState.fresh(TINY, 0)
    state.params["head.b"][:] = np.nan
    with pytest.raises(NumericError) as info:
        train([sample], TINY, steps=3, state=state)
    assert info.value.state is not None and info.value.state.step == 0


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        train([], TINY, steps=1)


# ------------------------------------------------------------- checkpoints


@pytest.fixture
def trained(problem):
    return train([problem[0]], TINY, steps=3, seed=9)[0]


def test_checkpoint_round_trip(tmp_path, trained):
    p = tmp_path / "c.temd"
    save_checkpoint(trained, p)
    back = load_checkpoint(p)
    assert back.config == TINY and back.step == 3 and back.seed == 9
    for d_in, d_out in ((trained.params, back.params), (trained.m, back.m),
                        (trained.v, back.v)):
        assert list(d_in) == list(d_out)
        for k in d_in:
            assert d_in[k].tobytes() == d_out[k].tobytes()
    save_checkpoint(back, tmp_path / "d.temd")
    assert (tmp_path / "d.temd").read_bytes() == p.read_bytes()


def test_checkpoint_starts_with_magic(tmp_path, trained):
    p = tmp_path / "c.temd"
    save_checkpoint(trained, p)
    assert p.read_bytes()[:6] == b"TEMD\x01\x00"


@pytest.mark.parametrize("cut", [3, 10, 200, -1])
def test_truncated_checkpoint(tmp_path, trained, cut):
    p = tmp_path / "c.temd"
    save_checkpoint(trained, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:cut])
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_trailing_bytes_rejected(tmp_path, trained):
    p = tmp_path / "c.temd"
    save_checkpoint(trained, p)
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_config_mismatch_names_tensor(tmp_path, trained):
    p = tmp_path / "c.temd"
    save_checkpoint(trained, p)
    other = ModelConfig(n_fps=16, n_proxy=4, k_edge=4, d_model=12, n_heads=2, n_layers=2)
    with pytest.raises(ShapeError, match="edge.w1"):
        load_checkpoint(p, expect=other)


def test_point_cloud_input_accepted(problem, params):
    sample, _ = problem
    a = forward(sample.input_cloud, params, TINY)
    b = forward(PointCloud(sample.input_cloud.points), params, TINY)
    assert np.array_equal(a, b)
