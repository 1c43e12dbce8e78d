import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ghacap import corpus as C
from ghacap import tensor as tn
from ghacap.gradcheck import desk_problem, grad_check_model
from ghacap.model import (REFERENCE_VARIANTS, CaptionModel, ConfigError, ModelConfig, build_variant,
                          check_attention_invariants, count_parameters, max_abs_hidden, param_shapes,
                          parse_label, scale_assignment)


# -- plain numpy oracle ------------------------------------------------------

def _sig(x):
    return 1 / (1 + np.exp(-x))


def _conv(x, K, b):
    k = K.shape[0]
    xp = np.concatenate([np.zeros((k - 1, x.shape[1])), x])
    return np.stack([sum(xp[t + j] @ K[j] for j in range(k)) for t in range(x.shape[0])]) + b


def _softmax(s):
    e = np.exp(s - s.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _elu(x):
    return np.where(x > 0, x, np.exp(np.minimum(x, 0)) - 1)


def oracle_gha(P, grid, tokens, L, Dc):
    """One example, single grid, shared fusing, per-level attention and gates."""
    v = grid.reshape(-1, grid.shape[-1]) @ P["proj.0.W"] + P["proj.0.b"]
    c = P["embed.E"][tokens]

    def att(l, c):
        a = _softmax(c @ P[f"att.{l}.W"].T @ v.T / np.sqrt(Dc))
        return a @ v

    v_hat = att(0, c)
    h = np.zeros((len(tokens), P["fuse.br"].shape[0]))
    for l in range(1, L + 1):
        x = np.concatenate([v_hat, c], -1)
        hx = np.concatenate([h, x], -1)
        r = _sig(hx @ P["fuse.Wr"] + P["fuse.br"])
        z = _sig(hx @ P["fuse.Wz"] + P["fuse.bz"])
        cand = np.tanh(np.concatenate([r * h, x], -1) @ P["fuse.Wh"] + P["fuse.bh"])
        h = (1 - z) * h + z * cand
        c = _conv(c, P[f"dec.{l}.Wa"], P[f"dec.{l}.ba"]) * _sig(h @ P[f"dec.{l}.Wb"] + P[f"dec.{l}.bb"])
        v_hat = att(l, c) + _sig(h @ P[f"vgate.{l}.W"] + P[f"vgate.{l}.b"]) * v_hat
    x = np.concatenate([v_hat, c], -1)
    for i in range(3):
        x = x @ P[f"head.{i}.W"] + P[f"head.{i}.b"]
        if i < 2:
            x = _elu(x)
    return x


def oracle_base(P, grid, tokens, L, Dc):
    v = grid.reshape(-1, grid.shape[-1]) @ P["proj.0.W"] + P["proj.0.b"]
    c = P["embed.E"][tokens]
    for l in range(1, L + 1):
        c = _conv(c, P[f"dec.{l}.Wa"], P[f"dec.{l}.ba"]) * _sig(_conv(c, P[f"dec.{l}.Wg"], P[f"dec.{l}.bg"]))
    a = _softmax(c @ P[f"att.{L}.W"].T @ v.T / np.sqrt(Dc))
    x = np.concatenate([a @ v, c], -1)
    for i in range(3):
        x = x @ P[f"head.{i}.W"] + P[f"head.{i}.b"]
        if i < 2:
            x = _elu(x)
    return x


@pytest.mark.parametrize("label,oracle", [("GHA-2-3-desk", oracle_gha), ("Base-2-3-desk", oracle_base)])
def test_forward_matches_numpy_oracle(label, oracle):
    model, grids, tokens, _ = desk_problem(label, T=6)
    P = {n: p.data for n, p in model.params.items()}
    with tn.no_grad():
        logits, _ = model.forward(grids, tokens)
    expected = oracle(P, grids[0][0], tokens[0], 2, model.cfg.decoder.d_concept)
    np.testing.assert_allclose(logits.data[0], expected, rtol=1e-10, atol=1e-12)


# -- configuration ------------------------------------------------------------

def test_label_parsing():
    assert parse_label("MS-GHA-6-5") == ("ms-gha", 6, False, 5, False)
    assert parse_label("GHA-6B-3-desk") == ("gha", 6, True, 3, True)
    with pytest.raises(ConfigError):
        parse_label("GHA-6")


@pytest.mark.parametrize("label", REFERENCE_VARIANTS)
def test_reference_variants_build(label):
    cfg = build_variant(label)
    assert cfg.label == label and len(cfg.assignment) == cfg.decoder.n_layers + 1


def test_ms_scale_assignment():
    assert build_variant("MS-GHA-6-3").assignment == [0, 0, 1, 1, 1, 2, 2]
    assert scale_assignment(6, 1, "gha") == [0] * 7
    assert scale_assignment(6, 3, "baseline") == [2] * 7


def test_baseline_has_fewer_parameters():
    assert count_parameters(build_variant("Base-6-3")) < count_parameters(build_variant("GHA-6-3"))
    assert count_parameters(build_variant("Base-6-3-desk")) < count_parameters(build_variant("GHA-6-3-desk"))


def test_param_count_matches_model():
    cfg = build_variant("MS-GHA-2-3-desk")
    assert CaptionModel(cfg).n_parameters() == count_parameters(cfg)


def test_bottleneck_variant_shapes():
    cfg = build_variant("GHA-6B-3")
    assert cfg.decoder.conv_layers == 18 and cfg.decoder.shortcuts == 6 and cfg.decoder.receptive_field == 13
    assert param_shapes(cfg)["dec.1.W2"] == (3, 300, 300)


def test_config_json_round_trip():
    cfg = build_variant("MS-GHA-2-5-desk", vocab_size=20)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_config_validation():
    with pytest.raises(ConfigError):
        build_variant("MS-GHA-2-3-desk", feature_dims=[16])
    with pytest.raises(ConfigError):
        build_variant("GHA-2-3-desk", keep_prob=0.0)
    with pytest.raises(ConfigError):
        build_variant("GHA-0-3")


def test_init_is_seeded():
    cfg = build_variant("GHA-2-3-desk")
    a, b, c = CaptionModel(cfg, 1), CaptionModel(cfg, 1), CaptionModel(cfg, 2)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    assert not np.array_equal(a.params["embed.E"].data, c.params["embed.E"].data)


def test_load_state_dict_conflicts():
    m = CaptionModel(build_variant("GHA-2-3-desk"))
    state = dict(m.state_dict())
    state["embed.E"] = np.zeros((3, 3))
    with pytest.raises(ConfigError):
        m.load_state_dict(state)
    with pytest.raises(ConfigError):
        m.load_state_dict({"embed.E": m.params["embed.E"].data})


def test_wrong_grid_count():
    m = CaptionModel(build_variant("MS-GHA-2-3-desk"))
    with pytest.raises(ConfigError):
        m.forward([np.zeros((1, 3, 3, 16))], np.zeros((1, 3), int))


# -- behaviour ---------------------------------------------------------------

@pytest.mark.parametrize("label", ["Base-2-3-desk", "GHA-2-3-desk", "MS-GHA-2-3-desk", "GHA-2B-3-desk"])
@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**16), t=st.integers(0, 6))
def test_causality(label, seed, t):
    model, grids, tokens, _ = desk_problem(label, T=8, seed=seed % 97)
    rng = np.random.default_rng(seed)
    with tn.no_grad():
        before = model.forward(grids, tokens)[0].data
        tokens = tokens.copy()
        tokens[:, t + 1:] = rng.integers(0, 12, tokens[:, t + 1:].shape)
        after = model.forward(grids, tokens)[0].data
    np.testing.assert_array_equal(before[:, : t + 1], after[:, : t + 1])


def test_prefix_consistency():
    model, grids, tokens, _ = desk_problem("GHA-3-3-desk", T=7)
    with tn.no_grad():
        full = model.forward(grids, tokens)[0].data
        for t in range(1, 8):
            part = model.forward(grids, tokens[:, :t])[0].data
            np.testing.assert_allclose(part, full[:, :t], rtol=1e-12, atol=1e-14)


def test_forward_deterministic_and_single_example():
    model, grids, tokens, _ = desk_problem("MS-GHA-2-3-desk")
    fm = C.FeatureMaps([g[0] for g in grids])
    with tn.no_grad():
        a = model.forward(grids, tokens)[0].data
        b = model.forward(grids, tokens)[0].data
        c = model.forward(fm, tokens[0])[0].data
    assert np.array_equal(a, b)
    np.testing.assert_allclose(c, a[0], rtol=1e-12)


def test_dropout_only_in_training():
    model, grids, tokens, _ = desk_problem("GHA-2-3-desk")
    with tn.no_grad():
        ev = model.forward(grids, tokens)[0].data
        tr1 = model.forward(grids, tokens, training=True, rng_key=(0, 1))[0].data
        tr2 = model.forward(grids, tokens, training=True, rng_key=(0, 1))[0].data
        tr3 = model.forward(grids, tokens, training=True, rng_key=(0, 2))[0].data
    assert not np.array_equal(ev, tr1)
    assert np.array_equal(tr1, tr2) and not np.array_equal(tr1, tr3)


@pytest.mark.parametrize("label", ["GHA-2-3-desk", "MS-GHA-2-3-desk", "Base-2-3-desk"])
def test_diagnostics_invariants(label):
    model, grids, tokens, _ = desk_problem(label)
    model.astype(np.float32)
    with tn.no_grad():
        _, diag = model.forward([g.astype(np.float32) for g in grids], tokens, diagnostics=True)
    assert check_attention_invariants(diag) == []
    if label.startswith("Base"):
        assert diag.attention[:-1] == [None] * 2 and max_abs_hidden(diag) == 0.0
    else:
        assert all(a is not None for a in diag.attention)
        assert 0 < max_abs_hidden(diag) < 1


def test_ms_levels_see_their_grid_sizes():
    _, _, fms = C.generate_synthetic(0, 1, grid_w=4, grid_h=4, multi_scale=True)
    model = CaptionModel(build_variant("MS-GHA-2-3-desk"))
    with tn.no_grad():
        _, diag = model.forward([g[None] for g in fms[0].grids], np.array([[1, 4, 5]]), diagnostics=True)
    # fine 8x8 pools to the middle 4x4, coarse stays at 2x2
    assert [diag.attention[l].shape[-1] for l in range(3)] == [16, 16, 4]
    assert diag.grid_shapes == [(4, 4), (4, 4), (2, 2)]


def test_invariant_checker_flags_violations():
    model, grids, tokens, _ = desk_problem("GHA-1-3-desk")
    with tn.no_grad():
        _, diag = model.forward(grids, tokens, diagnostics=True)
    diag.attention[0] = diag.attention[0] * 1.01
    diag.v_tilde[1] = diag.v_tilde[1] + 100.0
    problems = check_attention_invariants(diag)
    assert any("level 0" in p for p in problems) and any("outside" in p for p in problems)


@pytest.mark.parametrize("label", ["Base-2-3-desk", "GHA-2B-3-desk", "MS-GHA-2-3-desk"])
def test_gradients_other_families(label):
    errs = grad_check_model(label, T=4)
    assert max(errs.values()) <= 1e-4, {k: v for k, v in errs.items() if v > 1e-4}


def test_full_scale_defaults():
    cfg = build_variant("GHA-6-3")
    assert (cfg.decoder.n_layers, cfg.decoder.kernel, cfg.decoder.d_concept) == (6, 3, 300)
    assert (cfg.head_hidden, cfg.head_depth, cfg.d_visual, cfg.vocab_size) == (4096, 3, 2048, 9489)
    assert param_shapes(cfg)["head.1.W"] == (4096, 4096)
    assert build_variant("Base-6B-3").decoder.filters == [(1, 300), (3, 300), (1, 300)]
