import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fticir.backbone import BackboneConfig, ImageFeatures
from fticir.errors import ConfigError
from fticir.inversion import (
    FilterConfig,
    InversionConfig,
    InversionNetwork,
    cosine_to_anchor,
    filter_attributes,
)
from oracles import filter_oracle


def rand_rows(rng, n, d):
    return torch.from_numpy(rng.normal(size=(n, d)))


def tiny_config(**overrides):
    base = dict(d_embed=8, d_patch=12, d_token=6, n_attrs=6, layers=2,
                heads=1, hidden_mult=2, dropout=0.1)
    base.update(overrides)
    return InversionConfig(**base)


def run_filter(rows, anchor, k, eps):
    sims, topk, retained = filter_attributes(
        rows, anchor, FilterConfig(k=k, epsilon=eps)
    )
    return sims, topk.tolist(), retained.tolist()


def test_filter_matches_brute_force_oracle():
    rng = np.random.default_rng(41)
    for trial in range(500):
        n = int(rng.integers(1, 17))
        d = int(rng.integers(2, 10))
        k = int(rng.integers(1, n + 1))
        eps = float(rng.uniform(-1.0, 1.0))
        rows = rand_rows(rng, n, d)
        anchor = torch.from_numpy(rng.normal(size=d))
        if trial % 10 == 0:
            # Force the all-below-threshold fallback: rows orthogonal to the
            # anchor have similarity zero, below any positive threshold.
            anchor = torch.zeros(d, dtype=torch.float64)
            anchor[0] = 1.0
            rows[:, 0] = 0.0
            eps = float(rng.uniform(0.1, 1.0))
        sims, topk, retained = run_filter(rows, anchor, k, eps)
        want_sims, want_topk, want_retained = filter_oracle(
            rows.numpy(), anchor.numpy(), k, eps
        )
        assert topk == want_topk, trial
        assert retained == want_retained, trial
        for got, want in zip(sims.tolist(), want_sims):
            assert abs(got - want) <= 1e-12, trial


def constructed_rows(cosines):
    """Rows whose cosine against e_0 is exactly the requested value."""
    n = len(cosines)
    rows = torch.zeros((n, n + 1), dtype=torch.float64)
    for i, c in enumerate(cosines):
        rows[i, 0] = c
        rows[i, i + 1] = math.sqrt(1.0 - c * c)
    anchor = torch.zeros(n + 1, dtype=torch.float64)
    anchor[0] = 1.0
    return rows, anchor


def test_filter_worked_example():
    rows, anchor = constructed_rows([0.9, 0.04, 0.2, -0.1])
    _, topk, retained = run_filter(rows, anchor, k=2, eps=0.05)
    assert topk == [0, 2]
    assert retained == [0, 2]
    _, _, retained = run_filter(rows, anchor, k=2, eps=0.5)
    assert retained == [0]
    # Nothing clears 0.95, so the single most correlated row survives.
    _, _, retained = run_filter(rows, anchor, k=2, eps=0.95)
    assert retained == [0]


def test_filter_ties_break_toward_lower_index():
    row = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    rows = torch.stack([row, row * 2.0, row, row * 0.5])
    _, topk, retained = run_filter(rows, row.clone(), k=3, eps=-1.0)
    assert topk == [0, 1, 2]
    assert retained == [0, 1, 2]


def test_filter_zero_norm_rows_score_zero():
    rows = torch.zeros((3, 4), dtype=torch.float64)
    rows[1, 0] = 1.0
    anchor = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    sims = cosine_to_anchor(rows, anchor)
    assert sims.tolist() == [0.0, 1.0, 0.0]


def test_filter_anchor_scale_does_not_change_selection():
    rng = np.random.default_rng(5)
    rows = rand_rows(rng, 9, 7)
    anchor = torch.from_numpy(rng.normal(size=7))
    sims_a, topk_a, kept_a = run_filter(rows, anchor, k=4, eps=0.02)
    sims_b, topk_b, kept_b = run_filter(rows, anchor * 37.5, k=4, eps=0.02)
    assert topk_a == topk_b
    assert kept_a == kept_b
    assert torch.allclose(sims_a, sims_b, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_filter_retains_between_one_and_k(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    k = int(rng.integers(1, n + 1))
    rows = rand_rows(rng, n, 5)
    anchor = torch.from_numpy(rng.normal(size=5))
    _, topk, retained = run_filter(rows, anchor, k, float(rng.uniform(-1, 1)))
    assert len(topk) == k
    assert 1 <= len(retained) <= k
    assert set(retained) <= set(topk)


def test_filter_config_validation():
    with pytest.raises(ConfigError):
        FilterConfig(k=0, epsilon=0.05)
    with pytest.raises(ConfigError):
        FilterConfig(k=3, epsilon=1.5)
    with pytest.raises(ConfigError):
        FilterConfig(k=9, epsilon=0.0).validate_for(n_attrs=6)
    FilterConfig(k=6, epsilon=-1.0).validate_for(n_attrs=6)


def test_network_zero_layers_is_projected_query_bank():
    cfg = tiny_config(layers=0)
    net = InversionNetwork(cfg, dtype=torch.float64, seed=12)
    patches = torch.from_numpy(np.random.default_rng(0).normal(size=(5, 12)))
    local = net.extract_local_attributes(patches)
    direct = net.attr_proj(net.query_bank)
    assert torch.equal(local, direct)


def test_network_local_attributes_ignore_patch_order():
    cfg = tiny_config()
    net = InversionNetwork(cfg, dtype=torch.float64, seed=3).eval()
    rng = np.random.default_rng(8)
    patches = rand_rows(rng, 7, 12)
    perm = torch.from_numpy(rng.permutation(7))
    out_a = net.extract_local_attributes(patches)
    out_b = net.extract_local_attributes(patches[perm])
    assert torch.allclose(out_a, out_b, atol=1e-10)


def test_network_dropout_only_active_in_train_mode():
    cfg = tiny_config(dropout=0.5)
    net = InversionNetwork(cfg, dtype=torch.float64, seed=4)
    feats = torch.from_numpy(np.random.default_rng(1).normal(size=8))
    net.train()
    torch.manual_seed(0)
    first = net.map_subject(feats)
    torch.manual_seed(1)
    second = net.map_subject(feats)
    assert not torch.equal(first, second)
    net.eval()
    assert torch.equal(net.map_subject(feats), net.map_subject(feats))


def test_network_seeded_build_is_reproducible():
    a = InversionNetwork(tiny_config(), dtype=torch.float64, seed=99)
    b = InversionNetwork(tiny_config(), dtype=torch.float64, seed=99)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_invert_shapes_and_consistency():
    cfg = tiny_config()
    net = InversionNetwork(cfg, dtype=torch.float64, seed=7).eval()
    rng = np.random.default_rng(2)
    feats = ImageFeatures(
        global_embed=torch.from_numpy(rng.normal(size=8)),
        patches=rand_rows(rng, 10, 12),
    )
    out = net.invert(feats, FilterConfig(k=3, epsilon=0.05))
    r = out.num_attributes
    assert out.subject.shape == (6,)
    assert out.attributes.shape == (r, 6)
    assert out.sims.shape == (6,)
    assert out.topk_features.shape == (3, 8)
    assert 1 <= r <= 3
    assert set(out.retained_indices.tolist()) <= set(out.topk_indices.tolist())
    # Attribute tokens are the row-wise map of the retained feature rows.
    mapped = net.map_attributes(out.retained_features)
    assert torch.equal(out.attributes, mapped)


def test_invert_rejects_oversized_k():
    cfg = tiny_config()
    net = InversionNetwork(cfg, dtype=torch.float64, seed=7)
    feats = ImageFeatures(
        global_embed=torch.zeros(8, dtype=torch.float64),
        patches=torch.zeros((4, 12), dtype=torch.float64),
    )
    with pytest.raises(ConfigError):
        net.invert(feats, FilterConfig(k=7, epsilon=0.0))


def test_inversion_config_round_trip():
    cfg = tiny_config()
    flat = cfg.to_flat()
    backbone_cfg = BackboneConfig(d_embed=8, d_patch=12, d_token=6)
    assert InversionConfig.from_flat(flat, backbone_cfg) == cfg
    with pytest.raises(ConfigError):
        tiny_config(n_attrs=0)
    with pytest.raises(ConfigError):
        tiny_config(heads=5)  # must divide d_patch
