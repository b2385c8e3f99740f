"""Network structure: module splits, composition, invertibility, snapshots."""

import numpy as np
import pytest

from unrolled_mri.errors import ConfigError, InversionError
from unrolled_mri.mri_physics import (
    MaskSpec,
    SensingModel,
    adjoint_a,
    cg_solve,
    dc_step,
    forward_a,
    make_coil_maps,
    make_mask,
)
from unrolled_mri.tensor_core import Tape, Tensor
from unrolled_mri.unrolled_nets import (
    InvertibleProximalBlock,
    ProximalBlock,
    UnrolledNetwork,
    build_network,
    load_snapshot,
    save_snapshot,
)

RNG = np.random.default_rng(2024)


def crandn(*shape, rng=RNG):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def small_model(h=16, w=16, coils=2, seed=0, mu=4.0):
    mask = make_mask(MaskSpec("poisson_disc_2d", 2.0, 4, seed=seed), (h, w))
    maps = make_coil_maps(coils, h, w, seed=seed + 1)
    return SensingModel(mask, maps, mu=mu)


def eager(x):
    return Tensor(Tape(recording=False), None, x)


def randomize(net, scale=0.05, seed=5):
    rng = np.random.default_rng(seed)
    for p in net.parameters():
        p.value = rng.normal(scale=scale, size=p.value.shape)


# ----------------------------------------------------------------- blocks

def test_zero_init_blocks_are_identity():
    x = crandn(2, 16, 16)
    for block in (ProximalBlock(8, np.random.default_rng(0)),
                  InvertibleProximalBlock(8, np.random.default_rng(0))):
        out = block(eager(x)).data
        assert np.array_equal(out, x)


def test_parameter_count_formulas():
    pb = ProximalBlock(8, np.random.default_rng(0))
    assert sum(p.value.size for p in pb.parameters()) == ProximalBlock.parameter_count(8)
    ib = InvertibleProximalBlock(8, np.random.default_rng(0))
    assert sum(p.value.size for p in ib.parameters()) == \
        InvertibleProximalBlock.parameter_count(8)


def test_invert_identity_when_residual_zero():
    block = InvertibleProximalBlock(8, np.random.default_rng(0))
    x = crandn(1, 16, 16)
    assert np.allclose(block.invert(x), x, atol=1e-12)


def _contractive_block(target=0.9, features=8, h=16, w=16, seed=3, max_iters=50):
    block = InvertibleProximalBlock(features, np.random.default_rng(seed),
                                    inv_max_iters=max_iters)
    for conv in block.convs():
        conv.weight.value = np.random.default_rng(conv.weight.pid).normal(
            scale=0.5, size=conv.weight.value.shape
        )
    prod = block.lipschitz_bound(h, w)
    factor = (target / prod) ** (1.0 / block.n_convs)
    for conv in block.convs():
        conv.weight.value *= factor
    return block


def test_contractive_block_roundtrip():
    block = _contractive_block(target=0.9)
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        x = rng.normal(size=(1, 16, 16)) + 1j * rng.normal(size=(1, 16, 16))
        inv = block.invert(x)
        fwd = block(eager(inv)).data
        assert np.linalg.norm(fwd - x) / np.linalg.norm(x) < 1e-8


def test_expansive_block_raises_inversion_error():
    # delta kernels give an honest linear gain of 1.5 (the spectral product of
    # a random block overestimates its true Lipschitz constant)
    block = InvertibleProximalBlock(4, np.random.default_rng(0), inv_max_iters=50)
    gain = 1.5 ** (1.0 / block.n_convs)
    for li, conv in enumerate(block.convs()):
        w = np.zeros_like(conv.weight.value)
        for ch in range(min(2, w.shape[0], w.shape[1])):
            w[ch, ch, 1, 1] = -gain if li == block.n_convs - 1 else gain
        conv.weight.value = w
        if li < block.n_convs - 1:
            conv.bias.value = np.full(w.shape[0], 1e6)  # pin relus into their linear region
    assert abs(block.lipschitz_bound(16, 16) - 1.5) < 0.1
    x = crandn(1, 16, 16)
    with pytest.raises(InversionError):
        block.invert(x)


def test_scale_to_lipschitz_enforces_bound():
    block = _contractive_block(target=2.0)
    assert block.lipschitz_bound(16, 16) > 1.0
    block.scale_to_lipschitz(0.9, 16, 16)
    assert block.lipschitz_bound(16, 16) <= 0.9 + 1e-9


# ----------------------------------------------------------------- network structure

def test_module_split_validation():
    model = small_model()
    with pytest.raises(ConfigError):
        build_network("pgd", model, n_iters=8, n_modules=3)
    net = build_network("pgd", model, n_iters=24, n_modules=3)
    for m in (1, 2, 3):
        assert len(net.module_iterations(m)) == 8
    assert list(net.module_iterations(1)) == list(range(8))


def test_single_module_owns_everything():
    model = small_model()
    net = build_network("pgd", model, n_iters=4, n_modules=1)
    assert [p.pid for p in net.module_parameters(1)] == \
        [p.pid for p in net.parameters()]


def test_module_parameter_ownership_disjoint():
    model = small_model()
    net = build_network("pgd", model, n_iters=4, n_modules=2)
    ids1 = {p.pid for p in net.module_parameters(1)}
    ids2 = {p.pid for p in net.module_parameters(2)}
    assert not ids1 & ids2
    assert ids1 | ids2 == {p.pid for p in net.parameters()}


def test_invertible_requires_modl():
    with pytest.raises(ConfigError):
        build_network("pgd", small_model(), 4, 2, invertible=True)


# ----------------------------------------------------------------- forward

def test_zero_init_pgd_module_is_dc_only():
    model = small_model()
    net = build_network("pgd", model, n_iters=4, n_modules=4)
    x = crandn(1, 16, 16)
    y = forward_a(model, crandn(1, 16, 16))
    t = Tape(recording=False)
    out = net.forward_module(1, t.constant(x), t.constant(y)).data
    assert np.allclose(out, dc_step(model, x, y), atol=1e-13)


def test_pgd_module_is_one_dc_plus_cnn():
    model = small_model()
    net = build_network("pgd", model, n_iters=2, n_modules=2)
    randomize(net)
    x = crandn(1, 16, 16)
    y = forward_a(model, crandn(1, 16, 16))
    t = Tape(recording=False)
    out = net.forward_module(2, t.constant(x), t.constant(y)).data
    hand = net.blocks[1](eager(dc_step(model, x, y))).data
    assert np.array_equal(out, hand)


def test_modl_module_matches_hand_composition():
    model = small_model(mu=4.0)
    net = build_network("modl", model, n_iters=2, n_modules=2, cg_iters=10)
    randomize(net)
    x = crandn(1, 16, 16)
    y = forward_a(model, crandn(1, 16, 16))
    rhs = adjoint_a(model, y)
    t = Tape(recording=False)
    out = net.forward_module(1, t.constant(x), t.constant(y), rhs=rhs).data
    hand = net.blocks[0](eager(cg_solve(model, rhs, x, n_iters=10))).data
    assert np.array_equal(out, hand)


def test_forward_full_equals_module_chain():
    model = small_model()
    net = build_network("pgd", model, n_iters=4, n_modules=2)
    randomize(net)
    y = forward_a(model, crandn(1, 16, 16))
    full = net.forward_full(y)
    t = Tape(recording=False)
    x = t.constant(net.initial_image(y))
    yv = t.constant(y)
    for m in (1, 2):
        x = net.forward_module(m, x, yv)
    assert np.array_equal(full, x.data)


def test_forward_full_n_inf_one():
    model = small_model()
    net = build_network("pgd", model, n_iters=4, n_modules=4)
    randomize(net)
    y = forward_a(model, crandn(1, 16, 16))
    one = net.forward_full(y, n_inf=1)
    t = Tape(recording=False)
    out = net.forward_module(1, t.constant(net.initial_image(y)), t.constant(y))
    assert np.array_equal(one, out.data)


def test_forward_full_range_check():
    net = build_network("pgd", small_model(), 4, 4)
    y = forward_a(net.model, crandn(1, 16, 16))
    with pytest.raises(ConfigError):
        net.forward_full(y, n_inf=0)
    with pytest.raises(ConfigError):
        net.forward_full(y, n_inf=5)


def test_module_index_out_of_range():
    net = build_network("pgd", small_model(), 4, 2)
    with pytest.raises(ConfigError):
        net.module_iterations(3)


# ----------------------------------------------------------------- snapshots

def test_snapshot_roundtrip_bit_exact(tmp_path):
    model = small_model()
    net = build_network("modl", model, n_iters=2, n_modules=2, invertible=True, seed=9)
    randomize(net, seed=42)
    path = tmp_path / "params.bin"
    save_snapshot(net, path)
    loaded = load_snapshot(path, model)
    assert loaded.kind == "modl" and loaded.invertible
    assert loaded.n_iters == 2 and loaded.n_modules == 2
    for a, b in zip(net.parameters(), loaded.parameters()):
        assert a.name == b.name
        assert np.array_equal(a.value, b.value)
    y = forward_a(model, crandn(1, 16, 16))
    assert np.array_equal(net.forward_full(y), loaded.forward_full(y))


def test_snapshot_rejects_other_files(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"definitely not a snapshot")
    with pytest.raises(ConfigError):
        load_snapshot(path, small_model())
