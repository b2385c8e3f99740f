"""Acceptance suite: one test per criterion, printing a pass line for each.

Run with ``pytest tests/test_acceptance.py -v -s``. The shared fixture trains
three desk-scale networks (two at 4 iterations, one deeper at 12), so the full
module takes tens of minutes of CPU; everything else is seconds.
"""

import json
import time

import numpy as np
import pytest

from unrolled_mri.cli import main as cli_main
from unrolled_mri.cs_baseline import CsConfig, cs_objective, cs_reconstruct
from unrolled_mri.data_metrics import (
    DatasetConfig,
    generate_dataset,
    inference_sweep,
    make_phantom,
    psnr,
)
from unrolled_mri.mri_physics import (
    MaskSpec,
    SensingModel,
    adjoint_a,
    cg_residual,
    cg_solve,
    forward_a,
    make_coil_maps,
    make_mask,
    taped_cg_dc,
    taped_dc_step,
)
from unrolled_mri.tensor_core import Tape, ops
from unrolled_mri.train_strategies import (
    Adam,
    TrainConfig,
    TrainData,
    predict_peak_elements,
    strategy_gradients,
    train,
)
from unrolled_mri.unrolled_nets import build_network

from fd_utils import fd_gradient, rel_err, sample_coords


def _report(num: int, ok: bool, detail: str) -> None:
    print(f"criterion {num:02d} {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


def crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


# ------------------------------------------------------------ shared fixtures

DESK = dict(height=64, width=64, coils=4, acceleration=4.0, seed=7)
TRAIN_STEPS = 2000
FEATURES = 8
BATCH = 2
LR = 1e-3


@pytest.fixture(scope="module")
def desk_dataset():
    cfg = DatasetConfig(
        height=DESK["height"], width=DESK["width"], coils=DESK["coils"],
        counts={"train": 200, "val": 20, "test": 20},
        acceleration=DESK["acceleration"], calibration_extent=8,
        seed=DESK["seed"],
    )
    return generate_dataset(cfg)


def _as_train_data(split, mu=4.0):
    return TrainData(refs=split.refs, kspace=split.kspace, model=split.model(mu=mu))


def _with_model(net, model):
    clone = build_network(net.kind, model, net.n_iters, net.n_modules,
                          features=net.features, cg_iters=net.cg_iters,
                          invertible=net.invertible, seed=net.seed)
    for dst, src in zip(clone.parameters(), net.parameters()):
        dst.value = src.value
    return clone


def _test_psnr(net, split):
    eval_net = _with_model(net, split.model())
    recon = eval_net.forward_full(split.kspace)
    return float(np.mean([psnr(r, x) for r, x in zip(split.refs, recon)]))


@pytest.fixture(scope="module")
def trained(desk_dataset):
    """e2e and greedy networks at N=4 plus a deeper greedy network at N=12."""
    data = _as_train_data(desk_dataset["train"])
    out = {}
    t0 = time.perf_counter()
    for name, n, m, strategy in (
        ("e2e_n4", 4, 4, "e2e_bp"),
        ("gleam_n4", 4, 4, "gleam"),
    ):
        net = build_network("pgd", data.model, n, m, features=FEATURES, seed=1)
        report = train(net, data, TrainConfig(strategy=strategy,
                                              total_steps=TRAIN_STEPS,
                                              batch_size=BATCH, lr=LR, seed=0))
        out[name] = (net, report)
    out["pair_minutes"] = (time.perf_counter() - t0) / 60.0
    net = build_network("pgd", data.model, 12, 3, features=FEATURES, seed=1)
    report = train(net, data, TrainConfig(strategy="gleam",
                                          total_steps=TRAIN_STEPS,
                                          batch_size=BATCH, lr=LR, seed=0))
    out["gleam_n12"] = (net, report)
    return out


# -------------------------------------------------------------- criterion 1

def test_criterion_1_adjointness():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        accel = 2.0 if trial % 2 == 0 else 4.0
        mask = make_mask(MaskSpec("poisson_disc_2d", accel, 8, seed=trial), (64, 64))
        maps = make_coil_maps(4, 64, 64, seed=1000 + trial)
        model = SensingModel(mask, maps)
        x = crandn(rng, 1, 64, 64)
        y = crandn(rng, 1, 4, 64, 64)
        ax = forward_a(model, x)
        aty = adjoint_a(model, y)
        err = abs(np.vdot(ax, y) - np.vdot(x, aty))
        scale = np.linalg.norm(ax) * np.linalg.norm(y)
        worst = max(worst, err / scale)
    elapsed = time.perf_counter() - t0
    _report(1, worst < 1e-10 and elapsed < 10.0,
            f"worst rel err {worst:.2e}, {elapsed:.1f}s for 100 models")


# -------------------------------------------------------------- criterion 2

def _fd_check(build, x, tol=1e-5):
    t = Tape()
    xv = t.capture(x)
    t.backward(build(t, xv))
    g_ad = xv.captured_grad

    def f(xx):
        tt = Tape(recording=False)
        return float(build(tt, tt.constant(xx)).data)

    return rel_err(g_ad, fd_gradient(f, x))


def test_criterion_2_gradient_correctness():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    mask = (rng.uniform(size=(4, 4)) > 0.4).astype(np.float64)
    wc = crandn(rng, 2, 4, 4)
    wr = rng.normal(size=(2, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    spec_mask = make_mask(MaskSpec("poisson_disc_2d", 2.0, 4, seed=1), (8, 8))
    model = SensingModel(spec_mask, make_coil_maps(2, 8, 8, seed=2), mu=4.0)
    y_meas = forward_a(model, crandn(rng, 1, 8, 8))
    rhs = adjoint_a(model, y_meas)
    x_real = rng.normal(size=(2, 2, 4, 4))
    x_real = np.where(np.abs(x_real) < 0.1, x_real + 0.3, x_real)

    checks = {
        "add": (lambda t, x: ops.sum_abs2(ops.add(x, t.constant(wc))), crandn(rng, 2, 4, 4)),
        "sub": (lambda t, x: ops.sum_abs2(ops.sub(x, t.constant(wc))), crandn(rng, 2, 4, 4)),
        "scalar_mul": (lambda t, x: ops.sum_abs2(ops.scalar_mul(1.3 - 0.7j, x)), crandn(rng, 2, 4, 4)),
        "elementwise_mul": (lambda t, x: ops.sum_abs2(ops.elementwise_mul(x, t.constant(wc))), crandn(rng, 2, 4, 4)),
        "conv2d": (lambda t, x: ops.sum_abs2(ops.conv2d(x, t.constant(k))), rng.normal(size=(2, 2, 4, 4))),
        "conv2d_kernel": (lambda t, kk: ops.sum_abs2(ops.conv2d(t.constant(wr), kk)), k),
        "bias_add": (lambda t, b: ops.sum_abs2(ops.bias_add(ops.conv2d(t.constant(wr), t.constant(k)), b)), bias),
        "relu": (lambda t, x: ops.sum_abs2(ops.relu(x)), x_real),
        "fft2": (lambda t, x: ops.sum_abs2(ops.fft2(x)), crandn(rng, 1, 4, 4)),
        "ifft2": (lambda t, x: ops.sum_abs2(ops.ifft2(x)), crandn(rng, 1, 4, 4)),
        "mask_apply": (lambda t, x: ops.sum_abs2(ops.mask_apply(x, mask)), crandn(rng, 1, 4, 4)),
        "complex_to_channels": (lambda t, x: ops.sum_abs2(ops.complex_to_channels(x)), crandn(rng, 2, 4, 4)),
        "channels_to_complex": (lambda t, x: ops.sum_abs2(ops.channels_to_complex(x)), rng.normal(size=(2, 2, 4, 4))),
        "reshape": (lambda t, x: ops.sum_abs2(ops.reshape(x, (2, 1, 4, 4))), crandn(rng, 2, 4, 4)),
        "sum_coils": (lambda t, x: ops.sum_abs2(ops.sum_coils(x)), crandn(rng, 2, 3, 4, 4)),
        "sum_real": (lambda t, x: ops.sum_real(ops.elementwise_mul(x, t.constant(wc))), crandn(rng, 2, 4, 4)),
        "sum_abs2": (lambda t, x: ops.sum_abs2(x), crandn(rng, 2, 4, 4)),
        "l1_complex": (lambda t, x: ops.l1_complex(x, t.constant(wc)), wc + crandn(rng, 2, 4, 4)),
        "dc_step": (lambda t, x: ops.sum_abs2(taped_dc_step(model, x, t.constant(y_meas))), crandn(rng, 1, 8, 8)),
        "cg_dc": (lambda t, x: ops.sum_abs2(taped_cg_dc(model, x, rhs, n_iters=30)), crandn(rng, 1, 8, 8)),
    }
    worst_name, worst = "", 0.0
    for name, (build, x) in checks.items():
        err = _fd_check(build, x)
        if err > worst:
            worst_name, worst = name, err
    assert worst < 1e-5, f"primitive {worst_name} FD error {worst:.2e}"

    # 2-module unrolled gradient-descent network, every parameter probed.
    # central differences are only a valid oracle away from the relu/l1 kinks,
    # so pick the data seed deterministically such that every pre-activation
    # and residual clears the finite-difference step by a wide margin
    net = build_network("pgd", model, n_iters=2, n_modules=2, features=4, seed=3)
    prng = np.random.default_rng(11)
    for p in net.parameters():
        p.value = prng.normal(scale=0.1, size=p.value.shape)

    def kink_margin(x_img, ref):
        import dataclasses

        from unrolled_mri.tensor_core.tape import PRIMITIVES

        prim = PRIMITIVES["relu"]
        seen = []

        def probe(d, aux):
            seen.append(float(np.min(np.abs(d[0]))))
            return np.maximum(d[0], 0.0)

        PRIMITIVES["relu"] = dataclasses.replace(prim, forward=probe)
        try:
            t = Tape(recording=False)
            yv = t.constant(y_meas)
            out = net.forward_module(1, t.constant(x_img), yv)
            out = net.forward_module(2, out, yv)
        finally:
            PRIMITIVES["relu"] = prim
        resid = float(np.min(np.abs(out.data - ref)))
        return min(min(seen), resid)

    for data_seed in range(100, 200):
        drng = np.random.default_rng(data_seed)
        x_img = crandn(drng, 1, 8, 8)
        ref = crandn(drng, 1, 8, 8)
        if kink_margin(x_img, ref) > 1e-4:
            break
    else:
        pytest.fail("no kink-safe data seed found")

    def loss_with(pvals):
        for p, v in zip(net.parameters(), pvals):
            p.value = v
        t = Tape(recording=False)
        yv = t.constant(y_meas)
        xv = t.constant(x_img)
        out = net.forward_module(1, xv, yv)
        out = net.forward_module(2, out, yv)
        return float(ops.l1_complex(out, t.constant(ref)).data)

    t = Tape()
    yv = t.constant(y_meas)
    out = net.forward_module(1, t.constant(x_img), yv)
    out = net.forward_module(2, out, yv)
    t.backward(ops.l1_complex(out, t.constant(ref)))
    base_vals = [p.value.copy() for p in net.parameters()]
    # sampled coordinates from every parameter, one aggregate comparison so
    # near-zero individual entries cannot amplify finite-difference rounding
    ad_entries, fd_entries = [], []
    for pi, p in enumerate(net.parameters()):
        coords = sample_coords(p.value.shape, prng, k=3)
        def f_scalar(v, pi=pi):
            vals = [b.copy() for b in base_vals]
            vals[pi] = v
            return loss_with(vals)
        g_fd = fd_gradient(f_scalar, base_vals[pi], coords=coords)
        for c in coords:
            ad_entries.append(p.grad[c])
            fd_entries.append(g_fd[c])
    loss_with(base_vals)
    net.zero_grad()
    net_err = rel_err(np.asarray(ad_entries), np.asarray(fd_entries))
    elapsed = time.perf_counter() - t0
    _report(2, net_err < 1e-5 and elapsed < 60.0,
            f"primitive worst {worst:.2e}, net sampled-coord err {net_err:.2e}, "
            f"{elapsed:.1f}s")


# -------------------------------------------------------------- criterion 3

def test_criterion_3_checkpointing_equals_bp():
    mask = make_mask(MaskSpec("poisson_disc_2d", 4.0, 8, seed=3), (32, 32))
    maps = make_coil_maps(4, 32, 32, seed=4)
    model = SensingModel(mask, maps, mu=4.0)
    refs = np.stack([make_phantom(32, 32, seed=50 + i) for i in range(8)])
    kspace = forward_a(model, refs)
    x0_all = adjoint_a(model, kspace)

    net_a = build_network("modl", model, 4, 4, features=FEATURES, seed=21)
    net_b = build_network("modl", model, 4, 4, features=FEATURES, seed=21)
    adam_a, adam_b = Adam(LR), Adam(LR)
    rng = np.random.default_rng(9)
    worst_delta = 0.0
    peak_e2e = peak_ckpt = 0
    for step in range(10):
        idx = rng.choice(8, size=2, replace=False)
        y, ref, x0 = kspace[idx], refs[idx], x0_all[idx]
        strategy_gradients(net_a, y, ref, x0, "e2e_bp")
        # strategy_gradients zeroes grads afterwards; redo to keep them
        from unrolled_mri.train_strategies import _e2e_backward

        net_a.zero_grad()
        _, pk_a, _, _ = _e2e_backward(net_a, y, ref, x0, checkpointed=False)
        adam_a.step(net_a.parameters())
        net_a.zero_grad()
        net_a.enforce_contraction(0.9)

        net_b.zero_grad()
        _, pk_b, _, _ = _e2e_backward(net_b, y, ref, x0, checkpointed=True)
        adam_b.step(net_b.parameters())
        net_b.zero_grad()
        net_b.enforce_contraction(0.9)

        peak_e2e, peak_ckpt = pk_a, pk_b
        for pa, pb in zip(net_a.parameters(), net_b.parameters()):
            worst_delta = max(worst_delta, rel_err(pb.value, pa.value))
    predicted = predict_peak_elements(net_b, "checkpointing", 2)
    ok = (worst_delta < 1e-8 and peak_ckpt < peak_e2e and peak_ckpt == predicted)
    _report(3, ok, f"10-step worst param dev {worst_delta:.2e}, "
                   f"peak {peak_ckpt} (analytic {predicted}) < e2e {peak_e2e}")


# -------------------------------------------------------------- criterion 4

def _perturbed_modl(model, cg_iters, seed=15):
    net = build_network("modl", model, 4, 4, features=FEATURES, seed=seed,
                        cg_iters=cg_iters)
    rng = np.random.default_rng(1)
    for block in net.blocks:
        for conv in block.convs():
            conv.weight.value = rng.normal(scale=0.2, size=conv.weight.value.shape)
    net.enforce_contraction(0.9)
    return net


def _grad_gap(net, data, n_cp=0):
    y, ref = data.kspace[:2], data.refs[:2]
    x0 = adjoint_a(data.model, y)
    g_ref = strategy_gradients(net, y, ref, x0, "e2e_bp")
    g_mel = strategy_gradients(net, y, ref, x0, "mel", n_cp=n_cp)
    num = sum(float(np.sum(np.abs(g_mel[p] - g_ref[p]) ** 2)) for p in g_ref)
    den = sum(float(np.sum(np.abs(g_ref[p]) ** 2)) for p in g_ref)
    return (num / den) ** 0.5


def test_criterion_4_mel_gradients():
    mask = make_mask(MaskSpec("poisson_disc_2d", 4.0, 8, seed=5), (32, 32))
    maps = make_coil_maps(4, 32, 32, seed=6)
    refs = np.stack([make_phantom(32, 32, seed=70 + i) for i in range(4)])

    model_good = SensingModel(mask, maps, mu=4.0)
    data_good = TrainData(refs=refs, kspace=forward_a(model_good, refs),
                          model=model_good)
    net = _perturbed_modl(model_good, cg_iters=30)
    # precondition: the CG solve is genuinely converged
    y = data_good.kspace[:2]
    rhs = adjoint_a(model_good, y)
    z = adjoint_a(model_good, y)
    resid = cg_residual(model_good, cg_solve(model_good, rhs, z, 30), rhs, z)
    gap_good = _grad_gap(net, data_good, n_cp=0)

    model_bad = SensingModel(mask, maps, mu=0.05)
    data_bad = TrainData(refs=refs, kspace=forward_a(model_bad, refs),
                         model=model_bad)
    net_bad = _perturbed_modl(model_bad, cg_iters=1)
    gap_bad = _grad_gap(net_bad, data_bad, n_cp=0)

    ok = resid < 1e-10 and gap_good < 1e-4 and gap_bad > 1e-2
    _report(4, ok, f"cg residual {resid:.1e}; converged gap {gap_good:.2e} < 1e-4; "
                   f"truncated gap {gap_bad:.2e} > 1e-2")


# -------------------------------------------------------------- criterion 5

def test_criterion_5_pgleam_equals_gleam():
    mask = make_mask(MaskSpec("poisson_disc_2d", 2.0, 4, seed=7), (16, 16))
    maps = make_coil_maps(2, 16, 16, seed=8)
    model = SensingModel(mask, maps)
    refs = np.stack([make_phantom(16, 16, seed=90 + i) for i in range(6)])
    data = TrainData(refs=refs, kspace=forward_a(model, refs), model=model)
    cfg = dict(total_steps=10, batch_size=2, seed=4)
    net_a = build_network("pgd", model, 4, 4, features=FEATURES, seed=33)
    train(net_a, data, TrainConfig(strategy="gleam", **cfg))
    net_b = build_network("pgd", model, 4, 4, features=FEATURES, seed=33)
    train(net_b, data, TrainConfig(strategy="gleam", workers=2, **cfg))
    dev = max(float(np.max(np.abs(pa.value - pb.value)))
              for pa, pb in zip(net_a.parameters(), net_b.parameters()))
    _report(5, dev < 1e-12, f"D=2 vs serial max parameter deviation {dev:.2e}")


# -------------------------------------------------------------- criterion 6

def test_criterion_6_memory_ratio(desk_dataset):
    data = _as_train_data(desk_dataset["train"])
    cfg = dict(total_steps=1, batch_size=BATCH, seed=0)
    net = build_network("pgd", data.model, 4, 4, features=FEATURES, seed=1)
    rep_gleam = train(net, data, TrainConfig(strategy="gleam", **cfg))
    net = build_network("pgd", data.model, 4, 4, features=FEATURES, seed=1)
    rep_e2e = train(net, data, TrainConfig(strategy="e2e_bp", **cfg))
    ratio = rep_gleam.peak_activation_elements / rep_e2e.peak_activation_elements
    _report(6, ratio <= 1.1 / 4,
            f"peak ratio {ratio:.4f} <= 1.1/M "
            f"({rep_gleam.peak_activation_elements} vs {rep_e2e.peak_activation_elements})")


# -------------------------------------------------------------- criteria 7-10

def test_criterion_7_generalization_parity(desk_dataset, trained):
    p_e2e = _test_psnr(trained["e2e_n4"][0], desk_dataset["test"])
    p_gleam = _test_psnr(trained["gleam_n4"][0], desk_dataset["test"])
    gap = abs(p_gleam - p_e2e)
    minutes = trained["pair_minutes"]
    _report(7, gap <= 0.5 and minutes <= 30.0,
            f"e2e {p_e2e:.2f} dB vs greedy {p_gleam:.2f} dB (gap {gap:.2f}), "
            f"{minutes:.1f} min for both runs")


def test_criterion_8_capacity_at_fixed_memory(desk_dataset, trained):
    p_e2e = _test_psnr(trained["e2e_n4"][0], desk_dataset["test"])
    p_deep = _test_psnr(trained["gleam_n12"][0], desk_dataset["test"])
    # same per-module activation footprint by construction
    deep_net = trained["gleam_n12"][0]
    e2e_net = trained["e2e_n4"][0]
    per_module = predict_peak_elements(deep_net, "gleam", BATCH)
    full_e2e = predict_peak_elements(e2e_net, "e2e_bp", BATCH)
    _report(8, p_deep >= p_e2e + 0.3 and per_module <= full_e2e,
            f"deep greedy {p_deep:.2f} dB vs e2e {p_e2e:.2f} dB "
            f"(gain {p_deep - p_e2e:.2f}); module peak {per_module} <= e2e {full_e2e}")


def test_criterion_9_stagewise_monotonicity(desk_dataset, trained):
    net = _with_model(trained["gleam_n4"][0], desk_dataset["test"].model())
    rows = inference_sweep(net, desk_dataset["test"])
    vals = [r["psnr"] for r in rows]
    drops = [vals[i + 1] - vals[i] for i in range(len(vals) - 1)]
    ok = all(d >= -0.1 for d in drops)
    _report(9, ok, f"stage PSNRs {[round(v, 2) for v in vals]} (min step {min(drops):.3f})")


def test_criterion_10_cs_inferiority(desk_dataset, trained):
    test = desk_dataset["test"]
    model = test.model()
    best_cs = -np.inf
    for lam in (5e-4, 1e-3, 2e-3, 5e-3):
        recs = np.stack([
            cs_reconstruct(model, test.kspace[i], CsConfig(lam=lam, iterations=100))
            for i in range(test.n_items)
        ])
        val = float(np.mean([psnr(r, x) for r, x in zip(test.refs, recs)]))
        best_cs = max(best_cs, val)
    p_gleam = _test_psnr(trained["gleam_n4"][0], test)
    _report(10, p_gleam > best_cs,
            f"greedy {p_gleam:.2f} dB > tuned cs {best_cs:.2f} dB")


# -------------------------------------------------------------- criterion 11

def test_criterion_11_cs_descent():
    worst = -np.inf
    for trial in range(20):
        rng = np.random.default_rng(trial)
        mask = make_mask(MaskSpec("poisson_disc_2d", 4.0, 8, seed=trial), (32, 32))
        maps = make_coil_maps(4, 32, 32, seed=trial + 1)
        model = SensingModel(mask, maps)
        x = crandn(rng, 32, 32)
        y = forward_a(model, x[None])[0]
        _, objs = cs_reconstruct(model, y, CsConfig(lam=2e-3, iterations=100),
                                 return_objectives=True)
        worst = max(worst, float(np.max(np.diff(np.asarray(objs)))))
    _report(11, worst <= 1e-10, f"max objective increase over 20 problems {worst:.2e}")


# -------------------------------------------------------------- criterion 12

def test_criterion_12_determinism(tmp_path):
    ds = tmp_path / "ds"
    rc = cli_main([
        "generate", "--out", str(ds), "--train", "6", "--val", "2", "--test", "2",
        "--height", "16", "--width", "16", "--coils", "2",
        "--acceleration", "2.0", "--calibration", "4", "--seed", "3",
    ])
    assert rc == 0
    reports = []
    manifests = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli_main([
            "train", "--dataset", str(ds), "--out", str(out),
            "--kind", "pgd", "--n-iters", "2", "--modules", "2",
            "--features", "4", "--strategy", "checkpointing",
            "--batch-size", "2", "--total-steps", "5", "--seed", "1",
        ])
        assert rc == 0
        rep = json.loads((out / "report.json").read_text())
        rep.pop("timing")
        reports.append(json.dumps(rep, sort_keys=True))
        manifests.append(json.loads((out / "manifest.json").read_text())["config_hash"])
    ok = reports[0] == reports[1] and manifests[0] == manifests[1]
    _report(12, ok, "identical manifests give bit-identical numeric reports")
