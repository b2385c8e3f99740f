"""Training strategies for unrolled networks.

Four ways to compute parameter updates for the same network:

* ``e2e_bp``        one tape across all N iterations, joint update.
* ``checkpointing`` each iteration wrapped in a recompute-on-backward segment,
                    so only iterate-sized boundary values persist forward.
* ``mel``           memory-efficient invertible backward: the forward pass
                    stores a small set of boundary checkpoints, and backward
                    reconstructs each iteration's input by inverting the CNN
                    (fixed point) and the CG data-consistency step (closed
                    form), falling back to the nearest checkpoint when the
                    inversion does not converge.
* ``gleam``         greedy module-wise training: each module has its own tape
                    and local loss against the fully sampled target, updated
                    before its detached output is handed to the next module.
                    With ``workers`` > 1 the module updates of each block of D
                    consecutive modules run concurrently on worker threads;
                    parameter trajectories are numerically identical to the
                    serial schedule because module parameters are disjoint and
                    every forward consumes pre-update values.

All strategies share the Adam optimizer (bias-corrected, applied to the real
pair view of any complex parameter) and the complex l1 training loss. Peak
activation elements are tracked by the tapes and cross-checked against the
analytic schedule in :func:`predict_peak_elements`.
"""

from __future__ import annotations

import hashlib
import json
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DivergenceError, InversionError, NumericError
from .mri_physics import SensingModel, adjoint_a, cg_inverse
from .tensor_core import Parameter, ShapeTape, ShapeTensor, Tape, Tensor
from .tensor_core import ops
from .unrolled_nets import UnrolledNetwork

STRATEGIES = ("e2e_bp", "checkpointing", "mel", "gleam")


@dataclass
class TrainConfig:
    strategy: str = "e2e_bp"
    workers: int = 1
    batch_size: int = 2
    total_steps: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_cp: Optional[int] = None
    seed: int = 0
    eval_every: int = 0
    contraction_limit: float = 0.9
    lr_per_module: Optional[tuple] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.workers > 1 and self.strategy != "gleam":
            raise ConfigError("multiple workers apply to the gleam strategy only")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")

    def module_lr(self, m: int) -> float:
        if self.lr_per_module is None:
            return self.lr
        return float(self.lr_per_module[m - 1])

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "workers": self.workers,
            "batch_size": self.batch_size,
            "total_steps": self.total_steps,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "n_cp": self.n_cp,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "contraction_limit": self.contraction_limit,
            "lr_per_module": list(self.lr_per_module) if self.lr_per_module else None,
        }


@dataclass
class TrainData:
    """Training items sharing one sensing model."""

    refs: np.ndarray  # (n, H, W) complex
    kspace: np.ndarray  # (n, C, H, W) complex
    model: SensingModel

    def __post_init__(self):
        if self.refs.shape[0] != self.kspace.shape[0]:
            raise ConfigError("refs and kspace item counts differ")

    @property
    def n_items(self) -> int:
        return self.refs.shape[0]


@dataclass
class TrainReport:
    strategy: str
    loss_trace: list
    peak_activation_elements: int
    predicted_peak_elements: int
    timing: dict
    val_trace: list
    n_parameters: int
    config: dict
    numeric_digest: str
    snapshot_path: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TrainReport":
        return TrainReport(**json.loads(text))


# ------------------------------------------------------------------- Adam

def adam_step(
    params: list[Parameter],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update on the real-pair view of each parameter.

    ``state`` maps parameter ids to [m, v, t] and is created on first use.
    Parameters without an accumulated gradient are treated as zero-gradient.
    """
    for p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.value)
        if np.iscomplexobj(p.value):
            val = np.stack([p.value.real, p.value.imag])
            gr = np.stack([g.real, g.imag])
        else:
            val = p.value
            gr = g
        if p.pid not in state:
            state[p.pid] = [np.zeros_like(val), np.zeros_like(val), 0]
        m, v, t = state[p.pid]
        t += 1
        m = beta1 * m + (1.0 - beta1) * gr
        v = beta2 * v + (1.0 - beta2) * gr * gr
        state[p.pid] = [m, v, t]
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        val = val - lr * m_hat / (np.sqrt(v_hat) + eps)
        if np.iscomplexobj(p.value):
            p.value = val[0] + 1j * val[1]
        else:
            p.value = val


class Adam:
    """Stateful wrapper around :func:`adam_step`."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self, params: list[Parameter], lr: Optional[float] = None) -> None:
        adam_step(params, self.state, lr if lr is not None else self.lr,
                  self.beta1, self.beta2, self.eps)


def loss_complex_l1_np(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean complex modulus of the residual (plain-array version of the tape op)."""
    return float(np.mean(np.abs(pred - target)))


# ------------------------------------------------------------- accounting

def mel_checkpoint_indices(n_iters: int, n_cp: int) -> list[int]:
    """Boundary indices (inputs of iterations 1..N-1) stored by hybrid inversion."""
    if n_cp <= 0:
        return []
    raw = {int(round(j * n_iters / (n_cp + 1))) for j in range(1, n_cp + 1)}
    return sorted(b for b in raw if 1 <= b <= n_iters - 1)


def default_mel_n_cp(n_iters: int) -> int:
    # keep the paper-scale ratio of stored boundaries to iterations (7 of 8)
    return min(n_iters - 1, max(1, round(0.875 * n_iters)))


def _iteration_saved_elements(net: UnrolledNetwork, batch_size: int) -> int:
    """Elements retained by one recorded unrolled iteration (shape-level replay)."""
    st = ShapeTape()
    h, w = net.model.image_shape
    x = ShapeTensor(st, (batch_size, h, w), np.complex128)
    y = ShapeTensor(st, (batch_size, net.model.n_coils, h, w), np.complex128)
    net.forward_iteration(0, x, y, rhs=np.empty(0))
    return st.saved_elements


def _loss_saved_elements(batch_size: int, h: int, w: int) -> int:
    st = ShapeTape()
    pred = ShapeTensor(st, (batch_size, h, w), np.complex128)
    ref = ShapeTensor(st, (batch_size, h, w), np.complex128)
    ops.l1_complex(pred, ref)
    return st.saved_elements


def predict_peak_elements(
    net: UnrolledNetwork,
    strategy: str,
    batch_size: int,
    n_cp: Optional[int] = None,
) -> int:
    """Analytic peak of the live-activation counter for one training step.

    Derived from the per-primitive save schedule: E_iter elements per recorded
    iteration, E_loss for the loss node, and B_img = batch*H*W for one complex
    iterate (a checkpoint).

      e2e_bp         N * E_iter + E_loss        (peak at end of forward)
      checkpointing  N * B_img + max(E_iter, E_loss)
      gleam          (N/M) * E_iter + E_loss    (per-module tape)
      mel            stored(n_cp) * B_img + max(E_iter, E_loss)
    """
    h, w = net.model.image_shape
    e_iter = _iteration_saved_elements(net, batch_size)
    e_loss = _loss_saved_elements(batch_size, h, w)
    b_img = batch_size * h * w
    n = net.n_iters
    if strategy == "e2e_bp":
        return n * e_iter + e_loss
    if strategy == "checkpointing":
        return n * b_img + max(e_iter, e_loss)
    if strategy == "gleam":
        return net.iters_per_module * e_iter + e_loss
    if strategy == "mel":
        if n_cp is None:
            n_cp = default_mel_n_cp(n)
        stored = len(mel_checkpoint_indices(n, n_cp))
        return stored * b_img + max(e_iter, e_loss)
    raise ConfigError(f"unknown strategy {strategy!r}")


# ------------------------------------------------------------- batching

def _batch_indices(rng: np.random.Generator, n_items: int, batch_size: int) -> np.ndarray:
    if batch_size > n_items:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n_items}")
    return rng.choice(n_items, size=batch_size, replace=False)


def _check_finite_loss(value: float) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"training loss became non-finite ({value})")


class _Timer:
    def __init__(self):
        self.forward = 0.0
        self.backward = 0.0
        self.steps = 0

    def timing(self, merged: bool = False, total: Optional[float] = None) -> dict:
        n = max(self.steps, 1)
        if merged:
            return {"step_s": (total or 0.0) / n, "merged": True}
        return {
            "forward_s": self.forward / n,
            "backward_s": self.backward / n,
            "step_s": (self.forward + self.backward) / n,
            "merged": False,
        }


def _digest(loss_trace, params: list[Parameter]) -> str:
    sha = hashlib.sha256()
    sha.update(np.asarray(loss_trace, dtype=np.float64).tobytes())
    for p in params:
        sha.update(np.ascontiguousarray(p.value).tobytes())
    return sha.hexdigest()


def _maybe_validate(net, val_data, step, cfg, val_trace):
    if val_data is None or cfg.eval_every <= 0:
        return
    if (step + 1) % cfg.eval_every != 0 and step + 1 != cfg.total_steps:
        return
    from .data_metrics import nrmse, psnr

    recon = net.forward_full(val_data.kspace)
    ps = [psnr(r, x) for r, x in zip(val_data.refs, recon)]
    ns = [nrmse(r, x) for r, x in zip(val_data.refs, recon)]
    val_trace.append({
        "step": step + 1,
        "psnr": float(np.mean(ps)),
        "nrmse": float(np.mean(ns)),
    })


# ------------------------------------------------------------- strategies

def train(
    net: UnrolledNetwork,
    data: TrainData,
    cfg: TrainConfig,
    val_data: Optional[TrainData] = None,
) -> TrainReport:
    """Run the configured strategy and return its report."""
    if cfg.strategy == "mel":
        if net.kind != "modl" or not net.invertible:
            raise ConfigError(
                "mel requires a modl network with invertible proximal blocks"
            )
    if cfg.strategy == "gleam" and cfg.workers > 1:
        if net.n_modules % cfg.workers != 0:
            raise ConfigError(
                f"workers {cfg.workers} must divide module count {net.n_modules}"
            )
        return _train_gleam_parallel(net, data, cfg, val_data)
    if cfg.strategy == "e2e_bp":
        return _train_serial(net, data, cfg, val_data, checkpointed=False)
    if cfg.strategy == "checkpointing":
        return _train_serial(net, data, cfg, val_data, checkpointed=True)
    if cfg.strategy == "mel":
        return _train_mel(net, data, cfg, val_data)
    return _train_gleam(net, data, cfg, val_data)


def train_e2e(net, data, cfg, val_data=None) -> TrainReport:
    return _train_serial(net, data, cfg, val_data, checkpointed=False)


def train_checkpointed(net, data, cfg, val_data=None) -> TrainReport:
    return _train_serial(net, data, cfg, val_data, checkpointed=True)


def train_mel(net, data, cfg, val_data=None) -> TrainReport:
    if net.kind != "modl" or not net.invertible:
        raise ConfigError("mel requires a modl network with invertible proximal blocks")
    return _train_mel(net, data, cfg, val_data)


def train_gleam(net, data, cfg, val_data=None) -> TrainReport:
    if cfg.workers > 1:
        return _train_gleam_parallel(net, data, cfg, val_data)
    return _train_gleam(net, data, cfg, val_data)


def train_gleam_parallel(net, data, cfg, val_data=None) -> TrainReport:
    return _train_gleam_parallel(net, data, cfg, val_data)


def _precompute_x0(data: TrainData) -> np.ndarray:
    return adjoint_a(data.model, data.kspace)


def _e2e_backward(net, y, ref, x0, checkpointed: bool):
    """One forward+backward pass; gradients are left on the parameters.

    Returns (loss value, tape peak, seconds forward, seconds backward).
    """
    t0 = time.perf_counter()
    tape = Tape()
    yv = tape.constant(y)
    refv = tape.constant(ref)
    x = tape.constant(x0)
    for i in range(net.n_iters):
        if checkpointed:
            x = tape.checkpoint(
                lambda xin, i=i: net.forward_iteration(i, xin, yv, rhs=x0),
                [x],
            )
        else:
            x = net.forward_iteration(i, x, yv, rhs=x0)
    loss = ops.l1_complex(x, refv)
    t1 = time.perf_counter()
    loss_val = float(loss.data)
    _check_finite_loss(loss_val)
    tape.backward(loss)
    t2 = time.perf_counter()
    return loss_val, tape.peak_activation_elements, t1 - t0, t2 - t1


def _mel_backward(net, y, ref, x0, n_cp):
    """Invertible backward pass; gradients are left on the parameters.

    Returns (loss value, peak over all tapes incl. checkpoint storage,
    seconds forward, seconds backward).
    """
    ckpt_idx = mel_checkpoint_indices(net.n_iters, n_cp)
    h, w = net.model.image_shape
    held = len(ckpt_idx) * y.shape[0] * h * w
    eager = Tape(recording=False)
    t0 = time.perf_counter()
    yv = Tensor(eager, None, y)
    store: dict[int, np.ndarray] = {}
    x = x0
    for i in range(net.n_iters):
        x = net.forward_iteration(i, Tensor(eager, None, x), yv, rhs=x0).data
        if i + 1 in ckpt_idx:
            store[i + 1] = x
    pred = x
    t1 = time.perf_counter()
    ltape = Tape(baseline_elements=held)
    pv = ltape.capture(pred)
    loss = ops.l1_complex(pv, ltape.constant(ref))
    loss_val = float(loss.data)
    _check_finite_loss(loss_val)
    ltape.backward(loss)
    g = pv.captured_grad
    peak = ltape.peak_activation_elements
    x_hi = pred
    for i in range(net.n_iters - 1, -1, -1):
        if i == 0:
            x_lo = x0
        elif i in store:
            x_lo = store[i]
        else:
            x_lo = _mel_reconstruct_input(net, i, x_hi, x0, y, store, eager)
        t = Tape(baseline_elements=held)
        xv = t.capture(x_lo)
        out = net.forward_iteration(i, xv, t.constant(y), rhs=x0)
        t.backward(out, seed=g)
        g = xv.captured_grad
        peak = max(peak, t.peak_activation_elements)
        x_hi = x_lo
    t2 = time.perf_counter()
    return loss_val, peak, t1 - t0, t2 - t1


def strategy_gradients(net, y, ref, x0, strategy: str, n_cp=None) -> dict:
    """Gradients of the training loss for one batch, keyed by parameter id.

    Runs the strategy's forward/backward machinery without any update; useful
    for cross-strategy gradient comparisons. The gleam strategy interleaves
    updates with its forwards, so it is not expressible as one gradient.
    """
    if strategy == "mel" and (net.kind != "modl" or not net.invertible):
        raise ConfigError("mel requires a modl network with invertible proximal blocks")
    net.zero_grad()
    if strategy == "e2e_bp":
        _e2e_backward(net, y, ref, x0, checkpointed=False)
    elif strategy == "checkpointing":
        _e2e_backward(net, y, ref, x0, checkpointed=True)
    elif strategy == "mel":
        if n_cp is None:
            n_cp = default_mel_n_cp(net.n_iters)
        _mel_backward(net, y, ref, x0, n_cp)
    else:
        raise ConfigError(f"no single-pass gradient for strategy {strategy!r}")
    grads = {p.pid: (np.zeros_like(p.value) if p.grad is None else p.grad.copy())
             for p in net.parameters()}
    net.zero_grad()
    return grads


def _train_serial(net, data, cfg, val_data, checkpointed: bool) -> TrainReport:
    rng = np.random.default_rng(cfg.seed)
    x0_all = _precompute_x0(data)
    adam = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    params = net.parameters()
    losses = []
    val_trace: list = []
    peak = 0
    timer = _Timer()
    for step in range(cfg.total_steps):
        idx = _batch_indices(rng, data.n_items, cfg.batch_size)
        y, ref, x0 = data.kspace[idx], data.refs[idx], x0_all[idx]
        loss_val, step_peak, t_fwd, t_bwd = _e2e_backward(
            net, y, ref, x0, checkpointed
        )
        t2 = time.perf_counter()
        adam.step(params)
        net.zero_grad()
        net.enforce_contraction(cfg.contraction_limit)
        timer.forward += t_fwd
        timer.backward += t_bwd + (time.perf_counter() - t2)
        timer.steps += 1
        losses.append(loss_val)
        peak = max(peak, step_peak)
        _maybe_validate(net, val_data, step, cfg, val_trace)
    strategy = "checkpointing" if checkpointed else "e2e_bp"
    return TrainReport(
        strategy=strategy,
        loss_trace=losses,
        peak_activation_elements=peak,
        predicted_peak_elements=predict_peak_elements(net, strategy, cfg.batch_size),
        timing=timer.timing(),
        val_trace=val_trace,
        n_parameters=sum(p.value.size for p in params),
        config=cfg.to_dict(),
        numeric_digest=_digest(losses, params),
    )


def _train_mel(net, data, cfg, val_data) -> TrainReport:
    rng = np.random.default_rng(cfg.seed)
    x0_all = _precompute_x0(data)
    adam = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    params = net.parameters()
    n_cp = cfg.n_cp if cfg.n_cp is not None else default_mel_n_cp(net.n_iters)
    losses = []
    val_trace: list = []
    peak = 0
    timer = _Timer()
    for step in range(cfg.total_steps):
        idx = _batch_indices(rng, data.n_items, cfg.batch_size)
        y, ref, x0 = data.kspace[idx], data.refs[idx], x0_all[idx]
        loss_val, step_peak, t_fwd, t_bwd = _mel_backward(net, y, ref, x0, n_cp)
        t2 = time.perf_counter()
        adam.step(params)
        net.zero_grad()
        net.enforce_contraction(cfg.contraction_limit)
        timer.forward += t_fwd
        timer.backward += t_bwd + (time.perf_counter() - t2)
        timer.steps += 1
        losses.append(loss_val)
        peak = max(peak, step_peak)
        _maybe_validate(net, val_data, step, cfg, val_trace)
    return TrainReport(
        strategy="mel",
        loss_trace=losses,
        peak_activation_elements=peak,
        predicted_peak_elements=predict_peak_elements(
            net, "mel", cfg.batch_size, n_cp=n_cp
        ),
        timing=timer.timing(),
        val_trace=val_trace,
        n_parameters=sum(p.value.size for p in params),
        config=cfg.to_dict(),
        numeric_digest=_digest(losses, params),
    )


def _mel_reconstruct_input(net, i, x_hi, x0, y, store, eager):
    """Input of iteration i, by inversion or by replay from a stored boundary."""
    try:
        u = net.blocks[i].invert(x_hi)
        return cg_inverse(net.model, u, rhs=x0)
    except InversionError:
        below = [b for b in store if b < i]
        if not below:
            raise NumericError(
                "activation inversion failed with no checkpoint to fall back on; "
                "increase n_cp until the backward pass is stable"
            ) from None
        b = max(below)
        x = store[b]
        yv = Tensor(eager, None, y)
        for j in range(b, i):
            x = net.forward_iteration(j, Tensor(eager, None, x), yv, rhs=x0).data
        return x


def _gleam_module_pass(net, m, tape, x_in, y, ref, x0):
    """Record module m's forward and local loss on ``tape``."""
    yv = tape.constant(y)
    xv = tape.constant(x_in)
    out = net.forward_module(m, xv, yv, rhs=x0)
    loss = ops.l1_complex(out, tape.constant(ref))
    return out, loss


def _train_gleam(net, data, cfg, val_data) -> TrainReport:
    rng = np.random.default_rng(cfg.seed)
    x0_all = _precompute_x0(data)
    adams = {m: Adam(cfg.module_lr(m), cfg.beta1, cfg.beta2, cfg.adam_eps)
             for m in range(1, net.n_modules + 1)}
    losses = []
    val_trace: list = []
    peak = 0
    timer = _Timer()
    for step in range(cfg.total_steps):
        idx = _batch_indices(rng, data.n_items, cfg.batch_size)
        y, ref, x0 = data.kspace[idx], data.refs[idx], x0_all[idx]
        step_losses = []
        x = x0
        for m in range(1, net.n_modules + 1):
            t0 = time.perf_counter()
            tape = Tape()
            out, loss = _gleam_module_pass(net, m, tape, x, y, ref, x0)
            t1 = time.perf_counter()
            loss_val = float(loss.data)
            _check_finite_loss(loss_val)
            tape.backward(loss)
            mod_params = net.module_parameters(m)
            adams[m].step(mod_params)
            for p in mod_params:
                p.zero_grad()
            net.enforce_contraction(cfg.contraction_limit, modules=[m])
            t2 = time.perf_counter()
            timer.forward += t1 - t0
            timer.backward += t2 - t1
            step_losses.append(loss_val)
            peak = max(peak, tape.peak_activation_elements)
            x = out.data  # detached hand-off to the next module
        timer.steps += 1
        losses.append(step_losses)
        _maybe_validate(net, val_data, step, cfg, val_trace)
    params = net.parameters()
    return TrainReport(
        strategy="gleam",
        loss_trace=losses,
        peak_activation_elements=peak,
        predicted_peak_elements=predict_peak_elements(net, "gleam", cfg.batch_size),
        timing=timer.timing(),
        val_trace=val_trace,
        n_parameters=sum(p.value.size for p in params),
        config=cfg.to_dict(),
        numeric_digest=_digest(losses, params),
    )


# --------------------------------------------------------------- P-GLEAM

class _WorkerFailure(Exception):
    def __init__(self, original: BaseException):
        super().__init__(f"worker failed: {original!r}")
        self.original = original


class _ModuleWorker(threading.Thread):
    """Owns the parameters and optimizer state of its assigned modules.

    Communication is message-passing only: forward tasks return the detached
    module output, backward tasks update the owned module in place. The
    worker's FIFO inbox preserves the per-module ordering the schedule needs.
    """

    def __init__(self, wid: int, net: UnrolledNetwork, cfg: TrainConfig):
        super().__init__(daemon=True, name=f"gleam-worker-{wid}")
        self.wid = wid
        self.net = net
        self.cfg = cfg
        self.adams = {}
        self.inbox: queue.Queue = queue.Queue()
        self._tapes: dict[int, tuple] = {}

    def run(self):
        while True:
            task = self.inbox.get()
            kind, reply = task[0], task[-1]
            if kind == "stop":
                reply.put(("ok", None))
                return
            try:
                if kind == "forward":
                    _, m, x_in, y, ref, x0, reply = task
                    tape = Tape()
                    out, loss = _gleam_module_pass(
                        self.net, m, tape, x_in, y, ref, x0
                    )
                    loss_val = float(loss.data)
                    _check_finite_loss(loss_val)
                    self._tapes[m] = (tape, loss)
                    reply.put(("ok", (out.data, loss_val)))
                elif kind == "backward":
                    _, m, reply = task
                    tape, loss = self._tapes.pop(m)
                    tape.backward(loss)
                    if m not in self.adams:
                        self.adams[m] = Adam(
                            self.cfg.module_lr(m), self.cfg.beta1,
                            self.cfg.beta2, self.cfg.adam_eps,
                        )
                    mod_params = self.net.module_parameters(m)
                    self.adams[m].step(mod_params)
                    for p in mod_params:
                        p.zero_grad()
                    self.net.enforce_contraction(
                        self.cfg.contraction_limit, modules=[m]
                    )
                    reply.put(("ok", tape.peak_activation_elements))
            except BaseException as exc:  # report failures to the orchestrator
                reply.put(("error", exc))


def _train_gleam_parallel(net, data, cfg, val_data) -> TrainReport:
    d = cfg.workers
    n_blocks = net.n_modules // d
    rng = np.random.default_rng(cfg.seed)
    x0_all = _precompute_x0(data)
    workers = [_ModuleWorker(i, net, cfg) for i in range(d)]
    for wk in workers:
        wk.start()
    losses = []
    val_trace: list = []
    peak = 0
    total_time = 0.0
    timer = _Timer()

    def _ask(worker, *task):
        reply: queue.SimpleQueue = queue.SimpleQueue()
        worker.inbox.put(task + (reply,))
        return reply

    def _get(reply):
        status, payload = reply.get()
        if status == "error":
            raise _WorkerFailure(payload)
        return payload

    try:
        for step in range(cfg.total_steps):
            idx = _batch_indices(rng, data.n_items, cfg.batch_size)
            y, ref, x0 = data.kspace[idx], data.refs[idx], x0_all[idx]
            t0 = time.perf_counter()
            x = x0
            backward_replies = []
            step_losses = [0.0] * net.n_modules
            for b in range(n_blocks):
                for wd in range(d):
                    m = b * d + wd + 1
                    x, loss_val = _get(
                        _ask(workers[wd], "forward", m, x, y, ref, x0)
                    )
                    step_losses[m - 1] = loss_val
                    # backward can begin as soon as this module's forward is
                    # done; the detached output already moved on
                    backward_replies.append(_ask(workers[wd], "backward", m))
            for reply in backward_replies:
                peak = max(peak, _get(reply))
            total_time += time.perf_counter() - t0
            timer.steps += 1
            losses.append(step_losses)
            _maybe_validate(net, val_data, step, cfg, val_trace)
    except _WorkerFailure as fail:
        _stop_workers(workers)
        partial = TrainReport(
            strategy="gleam",
            loss_trace=losses,
            peak_activation_elements=peak,
            predicted_peak_elements=predict_peak_elements(
                net, "gleam", cfg.batch_size
            ),
            timing=timer.timing(merged=True, total=total_time),
            val_trace=val_trace,
            n_parameters=sum(p.value.size for p in net.parameters()),
            config=cfg.to_dict(),
            numeric_digest="aborted",
        )
        err = NumericError(f"gleam worker aborted training: {fail.original!r}")
        err.partial_report = partial
        raise err from fail.original
    _stop_workers(workers)
    params = net.parameters()
    return TrainReport(
        strategy="gleam",
        loss_trace=losses,
        peak_activation_elements=peak,
        predicted_peak_elements=predict_peak_elements(net, "gleam", cfg.batch_size),
        timing=timer.timing(merged=True, total=total_time),
        val_trace=val_trace,
        n_parameters=sum(p.value.size for p in params),
        config=cfg.to_dict(),
        numeric_digest=_digest(losses, params),
    )


def _stop_workers(workers):
    for wk in workers:
        reply: queue.SimpleQueue = queue.SimpleQueue()
        wk.inbox.put(("stop", reply))
        reply.get()
        wk.join(timeout=10.0)
