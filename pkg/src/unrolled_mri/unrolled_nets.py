"""Unrolled reconstruction networks: data consistency + learned proximal blocks.

Two unrolling flavours share one container:

* ``pgd``: each iteration is a gradient data-consistency step followed by a
  residual CNN (two pre-activation residual blocks around a feature lift).
* ``modl``: each iteration is a CG-solved regularized inversion followed by a
  residual CNN of five convolutions with one skip connection; the CNN can be
  kept invertible (contractive residual branch) so activations can be
  reconstructed instead of stored during backward passes.

A network with N iterations is split into M modules (M divides N); module m
owns iterations [(m-1)N/M, mN/M) and their parameters exclusively, which is
what makes greedy and multi-worker training possible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InversionError, ShapeError
from .mri_physics import SensingModel, adjoint_a, taped_cg_dc, taped_dc_step
from .tensor_core import Parameter, Tape, Tensor
from .tensor_core import ops
from .tensor_core.ops import conv2d_input_grad_raw, conv2d_raw

_EAGER = Tape(recording=False)


class Conv2dLayer:
    """3x3 same-padded convolution with bias over (B,C,H,W) real tensors."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 kernel: int = 3, zero_init: bool = False, name: str = ""):
        if zero_init:
            weight = np.zeros((out_ch, in_ch, kernel, kernel))
        else:
            weight = rng.normal(scale=0.02, size=(out_ch, in_ch, kernel, kernel))
        self.weight = Parameter(weight, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        t = x.tape
        return ops.bias_add(ops.conv2d(x, t.parameter(self.weight)),
                            t.parameter(self.bias))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def spectral_norm(self, h: int, w: int, n_iters: int = 5) -> float:
        """Largest singular value of the conv operator on (C,h,w) inputs."""
        c = self.weight.value.shape[1]
        rng = np.random.default_rng(0)
        v = rng.normal(size=(1, c, h, w))
        v /= np.linalg.norm(v)
        sigma = 0.0
        for _ in range(n_iters):
            u = conv2d_raw(v, self.weight.value)
            nu = np.linalg.norm(u)
            if nu == 0.0:
                return 0.0
            u /= nu
            v = conv2d_input_grad_raw(u, self.weight.value)
            sigma = np.linalg.norm(v)
            if sigma == 0.0:
                return 0.0
            v /= sigma
        return float(sigma)


class ProximalBlock:
    """Residual CNN for unrolled gradient descent.

    Feature lift, two pre-activation residual blocks (relu-conv-relu-conv with
    skip), and a zero-initialized projection back to two channels added onto
    the complex input, so a freshly built block is the identity.
    """

    n_res_blocks = 2

    def __init__(self, features: int, rng: np.random.Generator, name: str = ""):
        self.features = features
        self.lift = Conv2dLayer(2, features, rng, name=f"{name}.lift")
        self.res = []
        for r in range(self.n_res_blocks):
            conv_a = Conv2dLayer(features, features, rng, name=f"{name}.res{r}.a")
            conv_b = Conv2dLayer(features, features, rng, zero_init=True,
                                 name=f"{name}.res{r}.b")
            self.res.append((conv_a, conv_b))
        self.proj = Conv2dLayer(features, 2, rng, zero_init=True, name=f"{name}.proj")

    def __call__(self, x: Tensor) -> Tensor:
        u = ops.complex_to_channels(x)
        hfeat = self.lift(u)
        for conv_a, conv_b in self.res:
            hfeat = ops.add(hfeat, conv_b(ops.relu(conv_a(ops.relu(hfeat)))))
        d = self.proj(hfeat)
        return ops.add(x, ops.channels_to_complex(d))

    def parameters(self) -> list[Parameter]:
        params = self.lift.parameters()
        for conv_a, conv_b in self.res:
            params += conv_a.parameters() + conv_b.parameters()
        return params + self.proj.parameters()

    def convs(self) -> list[Conv2dLayer]:
        layers = [self.lift]
        for conv_a, conv_b in self.res:
            layers += [conv_a, conv_b]
        return layers + [self.proj]

    @staticmethod
    def parameter_count(features: int, kernel: int = 3) -> int:
        k2 = kernel * kernel
        lift = features * 2 * k2 + features
        res = ProximalBlock.n_res_blocks * 2 * (features * features * k2 + features)
        proj = 2 * features * k2 + 2
        return lift + res + proj


class InvertibleProximalBlock:
    """Residual CNN x + g(x) with a contractive branch g.

    g is five convolutions (2->F->F->F->F->2) with a ReLU after each of the
    first four and a zero-initialized final layer. With the product of the
    convolution spectral norms kept below 1, the map is bijective and is
    inverted by the fixed-point iteration x <- y - g(x).
    """

    n_convs = 5

    def __init__(self, features: int, rng: np.random.Generator, name: str = "",
                 inv_tol: float = 1e-10, inv_max_iters: int = 100):
        self.features = features
        self.inv_tol = inv_tol
        self.inv_max_iters = inv_max_iters
        chans = [2] + [features] * (self.n_convs - 1) + [2]
        self.convs_list = [
            Conv2dLayer(chans[i], chans[i + 1], rng,
                        zero_init=(i == self.n_convs - 1), name=f"{name}.conv{i}")
            for i in range(self.n_convs)
        ]

    def _branch(self, u: Tensor) -> Tensor:
        h = u
        for conv in self.convs_list[:-1]:
            h = ops.relu(conv(h))
        return self.convs_list[-1](h)

    def residual(self, x: Tensor) -> Tensor:
        return ops.channels_to_complex(self._branch(ops.complex_to_channels(x)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(x, self.residual(x))

    def residual_np(self, x: np.ndarray) -> np.ndarray:
        return self.residual(Tensor(_EAGER, None, x)).data

    def invert(self, y: np.ndarray) -> np.ndarray:
        """Solve forward(x) = y by fixed-point iteration."""
        x = y.copy()
        scale = max(float(np.linalg.norm(y)), 1e-30)
        for _ in range(self.inv_max_iters):
            x_new = y - self.residual_np(x)
            delta = float(np.linalg.norm(x_new - x)) / scale
            x = x_new
            if not math.isfinite(delta):
                raise InversionError("fixed-point inversion diverged")
            if delta < self.inv_tol:
                return x
        raise InversionError(
            f"fixed-point inversion did not reach {self.inv_tol:g} within "
            f"{self.inv_max_iters} iterations"
        )

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for conv in self.convs_list:
            params += conv.parameters()
        return params

    def convs(self) -> list[Conv2dLayer]:
        return list(self.convs_list)

    @staticmethod
    def parameter_count(features: int, kernel: int = 3) -> int:
        k2 = kernel * kernel
        chans = [2] + [features] * (InvertibleProximalBlock.n_convs - 1) + [2]
        return sum(chans[i + 1] * chans[i] * k2 + chans[i + 1]
                   for i in range(InvertibleProximalBlock.n_convs))

    def lipschitz_bound(self, h: int, w: int) -> float:
        prod = 1.0
        for conv in self.convs_list:
            prod *= conv.spectral_norm(h, w)
        return prod

    def scale_to_lipschitz(self, limit: float, h: int, w: int) -> None:
        """Rescale kernels so the spectral-norm product stays below ``limit``."""
        sigmas = [conv.spectral_norm(h, w) for conv in self.convs_list]
        prod = float(np.prod(sigmas))
        if prod <= limit or prod == 0.0:
            return
        factor = (limit / prod) ** (1.0 / self.n_convs)
        for conv in self.convs_list:
            conv.weight.value *= factor


class UnrolledNetwork:
    """N data-consistency + CNN iterations, split into M parameter modules."""

    def __init__(
        self,
        kind: str,
        model: SensingModel,
        n_iters: int,
        n_modules: int,
        features: int = 8,
        cg_iters: int = 10,
        invertible: bool | None = None,
        seed: int = 0,
        inv_tol: float = 1e-10,
        inv_max_iters: int = 100,
    ):
        if kind not in ("pgd", "modl"):
            raise ConfigError(f"unknown network kind {kind!r}")
        if n_iters < 1:
            raise ConfigError("n_iters must be >= 1")
        if n_modules < 1 or n_iters % n_modules != 0:
            raise ConfigError(
                f"module count {n_modules} must divide iteration count {n_iters}"
            )
        if invertible is None:
            invertible = kind == "modl"
        if invertible and kind != "modl":
            raise ConfigError("invertible blocks are supported for modl networks only")
        self.kind = kind
        self.model = model
        self.n_iters = n_iters
        self.n_modules = n_modules
        self.features = features
        self.cg_iters = cg_iters
        self.invertible = invertible
        self.seed = seed
        rng = np.random.default_rng(seed)
        if invertible:
            self.blocks = [
                InvertibleProximalBlock(features, rng, name=f"it{i}",
                                        inv_tol=inv_tol, inv_max_iters=inv_max_iters)
                for i in range(n_iters)
            ]
        else:
            self.blocks = [ProximalBlock(features, rng, name=f"it{i}")
                           for i in range(n_iters)]

    # -- structure -----------------------------------------------------
    @property
    def iters_per_module(self) -> int:
        return self.n_iters // self.n_modules

    def module_iterations(self, m: int) -> range:
        if not 1 <= m <= self.n_modules:
            raise ConfigError(f"module index {m} out of range 1..{self.n_modules}")
        k = self.iters_per_module
        return range((m - 1) * k, m * k)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for block in self.blocks:
            params += block.parameters()
        return params

    def module_parameters(self, m: int) -> list[Parameter]:
        params: list[Parameter] = []
        for i in self.module_iterations(m):
            params += self.blocks[i].parameters()
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward -------------------------------------------------------
    def initial_image(self, y: np.ndarray) -> np.ndarray:
        return adjoint_a(self.model, y)

    def forward_iteration(self, i: int, x: Tensor, y: Tensor,
                          rhs: np.ndarray | None = None) -> Tensor:
        """One unrolled iteration: data consistency, then the CNN."""
        if self.kind == "pgd":
            xd = taped_dc_step(self.model, x, y)
        else:
            if rhs is None:
                rhs = adjoint_a(self.model, y.data)
            xd = taped_cg_dc(self.model, x, rhs, n_iters=self.cg_iters)
        return self.blocks[i](xd)

    def forward_module(self, m: int, x: Tensor, y: Tensor,
                       rhs: np.ndarray | None = None) -> Tensor:
        """Iterations owned by module m, recorded on the caller's tape."""
        for i in self.module_iterations(m):
            x = self.forward_iteration(i, x, y, rhs=rhs)
        return x

    def forward_full(self, y: np.ndarray, n_inf: int | None = None) -> np.ndarray:
        """Reconstruction using the first ``n_inf`` iterations (default all)."""
        if n_inf is None:
            n_inf = self.n_iters
        if not 1 <= n_inf <= self.n_iters:
            raise ConfigError(f"n_inf {n_inf} out of range 1..{self.n_iters}")
        y = np.asarray(y, dtype=np.complex128)
        if y.ndim == 3:
            y = y[None]
        tape = Tape(recording=False)
        yv = Tensor(tape, None, y)
        rhs = adjoint_a(self.model, y)
        x = Tensor(tape, None, rhs.copy())
        for i in range(n_inf):
            x = self.forward_iteration(i, x, yv, rhs=rhs)
        return x.data

    # -- invertibility helpers ------------------------------------------
    def enforce_contraction(self, limit: float = 0.9,
                            modules: list[int] | None = None) -> None:
        if not self.invertible:
            return
        h, w = self.model.image_shape
        iters = (
            range(self.n_iters)
            if modules is None
            else [i for m in modules for i in self.module_iterations(m)]
        )
        for i in iters:
            self.blocks[i].scale_to_lipschitz(limit, h, w)


def build_network(kind: str, model: SensingModel, n_iters: int, n_modules: int,
                  features: int = 8, cg_iters: int = 10,
                  invertible: bool | None = None, seed: int = 0) -> UnrolledNetwork:
    return UnrolledNetwork(kind, model, n_iters, n_modules, features=features,
                           cg_iters=cg_iters, invertible=invertible, seed=seed)


# ----------------------------------------------------------------- snapshots

_SNAP_MAGIC = b"URSNAP1\n"


def save_snapshot(net: UnrolledNetwork, path) -> None:
    """Write parameters as (module id, layer id, shape, raw little-endian doubles)."""
    entries = []
    blobs = []
    offset = 0
    for m in range(1, net.n_modules + 1):
        for p in net.module_parameters(m):
            raw = np.ascontiguousarray(p.value)
            code = "<c16" if np.iscomplexobj(raw) else "<f8"
            blob = raw.astype(code).tobytes()
            entries.append({
                "module": m,
                "layer": p.name,
                "shape": list(p.value.shape),
                "dtype": code,
                "offset": offset,
                "nbytes": len(blob),
            })
            blobs.append(blob)
            offset += len(blob)
    header = {
        "net": {
            "kind": net.kind,
            "n_iters": net.n_iters,
            "n_modules": net.n_modules,
            "features": net.features,
            "cg_iters": net.cg_iters,
            "invertible": net.invertible,
            "seed": net.seed,
        },
        "params": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_SNAP_MAGIC)
        f.write(len(hbytes).to_bytes(8, "little"))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load_snapshot(path, model: SensingModel) -> UnrolledNetwork:
    """Rebuild a network from a snapshot; the sensing model is supplied by the caller."""
    with open(path, "rb") as f:
        magic = f.read(len(_SNAP_MAGIC))
        if magic != _SNAP_MAGIC:
            raise ConfigError(f"{path} is not a parameter snapshot")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    spec = header["net"]
    net = UnrolledNetwork(
        spec["kind"], model, spec["n_iters"], spec["n_modules"],
        features=spec["features"], cg_iters=spec["cg_iters"],
        invertible=spec["invertible"], seed=spec["seed"],
    )
    by_name = {p.name: p for p in net.parameters()}
    for entry in header["params"]:
        p = by_name[entry["layer"]]
        raw = np.frombuffer(
            payload[entry["offset"]:entry["offset"] + entry["nbytes"]],
            dtype=entry["dtype"],
        ).reshape(entry["shape"])
        if raw.shape != p.value.shape:
            raise ConfigError(f"snapshot entry {entry['layer']} has wrong shape")
        p.value = raw.astype(p.value.dtype).copy()
    return net
