"""Toy magnitude-preserving U-Net denoiser with block-wise conditioning fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Parameter, force_norm, mp_add, mp_cat, mp_silu, mp_sum, normalize_weight
from .tensor import Tensor


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 2
    freq_bins: int = 64
    widths: tuple = (32, 64)
    blocks_per_level: int = 2
    emb_dim: int = 64
    emb_bandwidth: float = 2.0
    mp_eps: float = 1e-4
    res_balance: float = 0.3
    concat_balance: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 1 or self.blocks_per_level < 1:
            raise ValueError("need at least one level and one block per level")
        if self.freq_bins % self.downsample_factor:
            raise ValueError(
                f"freq_bins={self.freq_bins} not divisible by downsampling factor {self.downsample_factor}"
            )

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.widths) - 1)


@dataclass(frozen=True)
class _BlockSpec:
    name: str
    flavor: str  # "enc" | "dec"
    cin: int
    cout: int
    level: int
    down: bool = False
    up: bool = False


class DenoiserNet:
    """F_theta(x_in, cond, t) on [B, C, F, T] arrays.

    Every learned convolution/affine weight is an mp-normalized
    :class:`Parameter`; per-block scalars (conditioning mix logit, embedding
    gain) and the output gain are plain parameters.
    """

    def __init__(self, cfg: NetConfig = NetConfig(), dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        self.freqs = (rng.standard_normal(cfg.emb_dim) * cfg.emb_bandwidth).astype(np.float64)
        self.phases = rng.uniform(size=cfg.emb_dim).astype(np.float64)
        self.blocks = self._layout()
        self.params: dict[str, Parameter] = {}

        def weight(name, *shape):
            self.params[name] = force_norm(
                Parameter(rng.standard_normal(shape).astype(self.dtype), name=name, mp_normalized=True)
            )

        def scalar(name, value):
            self.params[name] = Parameter(np.array(value, dtype=self.dtype), name=name)

        w0 = cfg.widths[0]
        weight("conv_in", w0, cfg.in_channels + 1, 3, 3)
        for b in self.blocks:
            # encoder blocks project to cout before the residual branch
            weight(f"{b.name}.conv_res0", b.cout, b.cout if b.flavor == "enc" else b.cin, 3, 3)
            weight(f"{b.name}.conv_res1", b.cout, b.cout, 3, 3)
            weight(f"{b.name}.emb_linear", b.cout, cfg.emb_dim)
            if b.cin != b.cout:
                weight(f"{b.name}.conv_skip", b.cout, b.cin, 1, 1)
            weight(f"{b.name}.cond_conv", b.cout, cfg.in_channels, 3, 3)
            scalar(f"{b.name}.emb_gain", 0.0)
            scalar(f"{b.name}.tau_raw", 0.0)
        weight("conv_out", cfg.in_channels, w0, 3, 3)
        scalar("out_gain", 0.0)

    def _layout(self):
        cfg = self.cfg
        widths, nb = cfg.widths, cfg.blocks_per_level
        blocks = []
        for lvl, w in enumerate(widths):
            for i in range(nb):
                first = i == 0 and lvl > 0
                cin = widths[lvl - 1] if first else w
                blocks.append(_BlockSpec(f"enc{lvl}_{i}", "enc", cin, w, lvl, down=first))
        deepest = len(widths) - 1
        for lvl in range(deepest, -1, -1):
            w = widths[lvl]
            for i in range(nb):
                first = i == 0 and lvl < deepest
                cin = widths[lvl + 1] + w if first else w
                blocks.append(_BlockSpec(f"dec{lvl}_{i}", "dec", cin, w, lvl, up=first))
        return blocks

    # ------------------------------------------------------------------

    def mp_parameters(self):
        return [p for p in self.params.values() if p.mp_normalized]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(self.dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def embed(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return (np.sqrt(2) * np.cos(2 * np.pi * (t[:, None] * self.freqs[None] + self.phases[None]))).astype(self.dtype)

    # ------------------------------------------------------------------

    def _w(self, name):
        return normalize_weight(self.params[name], self.cfg.mp_eps)

    def _block(self, b: _BlockSpec, x, emb, cond, skip):
        P = self.params
        if b.down:
            x = T.avg_pool2(x)
        if b.up:
            x = mp_cat(T.upsample2(x), skip, self.cfg.concat_balance)
        has_skip = b.cin != b.cout
        if b.flavor == "enc":
            if has_skip:
                x = T.conv2d(x, self._w(f"{b.name}.conv_skip"))
            x = T.pixel_norm(x)
        y = T.conv2d(mp_silu(x), self._w(f"{b.name}.conv_res0"))
        c = T.affine(emb, self._w(f"{b.name}.emb_linear")) * P[f"{b.name}.emb_gain"] + 1.0
        y = mp_silu(y * T.reshape(c, (c.shape[0], 1, 1, c.shape[1])))
        y = T.conv2d(y, self._w(f"{b.name}.conv_res1"))
        if b.flavor == "dec" and has_skip:
            x = T.conv2d(x, self._w(f"{b.name}.conv_skip"))
        x = mp_sum(x, y, self.cfg.res_balance)
        cond_feat = T.conv2d(cond, self._w(f"{b.name}.cond_conv"))
        return mp_add(x, cond_feat, P[f"{b.name}.tau_raw"])

    def forward(self, x_in, cond, t, record=None) -> Tensor:
        """Run the network on [B, C, F, T] inputs (already scaled by the caller).

        ``t`` is a scalar or per-item array. When ``record`` is a list, each
        block appends ``(name, activation std)``.
        """
        x_in = T.as_tensor(x_in, self.dtype)
        cond = T.as_tensor(cond, self.dtype)
        squeeze = x_in.data.ndim == 3
        if squeeze:
            x_in = T.reshape(x_in, (1,) + x_in.shape)
            cond = T.reshape(cond, (1,) + cond.shape)
        if x_in.shape != cond.shape:
            raise ValueError(f"input/conditioner shape mismatch: {x_in.shape} vs {cond.shape}")
        B, C, F, Tn = x_in.shape
        f = self.cfg.downsample_factor
        if C != self.cfg.in_channels or F % f or Tn % f:
            raise ValueError(f"input [B,{C},{F},{Tn}] incompatible with channels={self.cfg.in_channels}, factor={f}")

        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        emb = T.Tensor(self.embed(t))
        x = T.transpose(x_in, (0, 2, 3, 1))
        conds = [T.transpose(cond, (0, 2, 3, 1))]
        for _ in range(len(self.cfg.widths) - 1):
            conds.append(T.avg_pool2(conds[-1]))

        ones = T.Tensor(np.ones(x.shape[:3] + (1,), dtype=self.dtype))
        x = T.conv2d(T.concat([x, ones], axis=-1), self._w("conv_in"))
        skips = {}
        for b in self.blocks:
            skip = skips.get(b.level) if b.up else None
            x = self._block(b, x, emb, conds[b.level], skip)
            if b.flavor == "enc":
                skips[b.level] = x
            if record is not None:
                record.append((b.name, float(np.std(x.data))))
        out = T.conv2d(x, self._w("conv_out")) * self.params["out_gain"]
        out = T.transpose(out, (0, 3, 1, 2))
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out

    __call__ = forward
