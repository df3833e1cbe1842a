"""Conditional velocity-field networks.

Two interchangeable architectures predict per-point velocities u(X, t | c):

* "mlp": each point is processed independently; the flow time t (sinusoidal
  features) and the condition vector c are projected to a shared embedding
  e = phi_t(t) + phi_c(c) that modulates residual blocks through FiLM,
  (1 + gamma(e)) * LN(h) + beta(e).
* "hybrid": adds a multi-scale voxel context. Per-point features are
  scatter-meaned into coarse grids over the cube [-1.5, 1.5]^3, passed
  through a small per-voxel FiLM MLP, gathered back by trilinear
  interpolation (C_pv) and blended with a mean-pooled global context
  (C_global) through the time gate sigmoid(k * (t - tau)); the blended
  context joins the per-point head input.

All parameters are float64; forward passes build the autodiff tape.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation


def time_gate(t: float, k: float = 10.0, tau: float = 0.4) -> float:
    """Logistic blend weight sigmoid(k * (t - tau)), in (0, 1)."""
    if k <= 0:
        raise ContractViolation(f"gate steepness must be positive, got {k}")
    return float(1.0 / (1.0 + np.exp(-k * (t - tau))))


def film(h: ad.Tensor, gamma_row: ad.Tensor, beta_row: ad.Tensor) -> ad.Tensor:
    """(1 + gamma) * LayerNorm(h) + beta with rows broadcast over points."""
    return ad.mul(ad.layer_norm(h), gamma_row + 1.0) + beta_row


def _tile_row(row: ad.Tensor, n: int) -> ad.Tensor:
    return ad.gather_rows(row, np.zeros(n, dtype=np.intp))


class Linear:
    def __init__(self, rng, n_in: int, n_out: int, name: str,
                 w_scale: float | None = None, bias: bool = True,
                 zero_init: bool = False):
        scale = (1.0 / np.sqrt(n_in)) if w_scale is None else w_scale
        w0 = np.zeros((n_in, n_out)) if zero_init else rng.normal(size=(n_in, n_out)) * scale
        self.w = ad.Parameter(w0, f"{name}.w")
        self.b = ad.Parameter(np.zeros(n_out), f"{name}.b") if bias else None

    def __call__(self, x: ad.Tensor, use_ema: bool = False) -> ad.Tensor:
        out = ad.matmul(x, self.w.tensor(use_ema))
        if self.b is not None:
            out = out + self.b.tensor(use_ema)
        return out

    def params(self) -> list[ad.Parameter]:
        return [self.w] + ([self.b] if self.b is not None else [])


class TimeConditionEmbed:
    """e(t, c) = phi_t(t) + phi_c(c) with sinusoidal time features.

    phi_t projects [sin(w_j t), cos(w_j t)] pairs at geometric frequencies
    w_j = 2*pi*base^j; phi_c is a pure linear map (no bias), so c = 0 yields
    e = phi_t(t) exactly and e is linear in c for fixed t.
    """

    def __init__(self, rng, cond_dim: int, embed_width: int = 64,
                 n_freqs: int = 8, freq_base: float = 2.0):
        if embed_width % 2 != 0:
            raise ContractViolation("embed width must be even")
        self.cond_dim = cond_dim
        self.n_freqs = n_freqs
        self.freqs = 2.0 * np.pi * freq_base ** np.arange(n_freqs)
        self.proj_t = Linear(rng, 2 * n_freqs, embed_width, "embed.proj_t")
        self.proj_c = Linear(rng, cond_dim, embed_width, "embed.proj_c", bias=False)

    def time_features(self, t: float) -> np.ndarray:
        wt = self.freqs * t
        return np.concatenate([np.sin(wt), np.cos(wt)])[None, :]

    def __call__(self, t: float, c, use_ema: bool = False) -> ad.Tensor:
        c = np.asarray(c, dtype=np.float64).ravel()
        if c.shape[0] != self.cond_dim:
            raise ContractViolation(
                f"condition has {c.shape[0]} entries, embedding expects {self.cond_dim}")
        phi_t = self.proj_t(ad.constant(self.time_features(t)), use_ema)
        phi_c = self.proj_c(ad.constant(c[None, :]), use_ema)
        return phi_t + phi_c

    def params(self) -> list[ad.Parameter]:
        return self.proj_t.params() + self.proj_c.params()


class FilmBlock:
    """Residual unit h + MLP(FiLM(h, e)); gamma/beta heads start at zero.

    The transform is a two-layer pointwise MLP (silu between layers), so a
    block refines features nonlinearly in both halves of the residual branch.
    """

    def __init__(self, rng, width: int, embed_width: int, name: str):
        self.gamma = Linear(rng, embed_width, width, f"{name}.gamma", zero_init=True)
        self.beta = Linear(rng, embed_width, width, f"{name}.beta", zero_init=True)
        self.inner = Linear(rng, width, width, f"{name}.inner")
        self.out = Linear(rng, width, width, f"{name}.out")

    def __call__(self, h: ad.Tensor, e: ad.Tensor, use_ema: bool = False) -> ad.Tensor:
        mod = film(h, self.gamma(e, use_ema), self.beta(e, use_ema))
        hidden = self.inner(ad.silu(mod), use_ema)
        return h + self.out(ad.silu(hidden), use_ema)

    def params(self) -> list[ad.Parameter]:
        return (self.gamma.params() + self.beta.params()
                + self.inner.params() + self.out.params())


class _HeadStack:
    """Shared point head: lift -> R residual FiLM blocks -> linear output."""

    def __init__(self, rng, in_width: int, width: int, blocks: int,
                 embed_width: int, out_dim: int, name: str):
        self.lift = Linear(rng, in_width, width, f"{name}.lift")
        self.blocks = [FilmBlock(rng, width, embed_width, f"{name}.block{i}")
                       for i in range(blocks)]
        self.head = Linear(rng, width, out_dim, f"{name}.head")

    def __call__(self, x: ad.Tensor, e: ad.Tensor, use_ema: bool = False) -> ad.Tensor:
        h = self.lift(x, use_ema)
        for block in self.blocks:
            h = block(h, e, use_ema)
        return self.head(h, use_ema)

    def params(self) -> list[ad.Parameter]:
        out = self.lift.params()
        for b in self.blocks:
            out += b.params()
        return out + self.head.params()


class VelocityMLP:
    """Pointwise conditional velocity net (permutation equivariant by design)."""

    arch_id = "mlp"

    def __init__(self, d: int, cond_dim: int, width: int = 128, blocks: int = 4,
                 embed_width: int = 64, n_freqs: int = 8, freq_base: float = 2.0,
                 seed: int = 0):
        if d not in (3, 6):
            raise ContractViolation(f"point dimension must be 3 or 6, got {d}")
        self.d = d
        self.cond_dim = cond_dim
        self.config = {"d": d, "cond_dim": cond_dim, "width": width, "blocks": blocks,
                       "embed_width": embed_width, "n_freqs": n_freqs,
                       "freq_base": freq_base, "seed": seed}
        rng = np.random.default_rng(seed)
        self.embed = TimeConditionEmbed(rng, cond_dim, embed_width, n_freqs, freq_base)
        self.stack = _HeadStack(rng, d + embed_width, width, blocks, embed_width, d, "mlp")

    def forward(self, x, t: float, c, use_ema: bool = False) -> ad.Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ContractViolation(f"points must be (N, {self.d}), got {x.shape}")
        n = x.shape[0]
        if n < 1:
            raise ContractViolation("empty cloud")
        e = self.embed(t, c, use_ema)
        inp = ad.concat([ad.constant(x), _tile_row(e, n)], axis=-1)
        return self.stack(inp, e, use_ema)

    def velocity(self, x, t: float, c, use_ema: bool = False) -> np.ndarray:
        return self.forward(x, t, c, use_ema).data

    def parameters(self) -> list[ad.Parameter]:
        return self.embed.params() + self.stack.params()


class VelocityHybrid:
    """MLP head plus time-gated multi-scale voxel / global context."""

    arch_id = "hybrid"

    def __init__(self, d: int, cond_dim: int, width: int = 128, blocks: int = 4,
                 embed_width: int = 64, n_freqs: int = 8, freq_base: float = 2.0,
                 resolutions: tuple[int, ...] = (16, 8), ctx_width: int = 32,
                 d_c: int = 64, gate_k: float = 10.0, gate_tau: float = 0.4,
                 cube: float = 1.5, seed: int = 0):
        if d not in (3, 6):
            raise ContractViolation(f"point dimension must be 3 or 6, got {d}")
        if any(r < 2 for r in resolutions):
            raise ContractViolation("voxel resolutions must be >= 2")
        if not 0.0 < gate_tau < 1.0:
            raise ContractViolation("gate center must lie in (0, 1)")
        self.d = d
        self.cond_dim = cond_dim
        self.resolutions = tuple(int(r) for r in resolutions)
        self.gate_k = float(gate_k)
        self.gate_tau = float(gate_tau)
        self.cube = float(cube)
        self.config = {"d": d, "cond_dim": cond_dim, "width": width, "blocks": blocks,
                       "embed_width": embed_width, "n_freqs": n_freqs,
                       "freq_base": freq_base, "resolutions": list(self.resolutions),
                       "ctx_width": ctx_width, "d_c": d_c, "gate_k": gate_k,
                       "gate_tau": gate_tau, "cube": cube, "seed": seed}
        rng = np.random.default_rng(seed)
        self.embed = TimeConditionEmbed(rng, cond_dim, embed_width, n_freqs, freq_base)
        self.lift_ctx = Linear(rng, d + embed_width, ctx_width, "ctx.lift")
        self.vox_film = []
        self.vox_lin = []
        for r in self.resolutions:
            self.vox_film.append((Linear(rng, embed_width, ctx_width, f"ctx.s{r}.gamma", zero_init=True),
                                  Linear(rng, embed_width, ctx_width, f"ctx.s{r}.beta", zero_init=True)))
            self.vox_lin.append(Linear(rng, ctx_width, ctx_width, f"ctx.s{r}.out"))
        self.proj_pv = Linear(rng, ctx_width * len(self.resolutions), d_c, "ctx.proj_pv")
        self.proj_global = Linear(rng, ctx_width, d_c, "ctx.proj_global")
        self.stack = _HeadStack(rng, d + embed_width + d_c, width, blocks,
                                embed_width, d, "hybrid")

    def _voxel_ids_and_corners(self, xyz: np.ndarray, res: int):
        """Per-point voxel ids plus trilinear corner indices and weights."""
        h = 2.0 * self.cube / res
        u = (xyz + self.cube) / h
        ids = np.clip(np.floor(u).astype(np.intp), 0, res - 1)
        flat = (ids[:, 0] * res + ids[:, 1]) * res + ids[:, 2]
        g = u - 0.5
        i0 = np.floor(g).astype(np.intp)
        frac = g - i0
        corners = np.empty((xyz.shape[0], 8), dtype=np.intp)
        weights = np.empty((xyz.shape[0], 8))
        for k in range(8):
            off = np.array([(k >> 2) & 1, (k >> 1) & 1, k & 1], dtype=np.intp)
            idx = np.clip(i0 + off, 0, res - 1)
            corners[:, k] = (idx[:, 0] * res + idx[:, 1]) * res + idx[:, 2]
            w = np.where(off == 1, frac, 1.0 - frac)
            weights[:, k] = w[:, 0] * w[:, 1] * w[:, 2]
        return flat, corners, weights

    def context(self, x, t: float, c, use_ema: bool = False) -> tuple[ad.Tensor, ad.Tensor]:
        """Per-point voxel context C_pv and broadcast global context C_global."""
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        if n < 1:
            raise ContractViolation("empty cloud")
        e = self.embed(t, c, use_ema)
        inp = ad.concat([ad.constant(x), _tile_row(e, n)], axis=-1)
        pf = ad.silu(self.lift_ctx(inp, use_ema))
        gathered = []
        for res, (gamma, beta), lin in zip(self.resolutions, self.vox_film, self.vox_lin):
            flat, corners, weights = self._voxel_ids_and_corners(x[:, :3], res)
            vox = ad.scatter_mean(pf, flat, res ** 3)
            vh = ad.silu(lin(film(vox, gamma(e, use_ema), beta(e, use_ema)), use_ema))
            acc = None
            for k in range(8):
                part = ad.mul(ad.gather_rows(vh, corners[:, k]),
                              ad.constant(weights[:, k:k + 1]))
                acc = part if acc is None else acc + part
            gathered.append(acc)
        c_pv = self.proj_pv(ad.concat(gathered, axis=-1), use_ema)
        pooled = ad.scatter_mean(pf, np.zeros(n, dtype=np.intp), 1)
        c_global = _tile_row(self.proj_global(pooled, use_ema), n)
        return c_pv, c_global

    def forward(self, x, t: float, c, use_ema: bool = False) -> ad.Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ContractViolation(f"points must be (N, {self.d}), got {x.shape}")
        n = x.shape[0]
        if n < 1:
            raise ContractViolation("empty cloud")
        c_pv, c_global = self.context(x, t, c, use_ema)
        alpha = time_gate(t, self.gate_k, self.gate_tau)
        ctx = ad.mul(c_pv, alpha) + ad.mul(c_global, 1.0 - alpha)
        e = self.embed(t, c, use_ema)
        inp = ad.concat([ad.constant(x), _tile_row(e, n), ctx], axis=-1)
        return self.stack(inp, e, use_ema)

    def velocity(self, x, t: float, c, use_ema: bool = False) -> np.ndarray:
        return self.forward(x, t, c, use_ema).data

    def parameters(self) -> list[ad.Parameter]:
        out = self.embed.params() + self.lift_ctx.params()
        for (gamma, beta), lin in zip(self.vox_film, self.vox_lin):
            out += gamma.params() + beta.params() + lin.params()
        out += self.proj_pv.params() + self.proj_global.params()
        return out + self.stack.params()


ARCHITECTURES = {"mlp": VelocityMLP, "hybrid": VelocityHybrid}


def make_net(arch: str, **config):
    if arch not in ARCHITECTURES:
        raise ContractViolation(f"unknown architecture {arch!r}; "
                                f"registered: {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[arch](**config)


def net_from_meta(meta: dict, params: list[ad.Parameter]):
    """Rebuild a net from checkpoint metadata and adopt the stored weights."""
    net = make_net(meta["arch"], **meta["arch_config"])
    own = net.parameters()
    if len(own) != len(params):
        raise ContractViolation(f"checkpoint has {len(params)} parameter blocks, "
                                f"architecture needs {len(own)}")
    for mine, stored in zip(own, params):
        if mine.name != stored.name or mine.shape != stored.shape:
            raise ContractViolation(
                f"parameter mismatch: {mine.name}{mine.shape} vs "
                f"{stored.name}{stored.shape}")
        mine.value[...] = stored.value
        mine.ema[...] = stored.ema
    return net
