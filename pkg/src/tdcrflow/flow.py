"""Flow-matching core: path construction, loss, training loop, Heun sampler.

Training pairs a Gaussian prior cloud with a settled-shape cloud along the
straight path X_t = (1-t) X_0 + t X_1 and regresses the constant transport
velocity X_1 - X_0.  Prediction integrates the learned field from t=0 to 1
with Heun's second-order rule.  The flow time t is a transport parameter of
the generative path, not a physical deflection time.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import DatasetBundle
from .errors import ContractViolation, NumericError
from .metrics import chamfer
from .optim import Adam, ema_update
from .pointcloud import PointCloud

VAL_RNG_LANE = 7001  # per-sample validation prior stream: (seed, LANE, sample id)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for flow-matching training and evaluation sampling.

    alpha biases flow times toward t=1 (t = U^(1/alpha), a Beta(alpha, 1)
    draw); sigma is the prior std on every channel; lambda_rgb weights the
    color part of the loss when clouds carry RGB.
    """

    alpha: float = 3.0
    sigma: float = 0.5
    lambda_rgb: float = 0.05
    epochs: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    ema_decay: float = 0.999
    seed: int = 0
    sample_steps: int = 100
    val_every: int = 10
    val_samples: int = 8
    val_steps: int = 50

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractViolation(f"alpha must be positive, got {self.alpha}")
        if not self.sigma > 0:
            raise ContractViolation(f"sigma must be positive, got {self.sigma}")
        if self.lambda_rgb < 0:
            raise ContractViolation(f"lambda_rgb must be >= 0, got {self.lambda_rgb}")
        if self.epochs < 1 or self.batch_size < 1 or self.sample_steps < 1:
            raise ContractViolation("epochs, batch_size, and sample_steps must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ContractViolation(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.val_every < 1 or self.val_steps < 1 or self.val_samples < 0:
            raise ContractViolation("val_every and val_steps must be >= 1, val_samples >= 0")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "sigma": self.sigma, "lambda_rgb": self.lambda_rgb,
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "ema_decay": self.ema_decay, "seed": self.seed,
            "sample_steps": self.sample_steps, "val_every": self.val_every,
            "val_samples": self.val_samples, "val_steps": self.val_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def sample_time(alpha: float, rng: np.random.Generator) -> float:
    """One flow time t = U^(1/alpha), the inverse CDF of Beta(alpha, 1)."""
    if not alpha > 0:
        raise ContractViolation(f"alpha must be positive, got {alpha}")
    return float(rng.uniform()) ** (1.0 / alpha)


def sample_prior(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """IID Gaussian cloud with std sigma on every channel."""
    if not sigma > 0:
        raise ContractViolation(f"sigma must be positive, got {sigma}")
    return sigma * rng.standard_normal(shape)


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float):
    """Path point X_t = (1-t) X_0 + t X_1 and its velocity target X_1 - X_0."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ContractViolation(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ContractViolation(f"flow time must lie in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * x1, x1 - x0


@dataclass(frozen=True)
class FlowBatch:
    """One training batch on the straight path; a single t per sample."""

    x0: np.ndarray       # (B, N, d) prior clouds
    x1: np.ndarray       # (B, N, d) data clouds
    c: np.ndarray        # (B, Dc) normalized conditions
    t: np.ndarray        # (B,) flow times
    xt: np.ndarray       # (B, N, d) interpolants
    u_target: np.ndarray  # (B, N, d) transport targets

    def __post_init__(self):
        if not (self.x0.shape == self.x1.shape == self.xt.shape == self.u_target.shape):
            raise ContractViolation("flow batch member shapes disagree")
        if self.x0.ndim != 3 or self.c.ndim != 2 or self.t.ndim != 1:
            raise ContractViolation("flow batch must hold (B,N,d) clouds, (B,Dc) conditions, (B,) times")
        if not (self.c.shape[0] == self.t.shape[0] == self.x0.shape[0]):
            raise ContractViolation("flow batch sizes disagree")
        if self.t.size and (self.t.min() < 0.0 or self.t.max() > 1.0):
            raise ContractViolation("flow times must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.x0.shape[0]


def make_flow_batch(x1: np.ndarray, c: np.ndarray, alpha: float, sigma: float,
                    rng: np.random.Generator) -> FlowBatch:
    """Draw priors and flow times for a batch of data clouds."""
    x1 = np.asarray(x1, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    x0 = sample_prior(x1.shape, sigma, rng)
    if not alpha > 0:
        raise ContractViolation(f"alpha must be positive, got {alpha}")
    t = rng.uniform(size=x1.shape[0]) ** (1.0 / alpha)
    tb = t[:, None, None]
    return FlowBatch(x0=x0, x1=x1, c=c, t=t,
                     xt=(1.0 - tb) * x0 + tb * x1, u_target=x1 - x0)


def fm_loss(u_pred, u_target, d: int | None = None, lambda_rgb: float = 0.05):
    """Squared-residual loss: mean over XYZ entries + lambda_rgb * mean over RGB.

    Reductions sort the squared residuals before summing, so the value is
    bitwise invariant under row permutations of the point set.  Accepts a
    tape tensor (returns a tensor for backprop) or a plain array (returns a
    float).
    """
    tgt = np.asarray(u_target, dtype=np.float64)
    on_tape = isinstance(u_pred, ad.Tensor)
    pred = u_pred if on_tape else ad.constant(np.asarray(u_pred, dtype=np.float64))
    if pred.data.shape != tgt.shape:
        raise ContractViolation(
            f"prediction shape {pred.data.shape} does not match target {tgt.shape}")
    if d is None:
        d = tgt.shape[-1]
    if d not in (3, 6):
        raise ContractViolation(f"channel count must be 3 or 6, got {d}")
    if tgt.ndim != 2 or tgt.shape[-1] != d:
        raise ContractViolation(f"residuals must be (N, {d}), got {tgt.shape}")
    if lambda_rgb < 0:
        raise ContractViolation(f"lambda_rgb must be >= 0, got {lambda_rgb}")
    diff = ad.sub(pred, ad.constant(tgt))
    sq = ad.mul(diff, diff)
    if d == 3:
        out = ad.mean_all_sorted(sq)
    else:
        out = ad.add(ad.mean_all_sorted(ad.slice_cols(sq, 0, 3)),
                     ad.mul(ad.mean_all_sorted(ad.slice_cols(sq, 3, 6)), lambda_rgb))
    return out if on_tape else float(out.data)


def heun_integrate(field, x0: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dX/dt = field(X, t) from t=0 to t=1 with Heun's RK2 rule.

    field(X, t) -> array like X.  Raises on a non-finite state, naming the
    step that produced it.
    """
    if steps < 1:
        raise ContractViolation(f"step count must be >= 1, got {steps}")
    x = np.array(x0, dtype=np.float64, copy=True)
    h = 1.0 / steps
    for k in range(steps):
        v1 = np.asarray(field(x, k * h), dtype=np.float64)
        if v1.shape != x.shape:
            raise ContractViolation(f"field returned shape {v1.shape}, state is {x.shape}")
        v2 = np.asarray(field(x + h * v1, (k + 1) * h), dtype=np.float64)
        x = x + 0.5 * h * (v1 + v2)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite state after integrator step {k}")
    return x


def sample_shape(net, condition, n: int, d: int, steps: int = 100,
                 sigma: float = 0.5, rng: np.random.Generator | int | None = None,
                 use_ema: bool = True) -> PointCloud:
    """Predict a settled cloud for one condition by integrating the field.

    Draws N prior points, runs the Heun integrator with the network (EMA
    weights by default), and returns the terminal cloud in normalized units.
    RGB channels, if present, are clipped to [0, 1].
    """
    if d != net.d:
        raise ContractViolation(f"requested {d} channels but network predicts {net.d}")
    if n < 1:
        raise ContractViolation(f"point count must be >= 1, got {n}")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    cond = np.asarray(condition, dtype=np.float64).ravel()
    x0 = sample_prior((n, d), sigma, rng)
    x = heun_integrate(lambda s, t: net.velocity(s, t, cond, use_ema=use_ema), x0, steps)
    if d == 6:
        x[:, 3:] = np.clip(x[:, 3:], 0.0, 1.0)
    return PointCloud(x)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    val_cd: float | None


@dataclass
class TrainResult:
    """Per-epoch loss trace plus the best-validation bookkeeping."""

    history: list[EpochRecord] = field(default_factory=list)
    best_val_cd: float | None = None
    best_epoch: int | None = None
    steps: int = 0

    def loss_trace(self) -> list[float]:
        return [r.mean_loss for r in self.history]

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,mean_loss,val_cd\n")
        for r in self.history:
            val = "" if r.val_cd is None else repr(r.val_cd)
            buf.write(f"{r.epoch},{r.mean_loss!r},{val}\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.csv_text())


def _validation_cd(net, bundle: DatasetBundle, val_ids, cfg: TrainConfig) -> float:
    """Mean chamfer distance of EMA samples against held-out clouds.

    Normalized units throughout; the prior draw is fixed per sample id so
    successive validations are comparable.
    """
    pts = bundle.normalized_points(val_ids)
    conds = bundle.normalized_conditions(val_ids)
    cds = []
    for row, vid in enumerate(val_ids):
        rng = np.random.default_rng((cfg.seed, VAL_RNG_LANE, int(vid)))
        pred = sample_shape(net, conds[row], pts.shape[1], bundle.d,
                            steps=cfg.val_steps, sigma=cfg.sigma, rng=rng, use_ema=True)
        cds.append(chamfer(pred.points, pts[row]))
    return float(np.mean(cds))


def train(bundle: DatasetBundle, net, cfg: TrainConfig) -> TrainResult:
    """Fit the velocity field to a dataset bundle.

    Per optimizer step: draw a batch of settled clouds with conditions, draw
    priors and one flow time per sample, regress the transport velocity on
    the interpolants, take an Adam step, then update the EMA shadow.  When
    the training split is smaller than the batch size, the batch is padded
    by resampling with replacement so each step keeps full batch statistics
    (duplicated samples get independent prior and time draws).  Every
    cfg.val_every epochs the EMA weights are scored by chamfer distance on
    held-out samples; the best-scoring shadow is restored into the network
    when training ends.
    """
    train_ids = list(bundle.splits.get("train", []))
    if not train_ids:
        raise ContractViolation("dataset bundle has no training split")
    if net.cond_dim != bundle.condition_dim:
        raise ContractViolation(
            f"network expects condition width {net.cond_dim}, dataset provides "
            f"{bundle.condition_dim}")
    if net.d != bundle.d:
        raise ContractViolation(f"network predicts {net.d} channels, dataset holds {bundle.d}")

    x_train = bundle.normalized_points(train_ids)
    c_train = bundle.normalized_conditions(train_ids)
    val_ids = list(bundle.splits.get("val", []))[:cfg.val_samples]

    params = net.parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    best_ema = None

    k = len(train_ids)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(k)
        if k < cfg.batch_size:
            # tiny datasets: pad by resampling so a step keeps real batch
            # statistics (every sample still appears at least once per epoch;
            # duplicates get independent prior and flow-time draws)
            pad = rng.integers(0, k, size=cfg.batch_size - k)
            order = np.concatenate([order, pad])
        batch_losses = []
        for start in range(0, k, cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            batch = make_flow_batch(x_train[ids], c_train[ids], cfg.alpha, cfg.sigma, rng)
            ad.zero_grads(params)
            losses = [fm_loss(net.forward(batch.xt[b], float(batch.t[b]), batch.c[b]),
                              batch.u_target[b], bundle.d, cfg.lambda_rgb)
                      for b in range(batch.size)]
            total = losses[0]
            for term in losses[1:]:
                total = ad.add(total, term)
            total = ad.mul(total, 1.0 / batch.size)
            try:
                loss_val = ad.forward_backward(total)
            except NumericError as exc:
                raise NumericError(f"training aborted at step {result.steps}: {exc}") from exc
            opt.step()
            ema_update(params, cfg.ema_decay)
            result.steps += 1
            batch_losses.append(loss_val)

        val_cd = None
        if val_ids and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            val_cd = _validation_cd(net, bundle, val_ids, cfg)
            if result.best_val_cd is None or val_cd < result.best_val_cd:
                result.best_val_cd = val_cd
                result.best_epoch = epoch
                best_ema = [p.ema.copy() for p in params]
        result.history.append(EpochRecord(epoch, float(np.mean(batch_losses)), val_cd))

    if best_ema is not None:
        for p, shadow in zip(params, best_ema):
            p.ema[...] = shadow
    return result
