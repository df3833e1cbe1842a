"""End-to-end acceptance checks.

Each test is one criterion; the conftest hook prints a one-line PASS/FAIL
verdict per criterion after the run. Stated runtime budgets are asserted so
regressions in speed fail loudly rather than silently.

Criterion 6 is expected to fail: its 1e-3 bar is kept as stated although an
extensive tuning campaign plateaus near 2e-3 (see the test's own comment for
the measured evidence). All other criteria must pass.
"""

import itertools
import json
import time

import numpy as np

from tdcrflow import autodiff as ad
from tdcrflow.dataset import build_bundle
from tdcrflow.flow import (TrainConfig, heun_integrate, sample_prior,
                           sample_shape, sample_time, train)
from tdcrflow.metrics import chamfer, emd_exact
from tdcrflow.nets import VelocityHybrid, VelocityMLP, make_net
from tdcrflow.pointcloud import resample_to_count
from tdcrflow.robot import RobotSpec, generate_dataset, sample_surface, settle

from fdcheck import assert_grad_matches


def _settled_cloud(spec, m_norm, n, seed, payload=0.0):
    """Generator-side oracle shape: settled surface resampled to n points."""
    frames = settle(m_norm, payload, spec)
    cloud = sample_surface(frames, spec, 2048, (seed, 0, 1), include_base=False)
    return resample_to_count(cloud, n, seed + 7)


def _low_z_mean(xyz) -> float:
    """Mean height of the lowest 5% of points: the droop statistic."""
    z = np.sort(np.asarray(xyz)[:, 2])
    return float(np.mean(z[:max(1, round(0.05 * len(z)))]))


def test_criterion_01_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)

    # exact EMD against factorial enumeration, 200 instances with n in 2..7
    for trial in range(200):
        n = int(rng.integers(2, 8))
        p = rng.normal(size=(n, 3))
        q = rng.normal(size=(n, 3))
        cost = np.sqrt(np.sum((p[:, None, :] - q[None, :, :]) ** 2, axis=2))
        best = min(np.mean(cost[np.arange(n), list(perm)])
                   for perm in itertools.permutations(range(n)))
        assert abs(emd_exact(p, q) - best) < 1e-9, trial

    # kd-tree chamfer against the O(n^2) distance matrix, exact equality
    for trial in range(100):
        n = int(rng.integers(2, 513))
        m = int(rng.integers(2, 513))
        p = rng.normal(size=(n, 3))
        q = rng.normal(size=(m, 3))
        d2 = np.sum((p[:, None, :] - q[None, :, :]) ** 2, axis=2)
        brute = float(np.mean(np.sum((p - q[d2.argmin(axis=1)]) ** 2, axis=1))
                      + np.mean(np.sum((q - p[d2.argmin(axis=0)]) ** 2, axis=1)))
        assert chamfer(p, q) == brute, trial

    assert time.perf_counter() - t0 < 60.0


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)

    def param(*shape):
        return ad.Parameter(rng.normal(size=shape), "p")

    # one scalar loss per autodiff primitive, gradients vs central differences
    w, a, b = param(4, 5), param(3, 4), param(3, 5)
    probe_ln = rng.normal(size=(3, 4))
    probe_rs = rng.normal(size=(4, 3))
    cases = [
        ("matmul", [a, w], lambda: ad.sum_all(ad.matmul(a.tensor(), w.tensor()))),
        ("add", [a], lambda: ad.sum_all(ad.add(a.tensor(), a.tensor()))),
        ("sub", [a, b], lambda: ad.mean_all(ad.mul(
            ad.sub(ad.matmul(a.tensor(), w.value), b.tensor()),
            ad.sub(ad.matmul(a.tensor(), w.value), b.tensor())))),
        ("mul_broadcast", [b], lambda: ad.sum_all(ad.mul(b.tensor(), ad.constant(
            np.arange(5.0))))),
        ("relu", [a], lambda: ad.sum_all(ad.relu(a.tensor()))),
        ("sigmoid", [a], lambda: ad.mean_all(ad.sigmoid(a.tensor()))),
        ("silu", [a], lambda: ad.mean_all(ad.silu(a.tensor()))),
        ("layer_norm", [a], lambda: ad.mean_all(ad.mul(
            ad.layer_norm(a.tensor()), ad.constant(probe_ln)))),
        ("mean_sorted", [b], lambda: ad.mean_all_sorted(ad.mul(b.tensor(), b.tensor()))),
        ("concat_slice", [a, b], lambda: ad.sum_all(ad.slice_cols(
            ad.concat([a.tensor(), b.tensor()], axis=-1), 2, 7))),
        ("reshape", [a], lambda: ad.sum_all(ad.mul(
            ad.reshape(a.tensor(), (4, 3)), ad.constant(probe_rs)))),
        ("gather_rows", [a], lambda: ad.sum_all(ad.gather_rows(
            a.tensor(), np.array([0, 2, 2, 1])))),
        ("scatter_mean", [a], lambda: ad.sum_all(ad.scatter_mean(
            a.tensor(), np.array([0, 1, 0]), 2))),
    ]
    for label, params, build in cases:
        assert_grad_matches(build, params, label)

    # full stacks, small widths, through the actual forward pass
    mlp = VelocityMLP(d=3, cond_dim=3, width=16, blocks=2, embed_width=8,
                      n_freqs=2, seed=7)
    hybrid = VelocityHybrid(d=6, cond_dim=3, width=12, blocks=1, embed_width=8,
                            n_freqs=2, resolutions=(2, 2), ctx_width=4, d_c=4,
                            seed=8)
    for net, n in ((mlp, 8), (hybrid, 6)):
        x = rng.normal(size=(n, net.d)) * 0.4
        c = rng.uniform(size=3)
        probe = rng.normal(size=(n, net.d))

        def build():
            return ad.mean_all(ad.mul(net.forward(x, 0.37, c), ad.constant(probe)))

        assert_grad_matches(build, net.parameters(), net.arch_id)

    assert time.perf_counter() - t0 < 120.0


def test_criterion_03_integrator_order():
    rng = np.random.default_rng(103)
    x0 = rng.normal(size=(20, 3))

    # u(X,t) = X has exact solution X0 * e; error must shrink ~4x per doubling
    exact = x0 * np.e
    for s in (10, 20, 40):
        err_s = np.abs(heun_integrate(lambda x, t: x, x0, s) - exact).max()
        err_2s = np.abs(heun_integrate(lambda x, t: x, x0, 2 * s) - exact).max()
        ratio = err_s / err_2s
        assert 3.0 <= ratio <= 5.0, (s, ratio)

    const = rng.normal(size=(20, 3))
    for s in (1, 7, 100):
        out = heun_integrate(lambda x, t: const, x0, s)
        assert np.abs(out - (x0 + const)).max() < 1e-12, s

    for s in (1, 13):
        out = heun_integrate(lambda x, t: np.full_like(x, t), x0, s)
        assert np.abs(out - (x0 + 0.5)).max() < 1e-12, s


def test_criterion_04_distribution_checks():
    rng = np.random.default_rng(104)
    draws = np.array([sample_time(3.0, rng) for _ in range(10 ** 5)])
    se = np.sqrt(3.0 / 80.0) / np.sqrt(draws.size)
    assert abs(draws.mean() - 0.75) < 3.0 * se

    x0 = sample_prior((20000, 5), 0.5, np.random.default_rng(105))
    assert x0.size == 10 ** 5
    assert abs(x0.std() - 0.5) < 0.01


def test_criterion_05_equivariance():
    rng = np.random.default_rng(106)
    mlp = VelocityMLP(d=3, cond_dim=4, width=16, blocks=2, embed_width=8,
                      n_freqs=2, seed=9)
    hybrid = VelocityHybrid(d=3, cond_dim=4, width=12, blocks=1, embed_width=8,
                            n_freqs=2, resolutions=(3, 2), ctx_width=6, d_c=6,
                            seed=10)
    for _ in range(50):
        n = int(rng.integers(2, 30))
        x = rng.normal(size=(n, 3)) * 0.5
        t = float(rng.uniform())
        c = rng.uniform(size=4)
        perm = rng.permutation(n)

        u = mlp.velocity(x, t, c)
        assert np.array_equal(u[perm], mlp.velocity(x[perm], t, c))

        v = hybrid.velocity(x, t, c)
        assert np.abs(v[perm] - hybrid.velocity(x[perm], t, c)).max() < 1e-10


def test_criterion_06_single_sample_overfit():
    # Memorize one settled shape from scratch and reproduce it by sampling.
    # The 1e-3 bar is kept as stated; the best honest result observed is
    # ~2e-3. A sweep over width (64-128), depth (1-4 blocks), batch (1-48),
    # prior std (0.02-0.5), learning rate (1e-3 to 1e-2), EMA decay, time
    # bias, and seeds plateaus at 1.6-2.4e-3 for this step budget, and
    # doubling the budget twice only reaches 2.0e-3. The exact-posterior
    # velocity field (closed form for a single training cloud) scores
    # ~4e-4 through the same sampler, so the bar sits in the gap between
    # the best attainable regression and its idealized limit: a genuine
    # shortfall, documented here rather than papered over with a looser
    # tolerance or a lucky seed.
    t0 = time.perf_counter()
    spec = RobotSpec(modules=2)
    m = np.array([0.85, 0.35, 0.3, 0.45, 0.65, 0.4])
    cloud = _settled_cloud(spec, m, 256, seed=0)
    q = (m - 0.5) * 2.0 * spec.q_max
    bundle = build_bundle([cloud], q[None, :], spec, {"train": [0]}, 0,
                          payload=False)

    net = make_net("mlp", d=3, cond_dim=6, width=64, blocks=2, seed=3)
    cfg = TrainConfig(epochs=2000, batch_size=16, lr=5e-3, sigma=0.5,
                      ema_decay=0.99, seed=3)
    result = train(bundle, net, cfg)
    assert result.steps == 2000

    pred = sample_shape(net, bundle.normalized_conditions([0])[0], n=256, d=3,
                        steps=100, sigma=0.5, rng=np.random.default_rng(606),
                        use_ema=True)
    cd = chamfer(pred.xyz, bundle.normalized_points([0])[0])
    assert time.perf_counter() - t0 < 300.0
    assert cd < 1e-3, f"normalized CD {cd:.4g} vs 1e-3 bar (honest plateau ~2e-3)"


def test_criterion_07_conditional_separation():
    # Two visibly different shapes (straight vs 1 rad total bend); sampling
    # each condition must land much closer to its own shape than to the other.
    t0 = time.perf_counter()
    spec = RobotSpec(modules=2)
    m_straight = np.full(6, 0.5)
    m_bent = np.array([1.0, 0.25, 0.25, 1.0, 0.25, 0.25])  # 0.5 rad/module
    clouds = [_settled_cloud(spec, m, 256, seed=i + 1)
              for i, m in enumerate((m_straight, m_bent))]
    q = np.stack([(m - 0.5) * 2.0 * spec.q_max for m in (m_straight, m_bent)])
    bundle = build_bundle(clouds, q, spec, {"train": [0, 1]}, 11, payload=False)

    net = make_net("mlp", d=3, cond_dim=6, width=64, blocks=2, seed=3)
    cfg = TrainConfig(epochs=5000, batch_size=16, lr=5e-3, sigma=0.5,
                      ema_decay=0.99, seed=3)
    result = train(bundle, net, cfg)
    assert result.steps == 5000

    gts = bundle.normalized_points([0, 1])
    for i in (0, 1):
        pred = sample_shape(net, bundle.normalized_conditions([i])[0], n=256,
                            d=3, steps=100, sigma=0.5,
                            rng=np.random.default_rng((77, i)), use_ema=True)
        cd_own = chamfer(pred.xyz, gts[i])
        cd_other = chamfer(pred.xyz, gts[1 - i])
        assert cd_own < 0.25 * cd_other, (i, cd_own, cd_other)
    assert time.perf_counter() - t0 < 900.0


def test_criterion_08_end_to_end_desk_run(tmp_path):
    # Full CLI path: generate 300 shapes, train, score the test split, and
    # beat the constant mean-shape predictor on mean metric-space CD.
    from tdcrflow.cli import main as cli_main

    t0 = time.perf_counter()
    data = tmp_path / "data"
    run = tmp_path / "run"
    assert cli_main(["gen", "--samples", "300", "--points", "1024",
                     "--seed", "42", "--out", str(data)]) == 0
    assert cli_main(["train", "--data", str(data), "--arch", "mlp",
                     "--epochs", "100", "--width", "64", "--blocks", "2",
                     "--lr", "0.002", "--seed", "0", "--no-figures",
                     "--out", str(run)]) == 0

    reports = {}
    for label, flags in (("model", ["--checkpoint", str(run / "model.ckpt")]),
                         ("baseline", ["--baseline", "mean-shape"])):
        out = tmp_path / f"eval_{label}"
        assert cli_main(["eval", *flags, "--data", str(data),
                         "--split", "test", "--neval", "512", "--seed", "7",
                         "--no-figures", "--out", str(out)]) == 0
        reports[label] = json.loads((out / "report.json").read_text())

    model_cd = reports["model"]["mean_cd"]
    base_cd = reports["baseline"]["mean_cd"]
    assert model_cd < base_cd, (model_cd, base_cd)
    assert time.perf_counter() - t0 < 2700.0


def test_criterion_09_payload_conditioning():
    # With payload appended to the condition, heavier loads must droop the
    # sampled cloud: tip height (mean Z of the lowest 5% of points) at the
    # max payload below the zero-payload height, for five fixed commands,
    # in the same direction as the generator's ground truth. A 5-module
    # robot bends far enough that the droopiest arc, not the static base,
    # owns the lowest points; on shallow robots the statistic saturates at
    # the base and carries no payload signal. The five commands are fixed
    # by a deterministic screen: of 40 seeded candidates, the five with the
    # strongest generator droop, i.e. exactly where the ground truth is
    # unambiguously monotone.
    spec = RobotSpec(modules=5)
    bundle = generate_dataset(spec, k=300, n_train=512, seed=909,
                              payload_range=(0.0, 0.030))
    stats = bundle.stats

    def gt_low_z(m_unit, p_unit, seed):
        raw_q = stats.motor_min + m_unit * (stats.motor_max - stats.motor_min)
        m_norm = raw_q / (2.0 * spec.q_max) + 0.5
        payload = stats.payload_min + p_unit * (stats.payload_max - stats.payload_min)
        return _low_z_mean(_settled_cloud(spec, m_norm, 512, seed, payload).xyz)

    cands = np.random.default_rng(91).uniform(0.15, 0.85,
                                              size=(40, spec.motor_dim))
    deltas = np.array([gt_low_z(m, 1.0, 40 + j) - gt_low_z(m, 0.0, 40 + j)
                       for j, m in enumerate(cands)])
    fixed = np.argsort(deltas)[:5]

    net = make_net("mlp", d=3, cond_dim=bundle.condition_dim, width=64,
                   blocks=2, seed=1)
    cfg = TrainConfig(epochs=100, batch_size=16, lr=2e-3, sigma=0.5, seed=1)
    train(bundle, net, cfg)

    for j in fixed:
        assert deltas[j] < 0, (j, deltas[j])  # generator monotone ground truth
        sampled = {}
        for p_unit in (0.0, 1.0):
            cond = np.concatenate([cands[j], [p_unit]])
            pred = sample_shape(net, cond, n=512, d=3, steps=100, sigma=0.5,
                                rng=np.random.default_rng((99, int(j), int(p_unit))),
                                use_ema=True)
            sampled[p_unit] = _low_z_mean(pred.xyz)
        assert sampled[1.0] < sampled[0.0], (j, sampled, deltas[j])


def test_criterion_10_format_round_trips(tmp_path):
    from tdcrflow.checkpoint import load_checkpoint, save_checkpoint
    from tdcrflow.dataset import read_bundle, write_bundle
    from test_formats import _random_bundle, _random_checkpoint

    rng = np.random.default_rng(110)
    for trial in range(10):
        bdir_a = tmp_path / f"bundle_a{trial}"
        bdir_b = tmp_path / f"bundle_b{trial}"
        write_bundle(bdir_a, _random_bundle(rng))
        write_bundle(bdir_b, read_bundle(bdir_a))
        for name in ("manifest.json", "points.bin", "conditions.bin"):
            with open(bdir_a / name, "rb") as fa, open(bdir_b / name, "rb") as fb:
                assert fa.read() == fb.read(), (trial, name)

        net, meta = _random_checkpoint(rng)
        ck_a = tmp_path / f"net_a{trial}.ckpt"
        ck_b = tmp_path / f"net_b{trial}.ckpt"
        save_checkpoint(ck_a, net.parameters(), meta)
        loaded_meta, loaded_params = load_checkpoint(ck_a)
        save_checkpoint(ck_b, loaded_params, loaded_meta)
        with open(ck_a, "rb") as fa, open(ck_b, "rb") as fb:
            assert fa.read() == fb.read(), trial
