"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are repeated in the ``acceptance`` section of the terminal summary.
Criteria 4, 5 and 9 use the cached desk-scale build (see ``conftest.trained``).
"""

import math
import time

import numpy as np
import torch

from rpcodec.bdmetrics import RPCurve, bd_both, bd_rate, integrate, monotonicity_report
from rpcodec.codec import (
    EntropyModel,
    FactorizedCodec,
    compress,
    decode,
    encode,
    rate_estimate,
)
from rpcodec.codec.model import rate_bits
from rpcodec.degrade import DegradationSpec, make_pair
from rpcodec.harness import LearnedSystem, get_metrics, run_eval, synthetic_manifest
from rpcodec.images import synthetic_set
from rpcodec.restorer import MeanRevertingSDE, Restorer, RestorerConfig, task_loss
from rpcodec.trainer import (
    TrainConfig,
    compute_total_loss,
    controller_dataset,
    train_stage1,
)

BPP = (0.1, 0.2, 0.4, 0.8, 1.6, 3.2)


# ---- 1: BD identity and analytic oracles ------------------------------------


def test_criterion_1_bd_oracles(criterion):
    t0 = time.perf_counter()
    a = RPCurve(BPP, tuple(30 + 8 * math.log10(b) for b in BPP))
    ident = bd_rate(a, a).bd_rate_percent
    half = bd_rate(a, a.scaled(0.5)).bd_rate_percent
    # log10 r = (q - c)/k on both curves, so the integrand is linear in q.
    b = RPCurve(BPP, tuple(32 + 10 * math.log10(r) for r in BPP))
    got = bd_rate(a, b)
    lo, hi = got.overlap
    q = lo + (np.arange(10**5) + 0.5) * (hi - lo) / 10**5
    oracle = (10 ** np.mean((q - 32) / 10 - (q - 30) / 8) - 1) * 100
    rel = abs(got.bd_rate_percent - oracle) / abs(oracle)
    quad = integrate(np.cos, 0.0, 2.0)
    elapsed = time.perf_counter() - t0
    ok = (ident == 0.0 and abs(half + 50.0) <= 0.01 and rel <= 1e-3
          and abs(quad - math.sin(2.0)) < 1e-9 and elapsed < 10)
    criterion(1, ok, f"identity={ident} halved={half:.5f}% pair_rel_err={rel:.2e} runtime={elapsed:.2f}s")
    assert ok


# ---- 2: BD sign conventions -------------------------------------------------


def test_criterion_2_sign_conventions(criterion):
    rng = np.random.default_rng(2024)
    good = 0
    for _ in range(20):
        bpp = np.sort(rng.uniform(0.05, 2.0, 6))
        slope, rate_factor, gain = rng.uniform(2, 12), rng.uniform(0.4, 0.9), rng.uniform(0.1, 2.0)
        base = 20 + slope * np.log10(bpp)
        checks = []
        for orientation, sign in (("higher_better", 1), ("lower_better", -1)):
            a = RPCurve(tuple(bpp), tuple(sign * base), "m", orientation)
            t = RPCurve(tuple(bpp * rate_factor), tuple(sign * (base + gain)), "m", orientation)
            r = bd_both(a, t)
            checks += [r.bd_rate_percent < 0, sign * r.bd_quality_delta > 0]
        good += all(checks)
    ok = good == 20
    criterion(2, ok, f"{good}/20 constructions with BD-rate<0, lower-better dQ<0, higher-better dQ>0")
    assert ok


# ---- 3: entropy transport ---------------------------------------------------


def _random_model(rng, channels):
    pmfs = [rng.dirichlet(np.ones(int(rng.integers(1, 12)))) for _ in range(channels)]
    offsets = [int(rng.integers(-6, 1)) for _ in range(channels)]
    return EntropyModel.from_pmfs(pmfs, offsets, [0.02] * channels)


def _sample(rng, model, shape, escape_rate):
    out = np.empty(shape, dtype=np.int64)
    for ch in range(shape[2]):
        lo, hi = model.bounds[ch]
        p = model.freqs[ch][:-1] / model.freqs[ch][:-1].sum()
        out[:, :, ch] = rng.choice(np.arange(lo, hi + 1), size=shape[:2], p=p)
    esc = rng.random(shape) < escape_rate
    out[esc] += rng.choice([-1, 1], size=int(esc.sum())) * rng.integers(20, 5000, size=int(esc.sum()))
    return out


def test_criterion_3_entropy_transport(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    exact = 0
    for _ in range(1000):
        shape = (int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(1, 5)))
        model = _random_model(rng, shape[2])
        sym = _sample(rng, model, shape, 0.05)
        exact += np.array_equal(decode(encode(sym, model).to_bytes(), model), sym)
    within, worst = 0, 0.0
    for _ in range(5):
        model = _random_model(rng, 4)
        sym = _sample(rng, model, (32, 32, 4), 0.01)
        est = rate_estimate(sym, model) / 8
        diff = abs(len(encode(sym, model).payload) - est)
        within += diff <= 0.02 * est + 32
        worst = max(worst, diff / est)
    elapsed = time.perf_counter() - t0
    ok = exact == 1000 and within == 5 and elapsed < 60
    criterion(3, ok, f"round trips {exact}/1000, payload vs estimate on 4096-symbol latents "
                     f"worst {100 * worst:.2f}% ({within}/5 within 2% + 32 B), runtime={elapsed:.1f}s")
    assert ok


# ---- 4: stage-1 ladder ordering ---------------------------------------------


def test_criterion_4_ladder_ordering(trained, criterion):
    by_beta = sorted(trained.ladder, key=lambda b: b.beta)  # increasing beta
    bpp, err = [], []
    for b in by_beta:
        outs = [compress(x, b) for x in trained.fixture]
        bpp.append(float(np.mean([s.bpp for s, _ in outs])))
        err.append(float(np.mean([np.mean((xh - x) ** 2) for (_, xh), x in zip(outs, trained.fixture)])))
    bpp_ok = all(b1 > b2 for b1, b2 in zip(bpp, bpp[1:]))
    violations = [(by_beta[i].beta, by_beta[i + 1].beta) for i in range(len(err) - 1) if err[i + 1] < err[i]]
    ok = bpp_ok and len(violations) <= 1 and trained.stage1_seconds <= 3600
    detail = (f"bpp(beta up)={[round(v, 4) for v in bpp]} mse={[round(v, 5) for v in err]} "
              f"mse violations={violations} stage1={trained.stage1_seconds:.0f}s")
    criterion(4, ok, detail)
    assert ok


# ---- 5: joint vs cascade at matched bpp -------------------------------------


def test_criterion_5_joint_beats_cascade(trained, criterion):
    ideals = synthetic_set(30, 64, seed=70000)
    parts, ok = [], trained.stage2_seconds <= 2700
    for task in ("noise", "mask"):
        stats = {}
        for name, system in (("cascade", trained.cascade), ("joint", trained.joint)):
            bpp, loss = [], []
            for i, ideal in enumerate(ideals):
                p = make_pair(ideal, DegradationSpec(task, seed=5000 + i))
                stream, x_hat = compress(p.degraded, system.codec)
                out = system.restorer.restore(x_hat, system.controller.signal(x_hat))
                bpp.append(stream.bpp)
                loss.append(np.mean((out - p.ideal) ** 2))
            stats[name] = (np.mean(bpp), np.mean(loss))
        ratio = stats["joint"][0] / stats["cascade"][0]
        red = 1 - stats["joint"][1] / stats["cascade"][1]
        ok &= abs(ratio - 1) <= 0.05 and red >= 0.05
        parts.append(f"{task}: bpp ratio {ratio:.3f}, loss reduction {100 * red:.1f}%")
    criterion(5, ok, "; ".join(parts) + f"; stage2={trained.stage2_seconds:.0f}s")
    assert ok


# ---- 6: turning-point diagnostics -------------------------------------------


def test_criterion_6_turning_points(criterion):
    v = RPCurve(BPP[:5], (0.8, 0.6, 0.7, 0.8, 0.9))
    mono = RPCurve(BPP, (0.5, 0.6, 0.7, 0.8, 0.9, 1.0))
    v_tps = monotonicity_report(v).turning_points
    m_tps = monotonicity_report(mono).turning_points
    r = bd_rate(mono, v)
    used_run = bd_rate(mono, v.subset(1, 5))
    ok = (len(v_tps) == 1 and not m_tps and any("non-monotone" in w for w in r.warnings)
          and r.bd_rate_percent == used_run.bd_rate_percent)
    criterion(6, ok, f"V-shape turning points={[t.index for t in v_tps]}, monotone={len(m_tps)}, "
                     f"warned={bool(r.warnings)}, result from points 1..4")
    assert ok


# ---- 7: gradients and forward marginal --------------------------------------


def _fd_rel_errors(loss, params, rng, picks=3, h=1e-6):
    errs = []
    for p in params:
        for _ in range(picks):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            analytic = float(p.grad[idx])
            with torch.no_grad():
                orig = float(p[idx])
                p[idx] = orig + h
                up = float(loss())
                p[idx] = orig - h
                down = float(loss())
                p[idx] = orig
            numeric = (up - down) / (2 * h)
            errs.append(abs(analytic - numeric) / max(abs(numeric), 1e-7))
    return errs


def test_criterion_7_numerical_correctness(criterion):
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    codec = FactorizedCodec(hidden=8, latent=8, stages=2).double()
    restorer = Restorer(RestorerConfig(conditioning_dim=0, base_width=4)).double()
    with torch.no_grad():
        for p in restorer.net.head.parameters():
            p.normal_(0, 0.3)
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64, generator=g)
    ideal = torch.rand(2, 3, 16, 16, dtype=torch.float64, generator=g)
    cond0 = torch.zeros(2, 0, dtype=torch.float64)

    def total():
        x_hat, lik, _ = codec(x, generator=torch.Generator().manual_seed(5))
        pred, tgt = restorer.training_pair(x_hat, ideal, cond0)
        return compute_total_loss(x, x_hat, rate_bits(lik), pred, tgt, {"alpha": 1.0, "beta": 0.01, "gamma": 1.0})[0]

    codec.zero_grad()
    total().backward()
    named = dict(codec.named_parameters())
    total_err = max(_fd_rel_errors(total, [named[n] for n in ("g_a.0.weight", "g_s.0.weight", "g_a.1.beta")], rng))

    sde_r = Restorer(RestorerConfig(backend="mr_sde", sde_steps=5, base_width=4, conditioning_dim=3)).double()
    with torch.no_grad():
        for p in sde_r.net.head.parameters():
            p.normal_(0, 0.3)
    mu, x0, eps = (torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64) for _ in range(3))
    cond = torch.rand(2, 3, generator=g, dtype=torch.float64)
    t = torch.tensor([2, 5])

    def sde_loss():
        return task_loss(*sde_r.mr_sde_pair(mu, x0, cond, t, eps))

    sde_r.zero_grad()
    sde_loss().backward()
    named = dict(sde_r.named_parameters())
    sde_err = max(_fd_rel_errors(sde_loss, [named[n] for n in ("net.head.weight", "net.enc1.0.weight")], rng))

    theta = rng.uniform(0.1, 1.0, 6)
    sde = MeanRevertingSDE(theta, np.sqrt(2 * 0.05 * theta))
    mean, var = sde.forward_marginal(0.9, 0.2, 4)
    paths = sde.simulate_forward(0.9, 0.2, 4, n_paths=10**5, substeps=50, rng=rng)
    sim_err = max(abs(paths.mean() - mean) / abs(mean), abs(paths.var() - var) / var)

    ok = total_err <= 1e-3 and sde_err <= 1e-3 and sim_err <= 0.02
    criterion(7, ok, f"total-loss FD rel err {total_err:.1e}, score-loss FD rel err {sde_err:.1e}, "
                     f"marginal vs simulation {100 * sim_err:.2f}%")
    assert ok


# ---- 8: reproducibility -----------------------------------------------------


def test_criterion_8_reproducibility(criterion, toy_ladder):
    data = synthetic_set(16, 32, seed=123)
    cfg = TrainConfig(stage=1, epochs=2, batch_size=8, patch_size=16, ladder=[0, 5])
    runs = [[lg.loss_sequence() for lg in train_stage1(cfg, data)[1]] for _ in range(2)]
    manifest = synthetic_manifest("repro", ["noise", "mask"], per_task=2, seed=0, image_size=32)
    system = LearnedSystem.from_bundles("toy", toy_ladder)
    hashes = [run_eval(manifest, [system], get_metrics(["psnr", "mse"]), root_seed=0).report_hash() for _ in range(2)]
    ok = runs[0] == runs[1] and hashes[0] == hashes[1]
    criterion(8, ok, f"runlogs identical={runs[0] == runs[1]}, report hash {hashes[0][:12]} x2 equal={hashes[0] == hashes[1]}")
    assert ok


# ---- 9: controller accuracy -------------------------------------------------


def test_criterion_9_controller_accuracy(trained, criterion):
    ideals = synthetic_set(200, 64, seed=9000)
    x, y, _ = controller_dataset(trained.ladder, ideals, per_class=100, seed=4242)
    pred = trained.controller.predict(torch.from_numpy(x.transpose(0, 3, 1, 2).copy())).numpy()
    which = np.arange(len(y)) % len(trained.ladder)
    per_q = {b.quality_index: float(np.mean(pred[which == i] == y[which == i])) for i, b in enumerate(trained.ladder)}
    pooled = float(np.mean(pred == y))
    ok = pooled >= 0.80 and min(per_q.values()) >= 0.80
    criterion(9, ok, f"pooled {100 * pooled:.1f}% over {len(y)} held-out images; per quality "
                     + ", ".join(f"q{q}={100 * a:.0f}%" for q, a in sorted(per_q.items())))
    assert ok
