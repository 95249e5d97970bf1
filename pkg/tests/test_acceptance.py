"""Acceptance gate: the eleven shipping criteria, one test per criterion.

Run with -v and the test list reads as the checklist. Every numeric
tolerance and runtime budget is pinned here rather than imported, so a
regression in any module trips exactly the criterion it breaks. The three
full-size end-to-end runs are shared through a module fixture; everything
else builds its own small fixtures.
"""

import time

import numpy as np
import pytest

from fedstack import (
    IES,
    TES,
    AdapterSet,
    ClientProfile,
    Denoiser,
    DiffusionSchedule,
    GaussianFit,
    HybridConfig,
    LoraAdapter,
    SampleBatch,
    ScenarioConfig,
    StyleToken,
    World,
    align_rank,
    average_adapters,
    cluster_clients,
    cluster_purity,
    ddpm_sample,
    encode_domain,
    energy_trace,
    frechet_2d,
    hybrid_infer,
    median_rank,
    run_scenario,
    server_steps,
    stack_adapters,
    stream,
    stream_from_id,
    stream_id,
)
from fedstack.diffusion import denoising_loss_and_grads, denoising_loss
from fedstack.federation import DomainEmbedding, EMBED_DIM

# ---------------------------------------------------------------- criterion 7/8/10/11 fixture


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Default scenario, seeds 0..2, timed once and shared."""
    config = ScenarioConfig()
    base = tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    runs = {
        seed: run_scenario(ScenarioConfig(seed=seed), out_dir=base / f"seed_{seed}")
        for seed in (0, 1, 2)
    }
    elapsed = time.perf_counter() - t0
    return {"config": config, "runs": runs, "elapsed": elapsed}


def _line(n, detail):
    print(f"criterion {n:>2} PASS: {detail}")


# ---------------------------------------------------------------- 1


def test_criterion_01_stacking_exactness():
    t0 = time.perf_counter()
    rng = stream("accept", "stack")
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 5))
        members = [
            LoraAdapter("L", int(r), rng.standard_normal((int(r), 260)),
                        rng.standard_normal((280, int(r))), float(r))
            for r in rng.choice([4, 8, 16, 64], size=k)
        ]
        coeffs = rng.random(k) + 0.05
        stacked = stack_adapters(members, coeffs)
        want = sum(c * m.delta for c, m in zip(coeffs, members))
        err = np.linalg.norm(stacked.delta - want) / np.linalg.norm(want)
        worst = max(worst, err)
        assert err <= 1e-9
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    _line(1, f"100 cases, worst relative error {worst:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------- 2


def test_criterion_02_median_aligned_padding():
    t0 = time.perf_counter()
    assert median_rank([4, 16, 64]) == 16

    rng = stream("accept", "align")
    low = LoraAdapter("L", 4, rng.standard_normal((4, 72)),
                      rng.standard_normal((80, 4)), 4.0)
    padded = align_rank(low, 16)
    assert padded.rank == 16
    assert float(np.abs(padded.delta - low.delta).max()) == 0.0

    high = LoraAdapter("L", 64, rng.standard_normal((64, 72)),
                       rng.standard_normal((80, 64)), 64.0)
    truncated = align_rank(high, 16)
    assert truncated.rank == 16
    got = float(np.linalg.norm(high.delta - truncated.delta))
    sigma = np.linalg.svd(high.delta, compute_uv=False)
    best = float(np.sqrt(np.sum(sigma[16:] ** 2)))
    assert abs(got - best) <= 1e-8
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    _line(2, f"padding exact, truncation within {abs(got - best):.1e} "
             f"of the rank-16 optimum")


# ---------------------------------------------------------------- 3


def _flatten(adapters, token):
    parts = [token.vector]
    for name in adapters.layer_ids:
        parts.append(adapters[name].up.ravel())
        parts.append(adapters[name].down.ravel())
    return np.concatenate(parts)


def _unflatten(vec, adapters, token):
    token_new = StyleToken(vec[: token.vector.size].copy(), "assigned")
    pos = token.vector.size
    updated = {}
    for name in adapters.layer_ids:
        a = adapters[name]
        up = vec[pos: pos + a.up.size].reshape(a.up.shape).copy()
        pos += a.up.size
        down = vec[pos: pos + a.down.size].reshape(a.down.shape).copy()
        pos += a.down.size
        updated[name] = LoraAdapter(name, a.rank, down, up, a.alpha)
    return AdapterSet(updated), token_new


def test_criterion_03_gradient_correctness():
    t0 = time.perf_counter()
    schedule = DiffusionSchedule.linear()
    worst = 0.0
    for seed in (21, 22, 23):
        den = Denoiser.create(stream("accept", "grad-den", seed),
                              hidden=(10, 8), time_dim=4, token_dim=3)
        rng = stream("accept", "grad", seed)
        adapters = AdapterSet.random(den.layer_shapes, 2, rng, scale=0.3)
        token = StyleToken(0.3 * rng.standard_normal(3), "assigned")
        batch = SampleBatch(rng.standard_normal((5, 2)))
        t = rng.integers(1, schedule.steps + 1, size=5)
        noise = rng.standard_normal((5, 2))

        _, grads, g_token = denoising_loss_and_grads(
            den, adapters, token, batch, t, noise, schedule)
        analytic = [g_token]
        for name in adapters.layer_ids:
            analytic.append(grads[name][0].ravel())
            analytic.append(grads[name][1].ravel())
        analytic = np.concatenate(analytic)

        theta = _flatten(adapters, token)
        h = 1e-5
        fd = np.empty_like(theta)
        for i in range(theta.size):
            bumped = theta.copy()
            bumped[i] = theta[i] + h
            a_plus, t_plus = _unflatten(bumped, adapters, token)
            bumped[i] = theta[i] - h
            a_minus, t_minus = _unflatten(bumped, adapters, token)
            fd[i] = (
                denoising_loss(den, a_plus, t_plus, batch, t, noise, schedule)
                - denoising_loss(den, a_minus, t_minus, batch, t, noise,
                                 schedule)
            ) / (2 * h)
        rel = np.abs(analytic - fd) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
        worst = max(worst, float(rel.max()))
        assert float(rel.max()) < 1e-4
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    _line(3, f"3 configurations, worst relative error {worst:.1e}, "
             f"{elapsed:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_04_cancellation_analogue():
    t0 = time.perf_counter()
    rng = stream("accept", "cancel")
    up = rng.standard_normal((24, 4))
    down = rng.standard_normal((4, 20))
    a = LoraAdapter("L", 4, down, up, 4.0)
    b = LoraAdapter("L", 4, down.copy(), -up, 4.0)

    fedavg = average_adapters([a, b], [0.5, 0.5])
    cancel = energy_trace(fedavg) / energy_trace(a)
    assert cancel <= 0.01

    stacked = stack_adapters([a, b], [0.5, 0.5])
    kept = []
    for i, member in enumerate((a, b)):
        block = LoraAdapter("blk", 4, stacked.down[i * 4:(i + 1) * 4, :],
                            stacked.up[:, i * 4:(i + 1) * 4], 4.0)
        weighted = 0.25 * energy_trace(member)  # energy scales with w^2
        kept.append(energy_trace(block) / weighted)
    assert min(kept) >= 0.99
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    _line(4, f"fedavg keeps {cancel:.1e} of member energy, worst stacked "
             f"block keeps {min(kept):.4f}")


# ---------------------------------------------------------------- 5


def test_criterion_05_clustering_recovery():
    t0 = time.perf_counter()
    for seed in range(5):
        rng = stream("accept", "cluster", seed)
        embeddings = []
        for cid in range(9):
            vec = np.zeros(EMBED_DIM)
            vec[cid // 3] = 1.0
            vec += 0.05 * rng.standard_normal(EMBED_DIM)
            vec /= np.linalg.norm(vec)
            embeddings.append(DomainEmbedding(vec, cid))
        assignment = cluster_clients(embeddings, 0.5)
        truth = {cid: cid // 3 for cid in range(9)}
        assert len(assignment) == 3, f"seed {seed}"
        assert cluster_purity(assignment, truth) == 1.0, f"seed {seed}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    _line(5, "9 clients recover 3 pure clusters on all 5 seeds")


# ---------------------------------------------------------------- 6


def test_criterion_06_handoff_identity():
    t0 = time.perf_counter()
    schedule = DiffusionSchedule.linear()
    assert schedule.steps == 50
    assert server_steps(0.2, 50) == 10
    assert server_steps(0.3, 50) == 15

    for rho in (0.0, 0.2, 0.3):
        den = Denoiser.create(stream("accept", "hand-den"))
        adapters = AdapterSet.random(den.layer_shapes, 16,
                                     stream("accept", "hand-adp"), scale=0.4)
        neutral = StyleToken.neutral(den.token_dim)
        salt = 900
        clients = {
            cid: ClientProfile(cid, 16, adapters, neutral,
                               encode_domain(neutral, salt, cid), 10)
            for cid in range(2)
        }
        world = World(den, schedule, salt, clients)
        world.ies_global = adapters

        out = hybrid_infer(world, HybridConfig(
            rho=rho, mix_loras=0.9, local_scale=0.9, n_samples=6,
            stream_label=("accept", rho)))
        sid = stream_id(salt, "infer", ("accept", rho), rho, 0.9, 6)
        ref = ddpm_sample(den, adapters, 0.9, neutral, 6, schedule,
                          stream_from_id(sid))
        for cid in clients:
            assert np.array_equal(out[cid].points, ref.points), f"rho={rho}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    _line(6, f"split runs bitwise equal at rho 0/0.2/0.3, server steps "
             f"10 and 15 at T=50, {elapsed:.1f}s")


# ---------------------------------------------------------------- 7


def test_criterion_07_end_to_end_personalization(e2e):
    config = e2e["config"]
    # pinned scenario shape: rank 16, 100 samples per client, 50 steps,
    # and the judged grid cell present
    assert all(block.rank == 16 for block in config.styles)
    assert config.samples_per_client == 100
    assert config.schedule.steps == 50
    assert (0.2, 1.0, 0.95) in set(config.hybrid.cells())

    best = 1.0
    summary = []
    for seed, artifacts in sorted(e2e["runs"].items()):
        (cell,) = [c for c in artifacts.report["hybrid_cells"]
                   if (c["rho"], c["mix_loras"], c["local_scale"])
                   == (0.2, 1.0, 0.95)]
        mean_ratio = cell["mean_ratio"]
        assert mean_ratio <= 0.8, f"seed {seed}: mean ratio {mean_ratio:.3f}"
        for style, entry in cell["per_style"].items():
            assert entry["ratio"] <= 1.0, \
                f"seed {seed} style {style}: ratio {entry['ratio']:.3f}"
        best = min(best, mean_ratio)
        summary.append(f"seed {seed} mean {mean_ratio:.3f}")
    assert e2e["elapsed"] <= 600.0
    stretch = "met" if best <= 0.6 else "not met"
    _line(7, f"{'; '.join(summary)}; best {best:.3f} "
             f"(0.6 stretch goal {stretch}, not required); "
             f"{e2e['elapsed']:.0f}s for 3 runs")


# ---------------------------------------------------------------- 8


def test_criterion_08_isolation_audit(e2e):
    t0 = time.perf_counter()
    for seed, artifacts in sorted(e2e["runs"].items()):
        assert artifacts.report["isolation_findings"] == [], f"seed {seed}"
        log_text = (artifacts.out_dir / "message_log.txt").read_text(
            encoding="utf-8")
        lines = [ln for ln in log_text.splitlines() if ln]
        assert lines, "empty message log"
        for line in lines:
            _, sender, receiver, variant, _ = line.split(",")
            if int(receiver) == TES:
                assert variant == "AdapterUpload", line
            if int(receiver) == IES:
                assert variant in ("GlobalLoraToIES", "InferRequest"), line
            if variant == "AdapterUpload":
                assert int(receiver) == TES, line
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    _line(8, "zero payload findings, log scan clean on all 3 seeds")


# ---------------------------------------------------------------- 9


def test_criterion_09_metric_correctness():
    t0 = time.perf_counter()
    eye = np.eye(2)
    cases = [
        (GaussianFit([0.0, 0.0], eye), GaussianFit([0.0, 0.0], eye), 0.0),
        (GaussianFit([0.0, 0.0], eye), GaussianFit([1.0, 0.0], eye), 1.0),
        (GaussianFit([0.0, 0.0], 4 * eye), GaussianFit([0.0, 0.0], eye), 2.0),
    ]
    for fit_a, fit_b, want in cases:
        assert abs(frechet_2d(fit_a, fit_b) - want) <= 1e-9
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    _line(9, "identical -> 0, unit shift -> 1, 4I vs I -> 2, all within 1e-9")


# ---------------------------------------------------------------- 10


def test_criterion_10_determinism(e2e, tmp_path):
    t0 = time.perf_counter()
    first = e2e["runs"][0]
    again = run_scenario(ScenarioConfig(seed=0), out_dir=tmp_path / "again")
    for name in ("report.json", "metrics.csv"):
        assert ((first.out_dir / name).read_bytes()
                == (again.out_dir / name).read_bytes()), name
    elapsed = time.perf_counter() - t0
    assert elapsed <= 2 * e2e["elapsed"]
    _line(10, f"rerun byte-identical in {elapsed:.0f}s")


# ---------------------------------------------------------------- 11


def test_criterion_11_communication_accounting(e2e):
    t0 = time.perf_counter()
    den = Denoiser.create(stream("accept", "arch"))

    # arithmetic oracle: every field counted by hand, not by the serializer
    upload = 13 + 4 + 4  # header, client id, adapter count
    for name, (d_out, d_in) in den.layer_shapes.items():
        r = min(16, d_out, d_in)
        upload += 4 + len(name.encode()) + 4 + 8  # name, rank, alpha
        upload += 8 + 8 * d_out * r  # up factor
        upload += 8 + 8 * r * d_in  # down factor
    upload += 4 + 1 + 4 + 8 * EMBED_DIM  # domain embedding block
    assert upload == 51682

    base = 4
    for layer in den.layers:
        base += 4 + len(layer.name.encode())
        base += 4 + len(layer.activation.encode())
        base += 8 + 8 * layer.weight.size
        base += 4 + 8 * layer.bias.size
    base += 4 + sum(4 + len(n.encode()) for n in den.adaptable)
    base += 12  # dimension triple
    assert base == 153729

    for seed, artifacts in sorted(e2e["runs"].items()):
        comm = artifacts.report["communication"]
        assert comm["base_model_bytes"] == base, f"seed {seed}"
        uploads = comm["upload_bytes_per_client"]
        assert len(uploads) == 3
        for cid, n_bytes in uploads.items():
            assert n_bytes == upload, f"seed {seed} client {cid}"
            assert n_bytes < 0.45 * base
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    _line(11, f"uploads exactly {upload} B, {100 * upload / base:.1f}% of "
              f"the {base} B base")
