"""Command line entry points: run, report, sweep, verify."""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ScenarioConfig, load_config
from .diffusion import Denoiser, DiffusionSchedule, StyleToken, ddpm_sample
from .errors import FedstackError
from .federation import DomainEmbedding, cluster_clients
from .lowrank import (
    AdapterSet,
    LoraAdapter,
    align_rank,
    average_adapters,
    energy_trace,
    stack_adapters,
    svd,
)
from .metrics import GaussianFit, cluster_purity, frechet_2d
from .rng import stream
from .scenario import render_report, run_scenario, sweep
from . import wire


def _check_stacking():
    rng = stream("verify", "stack")
    for _ in range(20):
        k = int(rng.integers(2, 5))
        members = [
            LoraAdapter("L", r, rng.standard_normal((r, 72)),
                        rng.standard_normal((80, r)), float(r))
            for r in rng.choice([4, 8, 16], size=k)
        ]
        coeffs = rng.random(k) + 0.1
        coeffs /= coeffs.sum()
        stacked = stack_adapters(members, coeffs)
        want = sum(c * m.delta for c, m in zip(coeffs, members))
        err = np.linalg.norm(stacked.delta - want) / max(np.linalg.norm(want), 1e-30)
        if err > 1e-9:
            return False, f"stacked delta off by {err:.2e}"
    return True, "20 randomized cases exact"


def _check_alignment():
    rng = stream("verify", "align")
    adapter = LoraAdapter("L", 4, rng.standard_normal((4, 10)),
                          rng.standard_normal((8, 4)), 4.0)
    padded = align_rank(adapter, 7)
    pad_err = float(np.abs(padded.delta - adapter.delta).max())
    if pad_err != 0.0:
        return False, f"padding moved the delta by {pad_err:.2e}"
    wide = LoraAdapter("L", 6, rng.standard_normal((6, 10)),
                       rng.standard_normal((8, 6)), 6.0)
    cut = align_rank(wide, 3)
    _, s, _ = np.linalg.svd(wide.delta)
    best = float(np.sqrt((s[3:] ** 2).sum()))
    got = float(np.linalg.norm(cut.delta - wide.delta))
    if abs(got - best) > 1e-8:
        return False, f"truncation error {got:.6f} vs optimum {best:.6f}"
    return True, "padding exact, truncation optimal"


def _check_svd():
    rng = stream("verify", "svd")
    a = rng.standard_normal((6, 4))
    u, s, v = svd(a)
    recon = float(np.abs(u @ np.diag(s) @ v.T - a).max())
    ortho = max(float(np.abs(u.T @ u - np.eye(4)).max()),
                float(np.abs(v.T @ v - np.eye(4)).max()))
    ref = np.linalg.svd(a, compute_uv=False)
    sval = float(np.abs(s - ref).max())
    ok = recon < 1e-9 and ortho < 1e-9 and sval < 1e-9
    return ok, f"recon {recon:.1e}, ortho {ortho:.1e}, values {sval:.1e}"


def _check_frechet():
    eye = np.eye(2)
    cases = [
        (GaussianFit([0, 0], eye), GaussianFit([0, 0], eye), 0.0),
        (GaussianFit([0, 0], eye), GaussianFit([1, 0], eye), 1.0),
        (GaussianFit([0, 0], 4 * eye), GaussianFit([0, 0], eye), 2.0),
    ]
    for fit_a, fit_b, want in cases:
        got = frechet_2d(fit_a, fit_b)
        if abs(got - want) > 1e-9:
            return False, f"expected {want}, got {got:.12f}"
    return True, "3 analytic cases within 1e-9"


def _check_cancellation():
    rng = stream("verify", "cancel")
    up = rng.standard_normal((8, 4))
    down = rng.standard_normal((4, 10))
    a = LoraAdapter("L", 4, down, up, 4.0)
    b = LoraAdapter("L", 4, down, -up, 4.0)
    avg = average_adapters([a, b], [0.5, 0.5])
    stacked = stack_adapters([a, b], [0.5, 0.5])
    member = energy_trace(a)
    cancel = energy_trace(avg) / member
    kept = min(
        energy_trace(LoraAdapter("blk", 4, stacked.down[i * 4:(i + 1) * 4, :],
                                 stacked.up[:, i * 4:(i + 1) * 4], 4.0))
        / (0.25 * member)
        for i in range(2)
    )
    ok = cancel <= 0.01 and kept >= 0.99
    return ok, f"fedavg keeps {cancel:.1e}, worst stacked block keeps {kept:.4f}"


def _check_clustering():
    rng = stream("verify", "cluster")
    embeddings = []
    for cid in range(9):
        vec = np.zeros(16)
        vec[cid // 3] = 1.0
        vec += 0.03 * rng.standard_normal(16)
        vec /= np.linalg.norm(vec)
        embeddings.append(DomainEmbedding(vec, cid))
    assignment = cluster_clients(embeddings, 0.5)
    truth = {cid: cid // 3 for cid in range(9)}
    purity = cluster_purity(assignment, truth)
    ok = len(assignment) == 3 and purity == 1.0
    return ok, f"{len(assignment)} clusters, purity {purity:.2f}"


def _check_handoff():
    den = Denoiser.create(stream("verify", "hand"), hidden=(16, 16))
    sched = DiffusionSchedule.linear()
    adapters = AdapterSet.random(den.layer_shapes, 4,
                                 stream("verify", "hand-a"), scale=0.4)
    token = StyleToken.neutral(den.token_dim)
    whole = ddpm_sample(den, adapters, 0.9, token, 5, sched,
                        stream("verify", "hand-s"))
    gen = stream("verify", "hand-s")
    part = ddpm_sample(den, adapters, 0.9, token, 5, sched, gen, stop=40)
    resumed = ddpm_sample(den, adapters, 0.9, token, 5, sched, gen,
                          start=(part.points, 40))
    ok = np.array_equal(whole.points, resumed.points)
    return ok, "split at step 40 is bitwise identical"


def _check_wire():
    den = Denoiser.create(stream("verify", "wire"))
    adapters = AdapterSet.random(den.layer_shapes, 16,
                                 stream("verify", "wire-a"))
    blob = wire.pack_adapter_set(adapters)
    upload = 13 + 4 + len(blob) + 137
    base = len(wire.serialize_denoiser(den))
    ok = upload == 51682 and base == 153729
    return ok, f"upload {upload} B, base {base} B ({100 * upload / base:.1f}%)"


def _check_determinism():
    config = ScenarioConfig.from_mapping({
        "seed": 0, "samples_per_client": 20, "rounds": 1, "epochs": 1,
        "pretrain": {"epochs": 4, "samples": 64}, "token_epochs": 10,
        "eval_samples": 30,
        "hybrid": {"rho": [0.2], "mix_loras": [1.0], "local_scale": [0.95]},
        "out_dir": "unused",
    })
    with tempfile.TemporaryDirectory() as tmp:
        first = run_scenario(config, out_dir=Path(tmp) / "a")
        second = run_scenario(config, out_dir=Path(tmp) / "b")
        for name in ("metrics.csv", "report.json"):
            if ((first.out_dir / name).read_bytes()
                    != (second.out_dir / name).read_bytes()):
                return False, f"{name} differs between identical runs"
    return True, "two micro-runs byte-identical"


CHECKS = (
    ("stacking_exactness", _check_stacking),
    ("median_alignment", _check_alignment),
    ("svd_contract", _check_svd),
    ("frechet_analytic", _check_frechet),
    ("cancellation_fixture", _check_cancellation),
    ("clustering_fixture", _check_clustering),
    ("handoff_identity", _check_handoff),
    ("wire_arithmetic", _check_wire),
    ("scenario_determinism", _check_determinism),
)


def run_verify(out=None) -> int:
    out = sys.stdout if out is None else out
    failures = 0
    for name, check in CHECKS:
        try:
            ok, detail = check()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        status = "ok" if ok else "FAIL"
        print(f"{status:>4}  {name:<22} {detail}", file=out)
        failures += 0 if ok else 1
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed", file=out)
    return 0 if failures == 0 else 1


def _error_record(exc: Exception) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)},
                      sort_keys=True)


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    artifacts = run_scenario(config, rounds=args.rounds, out_dir=args.out)
    print(f"wrote {artifacts.out_dir}/{{metrics.csv,report.json,"
          f"message_log.txt,adapters.bin}}")
    cells = artifacts.report["hybrid_cells"]
    ratios = [c["mean_ratio"] for c in cells if "mean_ratio" in c]
    if ratios:
        print(f"best mean Frechet ratio over {len(ratios)} cells: "
              f"{min(ratios):.3f}")
    return 0


def _cmd_report(args) -> int:
    print(render_report(args.dir))
    return 0


def _cmd_sweep(args) -> int:
    config = load_config(args.config)
    if args.rounds is not None:
        config = replace(config, rounds=args.rounds)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    summary = sweep(config, seeds, out_dir=args.out)
    print(f"swept seeds {summary['seeds']}")
    for cell in summary["cells"]:
        if "mean_ratio" not in cell:
            continue
        print(f"rho={cell['rho']:.2f} mix={cell['mix_loras']:.2f} "
              f"scale={cell['local_scale']:.2f}  mean ratio "
              f"{cell['mean_ratio']:.3f} (worst {cell['worst_ratio']:.3f})")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedstack",
        description="Federated LoRA stacking on a toy diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--rounds", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=_cmd_run)

    p_report = sub.add_parser("report", help="summarize a run directory")
    p_report.add_argument("dir")
    p_report.set_defaults(func=_cmd_report)

    p_sweep = sub.add_parser("sweep", help="run a config across seeds")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--seeds", default="0,1,2")
    p_sweep.add_argument("--rounds", type=int, default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_verify = sub.add_parser("verify", help="run the built-in check suite")
    p_verify.set_defaults(func=lambda args: run_verify())

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FedstackError as exc:
        print(_error_record(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
