"""End-to-end scenario execution and artifact persistence.

A scenario is: pre-train a generic backbone, hand each client a style
dataset and a learned conditioning token, run federated rounds, then score
the hybrid inference grid against the no-global-adapter baseline. Every
stream is keyed off the scenario seed, so a config fixes every emitted
byte of metrics.csv and report.json.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import wire
from .config import ScenarioConfig
from .diffusion import (
    STYLES,
    Denoiser,
    DiffusionSchedule,
    SampleBatch,
    StyleToken,
    ddpm_sample,
    learn_style_token,
    make_style_dataset,
    pretrain_backbone,
)
from .errors import ConfigError
from .federation import ClientProfile, encode_domain, fedavg_aggregate
from .lowrank import AdapterSet
from .metrics import cluster_purity, energy_report, frechet_points
from .protocol import (
    HybridConfig,
    RoundConfig,
    World,
    hybrid_infer,
    isolation_audit,
    run_training_round,
)
from .rng import stream

REFERENCE_SAMPLES = 2000

CSV_COLUMNS = ("phase", "round", "client_id", "style", "rho", "mix_loras",
               "local_scale", "frechet", "baseline_frechet", "ratio")

ARTIFACT_NAMES = ("metrics.csv", "report.json", "message_log.txt", "adapters.bin")


@dataclass(frozen=True)
class RunArtifacts:
    out_dir: Path
    report: dict
    rows: tuple


def generic_corpus(config: ScenarioConfig) -> SampleBatch:
    """The public pretraining set: style mixture plus an isotropic blob."""
    pre = config.pretrain
    n_styles = round(pre.style_mix * pre.samples)
    parts = []
    if pre.samples - n_styles:
        parts.append(pre.spread * stream(config.seed, "pretrain-blob")
                     .standard_normal((pre.samples - n_styles, 2)))
    share, extra = divmod(n_styles, len(STYLES))
    for i, style in enumerate(STYLES):
        take = share + (1 if i < extra else 0)
        if take:
            parts.append(make_style_dataset(
                style, take, stream(config.seed, "pretrain-style", style)).points)
    return SampleBatch(np.vstack(parts))


def build_world(config: ScenarioConfig) -> tuple[World, dict[int, str]]:
    """Backbone, clients with data + learned tokens, and the truth map."""
    seed = config.seed
    schedule = DiffusionSchedule.linear(config.schedule.steps,
                                        config.schedule.beta_start,
                                        config.schedule.beta_end)
    base = Denoiser.create(stream(seed, "base"))
    backbone = pretrain_backbone(base, generic_corpus(config),
                                 config.pretrain.epochs,
                                 config.pretrain.learning_rate, schedule,
                                 stream(seed, "pretrain-steps"))

    clients: dict[int, ClientProfile] = {}
    styles: dict[int, str] = {}
    cid = 0
    for block in config.styles:
        for _ in range(block.clients):
            data = make_style_dataset(block.style, config.samples_per_client,
                                      stream(seed, "data", cid))
            token = learn_style_token(backbone, data, config.token_epochs,
                                      config.token_learning_rate,
                                      stream(seed, "token", cid),
                                      schedule=schedule)
            adapters = AdapterSet.init_lora(backbone.layer_shapes, block.rank,
                                            stream(seed, "init", cid))
            clients[cid] = ClientProfile(
                cid, block.rank, adapters, token,
                encode_domain(token, seed, cid), config.samples_per_client,
                data, encoder_salt=seed)
            styles[cid] = block.style
            cid += 1
    return World(backbone, schedule, seed, clients), styles


def style_references(config: ScenarioConfig) -> dict[str, np.ndarray]:
    names = sorted({block.style for block in config.styles})
    return {
        s: make_style_dataset(s, REFERENCE_SAMPLES,
                              stream(config.seed, "reference", s)).points
        for s in names
    }


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        # plain-float repr even for numpy scalars
        return repr(float(value))
    return str(value)


def _round_rows(world, styles, refs, config, r):
    """Per-client fit of the personalized local model after round r."""
    rows = []
    neutral = StyleToken.neutral(world.denoiser.token_dim)
    for cid in sorted(world.clients):
        client = world.clients[cid]
        ours = ddpm_sample(world.denoiser, client.adapters, 1.0, client.token,
                           config.eval_samples, world.schedule,
                           stream(config.seed, "eval-round", r, cid)).points
        vanilla = ddpm_sample(world.denoiser, None, 0.0, neutral,
                              config.eval_samples, world.schedule,
                              stream(config.seed, "eval-vanilla", r, cid)).points
        fr = frechet_points(ours, refs[styles[cid]])
        base = frechet_points(vanilla, refs[styles[cid]])
        rows.append({
            "phase": "round", "round": r, "client_id": cid,
            "style": styles[cid], "rho": None, "mix_loras": None,
            "local_scale": None, "frechet": fr, "baseline_frechet": base,
            "ratio": fr / base,
        })
    return rows


def _hybrid_rows(world, styles, refs, config, final_round):
    rows = []
    for rho, mix, scale in config.hybrid.cells():
        label = ("grid", rho, mix, scale)
        common = dict(rho=rho, mix_loras=mix, local_scale=scale,
                      n_samples=config.eval_samples, stream_label=label)
        baseline = hybrid_infer(world, HybridConfig(use_global_lora=False,
                                                    **common))
        ours = None
        if world.ies_global is not None:
            ours = hybrid_infer(world, HybridConfig(use_global_lora=True,
                                                    **common))
        for cid in sorted(world.clients):
            ref = refs[styles[cid]]
            base_fr = frechet_points(baseline[cid].points, ref)
            fr = ratio = None
            if ours is not None:
                fr = frechet_points(ours[cid].points, ref)
                ratio = fr / base_fr
            rows.append({
                "phase": "hybrid", "round": final_round, "client_id": cid,
                "style": styles[cid], "rho": rho, "mix_loras": mix,
                "local_scale": scale, "frechet": fr,
                "baseline_frechet": base_fr, "ratio": ratio,
            })
    return rows


def _cell_summaries(rows):
    cells = {}
    for row in rows:
        if row["phase"] != "hybrid":
            continue
        key = (row["rho"], row["mix_loras"], row["local_scale"])
        cells.setdefault(key, []).append(row)
    out = []
    for (rho, mix, scale) in sorted(cells):
        group = cells[(rho, mix, scale)]
        by_style = {}
        for row in group:
            by_style.setdefault(row["style"], []).append(row)
        per_style = {}
        for style in sorted(by_style):
            rows_s = by_style[style]
            fr = [r["frechet"] for r in rows_s if r["frechet"] is not None]
            base = [r["baseline_frechet"] for r in rows_s]
            entry = {"baseline_frechet": float(np.mean(base))}
            if fr:
                entry["frechet"] = float(np.mean(fr))
                entry["ratio"] = entry["frechet"] / entry["baseline_frechet"]
            per_style[style] = entry
        cell = {"rho": rho, "mix_loras": mix, "local_scale": scale,
                "per_style": per_style,
                "mean_baseline": float(np.mean(
                    [e["baseline_frechet"] for e in per_style.values()]))}
        ratios = [e["ratio"] for e in per_style.values() if "ratio" in e]
        if ratios:
            cell["mean_frechet"] = float(np.mean(
                [e["frechet"] for e in per_style.values()]))
            cell["mean_ratio"] = float(np.mean(ratios))
        out.append(cell)
    return out


def _round_summary(report, world, styles):
    return {
        "round": report.round_index,
        "n_clusters": len(report.assignment),
        "purity": cluster_purity(report.assignment, styles),
        "flags": dict(report.flags),
        "truncated_layers": list(report.truncated_layers),
        "uplink_bytes": report.uplink_bytes,
        "downlink_bytes": report.downlink_bytes,
        "interserver_bytes": report.interserver_bytes,
        "coefficients": [
            {"cluster_id": e.cluster_id, "ded": e.ded, "snt_dist": e.snt_dist,
             "weight": e.weight, "filtered": e.filtered}
            for e in report.coefficients.entries
        ],
    }


def _communication_summary(world, config):
    uploads = {}
    for entry in world.log.entries:
        if entry.variant == "AdapterUpload" and entry.round_index == 1:
            uploads[entry.sender] = entry.n_bytes
    base_bytes = len(wire.serialize_denoiser(world.denoiser))
    summary = {
        "base_model_bytes": base_bytes,
        "upload_bytes_per_client": {str(c): b for c, b in sorted(uploads.items())},
        "total_bytes": world.log.total_bytes(),
    }
    if uploads:
        summary["max_upload_ratio"] = max(uploads.values()) / base_bytes
    return summary


def _cancellation_summary(world):
    if world.ies_global is None or len(world.tes_profiles) < 2:
        return None
    profiles = [world.tes_profiles[c] for c in sorted(world.tes_profiles)]
    fedavg = fedavg_aggregate(profiles)
    rows = energy_report([p.adapters for p in profiles], fedavg,
                         world.ies_global)
    return [
        {"layer_id": r.layer_id, "fedavg_energy": r.fedavg_energy,
         "stacked_energy": r.stacked_energy,
         "cancellation_ratio": r.cancellation_ratio}
        for r in rows
    ]


def _write_adapters(path, world):
    entries = []
    if world.ies_global is not None:
        entries.append(("global", world.ies_global))
    for cid in sorted(world.clients):
        entries.append((f"client_{cid}", world.clients[cid].adapters))
    parts = [struct.pack("<I", len(entries))]
    for label, adapters in entries:
        parts.append(wire.pack_str(label))
        parts.append(wire.pack_adapter_set(adapters))
    path.write_bytes(b"".join(parts))


def read_adapters(path) -> dict[str, AdapterSet]:
    """Parse an adapters.bin written by run_scenario."""
    cur = wire.Cursor(Path(path).read_bytes())
    (count,) = cur.unpack("<I")
    out = {}
    for _ in range(count):
        label = wire.read_str(cur)
        out[label] = wire.read_adapter_set(cur)
    return out


def run_scenario(config: ScenarioConfig, rounds: int | None = None,
                 out_dir=None) -> RunArtifacts:
    """Execute a full scenario and write the four artifact files.

    `rounds` and `out_dir` override the config without changing the
    experiment identity recorded in report.json (the echoed config drops
    out_dir for exactly that reason).
    """
    if rounds is None:
        rounds = config.rounds
    if rounds < 0:
        raise ConfigError("rounds must be >= 0")
    target = Path(out_dir if out_dir is not None else config.out_dir)
    target.mkdir(parents=True, exist_ok=True)

    world, styles = build_world(config)
    refs = style_references(config)

    round_config = RoundConfig(
        epochs=config.epochs, learning_rate=config.learning_rate,
        batch_size=config.batch_size, tau_c=config.tau_c,
        tau_ded=config.tau_ded, lambda_snt=config.lambda_snt)

    rows = []
    round_summaries = []
    for r in range(1, rounds + 1):
        report = run_training_round(world, round_config)
        round_summaries.append(_round_summary(report, world, styles))
        rows.extend(_round_rows(world, styles, refs, config, r))
    rows.extend(_hybrid_rows(world, styles, refs, config, rounds))

    findings = isolation_audit(world.log)
    echo = config.to_mapping()
    del echo["out_dir"]
    report = {
        "config": echo,
        "rounds_run": rounds,
        "n_clients": len(world.clients),
        "styles": {str(c): s for c, s in sorted(styles.items())},
        "rounds": round_summaries,
        "hybrid_cells": _cell_summaries(rows),
        "communication": _communication_summary(world, config),
        "cancellation": _cancellation_summary(world),
        "isolation_findings": list(findings),
    }

    csv_lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        csv_lines.append(",".join(_fmt(row[c]) for c in CSV_COLUMNS))
    (target / "metrics.csv").write_text("\n".join(csv_lines) + "\n",
                                        encoding="utf-8", newline="\n")
    (target / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n",
        encoding="utf-8", newline="\n")
    (target / "message_log.txt").write_text(
        "\n".join(world.log.to_lines()) + "\n", encoding="utf-8", newline="\n")
    _write_adapters(target / "adapters.bin", world)
    return RunArtifacts(target, report, tuple(rows))


def render_report(run_dir) -> str:
    """Human-readable summary of a finished run directory."""
    run_dir = Path(run_dir)
    report_path = run_dir / "report.json"
    if not report_path.exists():
        raise ConfigError(f"missing artifact: {report_path}")
    report = json.loads(report_path.read_text(encoding="utf-8"))
    for name in ("metrics.csv", "message_log.txt"):
        if not (run_dir / name).exists():
            raise ConfigError(f"missing artifact: {run_dir / name}")

    lines = []
    lines.append(f"run: {run_dir}")
    lines.append(f"clients: {report['n_clients']}  "
                 f"rounds: {report['rounds_run']}")
    if report["rounds"]:
        last = report["rounds"][-1]
        lines.append(f"final clustering: {last['n_clusters']} clusters, "
                     f"purity {last['purity']:.3f}")
        flags = [k for k, v in sorted(last["flags"].items()) if v]
        if flags:
            lines.append(f"flags: {', '.join(flags)}")
    lines.append("")
    lines.append("hybrid Frechet, ours vs no-global baseline "
                 "(ratio < 1 is an improvement):")
    lines.append(f"{'rho':>5} {'mix':>5} {'scale':>6} {'ours':>10} "
                 f"{'baseline':>10} {'ratio':>7}")
    for cell in report["hybrid_cells"]:
        ours = cell.get("mean_frechet")
        ratio = cell.get("mean_ratio")
        mark = ""
        if ratio is not None and ratio < 1.0:
            mark = "  improved"
        ours_txt = "-" if ours is None else format(ours, ".4f")
        ratio_txt = "-" if ratio is None else format(ratio, ".3f")
        lines.append(
            f"{cell['rho']:>5.2f} {cell['mix_loras']:>5.2f} "
            f"{cell['local_scale']:>6.2f} {ours_txt:>10} "
            f"{cell['mean_baseline']:>10.4f} {ratio_txt:>7}{mark}")
    lines.append("")
    comm = report["communication"]
    lines.append(f"base model: {comm['base_model_bytes']} bytes")
    if comm["upload_bytes_per_client"]:
        worst = max(comm["upload_bytes_per_client"].values())
        lines.append(f"largest client upload: {worst} bytes "
                     f"({100.0 * comm['max_upload_ratio']:.1f}% of base)")
    if report["cancellation"]:
        parts = [f"{row['layer_id']} {row['cancellation_ratio']:.4f}"
                 for row in report["cancellation"]]
        lines.append("fedavg cancellation ratio by layer: " + ", ".join(parts))
    findings = report["isolation_findings"]
    lines.append(f"isolation findings: {len(findings)}")
    for f in findings:
        lines.append(f"  {f}")
    return "\n".join(lines)


def sweep(config: ScenarioConfig, seeds, out_dir=None) -> dict:
    """Run the scenario once per seed and aggregate the grid ratios."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    base_dir = Path(out_dir if out_dir is not None else config.out_dir)
    base_dir.mkdir(parents=True, exist_ok=True)

    per_seed = {}
    for s in seeds:
        cfg = replace(config, seed=s)
        artifacts = run_scenario(cfg, out_dir=base_dir / f"seed_{s}")
        per_seed[s] = artifacts.report["hybrid_cells"]

    cells = {}
    for s, cell_list in per_seed.items():
        for cell in cell_list:
            key = (cell["rho"], cell["mix_loras"], cell["local_scale"])
            cells.setdefault(key, []).append(cell)
    aggregated = []
    for key in sorted(cells):
        group = cells[key]
        entry = {"rho": key[0], "mix_loras": key[1], "local_scale": key[2],
                 "seeds": len(group)}
        ratios = [c["mean_ratio"] for c in group if "mean_ratio" in c]
        if ratios:
            entry["mean_ratio"] = float(np.mean(ratios))
            entry["worst_ratio"] = float(np.max(ratios))
        aggregated.append(entry)

    summary = {"seeds": seeds, "cells": aggregated}
    (base_dir / "sweep.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n",
        encoding="utf-8", newline="\n")
    return summary
