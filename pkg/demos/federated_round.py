"""One federated round, watched from the wire.

Builds a three-style world, runs a training round, and prints what each
server actually saw: clustering, aggregation weights, and byte totals.
The training server never receives data or base weights; the inference
server receives exactly one aggregated adapter set.
"""

from fedstack import RoundConfig, ScenarioConfig, run_training_round
from fedstack.scenario import build_world

MICRO = {
    "seed": 0, "samples_per_client": 20, "epochs": 1,
    "pretrain": {"epochs": 4, "samples": 64}, "token_epochs": 10,
}


def main():
    config = ScenarioConfig.from_mapping(MICRO)
    world, styles = build_world(config)
    print(f"clients: {sorted(styles.items())}")

    report = run_training_round(world, RoundConfig(epochs=1))

    print(f"\nround {report.round_index}")
    groups = {cid: list(report.assignment.members[cid])
              for cid in report.assignment.cluster_ids}
    print(f"clusters: {groups}")
    for entry in report.coefficients.entries:
        state = "filtered" if entry.filtered else f"weight {entry.weight:.3f}"
        print(f"  cluster {entry.cluster_id}: ded {entry.ded:.3f}  "
              f"snt {entry.snt_dist:.3f}  {state}")

    print(f"\nuplink      {report.uplink_bytes:7d} B  (client adapters up)")
    print(f"downlink    {report.downlink_bytes:7d} B  (cluster models down)")
    print(f"interserver {report.interserver_bytes:7d} B  (global set to the "
          f"inference server)")

    print("\nmessage log:")
    for line in world.log.to_lines():
        print(f"  {line}")


if __name__ == "__main__":
    main()
