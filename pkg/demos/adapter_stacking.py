"""Why averaging LoRA factors loses styles and stacking does not.

Two clients hold adapters with equal-and-opposite deltas. Factor
averaging annihilates them; stacking keeps both contributions exactly.
"""

import numpy as np

from fedstack import LoraAdapter, average_adapters, energy_trace, stack_adapters
from fedstack.rng import stream


def main():
    rng = stream("demo", "stack")
    up = rng.standard_normal((24, 4))
    down = rng.standard_normal((4, 20))
    a = LoraAdapter("h1", 4, down, up, 4.0)
    b = LoraAdapter("h1", 4, down.copy(), -up, 4.0)

    member = energy_trace(a)
    print(f"per-member delta energy     {member:10.4f}")

    fedavg = average_adapters([a, b], [0.5, 0.5])
    print(f"factor-averaged energy      {energy_trace(fedavg):10.4f}"
          f"   ({energy_trace(fedavg) / member:.1e} of a member)")

    stacked = stack_adapters([a, b], [0.5, 0.5])
    print(f"stacked adapter rank        {stacked.rank:10d}")

    # the stacked delta is exactly the weighted sum, block by block
    want = 0.5 * a.delta + 0.5 * b.delta
    err = np.abs(stacked.delta - want).max()
    print(f"stacked vs sum_i w_i*delta_i    max abs error {err:.2e}")
    for i, name in enumerate("ab"):
        block = LoraAdapter("blk", 4, stacked.down[i * 4:(i + 1) * 4, :],
                            stacked.up[:, i * 4:(i + 1) * 4], 4.0)
        frac = energy_trace(block) / (0.25 * member)
        print(f"block {name} retains {frac:.4f} of its weighted member energy")


if __name__ == "__main__":
    main()
