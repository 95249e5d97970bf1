"""Style tokens: learned conditioning the servers cannot read.

Each client learns a token that steers the frozen backbone toward its
own distribution. Tokens never leave the device; what travels is a
salt-keyed projection whose geometry still supports clustering.
"""

import numpy as np

from fedstack import (
    Denoiser,
    DiffusionSchedule,
    cluster_clients,
    cluster_purity,
    encode_domain,
    learn_style_token,
    make_style_dataset,
    pretrain_backbone,
)
from fedstack.diffusion import SampleBatch
from fedstack.rng import stream


def main():
    schedule = DiffusionSchedule.linear()
    base = Denoiser.create(stream("demo", "tok-den"))
    corpus = SampleBatch(
        2.5 * stream("demo", "tok-corpus").standard_normal((128, 2)))
    backbone = pretrain_backbone(base, corpus, 8, 0.05, schedule,
                                 stream("demo", "tok-pre"))

    styles = ["ring", "ring", "spiral", "spiral", "moons", "moons"]
    embeddings = []
    for cid, style in enumerate(styles):
        data = make_style_dataset(style, 30, stream("demo", "tok-data", cid))
        token = learn_style_token(backbone, data, 25, 0.3,
                                  stream("demo", "tok-fit", cid),
                                  schedule=schedule)
        emb = encode_domain(token, 99, cid)
        embeddings.append(emb)
        norm = float(np.linalg.norm(token.vector))
        print(f"client {cid} ({style:6s}): token norm {norm:6.3f}, "
              f"embedding is {emb.vector.size}-d unit vector")

    # same-style embeddings stay close, cross-style ones do not
    sim = np.array([e.vector for e in embeddings])
    sim = sim @ sim.T
    print(f"\nwithin-style cosine (client 0 vs 1): {sim[0, 1]:.3f}")
    print(f"cross-style cosine  (client 0 vs 2): {sim[0, 2]:.3f}")

    assignment = cluster_clients(embeddings, 0.5)
    truth = dict(enumerate(styles))
    print(f"clusters from encodings alone: {len(assignment)}, "
          f"purity {cluster_purity(assignment, truth):.2f}")


if __name__ == "__main__":
    main()
