"""Score view similarity with normalized mutual information and mine views.

Consistency training wants partner views that look as different as possible
while still showing the same container. The miner scores each candidate view
against the query with NMI over discretized grayscale intensities (1 means
identical, 0 means independent) and keeps the n lowest-scoring views. On a
dataset where half the views are near-duplicates, that choice matters: random
selection keeps feeding the model clones of the query.

Run from the repository root:

    python3 demos/02_view_mining.py
"""

from pathlib import Path

import numpy as np

from mvda.manifest import view_candidates
from mvda.synthetic import SynthConfig, generate_synthetic
from mvda.trainer import load_images
from mvda.viewmining import mine_view_sets, nmi, save_view_sets

OUT = Path("demo_out/mining")


def main():
    # 1. NMI on constructed rasters, to build intuition for the score.
    rng = np.random.default_rng(0)
    img = rng.uniform(0.0, 1.0, (16, 16, 3))
    print(f"NMI(image, itself)            = {nmi(img, img):.3f}")
    print(f"NMI(image, shuffled copy)     = "
          f"{nmi(img, rng.permutation(img.reshape(-1, 3)).reshape(16, 16, 3)):.3f}")
    cols = np.stack([np.array([[0.0, 1.0], [0.0, 1.0]])] * 3, axis=-1)
    rows = np.stack([np.array([[0.0, 0.0], [1.0, 1.0]])] * 3, axis=-1)
    print(f"NMI(column raster, row raster) = {nmi(cols, rows, bins=2, side=2):.3f} "
          f"(independent patterns)")

    # 2. Render a dataset where half of the 8 views per container are
    #    near-duplicates of view 0 (same crop, hair of brightness change).
    cfg = SynthConfig(
        class_count=2,
        containers_per_class_per_domain=1,
        dates=1,
        views_per_container_per_date=8,
        image_size=32,
        near_duplicate_fraction=0.5,
        seed=4,
    )
    manifest = generate_synthetic(cfg, OUT)
    images = load_images(manifest, OUT)
    print(f"\nrendered {len(manifest)} images, views 4..7 clone view 0's crop")

    # 3. Look at one query: NMI separates true alternative crops from clones.
    query = next(r for r in manifest if r.view_id == 0)
    print(f"\nquery {query.id}")
    for cand in view_candidates(query, manifest):
        score = nmi(images[query.id], images[cand.id])
        kind = "near-duplicate" if cand.view_id >= 4 else "distinct crop"
        print(f"  view {cand.view_id}: nmi={score:.3f}  ({kind})")

    # 4. Mine 3 partners per record both ways. The similarity-guided miner
    #    picks the lowest-NMI views; random sampling grabs whatever.
    mined = mine_view_sets(manifest, images, n=3, method="sgvm")
    sampled = mine_view_sets(manifest, images, n=3, method="random", seed=9)
    dup_ids = {r.id for r in manifest if r.view_id >= 4}

    def clone_rate(view_sets):
        picks = [vid for vs in view_sets.values() for vid in vs.member_ids]
        return sum(vid in dup_ids for vid in picks) / len(picks)

    print(f"\nclone share among mined partners:  sgvm {clone_rate(mined):.2f}  "
          f"random {clone_rate(sampled):.2f}")
    print(f"sgvm partners for the query above: "
          f"{[vid.rsplit('-', 1)[1] for vid in mined[query.id].member_ids]} "
          f"scores {[f'{s:.3f}' for s in mined[query.id].scores]}")

    # 5. View sets serialize to JSONL for reuse across training runs.
    save_view_sets(mined, OUT / "views.jsonl")
    print(f"\nwrote {OUT / 'views.jsonl'}")
    print((OUT / "views.jsonl").read_text().splitlines()[0][:100] + " ...")


if __name__ == "__main__":
    main()
