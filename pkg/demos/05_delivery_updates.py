"""Push incremental model updates to subscribed clients: a merge-mode client
applies deltas while a replace-mode client receives whole snapshots, and an
ROI subscription only sees its corner of the scene.

Run:  python3 demos/05_delivery_updates.py
"""

import numpy as np

from splatstream.core import SplatCloud
from splatstream.delivery import DeliveryClient, DeliveryServer

rng = np.random.default_rng(11)
n = 200
cloud = SplatCloud.from_arrays(
    positions=rng.uniform(-2, 2, (n, 3)),
    rotations=rng.normal(size=(n, 4)),
    log_scales=np.full((n, 3), -2.5),
    sh=rng.normal(size=(n, 1, 3)),
    opacity_logits=np.ones(n),
    sh_degree=0,
)
cloud.rebuild_tiling()

server = DeliveryServer(bind=("127.0.0.1", 0))
try:
    server.publish(cloud.snapshot())
    merge = DeliveryClient(server.address, mode="merge")
    replace = DeliveryClient(server.address, mode="replace")
    corner = DeliveryClient(server.address, mode="merge",
                            roi=(-2, -2, -2, 0, 0, 0))
    for client, name in ((merge, "merge"), (replace, "replace"),
                         (corner, "roi-corner")):
        update = client.recv_update()
        print(f"{name:11s} got initial snapshot: {len(client.model)} gaussians "
              f"(revision {update.revision_to})")

    # mutate the scene a few times: move some splats, add a few, drop one
    for round_i in range(3):
        moved = rng.integers(0, len(cloud), size=5)
        cloud.positions[moved] += rng.normal(scale=0.1, size=(5, 3)).astype("f4")
        cloud.append(rng.uniform(-2, 2, (2, 3)), rng.normal(size=(2, 4)),
                     np.full((2, 3), -2.5), rng.normal(size=(2, 1, 3)),
                     np.ones(2))
        keep = np.ones(len(cloud), dtype=bool)
        keep[rng.integers(len(cloud))] = False
        cloud.keep(keep)
        cloud.rebuild_tiling()
        server.publish(cloud.snapshot())

        update = merge.recv_update()
        print(f"round {round_i}: merge client applied delta "
              f"+{len(update.added['ids'])} ~{len(update.modified['ids'])} "
              f"-{len(update.removed)} -> {len(merge.model)} gaussians")
        replace.recv_update()
        corner.recv_update()

    print(f"\nreplace client tracks the full model: {len(replace.model)}")
    print(f"merge client's delta-built state matches: "
          f"{merge.model == replace.model}")
    print(f"roi client holds the corner only: {len(corner.model)} gaussians")
    lat = merge.latencies_ms
    print(f"publish->applied latency: p50 {np.percentile(lat, 50):.1f} ms "
          f"over {len(lat)} updates")
    merge.close()
    replace.close()
    corner.close()
finally:
    server.close()
