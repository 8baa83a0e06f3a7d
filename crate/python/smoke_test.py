"""Import the compiled extension and exercise each exposed operation.

Build first:  PYO3_BUILD_EXTENSION_MODULE=1 cargo build --release -p kf-minset-py
Then run:     python3 python/smoke_test.py [path/to/libkf_minset_py.so]
"""

import importlib.util
import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def locate_library():
    if len(sys.argv) > 1:
        return Path(sys.argv[1])
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libkf_minset_py.so"
        if lib.exists():
            return lib
    sys.exit("libkf_minset_py.so not found; build the kf-minset-py crate first")


def load_module():
    tmp = Path(tempfile.mkdtemp())
    target = tmp / "kf_minset.so"
    shutil.copy(locate_library(), target)
    spec = importlib.util.spec_from_file_location("kf_minset", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    kf = load_module()

    p = kf.Pose.exp([1.0, 2.0, 3.0, 0.1, -0.2, 0.3])
    back = p.log()
    assert all(abs(a - b) < 1e-12 for a, b in zip(back, [1.0, 2.0, 3.0, 0.1, -0.2, 0.3]))
    ident = p.compose(p.inverse())
    assert max(abs(x) for x in ident.translation) < 1e-12
    assert abs(kf.similarity([1.0, 0.0], [1.0, 0.0]) - 1.0) < 1e-15

    world = json.dumps({"seed": 3, "trajectory": {"circle": {"radius": 10.0, "laps": 2}}})
    ds = kf.generate(world)
    assert len(ds) == len(ds.gt_poses) == len(ds.keyframes)
    assert ds.gt_loop_pairs, "two laps must revisit"

    window = ds.keyframes[:10]
    sol = kf.select_window(window)
    assert 2 <= len(sol["selected_ids"]) <= 10
    assert sol["power_set_size"] == 1023
    assert len(kf.power_set(window)) == sol["feasible_subsets"]

    kept_all = kf.stream_sample("all", ds.keyframes)
    kept_msa = kf.stream_sample("msa", ds.keyframes)
    assert kept_all == list(range(len(ds)))
    assert 0 < len(kept_msa) < len(kept_all)

    t, r = kf.ate(ds.gt_poses, ds.odom_poses)
    assert t > 0.0 and math.isfinite(r)

    g = kf.PoseGraph()
    info = [[100.0 if i == j else 0.0 for j in range(6)] for i in range(6)]
    g.add_node(0, kf.Pose.identity())
    g.add_node(1, kf.Pose([1.3, 0.0, 0.0]))
    g.add_edge("odom", 0, 1, kf.Pose([1.0, 0.0, 0.0]), info)
    summary = g.optimize()
    assert summary["final_error"] < 1e-12
    assert abs(g.poses()[1][1].translation[0] - 1.0) < 1e-9

    cfg = {
        "version": 1,
        "seed": 3,
        "dataset": {"synthetic": json.loads(world)},
        "methods": ["all", "msa"],
        "loops": {"exclusion_gap": 20},
        "record_wall_time": False,
    }
    out = kf.run_batch(json.dumps(cfg))
    rows = {row["method"]: row for row in out["methods"]}
    assert rows["msa"]["kept"] < rows["all"]["kept"]
    assert rows["all"]["ate_after"] < rows["all"]["ate_before"]
    assert out["report"].startswith("[run]")

    try:
        kf.run_batch(json.dumps({**cfg, "methods": []}))
    except ValueError:
        pass
    else:
        raise AssertionError("empty method list must be rejected")

    print("smoke test passed:", {m: (r["kept"], round(r["ate_after"], 4)) for m, r in rows.items()})


if __name__ == "__main__":
    main()
