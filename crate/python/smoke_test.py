"""Smoke test for the shardflow Python module.

Uses an installed `shardflow` if there is one, otherwise builds the
extension with cargo and loads it from a temp dir.
"""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        import shardflow
        return shardflow
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "shardflow-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "release", "libshardflow.so")
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(tmp, "shardflow.so"))
    sys.path.insert(0, tmp)
    import shardflow
    return shardflow


def main():
    sf = load()

    assert sf.hash_key_to_executor(12345, 1) == 0
    assert sf.hash_key_to_shard(7, 256) == sf.hash_key_to_shard(7, 256)
    assert all(0 <= sf.hash_key_to_shard(k, 32) < 32 for k in range(1000))

    # M/M/1 closed form: 1 / (mu - lam)
    assert abs(sf.mmk_latency(5.0, 10.0, 1) - 0.2) < 1e-12
    assert math.isinf(sf.mmk_latency(10.0, 10.0, 1))

    topo = {
        "operators": [
            {"id": "src", "executor_count": 1, "cpu_cost_per_tuple": 1e-6, "output_selectivity": 1.0},
            {"id": "calc", "executor_count": 2, "shards_per_executor": 16, "cpu_cost_per_tuple": 0.001},
        ],
        "edges": [["src", "calc"]],
        "source_rate": 1500,
    }
    assert sf.validate_topology(json.dumps(topo)) == ["src", "calc"]
    cyclic = dict(topo, edges=[["src", "calc"], ["calc", "src"]])
    try:
        sf.validate_topology(json.dumps(cyclic))
        raise AssertionError("cycle accepted")
    except ValueError:
        pass

    snap = {
        "source_rate": 100.0,
        "arrival_rate": [100.0, 100.0],
        "service_rate": [60.0, 150.0],
        "state_bytes": [0.0, 0.0],
        "data_rate": [0.0, 0.0],
        "cores": [1, 1],
    }
    cores, met = sf.allocate(json.dumps(snap), 0.05, 8)
    assert met and all(k >= 1 for k in cores) and sum(cores) <= 8

    run = {
        "topology": topo,
        "policy": "ec",
        "duration": 3.0,
        "cluster": {"nodes": 1, "cores_per_node": 4},
        "workload": {"key_count": 100, "seed": 4},
    }
    a = sf.simulate(json.dumps(run))
    b = sf.simulate(json.dumps(run))
    assert a == b
    assert len(a["windows"]) == 3 and a["totals"]["tuples_completed"] > 0

    with tempfile.TemporaryDirectory() as out:
        rows = sf.run_experiment(os.path.join(ROOT, "configs", "smoke.json"), out, 1, False)
        assert len(rows) == 12
        assert os.path.exists(os.path.join(out, "summary.csv"))

    print("python smoke test ok")


if __name__ == "__main__":
    main()
