import argparse
import json
import os
import sys
import tempfile
from typing import Dict, List

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))

try:
    from main import main as tomostage_main
except Exception as e:
    print(f"ERROR: tomostage is not importable in this interpreter: {e}")
    sys.exit(1)


def tiny_config(size: int, n_hq: int, factor: int, epochs: int) -> Dict:
    train = {"epochs": epochs, "patience": max(1, epochs), "time_budget": 60.0}
    return {
        "phantom": {"size": size, "bubbles": 6, "r_min": 1.0, "r_max": max(1.0, size / 4 - 1)},
        "geometry": {"n_hq": n_hq, "factor": factor},
        "dataset": {"n_train": 1},
        "train": {"p": train, "s": dict(train, rotate=False), "r": train, "post": train},
        "regressor": {"hidden_layers": 1, "width": 4},
        "classical": {"grid": [{"level": 1, "wavelet": "haar", "sigma": 2.0}]},
        "bench": {"repeats": 1},
    }


def steps(work: str, config: str) -> List[List[str]]:
    data = os.path.join(work, "data", "manifest.json")
    model = os.path.join(work, "model")
    result = os.path.join(work, "infer", "manifest.json")
    common = ["--config", config]
    return [
        ["simulate", *common, "--out", os.path.join(work, "data")],
        ["train", *common, "--data", data, "--out", model],
        ["infer", *common, "--model", model, "--data", data, "--out", os.path.join(work, "infer")],
        ["evaluate", *common, "--result", result, "--reference", data, "--out", os.path.join(work, "eval")],
        ["gridsearch", *common, "--data", data, "--out", os.path.join(work, "grid")],
        ["bench", *common, "--model", model, "--data", data, "--out", os.path.join(work, "bench")],
    ]


def main():
    ap = argparse.ArgumentParser(description="Run a tiny end-to-end tomostage pipeline")
    ap.add_argument("--work", help="Working directory (default: a fresh temporary directory)")
    ap.add_argument("--size", type=int, default=16, help="Phantom edge length")
    ap.add_argument("--n-hq", type=int, default=8, help="High-quality angle count")
    ap.add_argument("--factor", type=int, default=2, help="Angle subsampling factor")
    ap.add_argument("--epochs", type=int, default=2, help="Epochs per stage")
    ns = ap.parse_args()

    work = ns.work or tempfile.mkdtemp(prefix="tomostage_probe_")
    os.makedirs(work, exist_ok=True)
    config = os.path.join(work, "probe_config.json")
    with open(config, "w", encoding="utf-8") as f:
        json.dump(tiny_config(ns.size, ns.n_hq, ns.factor, ns.epochs), f, indent=2)

    print("Work dir:", work)
    for argv in steps(work, config):
        print("Running:", " ".join(argv[:1]))
        code = tomostage_main(argv)
        if code != 0:
            print(f"FAILED: {argv[0]} exited with {code}")
            sys.exit(code)
    print("All steps passed.")


if __name__ == "__main__":
    main()
