"""Builds the Python extension and exercises it.

Usage: python3 python/smoke_test.py [--release]
"""

import json
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build(release: bool) -> Path:
    cmd = ["cargo", "build", "-p", "trainforge-py", "--features", "extension-module"]
    if release:
        cmd.append("--release")
    subprocess.run(cmd, cwd=ROOT, check=True)
    lib = ROOT / "target" / ("release" if release else "debug") / "libtrainforge.so"
    if not lib.exists():
        sys.exit(f"extension not found at {lib}")
    return lib


def load(lib: Path, dest: Path):
    shutil.copy(lib, dest / "trainforge.so")
    sys.path.insert(0, str(dest))
    import trainforge

    return trainforge


CORPUS_CONFIG = """task: text-classification
base_model: none
project_name: smoke
data:
  path: data/train.jsonl
  train_split: train
  column_mapping: {text_column: text, target_column: label}
params: {epochs: 2, batch_size: 8, lr: 0.05, feature_dim: 256, seed: 3}
"""


def main() -> None:
    lib = build("--release" in sys.argv)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        tf = load(lib, tmp)

        tasks = tf.list_tasks()
        assert len(tasks) == 22, tasks
        assert "llm:orpo" in tasks

        params = tf.task_params("text-classification")
        assert params["epochs"] >= 1 and "lr" in params, params

        canon = tf.canonicalize(CORPUS_CONFIG, {})
        assert canon.startswith("task: text-classification"), canon
        assert tf.canonicalize(canon, {}) == canon
        try:
            tf.canonicalize(CORPUS_CONFIG.replace("seed: 3", "seed: 3, bogus: 1"), {})
        except tf.ConfigError as e:
            kind, key_path, _ = e.args
            assert (kind, key_path) == ("UnknownParam", "params.bogus"), e.args
            assert isinstance(e, ValueError)
        else:
            raise AssertionError("unknown param accepted")

        theta, m, v, t = tf.adamw_step([0.0], [1.0], [0.0], [0.0], 0, 0.1)
        assert t == 1 and math.isclose(m[0], 0.1, abs_tol=1e-12)
        assert abs(theta[0] - (-0.1 / (1.0 + 1e-8))) <= 1e-12, theta

        (tmp / "data").mkdir()
        words = {"pos": ["great", "superb", "lovely"], "neg": ["awful", "dreadful", "boring"]}
        with open(tmp / "data" / "train.jsonl", "w") as f:
            for i in range(60):
                label = "pos" if i % 2 == 0 else "neg"
                text = " ".join(words[label][(i + k) % 3] for k in range(3))
                f.write(json.dumps({"text": text, "label": label}) + "\n")
        first = tf.run(CORPUS_CONFIG, str(tmp), {})
        assert first["status"] == "succeeded", first
        assert (Path(first["artifact_dir"]) / "model.bin").exists()
        again = tf.run(CORPUS_CONFIG, str(tmp), {})
        assert again["losses"] == first["losses"]

    print(f"python smoke test passed ({len(tasks)} tasks, {first['global_step']} steps)")


if __name__ == "__main__":
    main()
