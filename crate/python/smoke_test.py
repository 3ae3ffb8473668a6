"""Smoke test for the `lidet` Python module.

Build the module first, e.g. `maturin develop -m crates/py/Cargo.toml`, or
`cargo build --release -p lidet-py --features extension-module` and copy
`target/release/liblidet_py.so` to `lidet.so` somewhere on PYTHONPATH.
"""

import json
import math
import os
import tempfile

import lidet


def main():
    points, boxes = lidet.generate_scene(7)
    assert points and boxes, "scene should contain points and objects"
    again, _ = lidet.generate_scene(7)
    assert again == points, "scene generation must be deterministic"

    unit = lidet.Box3D([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0)
    shifted = lidet.Box3D([0.5, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0)
    assert abs(lidet.rotated_bev_iou(unit, shifted) - 1.0 / 3.0) < 1e-12

    pairs = lidet.hungarian_match([[1.0, 0.0], [0.0, 1.0]])
    assert sorted(pairs) == [(0, 1), (1, 0)], pairs
    assert lidet.focal_loss(0.0, True) > 0.0

    with tempfile.TemporaryDirectory() as tmp:
        cfg = lidet.RunConfig()
        text = cfg.to_toml()
        text = text.replace("train = 200", "train = 2").replace("val = 50", "val = 1")
        text = text.replace("num_queries = 900", "num_queries = 10")
        text = text.replace("epochs = 5", "epochs = 1")
        path = os.path.join(tmp, "lidet.toml")
        with open(path, "w") as f:
            f.write(text)

        lidet.run_cli(["--config", path, "gen"])
        ckpt = lidet.run_cli(["--config", path, "train"])
        report_path = lidet.run_cli(["--config", path, "eval", "--checkpoint", ckpt])
        with open(report_path) as f:
            report = json.load(f)
        assert report["num_frames"] == 1
        assert math.isfinite(report["map"])

        model = lidet.Model(lidet.RunConfig(path), ckpt)
        assert model.num_parameters > 0
        cloud = lidet.read_cloud(os.path.join(tmp, "data", "val", "000000.bin"))
        dets = model.detect(cloud, topk=5)
        assert len(dets) == 5
        assert all(dets[i][1] >= dets[i + 1][1] for i in range(4))

        try:
            lidet.run_cli(["--config", os.path.join(tmp, "missing.toml"), "gen"])
        except ValueError:
            pass
        else:
            raise AssertionError("missing config should raise ValueError")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
