"""Smoke test for the handseg Python extension.

Build and install first:
    pip install maturin
    maturin develop -m crates/py/Cargo.toml --release
"""

import os
import tempfile

import handseg


def check_spec():
    spec = handseg.NetworkSpec()
    counts = spec.count_params()
    assert counts["savings"] == counts["encoder"]
    assert counts["total_independent"] - counts["total_shared"] == counts["savings"]
    assert len(spec.layers()) == 13 + 2 * 13
    desk = handseg.NetworkSpec.desk_scale()
    assert desk.input_size == 32
    print("spec:", spec, "savings", counts["savings"])


def check_preprocess():
    scene = handseg.synth_scene(seed=3, index=0)
    w, h = scene["width"], scene["height"]
    assert len(scene["depth"]) == w * h
    box = scene["bbox"]
    mode = handseg.depth_mode(scene["depth"], w, h, box)
    hand = {d for d, c in zip(scene["depth"], scene["components"]) if c}
    assert mode in hand, mode
    got_mode, crop = handseg.threshold_hand(scene["depth"], w, h, box)
    assert got_mode == mode
    assert len(crop) == (box[2] - box[0] + 1) * (box[3] - box[1] + 1)
    assert all(d == 0 or abs(d - mode) < 300 for d in crop)
    regions = handseg.propose_regions(scene["depth"], w, h)
    assert regions, "no region found"
    print("preprocess: mode", mode, "regions", regions)


def check_metrics():
    assert handseg.precision_curve([0.5, 1.2, 0.9], [1.0]) == [2 / 3]
    curve = handseg.seg_error_curve([[1, 1, 0], [2, 0, 0]], [[1, 1, 0], [2, 2, 0]], [0.0, 0.5, 1.0])
    assert curve == [0.5, 1.0, 1.0], curve
    tips = handseg.tip_centers([0, 2, 2, 0, 2, 2, 0, 0, 0], 3, 3)
    assert tips[0] == (1.5, 0.5) and tips[1] is None, tips
    print("metrics: ok")


def check_gradients():
    names = handseg.gradcheck_cases()
    for i, name in enumerate(names):
        if name == "network":
            continue
        err = handseg.gradcheck_case(i, 1)
        assert err < handseg.GRADCHECK_TOLERANCE, (name, err)
    print("gradcheck:", len(names) - 1, "layer cases pass")


def check_training():
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        n_train, n_test = handseg.make_dataset(data, 10, 1)
        assert (n_train, n_test) == (7, 3)
        spec = handseg.NetworkSpec(1, 16, 16, 2)
        net = handseg.Network(spec, seed=1)
        losses = handseg.train_network(net, data, steps=5, seed=2, batch_size=2)
        assert len(losses) == 5 and all(l > 0 for l in losses)
        path = os.path.join(tmp, "net.ckpt")
        net.save(path)
        back = handseg.Network.load(path)
        assert back.count_parameters() == net.count_parameters()
        comp, tip = back.predict([0.5] * 256, 1)
        assert (comp, tip) == net.predict([0.5] * 256, 1)
        assert all(c < 7 for c in comp)
        acc = back.accuracy(data)
        assert all(0.0 <= a <= 1.0 for a in acc)

        scene = handseg.synth_scene(seed=4, index=1)
        out = back.infer(scene["depth"], scene["width"], scene["height"], bbox=scene["bbox"])
        assert len(out["components"]) == scene["width"] * scene["height"]
        assert len(out["tips"]) == 5
        try:
            handseg.Network.load(os.path.join(tmp, "missing.ckpt"))
        except OSError:
            pass
        else:
            raise AssertionError("loading a missing checkpoint should fail")
        print("training: losses", [round(l, 3) for l in losses], "accuracy", acc)


if __name__ == "__main__":
    check_spec()
    check_preprocess()
    check_metrics()
    check_gradients()
    check_training()
    print("smoke test passed")
